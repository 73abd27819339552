//! Binary checkpoint files holding named float64 matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SPCACKPT"
//! version  u32      currently 1
//! count    u32      number of matrices
//! per matrix:
//!   name_len u32, name (UTF-8)
//!   rows u64, cols u64
//!   rows·cols f64 values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const MAGIC: &[u8; 8] = b"SPCACKPT";
pub const VERSION: u32 = 1;

/// Guards against allocating from a corrupt header.
const MAX_ENTRIES: u64 = 1 << 32;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Mat)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the matrix called `name`.
    pub fn insert(&mut self, name: impl Into<String>, m: Mat) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = m,
            None => self.entries.push((name, m)),
        }
    }

    pub fn with(mut self, name: impl Into<String>, m: Mat) -> Self {
        self.insert(name, m);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, m) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for row in m.row_iter() {
                for v in row.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_array::<8>(r)? != MAGIC {
            return format_err("bad magic");
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return format_err(format!("unsupported version {version}"));
        }
        let count = u32::from_le_bytes(read_array(r)?);
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
            let rows = u64::from_le_bytes(read_array(r)?);
            let cols = u64::from_le_bytes(read_array(r)?);
            if rows.checked_mul(cols).is_none_or(|n| n > MAX_ENTRIES) {
                return format_err(format!("implausible shape {rows}x{cols} for {name}"));
            }
            let (rows, cols) = (rows as usize, cols as usize);
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(f64::from_le_bytes(read_array(r)?));
            }
            entries.push((name, Mat::from_row_slice(rows, cols, &values)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return format_err("trailing bytes after the last matrix");
        }
        Ok(Self { entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
