use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sigma_pca::train::EpochRecord;
use sigma_pca::Mat;

use crate::config::Config;

/// Environment variable naming the default root for run directories.
pub const RUNS_ENV: &str = "SIGMA_PCA_RUNS";
pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Effective configuration; replaying it reproduces the outputs.
    pub config: Config,
    /// "ok", "failed" (run finished, check not met) or "non_finite".
    pub status: String,
    pub created: String,
    pub metrics: serde_json::Value,
    pub outputs: Vec<OutputFile>,
}

/// `<root>/<UTC timestamp>-<seed>`, root from [`RUNS_ENV`] or `./runs`; a
/// numeric suffix keeps concurrent runs apart.
pub fn default_run_dir(seed: u64) -> PathBuf {
    let root = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = root.join(format!("{stamp}-{seed}"));
    let mut dir = base.clone();
    let mut i = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    dir
}

/// A run directory that remembers every file written into it.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    prefix: String,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), prefix: String::new(), written: Vec::new() })
    }

    /// A subdirectory whose files are reported relative to the parent.
    pub fn shard(&self, name: &str) -> Result<Self> {
        let root = self.root.join(name);
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root, prefix: format!("{}{name}/", self.prefix), written: Vec::new() })
    }

    pub fn absorb(&mut self, shard: RunDir) {
        self.written.extend(shard.written);
    }

    pub fn files(&self) -> &[String] {
        &self.written
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(format!("{}{name}", self.prefix));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write_bytes(name, &bytes)
    }

    /// Matrix with header `prefix1..prefixN`.
    pub fn write_matrix(&mut self, name: &str, prefix: &str, m: &Mat) -> Result<()> {
        let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{prefix}{j}")).collect();
        self.write_csv(name, &header, m.row_iter().map(|r| r.iter().copied().collect()))
    }

    pub fn write_history(&mut self, name: &str, history: &[EpochRecord]) -> Result<()> {
        let header = ["epoch", "loss", "recon", "orth_residual", "floored_steps"].map(String::from);
        self.write_csv(
            name,
            &header,
            history.iter().map(|e| vec![e.epoch as f64, e.loss, e.recon, e.orth_residual, e.floored_steps as f64]),
        )
    }

    pub fn write_png(&mut self, name: &str, img: &GridImage) -> Result<()> {
        let mut buf = std::io::Cursor::new(Vec::new());
        match img {
            GridImage::Gray(g) => g.write_to(&mut buf, image::ImageFormat::Png)?,
            GridImage::Rgb(g) => g.write_to(&mut buf, image::ImageFormat::Png)?,
        }
        self.write_bytes(name, &buf.into_inner())
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok((digest.iter().map(|b| format!("{b:02x}")).collect(), bytes.len() as u64))
}

pub fn describe_outputs(dir: &RunDir) -> Result<Vec<OutputFile>> {
    dir.files()
        .iter()
        .map(|rel| {
            let (sha256, bytes) = sha256_file(&dir.root.join(rel))?;
            Ok(OutputFile { path: rel.clone(), sha256, bytes })
        })
        .collect()
}

pub enum GridImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl GridImage {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            GridImage::Gray(g) => g.dimensions(),
            GridImage::Rgb(g) => g.dimensions(),
        }
    }
}

/// Filters (columns of `w`, each a size×size×channels patch in row-major,
/// channel-last order) tiled into a near-square grid. Each tile is min-max
/// normalised on its own, for display only; gaps are white.
pub fn filter_grid(w: &Mat, size: usize, channels: usize, gap: usize) -> GridImage {
    let k = w.ncols();
    let cols = (k as f64).sqrt().ceil().max(1.0) as usize;
    let rows = k.div_ceil(cols).max(1);
    let width = (cols * size + (cols - 1) * gap) as u32;
    let height = (rows * size + (rows - 1) * gap) as u32;
    let mut pixels = vec![255u8; (width * height) as usize * channels];
    for f in 0..k {
        let col = w.column(f);
        let (lo, hi) = (col.min(), col.max());
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (r0, c0) = ((f / cols) * (size + gap), (f % cols) * (size + gap));
        for r in 0..size {
            for c in 0..size {
                for ch in 0..channels {
                    let v = (col[(r * size + c) * channels + ch] - lo) / span;
                    let at = ((r0 + r) * width as usize + c0 + c) * channels + ch;
                    pixels[at] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    if channels == 3 {
        GridImage::Rgb(ImageBuffer::<Rgb<u8>, _>::from_raw(width, height, pixels).expect("buffer matches dimensions"))
    } else {
        GridImage::Gray(ImageBuffer::<Luma<u8>, _>::from_raw(width, height, pixels).expect("buffer matches dimensions"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry() {
        let w = Mat::from_fn(64, 5, |i, j| (i * (j + 1)) as f64);
        let img = filter_grid(&w, 8, 1, 2);
        assert_eq!(img.dimensions(), (3 * 8 + 2 * 2, 2 * 8 + 2));
        let GridImage::Gray(g) = img else { panic!("expected grayscale") };
        assert_eq!(g.get_pixel(0, 0).0[0], 0);
        assert_eq!(g.get_pixel(7, 7).0[0], 255);
        assert_eq!(g.get_pixel(8, 0).0[0], 255);
    }

    #[test]
    fn constant_filter_does_not_divide_by_zero() {
        let img = filter_grid(&Mat::from_element(12, 1, 0.3), 2, 3, 1);
        assert_eq!(img.dimensions(), (2, 2));
    }
}
