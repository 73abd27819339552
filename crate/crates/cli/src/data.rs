use std::path::Path;

use anyhow::{bail, Context, Result};
use image::ColorType;
use sigma_pca::datagen::Image;
use sigma_pca::{DataMatrix, Mat};

/// Numeric CSV, one sample per row. A first row that does not parse as
/// numbers is taken as a header.
pub fn load_csv(path: &Path) -> Result<DataMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut values = Vec::new();
    let mut cols = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => continue,
            Err(e) => bail!("{}: line {}: {e}", path.display(), i + 1),
        };
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => bail!("{}: line {} has {} fields, expected {c}", path.display(), i + 1, row.len()),
            _ => {}
        }
        values.extend(row);
    }
    let Some(p) = cols else {
        bail!("{} holds no numeric rows", path.display());
    };
    let n = values.len() / p;
    Ok(DataMatrix::new(Mat::from_row_slice(n, p, &values))?)
}

/// Every decodable image in `dir`, in sorted filename order, scaled to
/// [0, 1]. The first image decides between grayscale and RGB; the rest are
/// converted to match.
pub fn load_image_folder(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    let mut rgb = None;
    for path in paths {
        let Ok(reader) = image::ImageReader::open(&path).and_then(|r| r.with_guessed_format()) else {
            continue;
        };
        if reader.format().is_none() {
            continue;
        }
        let img = reader.decode().with_context(|| format!("decoding {}", path.display()))?;
        let want_rgb = *rgb.get_or_insert(!matches!(img.color(), ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16));
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (data, c): (Vec<f64>, usize) = if want_rgb {
            (img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(), 3)
        } else {
            (img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(), 1)
        };
        out.push(Image::new(h, w, c, data)?);
    }
    if out.is_empty() {
        bail!("no images found in {}", dir.display());
    }
    Ok(out)
}
