//! Dataset ingestion: a directory of 8-bit images becomes an ordered list of
//! `[3, H, W]` float tensors in [0, 1]. Ordering is lexicographic by file
//! name, unreadable files are skipped with a recorded warning, and re-reading
//! the same directory yields identical tensors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rdc_core::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DatasetImage {
    /// File stem, used as the image id in reports.
    pub id: String,
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    /// One entry per skipped file.
    pub warnings: Vec<String>,
}

/// Loads one image file as a `[3, H, W]` tensor in [0, 1].
pub fn load_image(path: &Path, center_crop: Option<u32>) -> Result<Tensor> {
    decode_file(path, center_crop).with_context(|| format!("loading {}", path.display()))
}

/// Writes a `[3, H, W]` tensor in [0, 1] as an 8-bit RGB image; values are
/// clamped and rounded to the nearest level.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    anyhow::ensure!(
        t.shape().len() == 3 && t.shape()[0] == 3,
        "expected a [3, H, W] tensor, got {:?}",
        t.shape()
    );
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let data = t.data();
    let plane = h * w;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let at = |c: usize| {
                let v = data[c * plane + y * w + x].clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([at(0), at(1), at(2)]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn decode_file(path: &Path, center_crop: Option<u32>) -> Result<Tensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (cx, cy, cw, ch) = match center_crop {
        Some(s) => {
            if w < s || h < s {
                bail!("{}x{} too small for a {s}-pixel center crop", h, w);
            }
            ((w - s) / 2, (h - s) / 2, s, s)
        }
        None => (0, 0, w, h),
    };
    let mut data = Vec::with_capacity(3 * (cw * ch) as usize);
    for c in 0..3usize {
        for y in 0..ch {
            for x in 0..cw {
                let px = rgb.get_pixel(cx + x, cy + y).0[c];
                data.push(px as f32 / 255.0);
            }
        }
    }
    Ok(Tensor::new(vec![3, ch as usize, cw as usize], data)?)
}

/// Loads every readable image under `path` (non-recursive).
pub fn ingest_dataset(path: &Path, center_crop: Option<u32>) -> Result<Dataset> {
    let entries = std::fs::read_dir(path)
        .with_context(|| format!("reading dataset dir {}", path.display()))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));

    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for file in files {
        match decode_file(&file, center_crop) {
            Ok(image) => {
                let id = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| file.display().to_string());
                images.push(DatasetImage { id, image });
            }
            Err(e) => warnings.push(format!("skipped {}: {e}", file.display())),
        }
    }
    if images.is_empty() {
        bail!(
            "no readable images in {} ({} files skipped)",
            path.display(),
            warnings.len()
        );
    }
    Ok(Dataset { images, warnings })
}
