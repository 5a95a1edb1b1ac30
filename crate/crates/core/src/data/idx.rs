//! IDX reader/writer (the MNIST distribution format): big-endian magic,
//! big-endian u32 dimensions, then raw unsigned bytes.

use std::fs;
use std::path::Path;

use super::{DatasetMeta, FeatureShape, LabeledDataset};
use crate::error::{DibsError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DibsError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())).ok_or_else(|| DibsError::IdxTruncated {
        path: path.to_path_buf(),
        expected: at + 4,
        found: bytes.len(),
    })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DibsError::IdxMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read(ip)?;
    let lab = read(lp)?;
    check_magic(&img, IMAGE_MAGIC, ip)?;
    check_magic(&lab, LABEL_MAGIC, lp)?;

    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    if n != n_labels {
        return Err(DibsError::IdxCount { images: n, labels: n_labels });
    }
    let pixels = &img[16..];
    if pixels.len() < n * rows * cols {
        return Err(DibsError::IdxTruncated {
            path: ip.to_path_buf(),
            expected: 16 + n * rows * cols,
            found: img.len(),
        });
    }
    let labels_raw = &lab[8..];
    if labels_raw.len() < n {
        return Err(DibsError::IdxTruncated { path: lp.to_path_buf(), expected: 8 + n, found: lab.len() });
    }

    let features = pixels[..n * rows * cols].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels_raw[..n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let meta = DatasetMeta {
        source: ip.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        transform: "none".into(),
        seed: None,
        labeled: true,
    };
    LabeledDataset::new(
        FeatureShape::Image { height: rows, width: cols, channels: 1 },
        features,
        labels,
        num_classes,
        meta,
    )
}

/// Writes a single-channel image dataset as an IDX pair. Pixels are
/// quantized to bytes by rounding `v * 255`.
pub fn write_idx(ds: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let FeatureShape::Image { height, width, channels: 1 } = ds.shape() else {
        return Err(DibsError::invalid("IDX export needs single-channel images"));
    };
    if ds.num_classes() > 256 {
        return Err(DibsError::invalid("IDX labels are single bytes"));
    }
    let mut img = Vec::with_capacity(16 + ds.features().len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [ds.len(), height, width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.features().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, img).map_err(|e| DibsError::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| DibsError::io(lp, e))?;
    Ok(())
}
