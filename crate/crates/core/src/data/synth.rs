use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, FeatureShape, LabeledDataset};
use crate::error::{DibsError, Result};
use crate::rng::{stream, Stream};

/// Unit-variance Gaussian clusters whose centers sit on a regular polygon in
/// the first two coordinates, so every pair of centers is at least
/// `separation` apart. The polygon's orientation is drawn from `seed`.
pub fn make_gaussian_mixture(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || per_class < 1 || dim < 2 || !(separation > 0.0) {
        return Err(DibsError::invalid(format!(
            "gaussian mixture needs num_classes >= 2, per_class >= 1, dim >= 2, separation > 0 \
             (got {num_classes}, {per_class}, {dim}, {separation})"
        )));
    }
    let centers = mixture_centers(num_classes, dim, separation, seed);
    let mut rng = stream(seed, Stream::Data);

    let mut rows: Vec<(Vec<f32>, usize)> = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x = center
                .iter()
                .map(|&m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (m + e) as f32
                })
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let (features, labels): (Vec<Vec<f32>>, Vec<usize>) = rows.into_iter().unzip();
    LabeledDataset::new(
        FeatureShape::Vector { dim },
        features.concat(),
        labels,
        num_classes,
        DatasetMeta {
            source: format!("gaussian_mixture(c={num_classes},n={per_class},d={dim},sep={separation})"),
            transform: "none".into(),
            seed: Some(seed),
            labeled: true,
        },
    )
}

/// Cluster centers used by [`make_gaussian_mixture`] for the same arguments.
pub fn mixture_centers(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Init);
    let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
    // Nudge outward so rounding never pulls adjacent centers under the bound.
    let radius = radius * (1.0 + 1e-9);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    (0..num_classes)
        .map(|c| {
            let a = phase + std::f64::consts::TAU * c as f64 / num_classes as f64;
            let mut v = vec![0.0; dim];
            v[0] = radius * a.cos();
            v[1] = radius * a.sin();
            v
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// i.i.d. U[0, 1] per value.
    Uniform,
    /// i.i.d. N(0.5, 1) per value, clipped to [0, 1].
    Gaussian,
}

fn unlabeled(
    shape: FeatureShape,
    features: Vec<f32>,
    count: usize,
    source: String,
    seed: u64,
) -> Result<LabeledDataset> {
    LabeledDataset::new(
        shape,
        features,
        vec![0; count],
        1,
        DatasetMeta { source, transform: "none".into(), seed: Some(seed), labeled: false },
    )
}

pub fn make_noise_ood(kind: NoiseKind, count: usize, shape: FeatureShape, seed: u64) -> Result<LabeledDataset> {
    if count < 1 {
        return Err(DibsError::invalid("noise dataset needs count >= 1"));
    }
    let mut rng = stream(seed, Stream::Data);
    let n = count * shape.numel();
    let features: Vec<f32> = match kind {
        NoiseKind::Uniform => (0..n).map(|_| rng.random::<f32>()).collect(),
        NoiseKind::Gaussian => (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (0.5 + e).clamp(0.0, 1.0) as f32
            })
            .collect(),
    };
    unlabeled(shape, features, count, format!("{kind:?}_noise").to_lowercase(), seed)
}

/// Uniform samples over the axis-aligned box `[lo, hi]`.
pub fn uniform_in_box(count: usize, lo: &[f32], hi: &[f32], seed: u64) -> Result<LabeledDataset> {
    if count < 1 || lo.is_empty() || lo.len() != hi.len() {
        return Err(DibsError::invalid("box noise needs count >= 1 and matching bounds"));
    }
    let mut rng = stream(seed, Stream::Data);
    let mut features = Vec::with_capacity(count * lo.len());
    for _ in 0..count {
        for (&l, &h) in lo.iter().zip(hi) {
            features.push(l + (h - l) * rng.random::<f32>());
        }
    }
    unlabeled(FeatureShape::Vector { dim: lo.len() }, features, count, "box_uniform_noise".into(), seed)
}

/// Rotates the first two coordinates of every vector example by `degrees`
/// about the origin.
pub fn rotate_points(ds: &LabeledDataset, degrees: f64) -> Result<LabeledDataset> {
    let FeatureShape::Vector { dim } = ds.shape() else {
        return Err(DibsError::invalid("point rotation needs vector data"));
    };
    if !degrees.is_finite() {
        return Err(DibsError::invalid("rotation angle must be finite"));
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let mut features = ds.features().to_vec();
    for p in features.chunks_mut(dim) {
        let (x, y) = (p[0] as f64, p[1] as f64);
        p[0] = (c * x - s * y) as f32;
        p[1] = (s * x + c * y) as f32;
    }
    let mut meta = ds.meta.clone();
    meta.transform = format!("{}|rotate_points[{degrees}]", meta.transform);
    LabeledDataset::new(ds.shape(), features, ds.labels().to_vec(), ds.num_classes(), meta)
}
