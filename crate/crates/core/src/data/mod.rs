//! Datasets: IDX ingestion, synthetic generators, distribution-shift
//! transforms and train/validation splitting.

mod idx;
mod shift;
mod synth;

pub use idx::{load_idx, write_idx};
pub use shift::{apply_shift, ColorChannel, ShiftSpec};
pub use synth::{make_gaussian_mixture, make_noise_ood, mixture_centers, rotate_points, uniform_in_box, NoiseKind};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DibsError, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureShape {
    /// Stored height-major, channels last.
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Vector {
        dim: usize,
    },
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Image { height, width, channels } => height * width * channels,
            FeatureShape::Vector { dim } => dim,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, FeatureShape::Image { .. })
    }

    /// Per-example shape of the batched network input (channels first).
    pub fn input_dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Image { height, width, channels } => vec![channels, height, width],
            FeatureShape::Vector { dim } => vec![dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub transform: String,
    pub seed: Option<u64>,
    /// False for OOD sets whose label array carries no class information.
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    shape: FeatureShape,
    features: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(
        shape: FeatureShape,
        features: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let per = shape.numel();
        if per == 0 {
            return Err(DibsError::invalid("examples must have at least one feature"));
        }
        if features.len() != labels.len() * per {
            return Err(DibsError::shape(format!(
                "{} labels need {} feature values, got {}",
                labels.len(),
                labels.len() * per,
                features.len()
            )));
        }
        if num_classes == 0 {
            return Err(DibsError::invalid("num_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DibsError::invalid(format!("label {bad} not below num_classes {num_classes}")));
        }
        if shape.is_image() && features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DibsError::invalid("image pixels must lie in [0, 1]"));
        }
        Ok(Self { shape, features, labels, num_classes, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let w = self.shape.numel();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.shape.numel());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        Self { features, labels, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Self {
        Self {
            shape: self.shape,
            features: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    /// Network input batch for the given examples: `[b, c, h, w]` for
    /// images, `[b, d]` for vectors.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let per = self.shape.numel();
        let mut data = Vec::with_capacity(idx.len() * per);
        match self.shape {
            FeatureShape::Vector { .. } => {
                for &i in idx {
                    data.extend(self.example(i).iter().map(|&v| T::lit(v as f64)));
                }
            }
            FeatureShape::Image { height, width, channels } => {
                for &i in idx {
                    let ex = self.example(i);
                    for c in 0..channels {
                        for p in 0..height * width {
                            data.push(T::lit(ex[p * channels + c] as f64));
                        }
                    }
                }
            }
        }
        let mut shape = vec![idx.len()];
        shape.extend(self.shape.input_dims());
        Tensor::from_vec(&shape, data).expect("sized")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Per-dimension (min, max) over all examples.
    pub fn bounding_box(&self) -> (Vec<f32>, Vec<f32>) {
        let per = self.shape.numel();
        let mut lo = vec![f32::INFINITY; per];
        let mut hi = vec![f32::NEG_INFINITY; per];
        for i in 0..self.len() {
            for (d, &v) in self.example(i).iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        (lo, hi)
    }

    /// Overrides the class count, e.g. for a subset that happens to miss the
    /// highest class.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= num_classes) {
            return Err(DibsError::invalid("labels exceed requested class count"));
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

/// Shuffles with `seed` and cuts into `floor(fraction * n)` and the rest.
pub fn split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DibsError::invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(seed, Stream::Data));
    let cut = (fraction * ds.len() as f64).floor() as usize;
    let mut a = ds.subset(&idx[..cut]);
    let mut b = ds.subset(&idx[cut..]);
    a.meta.transform = format!("{}|split[{fraction}]a", ds.meta.transform);
    b.meta.transform = format!("{}|split[{fraction}]b", ds.meta.transform);
    Ok((a, b))
}
