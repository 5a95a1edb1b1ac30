use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureShape, LabeledDataset};
use crate::error::{DibsError, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorChannel {
    R,
    G,
    B,
}

/// A distribution-shift transform. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSpec {
    None,
    /// Integer pixel offsets, drawn independently for x and y.
    Translate {
        range: (i32, i32),
    },
    /// Angles in degrees.
    Rotate {
        range: (f64, f64),
    },
    /// Foreground (pixel > 0.5) moved into one channel drawn from `channels`.
    Color {
        channels: Vec<ColorChannel>,
    },
}

impl ShiftSpec {
    pub fn describe(&self) -> String {
        match self {
            ShiftSpec::None => "none".into(),
            ShiftSpec::Translate { range: (a, b) } => format!("translate[{a},{b}]px"),
            ShiftSpec::Rotate { range: (a, b) } => format!("rotate[{a},{b}]deg"),
            ShiftSpec::Color { channels } => format!("color{channels:?}"),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ShiftSpec::Translate { range: (a, b) } if a > b => Err(DibsError::invalid("translate range is reversed")),
            ShiftSpec::Rotate { range: (a, b) } if !(a.is_finite() && b.is_finite() && a <= b) => {
                Err(DibsError::invalid("rotate range must be finite and ordered"))
            }
            ShiftSpec::Color { channels } if channels.is_empty() => {
                Err(DibsError::invalid("color shift needs a channel"))
            }
            _ => Ok(()),
        }
    }
}

const FOREGROUND: f32 = 0.5;

pub fn apply_shift(ds: &LabeledDataset, spec: &ShiftSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let shape = ds.shape();
    let (h, w, c) = match (shape, spec) {
        (_, ShiftSpec::None) => return Ok(ds.clone()),
        (FeatureShape::Image { height, width, channels }, _) => (height, width, channels),
        (FeatureShape::Vector { dim }, _) => {
            return Err(DibsError::invalid(format!("{} needs image data, got {dim}-dim vectors", spec.describe())))
        }
    };
    let mut rng = stream(seed, Stream::Data);
    let mut out_shape = shape;
    let mut features = Vec::with_capacity(ds.features().len());
    for i in 0..ds.len() {
        let img = ds.example(i);
        match spec {
            ShiftSpec::Translate { range: (lo, hi) } => {
                let dx = rng.random_range(*lo..=*hi);
                let dy = rng.random_range(*lo..=*hi);
                features.extend(translate(img, h, w, c, dx, dy));
            }
            ShiftSpec::Rotate { range: (lo, hi) } => {
                let deg = if lo == hi { *lo } else { rng.random_range(*lo..=*hi) };
                features.extend(rotate(img, h, w, c, deg.to_radians()));
            }
            ShiftSpec::Color { channels } => {
                if c != 1 {
                    return Err(DibsError::invalid("color shift needs single-channel images"));
                }
                let pick = channels[rng.random_range(0..channels.len())];
                features.extend(colorize(img, pick));
                out_shape = FeatureShape::Image { height: h, width: w, channels: 3 };
            }
            ShiftSpec::None => unreachable!(),
        }
    }
    let mut meta = ds.meta.clone();
    meta.transform =
        if meta.transform == "none" { spec.describe() } else { format!("{}|{}", meta.transform, spec.describe()) };
    meta.seed = Some(seed);
    LabeledDataset::new(out_shape, features, ds.labels().to_vec(), ds.num_classes(), meta)
}

fn translate(img: &[f32], h: usize, w: usize, c: usize, dx: i32, dy: i32) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h as i64 {
        let sy = y - dy as i64;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx as i64;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let (dst, src) = (((y * w as i64 + x) as usize) * c, ((sy * w as i64 + sx) as usize) * c);
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Rotation about the image center by inverse mapping with bilinear
/// interpolation; samples outside the source read as zero.
fn rotate(img: &[f32], h: usize, w: usize, c: usize, theta: f64) -> Vec<f32> {
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let at = |x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            img[((y as usize) * w + x as usize) * c + ch] as f64
        }
    };
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let mut v = at(x0, y0, ch) * (1.0 - fx) * (1.0 - fy);
                if fx != 0.0 {
                    v += at(x0 + 1, y0, ch) * fx * (1.0 - fy);
                }
                if fy != 0.0 {
                    v += at(x0, y0 + 1, ch) * (1.0 - fx) * fy;
                }
                if fx != 0.0 && fy != 0.0 {
                    v += at(x0 + 1, y0 + 1, ch) * fx * fy;
                }
                out[(y * w + x) * c + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn colorize(img: &[f32], channel: ColorChannel) -> Vec<f32> {
    let keep = channel as usize;
    let mut out = Vec::with_capacity(img.len() * 3);
    for &v in img {
        if v > FOREGROUND {
            for ch in 0..3 {
                out.push(if ch == keep { v } else { 0.0 });
            }
        } else {
            out.extend([v, v, v]);
        }
    }
    out
}
