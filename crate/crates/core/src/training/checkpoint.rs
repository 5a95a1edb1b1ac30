//! Checkpoint archives: a tar holding a JSON manifest and the raw
//! little-endian f32 arrays it lists, in manifest order.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer, F};
use crate::data::FeatureShape;
use crate::error::{DibsError, Result};
use crate::nets::{ModelConfig, ParamSet};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const PARAMS_NAME: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngStates {
    data: RngState,
    eps: RngState,
    dropout: RngState,
    pairs: Option<RngState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    config_digest: String,
    input: FeatureShape,
    num_classes: usize,
    model_config: ModelConfig,
    epoch: usize,
    step: usize,
    adam_t_generator: Option<u64>,
    adam_t_discriminator: Option<u64>,
    rng: RngStates,
    arrays: Vec<ArrayEntry>,
}

fn visit(tr: &Trainer, f: &mut dyn FnMut(String, &Tensor<F>)) {
    tr.model.visit_params("model", f);
    tr.velocity.visit_params("sgd", f);
    if let Some(a) = &tr.adversary {
        a.disc.visit_params("adv", f);
        a.adam_g.m.visit_params("adv.adam_g.m", f);
        a.adam_g.v.visit_params("adv.adam_g.v", f);
        a.adam_d.m.visit_params("adv.adam_d.m", f);
        a.adam_d.v.visit_params("adv.adam_d.v", f);
    }
}

fn visit_mut(tr: &mut Trainer, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
    tr.model.visit_params_mut("model", f);
    tr.velocity.visit_params_mut("sgd", f);
    if let Some(a) = &mut tr.adversary {
        a.disc.visit_params_mut("adv", f);
        a.adam_g.m.visit_params_mut("adv.adam_g.m", f);
        a.adam_g.v.visit_params_mut("adv.adam_g.v", f);
        a.adam_d.m.visit_params_mut("adv.adam_d.m", f);
        a.adam_d.v.visit_params_mut("adv.adam_d.v", f);
    }
}

fn layout(tr: &Trainer) -> Vec<ArrayEntry> {
    let mut out = Vec::new();
    visit(tr, &mut |name, t| out.push(ArrayEntry { name, shape: t.shape().to_vec(), dtype: "f32".into() }));
    out
}

fn bad(msg: impl Into<String>) -> DibsError {
    DibsError::Checkpoint(msg.into())
}

fn append(builder: &mut tar::Builder<File>, name: &str, bytes: &[u8], path: &Path) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes).map_err(|e| DibsError::io(path, e))
}

/// Writes the full training state of `tr` to `path`.
pub fn save_checkpoint(tr: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: tr.config.clone(),
        config_digest: tr.config.digest(),
        input: tr.member_config.input,
        num_classes: tr.member_config.num_classes,
        model_config: tr.model.config.clone(),
        epoch: tr.epoch,
        step: tr.step,
        adam_t_generator: tr.adversary.as_ref().map(|a| a.adam_g.t),
        adam_t_discriminator: tr.adversary.as_ref().map(|a| a.adam_d.t),
        rng: RngStates {
            data: RngState::capture(&tr.data_rng),
            eps: RngState::capture(&tr.eps_rng),
            dropout: RngState::capture(&tr.dropout_rng),
            pairs: tr.adversary.as_ref().map(|a| RngState::capture(&a.pairs_rng)),
        },
        arrays: layout(tr),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| bad(format!("manifest encoding: {e}")))?;
    let mut params = Vec::new();
    visit(tr, &mut |_, t| {
        for v in t.data() {
            params.extend_from_slice(&v.to_le_bytes());
        }
    });
    let file = File::create(path).map_err(|e| DibsError::io(path, e))?;
    let mut builder = tar::Builder::new(file);
    append(&mut builder, MANIFEST_NAME, &json, path)?;
    append(&mut builder, PARAMS_NAME, &params, path)?;
    builder.into_inner().map_err(|e| DibsError::io(path, e))?;
    Ok(())
}

fn read_entries(path: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let file = File::open(path).map_err(|e| DibsError::io(path, e))?;
    let mut archive = tar::Archive::new(file);
    let mut out = HashMap::new();
    let entries = archive.entries().map_err(|e| bad(format!("{}: corrupt archive: {e}", path.display())))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| bad(format!("{}: corrupt archive: {e}", path.display())))?;
        let name = entry.path().map_err(|e| bad(format!("corrupt entry name: {e}")))?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| bad(format!("{name}: truncated entry: {e}")))?;
        out.insert(name, bytes);
    }
    Ok(out)
}

fn restore_rng(s: &RngState, what: &str) -> Result<rand_chacha::ChaCha8Rng> {
    s.restore().ok_or_else(|| bad(format!("invalid {what} rng state")))
}

/// Rebuilds a [`Trainer`] from an archive written by [`save_checkpoint`],
/// validating every array name and shape against the configuration.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let mut entries = read_entries(path)?;
    let manifest_bytes = entries.remove(MANIFEST_NAME).ok_or_else(|| bad(format!("missing {MANIFEST_NAME}")))?;
    let params = entries.remove(PARAMS_NAME).ok_or_else(|| bad(format!("missing {PARAMS_NAME}")))?;
    let m: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| bad(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", m.format_version)));
    }
    if m.config.digest() != m.config_digest {
        return Err(bad("config digest does not match the stored config"));
    }
    let mut tr = Trainer::new(m.config.clone(), m.input, m.num_classes).map_err(|e| bad(format!("config: {e}")))?;
    if tr.model.config != m.model_config {
        return Err(bad("model configuration does not match the training config"));
    }
    let expected = layout(&tr);
    if expected.len() != m.arrays.len() {
        return Err(bad(format!("manifest lists {} arrays, config implies {}", m.arrays.len(), expected.len())));
    }
    for (e, a) in expected.iter().zip(&m.arrays) {
        if e != a {
            return Err(bad(format!(
                "array {} {:?} ({}) where {} {:?} (f32) was expected",
                a.name, a.shape, a.dtype, e.name, e.shape
            )));
        }
    }
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if params.len() != total * 4 {
        return Err(bad(format!("{PARAMS_NAME} holds {} bytes, manifest needs {}", params.len(), total * 4)));
    }
    let mut at = 0;
    visit_mut(&mut tr, &mut |_, t| {
        for v in t.data_mut() {
            *v = F::from_le_bytes(params[at..at + 4].try_into().expect("4 bytes"));
            at += 4;
        }
    });
    tr.epoch = m.epoch;
    tr.step = m.step;
    tr.data_rng = restore_rng(&m.rng.data, "data")?;
    tr.eps_rng = restore_rng(&m.rng.eps, "eps")?;
    tr.dropout_rng = restore_rng(&m.rng.dropout, "dropout")?;
    match (&mut tr.adversary, &m.rng.pairs, m.adam_t_generator, m.adam_t_discriminator) {
        (Some(a), Some(p), Some(tg), Some(td)) => {
            a.pairs_rng = restore_rng(p, "pairs")?;
            a.adam_g.t = tg;
            a.adam_d.t = td;
        }
        (None, None, None, None) => {}
        _ => return Err(bad("adversary state does not match the training mode")),
    }
    Ok(tr)
}
