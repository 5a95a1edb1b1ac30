use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dibs::data::{load_idx, make_gaussian_mixture, split, LabeledDataset, ShiftSpec};
use dibs::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// An error in the command line or configuration, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    GaussianMixture {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// IDX image/label pair; relative paths resolve against the config file.
    Mnist { images: PathBuf, labels: PathBuf },
}

fn default_classes() -> usize {
    4
}

fn default_per_class() -> usize {
    200
}

fn default_dim() -> usize {
    2
}

fn default_separation() -> f64 {
    6.0
}

/// Fractions of the shuffled dataset used for training and validation;
/// the remainder is the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.5, val: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// i.i.d. U[0, 1] per input value.
    Uniform,
    /// i.i.d. N(0.5, 1) per input value, clipped to [0, 1].
    Gaussian,
    /// Uniform over the bounding box of the training inputs.
    BoxUniform,
    /// The validation split, an in-distribution control.
    InDistribution,
}

impl OodKind {
    pub fn name(self) -> &'static str {
        match self {
            OodKind::Uniform => "uniform",
            OodKind::Gaussian => "gaussian",
            OodKind::BoxUniform => "box_uniform",
            OodKind::InDistribution => "in_distribution",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSpec {
    pub kinds: Vec<OodKind>,
    /// Inputs per OOD set; zero means the size of the test split.
    pub count: usize,
    /// Fraction of validation member scores kept above the threshold.
    pub tpr: f64,
}

impl Default for OodSpec {
    fn default() -> Self {
        Self { kinds: vec![OodKind::Uniform], count: 0, tpr: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, rename = "K", alias = "k", skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Heads(usize),
    Beta(f64),
}

impl SweepValue {
    pub fn parameter(&self) -> &'static str {
        match self {
            SweepValue::Heads(_) => "K",
            SweepValue::Beta(_) => "beta",
        }
    }

    pub fn value(&self) -> String {
        match self {
            SweepValue::Heads(k) => k.to_string(),
            SweepValue::Beta(b) => b.to_string(),
        }
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        match *self {
            SweepValue::Heads(k) => cfg.heads = k,
            SweepValue::Beta(b) => cfg.beta = b,
        }
    }
}

impl SweepSpec {
    pub fn values(&self) -> Result<Vec<SweepValue>> {
        let values: Vec<SweepValue> = match (&self.heads, &self.beta) {
            (Some(k), None) => k.iter().map(|&k| SweepValue::Heads(k)).collect(),
            (None, Some(b)) => b.iter().map(|&b| SweepValue::Beta(b)).collect(),
            _ => return Err(config_error("sweep needs exactly one of K or beta")),
        };
        if values.is_empty() {
            return Err(config_error("sweep list is empty"));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Image shift applied to every split.
    Shift { shift: ShiftSpec },
    /// Rotation of 2-D vector inputs about the origin.
    RotatePoints { degrees: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub epochs: usize,
    pub target: TargetSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitSpec,
    /// Shifts evaluated by `generalize`; the unshifted case always runs.
    #[serde(default)]
    pub shifts: Vec<ShiftSpec>,
    #[serde(default)]
    pub ood: OodSpec,
    /// Latent draws per head for sampled predictive scores.
    #[serde(default = "default_draws", rename = "M", alias = "m")]
    pub draws: usize,
    /// Runs per multi-seed protocol; run `i` uses seed `base + i`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSpec>,
    /// Parent of generated run directories when `--out` is not given.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report_format: ReportFormat,
}

fn default_draws() -> usize {
    8
}

fn default_seeds() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Reads, parses and validates a configuration file. Relative dataset
    /// paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSpec::Mnist { images, labels } = &mut cfg.dataset {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| config_error(format!("train: {e}")))?;
        let SplitSpec { train, val } = self.split;
        if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
            return Err(config_error(format!(
                "split fractions must be positive with train + val < 1, got {train} and {val}"
            )));
        }
        if let DatasetSpec::GaussianMixture { classes, per_class, dim, separation } = self.dataset {
            if classes < 2 || per_class < 1 || dim < 2 || !(separation > 0.0) {
                return Err(config_error(
                    "gaussian mixture needs classes >= 2, per_class >= 1, dim >= 2, separation > 0",
                ));
            }
        }
        if self.draws < 1 {
            return Err(config_error("M must be at least 1"));
        }
        if self.seeds < 1 {
            return Err(config_error("seeds must be at least 1"));
        }
        if !(self.ood.tpr > 0.0 && self.ood.tpr < 1.0) {
            return Err(config_error(format!("ood.tpr must lie in (0, 1), got {}", self.ood.tpr)));
        }
        if let Some(s) = &self.sweep {
            for v in s.values()? {
                let mut c = self.train.clone();
                v.apply(&mut c);
                c.validate().map_err(|e| config_error(format!("sweep {}={}: {e}", v.parameter(), v.value())))?;
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Train, validation and test splits for a run seeded with `seed`.
    pub fn splits(&self, seed: u64) -> Result<Splits> {
        let all = match &self.dataset {
            DatasetSpec::GaussianMixture { classes, per_class, dim, separation } => {
                make_gaussian_mixture(*classes, *per_class, *dim, *separation, seed)?
            }
            DatasetSpec::Mnist { images, labels } => load_idx(images, labels)?,
        };
        let (train, rest) = split(&all, self.split.train, seed)?;
        let val_share = self.split.val / (1.0 - self.split.train);
        let (val, test) = split(&rest, val_share, seed + 1)?;
        if train.is_empty() || val.is_empty() || test.is_empty() {
            bail!("dataset of {} examples leaves an empty split", all.len());
        }
        Ok(Splits { train, val, test })
    }
}

pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    const MIN: &str = "[dataset]\nkind = \"gaussian_mixture\"\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse(MIN).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.draws, 8);
        assert_eq!(cfg.ood.kinds, vec![OodKind::Uniform]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse(&format!("{MIN}bogus = 1\n")).is_err());
        assert!(parse(&format!("{MIN}[train]\nlearning_rate = 0.1\n")).is_err());
        assert!(parse("[dataset]\nkind = \"gaussian_mixture\"\ncolour = 3\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse(&format!("{MIN}[split]\ntrain = 0.9\nval = 0.2\n")).is_err());
        assert!(parse(&format!("{MIN}[train]\nepochs = 0\n")).is_err());
        assert!(parse(&format!("{MIN}[sweep]\nK = [2, 4]\nbeta = [0.1]\n")).is_err());
        assert!(parse(&format!("{MIN}[sweep]\nK = []\n")).is_err());
        assert!(parse(&format!("{MIN}[sweep]\nK = [0]\n")).is_err());
    }

    #[test]
    fn toml_echo_round_trips() {
        let text = format!(
            "shifts = [{{ kind = \"rotate\", range = [-45.0, 45.0] }}]\n{MIN}[sweep]\nbeta = [0.0001, 0.01]\n\
             [transfer]\nepochs = 3\ntarget = {{ kind = \"rotate_points\", degrees = 45.0 }}\n"
        );
        let cfg = parse(&text).unwrap();
        let back = parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn splits_partition_the_dataset() {
        let cfg = parse(MIN).unwrap();
        let s = cfg.splits(3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (400, 200, 200));
        let again = cfg.splits(3).unwrap();
        assert_eq!(s.test.features(), again.test.features());
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["gmm.toml", "mnist.toml"] {
            let cfg = ExperimentConfig::load(&dir.join(name)).unwrap();
            assert_eq!(cfg.draws, 8, "{name}");
        }
        let mnist = ExperimentConfig::load(&dir.join("mnist.toml")).unwrap();
        let DatasetSpec::Mnist { images, .. } = mnist.dataset else { panic!("mnist config") };
        assert!(images.exists(), "{}", images.display());
    }
}
