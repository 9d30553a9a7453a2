//! Job configuration files. Relative paths resolve against the directory of
//! the config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::admm::LayerConstraint;
use crate::error::{Error, Result};
use crate::io;
use crate::mapper::RemovalMode;
use crate::model::{LayerShape, QuantSpec};
use crate::nn::data::{load_idx, synthetic_digits};
use crate::nn::{ConvSpec, Dataset, NetworkDef};
use crate::sparsity::{GroupKind, SparsityConstraint};

/// Parses a config file and returns it with its base directory.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let cfg = io::read_json(path, "config file")?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated 16x16 digits; train and test come from disjoint draws.
    Synthetic {
        train: usize,
        test: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "ten")]
        num_classes: usize,
    },
}

fn ten() -> usize {
    10
}

impl DatasetConfig {
    /// `(train, test)`. A synthetic dataset without its own seed uses
    /// `job_seed`.
    pub fn load(&self, base: &Path, job_seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synthetic { train, test, seed } => {
                if *train == 0 || *test == 0 {
                    return Err(Error::Config("synthetic dataset needs train > 0 and test > 0".into()));
                }
                let all = synthetic_digits(train + test, seed.unwrap_or(job_seed));
                Ok(all.split(*train))
            }
            DatasetConfig::Idx { train_images, train_labels, test_images, test_labels, num_classes } => Ok((
                load_idx(&resolve(base, train_images), &resolve(base, train_labels), *num_classes)?,
                load_idx(&resolve(base, test_images), &resolve(base, test_labels), *num_classes)?,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    #[serde(default)]
    pub fc_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureConfig {
    pub fn build(&self) -> Result<(NetworkDef, Vec<LayerShape>)> {
        NetworkDef::build(self.input, &self.convs, &self.fc_hidden, self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
}

/// A budget given either directly or as a keep ratio (rounded up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub layer: usize,
    pub kind: GroupKind,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub keep_ratio: Option<f64>,
}

impl ConstraintConfig {
    pub fn resolve(&self, shapes: &[LayerShape]) -> Result<LayerConstraint> {
        let shape = shapes.get(self.layer).ok_or_else(|| {
            Error::Config(format!("constraint targets layer {} but the model has {} layers", self.layer, shapes.len()))
        })?;
        let constraint = match (self.budget, self.keep_ratio) {
            (Some(b), None) => SparsityConstraint::new(self.kind, b),
            (None, Some(r)) => SparsityConstraint::from_ratio(self.kind, r, shape),
            _ => Err(Error::Config(format!("constraint on layer {} needs exactly one of budget or keep_ratio", self.layer))),
        }
        .map_err(|e| Error::layer(self.layer, e.to_string()))?;
        constraint.check(shape).map_err(|e| Error::layer(self.layer, e.to_string()))?;
        Ok(LayerConstraint { layer: self.layer, constraint })
    }
}

/// Bit widths for every layer. Missing fractional widths are fitted: weights
/// from the largest dense weight magnitude, inputs from calibration
/// activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub input_bits: u32,
    #[serde(default = "yes")]
    pub signed: bool,
    #[serde(default)]
    pub frac_bits: Option<u32>,
    #[serde(default)]
    pub input_frac_bits: Option<u32>,
    /// Include the grid as an ADMM constraint instead of only rounding at
    /// the end.
    #[serde(default = "yes")]
    pub admm: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "rounds")]
    pub admm_rounds: usize,
    /// Defaults to one pass over the training set.
    #[serde(default)]
    pub sgd_steps_per_round: Option<usize>,
    #[serde(default = "rho0")]
    pub rho_initial: f64,
    #[serde(default = "growth")]
    pub rho_growth: f64,
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default = "five")]
    pub retrain_epochs: usize,
}

fn rounds() -> usize {
    10
}
fn rho0() -> f64 {
    1e-3
}
fn growth() -> f64 {
    1.5
}
fn one() -> f64 {
    1.0
}
fn five() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Start from this dense model; otherwise one is trained.
    #[serde(default)]
    pub model_in: Option<PathBuf>,
    pub model_out: PathBuf,
    /// Where to store the dense model trained here.
    #[serde(default)]
    pub dense_model_out: Option<PathBuf>,
    pub log_out: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: Option<ArchitectureConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    pub schedule: ScheduleConfig,
    /// Samples used to calibrate input fractional bits.
    #[serde(default = "calibration")]
    pub calibration_samples: usize,
}

fn calibration() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub model: PathBuf,
    pub layout_out: PathBuf,
    #[serde(default)]
    pub mode: RemovalMode,
    /// Overrides the model's per-layer quantization.
    #[serde(default)]
    pub quant: Option<QuantSpec>,
    /// Zero provably dead filters and channels before mapping.
    #[serde(default = "yes")]
    pub propagate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub layout: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub limit: Option<usize>,
    pub trace_out: PathBuf,
    #[serde(default)]
    pub outputs_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub layout: PathBuf,
    pub trace: PathBuf,
    /// Built-in defaults when absent.
    #[serde(default)]
    pub cost_params: Option<PathBuf>,
    /// A previously written report to compare against.
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    pub report_out: PathBuf,
    #[serde(default)]
    pub csv_out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "conv_cases")]
    pub conv_cases: usize,
    #[serde(default = "projection_cases")]
    pub projection_cases: usize,
    #[serde(default = "gradient_cases")]
    pub gradient_cases: usize,
    /// Optional layout checked against its reference path on a dataset.
    #[serde(default)]
    pub layout: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub report_out: Option<PathBuf>,
}

fn conv_cases() -> usize {
    1000
}
fn projection_cases() -> usize {
    200
}
fn gradient_cases() -> usize {
    5
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            conv_cases: conv_cases(),
            projection_cases: projection_cases(),
            gradient_cases: gradient_cases(),
            layout: None,
            dataset: None,
            limit: None,
            report_out: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_constraint_rounds_up() {
        let shapes = [LayerShape::conv(6, 3, 3, 3, 1)];
        let c = ConstraintConfig { layer: 0, kind: GroupKind::Filter, budget: None, keep_ratio: Some(0.4) };
        assert_eq!(c.resolve(&shapes).unwrap().constraint.budget(), 3);
    }

    #[test]
    fn bad_constraints_name_layer() {
        let shapes = [LayerShape::conv(4, 3, 3, 3, 1)];
        let c = ConstraintConfig { layer: 0, kind: GroupKind::Filter, budget: Some(5), keep_ratio: None };
        let e = c.resolve(&shapes).unwrap_err().to_string();
        assert!(e.contains("layer 0") && e.contains('5'), "{e}");
        let both = ConstraintConfig { layer: 0, kind: GroupKind::Filter, budget: Some(1), keep_ratio: Some(0.5) };
        assert!(both.resolve(&shapes).is_err());
        let far = ConstraintConfig { layer: 3, kind: GroupKind::Filter, budget: Some(1), keep_ratio: None };
        assert!(far.resolve(&shapes).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<MapConfig, _> =
            serde_json::from_str(r#"{"model": "m.json", "layout_out": "l.json", "colour": 1}"#);
        assert!(r.is_err());
        let m: MapConfig = serde_json::from_str(r#"{"model": "m.json", "layout_out": "l.json"}"#).unwrap();
        assert_eq!(m.mode, RemovalMode::Physical);
        assert!(m.propagate);
    }

    #[test]
    fn synthetic_split_is_disjoint_draw() {
        let cfg = DatasetConfig::Synthetic { train: 30, test: 10, seed: Some(1) };
        let (a, b) = cfg.load(Path::new("."), 0).unwrap();
        assert_eq!((a.len(), b.len()), (30, 10));
        let all = synthetic_digits(40, 1);
        assert_eq!(b.sample(0), all.sample(30));
    }
}
