//! Experiment configuration, stored as TOML.
//!
//! ```toml
//! output = "runs"
//!
//! [data]
//! seed = 0
//! [data.synthetic]        # or: x = "x.csv", y = "y.csv"
//! users = 500
//!
//! [encoder]
//! layers = 3
//! shallow = 2
//! dim = 64
//!
//! [train]
//! epochs = 100
//! lr = 0.001
//! group_size = 16
//! variant = "full"
//!
//! [cpa]
//! centroids = 10
//! alpha = 3.0
//!
//! [flow]
//! kind = "ncsf"
//! layers = 3
//! bandwidth = 0.1
//!
//! [eval]
//! pool_size = 999
//! cutoffs = [10, 20, 30]
//! ```
//!
//! Every field is optional; missing ones take the defaults above.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{CiderError, Result};
use crate::flow::FlowConfig;
use crate::synthetic::SyntheticSpec;

/// Model variant: the full model or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::Full];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = CiderError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "Full" | "FULL" => Ok(Variant::Full),
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            "E" | "e" => Ok(Variant::E),
            other => Err(CiderError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub group_size: usize,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub variant: Variant,
    pub seed: u64,
    /// Sampled negatives per positive in the training bound.
    pub negatives: usize,
    /// Share of batch positions given to paired users; unset means the
    /// paired users' share of the training population.
    pub paired_fraction: Option<f64>,
    /// Fraction of train-split shared users kept paired.
    pub overlap_ratio: f64,
    /// Abort when `|total|` exceeds this multiple of the first step's.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            group_size: 16,
            lambda_s: 1.0,
            lambda_d: 1.0,
            variant: Variant::Full,
            seed: 0,
            negatives: 1,
            paired_fraction: None,
            overlap_ratio: 1.0,
            divergence_factor: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CiderError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.group_size == 0 {
            return Err(CiderError::Config("group size must be at least 1".into()));
        }
        if self.lambda_s < 0.0 || self.lambda_d < 0.0 {
            return Err(CiderError::Config("loss weights must be non-negative".into()));
        }
        if self.negatives == 0 {
            return Err(CiderError::Config("need at least one negative per positive".into()));
        }
        if let Some(f) = self.paired_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(CiderError::Config(format!("paired fraction must lie in [0, 1], got {f}")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(CiderError::Config(format!(
                "overlap ratio must lie in [0, 1], got {}",
                self.overlap_ratio
            )));
        }
        if self.divergence_factor <= 1.0 {
            return Err(CiderError::Config("divergence factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpaConfig {
    /// Centroids per domain `T`.
    pub centroids: usize,
    /// Assignment temperature `α`.
    pub alpha: f64,
    /// Step size of the centroid gradient update.
    pub lr: f64,
    /// Optimizer steps between centroid updates.
    pub period: usize,
    pub kmeans_iterations: usize,
    /// Write centroid records after every epoch.
    pub dump: bool,
}

impl Default for CpaConfig {
    fn default() -> Self {
        Self {
            centroids: 10,
            alpha: 3.0,
            lr: 1e-3,
            period: 1,
            kmeans_iterations: 10,
            dump: false,
        }
    }
}

impl CpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.centroids == 0 {
            return Err(CiderError::Config("need at least one centroid".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(CiderError::Config(format!("temperature must be positive, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) || self.period == 0 {
            return Err(CiderError::Config("centroid step size and period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub cutoffs: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_size: 999,
            cutoffs: vec![10, 20, 30],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(CiderError::Config("negative pool must be non-empty".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(CiderError::Config("cutoffs must be positive and non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub x: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Seed of the overlap-user split.
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.x, &self.y, &self.synthetic) {
            (Some(_), Some(_), None) => Ok(()),
            (None, None, Some(spec)) => spec.validate(),
            (None, None, None) => Err(CiderError::Config(
                "data needs either x/y interaction files or a synthetic spec".into(),
            )),
            _ => Err(CiderError::Config(
                "give both x and y files, or a synthetic spec, but not both".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub cpa: CpaConfig,
    pub flow: FlowConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs"),
            data: DataConfig {
                synthetic: Some(SyntheticSpec::default()),
                ..DataConfig::default()
            },
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            cpa: CpaConfig::default(),
            flow: FlowConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Short names accepted by [`ExperimentConfig::set`].
const ALIASES: &[(&str, &str)] = &[
    ("alpha", "cpa.alpha"),
    ("T", "cpa.centroids"),
    ("centroids", "cpa.centroids"),
    ("N", "train.group_size"),
    ("group_size", "train.group_size"),
    ("d", "encoder.dim"),
    ("dim", "encoder.dim"),
    ("K", "encoder.layers"),
    ("k", "encoder.shallow"),
    ("flow", "flow.kind"),
    ("lr", "train.lr"),
    ("epochs", "train.epochs"),
    ("seed", "train.seed"),
    ("variant", "train.variant"),
    ("ratio", "train.overlap_ratio"),
];

fn parse_scalar(raw: &str) -> serde_json::Value {
    if let Ok(i) = raw.parse::<i64>() {
        return i.into();
    }
    if let Ok(f) = raw.parse::<f64>() {
        return f.into();
    }
    match raw {
        "true" => true.into(),
        "false" => false.into(),
        _ => raw.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.cpa.validate()?;
        self.flow.validate()?;
        self.eval.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CiderError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CiderError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CiderError::Config(msg) => CiderError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Sets one field by dotted path (`cpa.alpha`) or short alias
    /// (`alpha`), then re-validates.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let path = ALIASES
            .iter()
            .find(|(alias, _)| *alias == key)
            .map_or(key, |(_, full)| full);
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in path.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| CiderError::Config(format!("unknown config key {key:?}")))?;
        }
        *node = if node.is_string() {
            raw.into()
        } else {
            parse_scalar(raw)
        };
        *self = serde_json::from_value(tree).map_err(|e| CiderError::Config(format!("{key}={raw}: {e}")))?;
        self.validate()
    }
}

/// One `--param key=v1,v2,...` sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for ParamAxis {
    type Err = CiderError;

    fn from_str(s: &str) -> Result<Self> {
        let (key, list) = s
            .split_once('=')
            .ok_or_else(|| CiderError::Config(format!("expected key=value[,value...], got {s:?}")))?;
        let values: Vec<String> = list
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(CiderError::Config(format!("expected key=value[,value...], got {s:?}")));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Cartesian product of the axes, as lists of `(key, value)` settings.
pub fn grid_points(axes: &[ParamAxis]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for v in &axis.values {
                let mut q = p.clone();
                q.push((axis.key.clone(), v.clone()));
                next.push(q);
            }
        }
        points = next;
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowKind;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\nvariant = \"C\"\nepochs = 3\n[flow]\nkind = \"maf\"\n[data.synthetic]\nusers = 50\noverlap = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.train.variant, Variant::C);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.flow.kind, FlowKind::Maf);
        assert_eq!(cfg.data.synthetic.unwrap().users, 50);
        assert_eq!(cfg.cpa.alpha, 3.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(ExperimentConfig::from_toml_str("[train]\nepoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nlr = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nvariant = \"F\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[encoder]\nshallow = 3\n").is_err());
    }

    #[test]
    fn overrides_by_alias_and_path() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("alpha", "2").unwrap();
        assert_eq!(cfg.cpa.alpha, 2.0);
        cfg.set("flow", "naf").unwrap();
        assert_eq!(cfg.flow.kind, FlowKind::Naf);
        cfg.set("train.lambda_s", "0.25").unwrap();
        assert_eq!(cfg.train.lambda_s, 0.25);
        cfg.set("variant", "D").unwrap();
        assert_eq!(cfg.train.variant, Variant::D);
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("T", "0").is_err());
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let axes: Vec<ParamAxis> = ["alpha=1,2,3", "N=16,32"].iter().map(|s| s.parse().unwrap()).collect();
        let pts = grid_points(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![("alpha".into(), "1".into()), ("N".into(), "16".into())]);
        assert!("alpha".parse::<ParamAxis>().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
