//! Experiment configuration: a single TOML document with a strict schema.

use serde::{Deserialize, Serialize};

use crate::datagen::{Partition, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::TrainConfig;
use crate::metrics::ZetaSource;
use crate::objectives::BatchSize;
use crate::rng::derive_seed;
use crate::unlearning::{FairnessConfig, ProjectionBase, StabilityConfig, SurrogateBase};

/// Seed-derivation labels for the independent parts of a run.
mod seed_tag {
    pub const DATA: u64 = 0xD0;
    pub const TRAIN: u64 = 0x71;
    pub const UNLEARN: u64 = 0x72;
    pub const PROBES: u64 = 0x73;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Explicit unlearn set; exclusive with `unlearn_weight`.
    #[serde(default)]
    pub unlearn_set: Option<Vec<usize>>,
    /// Target `P_J`: clients are taken in index order while the running
    /// weight stays within the target (at least one client).
    #[serde(default)]
    pub unlearn_weight: Option<f64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: PhaseSection,
    pub unlearn: PhaseSection,
    pub mechanism: MechanismSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_clients: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub class_sep: f64,
    pub noise_sd: f64,
    pub partition: Partition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub ridge: f64,
    /// Multiplier on the class-value regression targets.
    #[serde(default = "unit")]
    pub target_scale: f64,
}

/// A step size given as a number or as `"inverse_smoothness"` (`1/L_max`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Value(f64),
    Named(String),
    /// `c / L`, written `{ inverse_smoothness = c }`.
    Scaled { inverse_smoothness: f64 },
}

impl StepSize {
    pub fn resolve(&self, smoothness: f64) -> Result<f64> {
        match self {
            StepSize::Value(v) => Ok(*v),
            StepSize::Named(n) if n == "inverse_smoothness" => Ok(1.0 / smoothness),
            StepSize::Scaled { inverse_smoothness: c } => Ok(c / smoothness),
            StepSize::Named(n) => Err(Error::config(format!(
                "unknown step size '{n}' (expected a number or \"inverse_smoothness\")"
            ))),
        }
    }
}

/// `"full"` or a sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSpec {
    Samples(usize),
    Named(String),
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec::Named("full".into())
    }
}

impl BatchSpec {
    pub fn resolve(&self) -> Result<BatchSize> {
        match self {
            BatchSpec::Samples(0) => Err(Error::config("batch size must be >= 1")),
            BatchSpec::Samples(b) => Ok(BatchSize::Samples(*b)),
            BatchSpec::Named(n) if n == "full" => Ok(BatchSize::Full),
            BatchSpec::Named(n) => Err(Error::config(format!(
                "unknown batch '{n}' (expected an integer or \"full\")"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub rounds: usize,
    pub lr_local: StepSize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default)]
    pub batch: BatchSpec,
    #[serde(default = "unit")]
    pub sample_fraction: f64,
}

impl PhaseSection {
    pub fn to_train_config(&self, smoothness: f64, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            lr_local: self.lr_local.resolve(smoothness)?,
            batch: self.batch.resolve()?,
            sample_fraction: self.sample_fraction,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSection {
    Retrain,
    Continue,
    Stability {
        lambda: f64,
        lr_global: StepSize,
        #[serde(default)]
        smoothness: Option<f64>,
        #[serde(default)]
        projection: ProjectionBase,
        #[serde(default)]
        surrogate: SurrogateBase,
    },
    Fairness {
        #[serde(rename = "Lambda")]
        budget: f64,
        #[serde(default)]
        epsilon: Option<f64>,
    },
}

impl MechanismSection {
    pub fn stability_config(&self, smoothness: f64) -> Result<Option<StabilityConfig>> {
        match self {
            MechanismSection::Stability {
                lambda,
                lr_global,
                smoothness: l_used,
                projection,
                surrogate,
            } => Ok(Some(StabilityConfig {
                lambda: *lambda,
                lr_global: lr_global.resolve(smoothness)?,
                smoothness: *l_used,
                projection: *projection,
                surrogate: *surrogate,
            })),
            _ => Ok(None),
        }
    }

    pub fn fairness_config(&self) -> Option<FairnessConfig> {
        match self {
            MechanismSection::Fairness { budget, epsilon } => Some(FairnessConfig {
                budget: *budget,
                epsilon: *epsilon,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default)]
    pub zeta_source: ZetaSource,
    /// Gradient-bound ball radius; defaults to 10× the farthest client minimizer.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Multiplier budget for the fairness quantities of non-fairness runs.
    #[serde(default, rename = "Lambda")]
    pub budget: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("replicates must be >= 1"));
        }
        match (&self.unlearn_set, self.unlearn_weight) {
            (Some(_), Some(_)) => {
                return Err(Error::config("set only one of unlearn_set and unlearn_weight"))
            }
            (None, None) => return Err(Error::config("one of unlearn_set or unlearn_weight is required")),
            (None, Some(w)) if !(w > 0.0 && w <= 0.5) => {
                return Err(Error::config("unlearn_weight must be in (0, 1/2]"))
            }
            _ => {}
        }
        if !(self.model.ridge >= 0.0 && self.model.ridge.is_finite()) {
            return Err(Error::config("ridge must be a finite value >= 0"));
        }
        if self.model.kind == ModelKind::Logistic && self.model.ridge <= 0.0 {
            return Err(Error::config("logistic model needs ridge > 0"));
        }
        if !(self.model.target_scale > 0.0 && self.model.target_scale.is_finite()) {
            return Err(Error::config("target_scale must be > 0"));
        }
        self.synthetic_spec().validate()?;
        self.train.batch.resolve()?;
        self.unlearn.batch.resolve()?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            num_clients: d.num_clients,
            num_classes: d.num_classes,
            dim: d.dim,
            samples_per_client: d.samples_per_client,
            class_sep: d.class_sep,
            noise_sd: d.noise_sd,
            partition: d.partition,
            seed: self.data_seed(),
        }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, &[seed_tag::DATA])
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, &[seed_tag::TRAIN])
    }

    pub fn unlearn_seed(&self) -> u64 {
        derive_seed(self.seed, &[seed_tag::UNLEARN])
    }

    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, &[seed_tag::PROBES])
    }

    /// Name of the mechanism section.
    pub fn mechanism_name(&self) -> &'static str {
        match self.mechanism {
            MechanismSection::Retrain => "retrain",
            MechanismSection::Continue => "continue",
            MechanismSection::Stability { .. } => "stability",
            MechanismSection::Fairness { .. } => "fairness",
        }
    }

    /// Budget used for the fairness quantities of the report.
    pub fn report_budget(&self) -> f64 {
        match &self.mechanism {
            MechanismSection::Fairness { budget, .. } if *budget > 0.0 => *budget,
            _ => self.report.budget.unwrap_or(1.0),
        }
    }

    /// Non-fatal concerns about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        self.synthetic_spec().warnings()
    }
}

/// Resolves the unlearn set for client weights `p`.
pub fn resolve_unlearn_set(cfg: &ExperimentConfig, p: &[f64]) -> Result<Vec<usize>> {
    if let Some(set) = &cfg.unlearn_set {
        return Ok(set.clone());
    }
    let target = cfg.unlearn_weight.expect("validated");
    let mut set = Vec::new();
    let mut total = 0.0;
    for (i, &w) in p.iter().enumerate() {
        if total + w <= target + 1e-12 {
            set.push(i);
            total += w;
        }
    }
    if set.is_empty() {
        // the lightest client
        let i = p
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::config("no clients"))?;
        set.push(i);
    }
    Ok(set)
}
