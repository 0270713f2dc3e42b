use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use rarevent_core::evaluator::{EvalOptions, SweepOptions};
use rarevent_core::losses::Margin;
use rarevent_core::synthdata::GeneratorConfig;
use rarevent_core::trainer::{Method, TrainConfig};

use crate::error::CliError;

/// Everything one run needs. Unset fields take the defaults below, and the
/// fully resolved value is what gets hashed and recorded in `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. It replaces the seeds inside `data` and `train` and
    /// drives the procedure split.
    pub seed: u64,
    pub data: GeneratorConfig,
    pub train: TrainConfig,
    /// Methods compared by `eval`.
    pub methods: Vec<Method>,
    pub eval: EvalOptions,
    pub sweep: SweepSettings,
    pub cam: CamSettings,
    /// Run directory. `--out` takes precedence. Not part of the hash, so
    /// the same experiment written to two places has one identity.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            train: TrainConfig::desk(Method::TripletBatchAll),
            methods: Method::ALL.to_vec(),
            eval: EvalOptions::default(),
            sweep: SweepSettings::default(),
            cam: CamSettings::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub margins: Vec<Margin>,
    /// Widths of the extra dense layer placed before the classifier.
    pub embedding_sizes: Vec<usize>,
    pub imbalance: SweepOptions,
    /// Methods compared across imbalance degrees.
    pub imbalance_methods: Vec<Method>,
    /// Triplet or end-to-end epochs per imbalance cell, when different from `train.epochs`.
    pub imbalance_epochs: Option<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            margins: [0.1, 0.2, 0.5, 1.0].map(|m| Margin::new(m).expect("valid margin")).to_vec(),
            embedding_sizes: vec![8, 16, 32, 64],
            imbalance: SweepOptions {
                max_event_procedures: Some(8),
                ..SweepOptions::default()
            },
            imbalance_methods: vec![Method::TripletBatchAll, Method::CrossEntropyBaseline],
            imbalance_epochs: Some(15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamSettings {
    /// Operating point used to sort frames into TP, FP and FN.
    pub target_specificity: f64,
    /// A peak within this many pixels of the event mask counts as a hit.
    pub dilation: usize,
    /// Overlays written per outcome.
    pub gallery: usize,
}

impl Default for CamSettings {
    fn default() -> Self {
        Self {
            target_specificity: 0.95,
            dilation: 2,
            gallery: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a possibly partial config. Each given field replaces the
    /// matching default, so a lone `train.margin` keeps the other `train`
    /// defaults of this struct rather than those of `TrainConfig`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let given: Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, given);
        serde_json::from_value(merged)
    }

    /// Applies the seed override and pushes the master seed into the nested configs.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |what: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{what}: {e}"));
        self.data.validate().map_err(|e| bad("data", &e))?;
        self.train.validate().map_err(|e| bad("train", &e))?;
        if self.methods.is_empty() {
            return Err(CliError::Config("methods: at least one method is required".into()));
        }
        if self.eval.folds < 2 || self.eval.folds > self.data.num_procedures {
            return Err(CliError::Config(format!(
                "eval.folds: {} folds need between 2 and {} procedures",
                self.eval.folds, self.data.num_procedures
            )));
        }
        if let Some(t) = self.eval.specificity_targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(CliError::Config(format!("eval.specificity_targets: {t} is outside [0, 1]")));
        }
        if self.sweep.margins.is_empty() {
            return Err(CliError::Config("sweep.margins: at least one margin is required".into()));
        }
        if self.sweep.embedding_sizes.contains(&0) {
            return Err(CliError::Config("sweep.embedding_sizes: sizes must be positive".into()));
        }
        let imb = &self.sweep.imbalance;
        if imb.repeats == 0 || imb.degrees.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(CliError::Config("sweep.imbalance: needs positive degrees and at least one repeat".into()));
        }
        if imb.folds < 2 || imb.folds > self.data.num_procedures {
            return Err(CliError::Config(format!("sweep.imbalance.folds: {} is not a valid fold count", imb.folds)));
        }
        if !(0.0..=1.0).contains(&self.cam.target_specificity) {
            return Err(CliError::Config(format!(
                "cam.target_specificity: {} is outside [0, 1]",
                self.cam.target_specificity
            )));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("configs serialize")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// `train` with `method` swapped in.
    pub fn train_for(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            ..self.train.clone()
        }
    }
}

fn merge(base: &mut Value, given: Value) {
    match (base, given) {
        (Value::Object(b), Value::Object(g)) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
