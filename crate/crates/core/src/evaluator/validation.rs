use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    event_detection_at, recall_at_specificity, roc_and_auc, threshold_metrics, EventDetection, OperatingPoint,
    ThresholdMetrics,
};
use super::{EvalError, Result, ScoredFrame};
use crate::nn::ModelState;
use crate::sampler::TrainPool;
use crate::synthdata::{split_by_procedure, Dataset, EventAnnotation, FoldAssignment};
use crate::trainer::{score_labelled, train, Method, TrainConfig, TrainHistory};
use crate::types::{child_seed, ProcedureId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub folds: usize,
    pub specificity_targets: Vec<f64>,
    /// Threshold for accuracy, sensitivity, specificity and precision.
    pub threshold: f64,
    /// Warn when a test split has fewer negatives per positive than this.
    pub min_negative_ratio: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            specificity_targets: vec![0.95, 0.90, 0.80],
            threshold: 0.5,
            min_negative_ratio: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub positives: usize,
    pub negatives: usize,
    pub auc: f64,
    pub at_threshold: ThresholdMetrics,
    pub operating_points: Vec<OperatingPoint>,
    /// Event detection at each operating point, same order.
    pub event_detection: Vec<EventDetection>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn operating_point(&self, target: f64) -> Option<&OperatingPoint> {
        self.operating_points.iter().find(|o| o.target_specificity == target)
    }

    pub fn detection_at(&self, target: f64) -> Option<&EventDetection> {
        let i = self.operating_points.iter().position(|o| o.target_specificity == target)?;
        self.event_detection.get(i)
    }
}

/// Full report for one set of scored frames. `events` are the events whose
/// frames are among `scored`.
pub fn evaluate_scores(scored: &[ScoredFrame], events: &[&EventAnnotation], options: &EvalOptions) -> Result<EvalReport> {
    let (_, auc) = roc_and_auc(scored)?;
    let positives = scored.iter().filter(|s| s.label.is_positive()).count();
    let negatives = scored.len() - positives;
    let mut warnings = Vec::new();
    let ratio = negatives as f64 / positives as f64;
    if ratio < options.min_negative_ratio {
        warnings.push(format!(
            "test split has {ratio:.1} negatives per positive, below the floor of {}",
            options.min_negative_ratio
        ));
    }
    let mut operating_points = Vec::new();
    let mut event_detection = Vec::new();
    for &t in &options.specificity_targets {
        let op = recall_at_specificity(scored, t)?;
        event_detection.push(event_detection_at(scored, op.threshold, events)?);
        operating_points.push(op);
    }
    Ok(EvalReport {
        positives,
        negatives,
        auc,
        at_threshold: threshold_metrics(scored, options.threshold),
        operating_points,
        event_detection,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_procedures: Vec<ProcedureId>,
    pub test_procedures: Vec<ProcedureId>,
    pub report: EvalReport,
    pub history: TrainHistory,
    #[serde(skip)]
    pub scored: Vec<ScoredFrame>,
    #[serde(skip)]
    pub model: Option<ModelState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub method: Method,
    pub split: FoldAssignment,
    pub folds: Vec<FoldReport>,
    pub auc: MeanStd,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub precision: MeanStd,
    /// `(target specificity, recall)` per target.
    pub recall_at: Vec<(f64, MeanStd)>,
    /// `(target specificity, event detection rate)` per target.
    pub event_rate_at: Vec<(f64, MeanStd)>,
}

fn events_in<'a>(dataset: &'a Dataset, procedures: &[ProcedureId]) -> Vec<&'a EventAnnotation> {
    procedures
        .iter()
        .filter_map(|&p| dataset.manifest.procedure(p))
        .flat_map(|p| p.event_ids.iter().map(|&e| &dataset.manifest.events[e as usize]))
        .collect()
}

/// Trains on `k − 1` folds and scores the held-out fold, for every fold.
/// Folds run in parallel; fold `i` trains with seed `child_seed(config.seed, [i])`.
pub fn cross_validate(dataset: &Dataset, config: &TrainConfig, options: &EvalOptions, split_seed: u64) -> Result<CrossValidation> {
    let split = split_by_procedure(&dataset.manifest, options.folds, split_seed)?;
    let folds: Vec<Result<FoldReport>> = (0..split.k())
        .into_par_iter()
        .map(|fold| {
            let wrap = |e: Box<dyn std::error::Error + Send + Sync>| EvalError::Fold { fold, source: e };
            let train_procs = split.train(fold);
            let test_procs = split.test(fold).to_vec();
            debug_assert!(test_procs.iter().all(|p| !train_procs.contains(p)));
            let pool = TrainPool::from_manifest(&dataset.manifest, &train_procs);
            let cfg = TrainConfig {
                seed: child_seed(config.seed, &[fold as u64]),
                ..config.clone()
            };
            let out = train(&cfg, dataset, &pool, None).map_err(|e| wrap(Box::new(e)))?;
            let test = dataset.frames_of(&test_procs);
            let scored = score_labelled(&out.model, dataset, &test).map_err(|e| wrap(Box::new(e)))?;
            let report = evaluate_scores(&scored, &events_in(dataset, &test_procs), options).map_err(|e| wrap(Box::new(e)))?;
            Ok(FoldReport {
                fold,
                train_procedures: train_procs,
                test_procedures: test_procs,
                report,
                history: out.history,
                scored,
                model: Some(out.model),
            })
        })
        .collect();
    let folds = folds.into_iter().collect::<Result<Vec<_>>>()?;
    let stat = |f: &dyn Fn(&EvalReport) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
    let recall_at = options
        .specificity_targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, stat(&|r| r.operating_points[i].recall)))
        .collect();
    let event_rate_at = options
        .specificity_targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, stat(&|r| r.event_detection[i].overall.rate())))
        .collect();
    Ok(CrossValidation {
        method: config.method,
        auc: stat(&|r| r.auc),
        accuracy: stat(&|r| r.at_threshold.accuracy),
        sensitivity: stat(&|r| r.at_threshold.sensitivity),
        specificity: stat(&|r| r.at_threshold.specificity),
        precision: stat(&|r| r.at_threshold.precision),
        recall_at,
        event_rate_at,
        split,
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Negatives per positive in the training pool.
    pub degrees: Vec<f64>,
    pub repeats: usize,
    /// The common test split is fold 0 of a `folds`-way procedure split.
    pub folds: usize,
    /// Draw positives from at most this many event-bearing training
    /// procedures (all when unset). Negatives still come from every training
    /// procedure, which keeps high degrees feasible.
    pub max_event_procedures: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            degrees: vec![1.0, 10.0, 25.0, 50.0, 100.0],
            repeats: 10,
            folds: 5,
            max_event_procedures: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub degree: f64,
    pub repeat: usize,
    pub train_positives: usize,
    pub train_negatives: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub test_procedures: Vec<ProcedureId>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn summary(&self, method: Method, degree: f64) -> MeanStd {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.degree == degree)
            .map(|c| c.auc)
            .collect();
        MeanStd::of(&v)
    }
}

/// For every degree and repeat, subsamples the training negatives to
/// `degree × positives`, trains each config on that pool and scores a fixed
/// test split. Configs share the subsample of a cell.
pub fn imbalance_sweep(dataset: &Dataset, configs: &[TrainConfig], options: &SweepOptions, seed: u64) -> Result<SweepReport> {
    let split = split_by_procedure(&dataset.manifest, options.folds, seed)?;
    let test_procs = split.test(0).to_vec();
    let train_procs = split.train(0);
    let mut full_pool = TrainPool::from_manifest(&dataset.manifest, &train_procs);
    if let Some(limit) = options.max_event_procedures {
        let kept: Vec<ProcedureId> = train_procs
            .iter()
            .copied()
            .filter(|&p| dataset.manifest.procedures[p as usize].has_events())
            .take(limit)
            .collect();
        let positives = TrainPool::from_manifest(&dataset.manifest, &kept).positives().to_vec();
        full_pool = TrainPool::new(positives, full_pool.negatives().collect::<Vec<_>>());
    }
    let test = dataset.frames_of(&test_procs);
    let jobs: Vec<(usize, f64, usize, usize)> = options
        .degrees
        .iter()
        .enumerate()
        .flat_map(|(di, &d)| (0..options.repeats).flat_map(move |r| (0..configs.len()).map(move |c| (di, d, r, c))))
        .collect();
    let cells: Vec<Result<SweepCell>> = jobs
        .into_par_iter()
        .map(|(di, degree, repeat, ci)| {
            let wrap = |e: Box<dyn std::error::Error + Send + Sync>| EvalError::SweepCell { degree, repeat, source: e };
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[di as u64, repeat as u64]));
            let pool = full_pool.subsample_negatives(degree, &mut rng).map_err(|e| wrap(Box::new(e)))?;
            let cfg = TrainConfig {
                seed: child_seed(configs[ci].seed, &[di as u64, repeat as u64]),
                ..configs[ci].clone()
            };
            let out = train(&cfg, dataset, &pool, None).map_err(|e| wrap(Box::new(e)))?;
            let scored = score_labelled(&out.model, dataset, &test).map_err(|e| wrap(Box::new(e)))?;
            let (_, auc) = roc_and_auc(&scored).map_err(|e| wrap(Box::new(e)))?;
            Ok(SweepCell {
                method: cfg.method,
                degree,
                repeat,
                train_positives: pool.positives().len(),
                train_negatives: pool.negative_count(),
                auc,
            })
        })
        .collect();
    Ok(SweepReport {
        test_procedures: test_procs,
        cells: cells.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
