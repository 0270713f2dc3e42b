//! Frame-level ROC analysis, operating points at fixed specificity,
//! event-level detection, procedure-grouped cross-validation and the
//! imbalance-degree sweep.

mod metrics;
mod validation;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{EventId, FrameRef, Label};

pub use metrics::{
    auc, event_detection, event_detection_at, recall_at_specificity, roc_and_auc, threshold_metrics, DetectionCount,
    EventDetection, OperatingPoint, RocCurve, RocPoint, ThresholdMetrics,
};
pub use validation::{
    cross_validate, evaluate_scores, imbalance_sweep, CrossValidation, EvalOptions, EvalReport, FoldReport,
    MeanStd, SweepCell, SweepOptions, SweepReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("recall is undefined without positive frames")]
    NoPositives,
    #[error("specificity is undefined without negative frames")]
    NoNegatives,
    #[error("target specificity {0} is outside [0, 1]")]
    BadTarget(f64),
    #[error("score of {0} is not finite")]
    NonFiniteScore(String),
    #[error("frame {0}: positive frames must map to exactly one event")]
    UnmappedFrame(String),
    #[error("event {0} has no frames")]
    EmptyEvent(EventId),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("imbalance degree {degree}, repeat {repeat}: {source}")]
    SweepCell {
        degree: f64,
        repeat: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Data(#[from] crate::synthdata::DataError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub frame: FrameRef,
    pub event_id: Option<EventId>,
    pub label: Label,
    pub score: f64,
}

impl ScoredFrame {
    /// A frame with only a score and a label, for metric computations that
    /// ignore provenance.
    pub fn bare(score: f64, label: Label) -> Self {
        Self {
            frame: FrameRef::new(0, 0),
            event_id: None,
            label,
            score,
        }
    }
}
