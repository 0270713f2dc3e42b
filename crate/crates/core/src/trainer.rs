//! Two-stage training (triplet loss on the embedding, then a cross-entropy
//! classifier on the frozen embedding) and the end-to-end cross-entropy
//! baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{auc, ScoredFrame};
use crate::losses::{self, EmbeddingBatch, LossError, Margin};
use crate::nn::{desk_architecture, ModelState, NnError};
use crate::sampler::{epoch_batches, Batch, BatchPlan, ClassBalance, SamplerError, TrainPool};
use crate::synthdata::{augment, AugmentParams, Dataset};
use crate::tensor::Tensor;
use crate::types::{child_seed, FrameRef, Label};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{stage} stage, epoch {epoch}, batch {batch}: loss diverged ({loss})")]
    Diverged {
        stage: Stage,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{stage} stage, epoch {epoch}, batch {batch}: {source}")]
    Step {
        stage: Stage,
        epoch: usize,
        batch: usize,
        #[source]
        source: StepError,
    },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bce", alias = "cross_entropy_baseline")]
    CrossEntropyBaseline,
    #[serde(rename = "tl_ba", alias = "triplet_batch_all")]
    TripletBatchAll,
    #[serde(rename = "tl_bh", alias = "triplet_batch_hard")]
    TripletBatchHard,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CrossEntropyBaseline, Method::TripletBatchAll, Method::TripletBatchHard];

    /// Short tag used in reports.
    pub fn tag(self) -> &'static str {
        match self {
            Method::CrossEntropyBaseline => "bce",
            Method::TripletBatchAll => "tl_ba",
            Method::TripletBatchHard => "tl_bh",
        }
    }

    pub fn is_triplet(self) -> bool {
        self != Method::CrossEntropyBaseline
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Triplet,
    Classifier,
    EndToEnd,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Triplet => "triplet",
            Stage::Classifier => "classifier",
            Stage::EndToEnd => "end_to_end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub margin: Margin,
    /// Width of an extra dense+relu layer between pooling and the classifier.
    pub embedding_head: Option<usize>,
    pub learning_rate: f64,
    /// Learning rate of the classifier stage; defaults to `learning_rate`.
    pub classifier_learning_rate: Option<f64>,
    /// Triplet epochs for the triplet methods, BCE epochs for the baseline.
    pub epochs: usize,
    /// Classifier-only epochs after the triplet stage.
    pub classifier_epochs: usize,
    pub weight_decay: f64,
    /// Rescale each step's gradient to at most this Euclidean norm.
    pub max_grad_norm: Option<f64>,
    pub normalize_embeddings: bool,
    pub batch: BatchPlan,
    /// Class mixing of the baseline's batches. Triplet methods always use the
    /// fixed proportion in `batch`.
    pub baseline_balance: ClassBalance,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::TripletBatchAll,
            margin: Margin::default(),
            embedding_head: None,
            learning_rate: 1e-3,
            classifier_learning_rate: None,
            epochs: 50,
            classifier_epochs: 10,
            weight_decay: 0.0,
            max_grad_norm: None,
            normalize_embeddings: false,
            batch: BatchPlan::default(),
            baseline_balance: ClassBalance::Natural,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the default synthetic dataset. The tiny network needs a
    /// much larger step than the defaults and converges in fewer epochs;
    /// clipping keeps the early triplet steps from collapsing the embedding.
    pub fn desk(method: Method) -> Self {
        Self {
            method,
            learning_rate: 0.1,
            max_grad_norm: Some(1.0),
            epochs: 40,
            classifier_epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.classifier_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("classifier_learning_rate must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.embedding_head == Some(0) {
            return bad("embedding_head must be positive".into());
        }
        if self.method.is_triplet() && self.batch.balance != ClassBalance::Fixed {
            return bad("triplet methods need batch.balance = fixed".into());
        }
        self.batch.validate()?;
        Ok(())
    }

    /// Batch plan actually used by the configured method.
    pub fn effective_plan(&self) -> BatchPlan {
        let mut plan = self.batch.clone();
        if !self.method.is_triplet() {
            plan.balance = self.baseline_balance;
        }
        plan
    }

    fn classifier_lr(&self) -> f64 {
        self.classifier_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Share of triplets (batch-all) or anchors (batch-hard) with nonzero loss.
    pub active_fraction: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,stage,loss,active_fraction,val_auc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.stage,
                r.loss,
                opt(r.active_fraction),
                opt(r.val_auc)
            ));
        }
        out
    }

    pub fn last_loss(&self, stage: Stage) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.stage == stage).map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelState,
    pub history: TrainHistory,
}

/// Maps a pixel from [0, 1] to [-1, 1]. Zero-centred inputs let the first
/// layers learn at the desk learning rate.
pub fn center_pixel(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Stacks frames into an `N × c × s × s` batch of centred pixels, optionally
/// augmenting each frame first.
pub fn batch_tensor(dataset: &Dataset, frames: &[FrameRef], augment_rng: Option<&mut ChaCha8Rng>) -> Tensor {
    let mut rng = augment_rng;
    let s = dataset.store.frame_size();
    let c = dataset.store.channels();
    let mut data = Vec::with_capacity(frames.len() * c * s * s);
    for &f in frames {
        let px = dataset.frame(f).pixels;
        let px = match rng.as_deref_mut() {
            Some(r) => augment(&px, &AugmentParams::sample(r)),
            None => px,
        };
        data.extend(px.data().iter().map(|&v| center_pixel(v)));
    }
    Tensor::new(vec![frames.len(), c, s, s], data).expect("frames share one size")
}

/// Positive-class probability per frame. Frames are scored in fixed chunks,
/// independently of each other, so results do not depend on the batch layout.
pub fn score_frames(model: &ModelState, dataset: &Dataset, frames: &[FrameRef]) -> std::result::Result<Vec<f64>, NnError> {
    const CHUNK: usize = 64;
    let parts: Vec<std::result::Result<Vec<f64>, NnError>> = frames
        .par_chunks(CHUNK)
        .map(|chunk| {
            let x = batch_tensor(dataset, chunk, None);
            let acts = model.forward(&x)?;
            model.probabilities(&acts)
        })
        .collect();
    let mut out = Vec::with_capacity(frames.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores labelled frames and attaches event ids.
pub fn score_labelled(model: &ModelState, dataset: &Dataset, frames: &[(FrameRef, Label)]) -> std::result::Result<Vec<ScoredFrame>, NnError> {
    let refs: Vec<FrameRef> = frames.iter().map(|f| f.0).collect();
    let scores = score_frames(model, dataset, &refs)?;
    Ok(frames
        .iter()
        .zip(scores)
        .map(|(&(frame, label), score)| ScoredFrame {
            frame,
            event_id: if label.is_positive() { dataset.manifest.event_of(frame) } else { None },
            label,
            score,
        })
        .collect())
}

struct StepStats {
    loss: f64,
    active: Option<f64>,
}

fn triplet_step(model: &mut ModelState, config: &TrainConfig, x: &Tensor, labels: Vec<Label>) -> std::result::Result<StepStats, StepError> {
    let acts = model.forward(x)?;
    let ci = model.classifier_index()?;
    let emb = model.embeddings(&acts)?;
    let (n, d) = (emb.shape()[0], emb.shape()[1]);
    let (rows, norms) = if config.normalize_embeddings {
        let (r, n) = losses::l2_normalize(emb.data(), d);
        (r, Some(n))
    } else {
        (emb.data().to_vec(), None)
    };
    let batch = EmbeddingBatch::new(rows, d, labels)?;
    let (loss, grad, active) = match config.method {
        Method::TripletBatchAll => {
            let o = losses::batch_all_loss(&batch, config.margin)?;
            (o.mean_active_loss(), o.mean_active_gradient(), o.active_fraction())
        }
        Method::TripletBatchHard => {
            let o = losses::batch_hard_loss(&batch, config.margin)?;
            (o.mean_loss(), o.mean_gradient(), o.active_fraction())
        }
        Method::CrossEntropyBaseline => unreachable!("baseline has no triplet stage"),
    };
    if !loss.is_finite() {
        return Ok(StepStats { loss, active: Some(active) });
    }
    let grad = match norms {
        Some(norms) => losses::l2_normalize_backward(batch.embeddings(), &norms, &grad, d),
        None => grad,
    };
    let g = Tensor::new(vec![n, d], grad).expect("gradient matches the embedding shape");
    let (mut grads, _) = model.backward_range(&acts, ci - 1, &g, 0)?;
    if let Some(c) = config.max_grad_norm {
        grads.clip_norm(c);
    }
    model.sgd_step(&grads, config.learning_rate, config.weight_decay)?;
    Ok(StepStats { loss, active: Some(active) })
}

/// Mean BCE on the classifier logit; `frozen_backbone` limits the update to
/// the classifier layer.
fn bce_step(
    model: &mut ModelState,
    x: &Tensor,
    labels: &[Label],
    lr: f64,
    config: &TrainConfig,
    frozen_backbone: bool,
) -> std::result::Result<StepStats, StepError> {
    let acts = model.forward(x)?;
    let ci = model.classifier_index()?;
    let logits = acts.layer_output(ci);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&z, &y) in logits.data().iter().zip(labels) {
        let (l, g) = losses::bce_with_logit(z, y);
        loss += l / n;
        grad.push(g / n);
    }
    if !loss.is_finite() {
        return Ok(StepStats { loss, active: None });
    }
    let g = Tensor::new(logits.shape().to_vec(), grad).expect("one logit per sample");
    let bottom = if frozen_backbone { ci } else { 0 };
    let (mut grads, _) = model.backward_range(&acts, ci, &g, bottom)?;
    if let Some(c) = config.max_grad_norm {
        grads.clip_norm(c);
    }
    model.sgd_step(&grads, lr, config.weight_decay)?;
    Ok(StepStats { loss, active: None })
}

fn split_batch(batch: &Batch) -> (Vec<FrameRef>, Vec<Label>) {
    batch.frames.iter().copied().unzip()
}

/// Trains a fresh desk-architecture model on `pool`. With `val`, the held-out
/// AUC is recorded after every epoch.
pub fn train(config: &TrainConfig, dataset: &Dataset, pool: &TrainPool, val: Option<&[(FrameRef, Label)]>) -> Result<TrainOutput> {
    config.validate()?;
    let s = dataset.store.frame_size();
    let input = [dataset.store.channels(), s, s];
    let model = ModelState::init(desk_architecture(config.embedding_head), &input, child_seed(config.seed, &[100]))?;
    train_model(config, model, dataset, pool, val)
}

/// Like [`train`] but starting from a given model.
pub fn train_model(
    config: &TrainConfig,
    mut model: ModelState,
    dataset: &Dataset,
    pool: &TrainPool,
    val: Option<&[(FrameRef, Label)]>,
) -> Result<TrainOutput> {
    config.validate()?;
    model.classifier_index()?;
    let plan = config.effective_plan();
    let mut history = TrainHistory::default();
    let stages: Vec<(Stage, usize)> = if config.method.is_triplet() {
        vec![(Stage::Triplet, config.epochs), (Stage::Classifier, config.classifier_epochs)]
    } else {
        vec![(Stage::EndToEnd, config.epochs)]
    };
    let mut epoch = 0;
    for (stage_index, (stage, epochs)) in stages.into_iter().enumerate() {
        for _ in 0..epochs {
            epoch += 1;
            let stream = [stage_index as u64, epoch as u64];
            let batches = epoch_batches(pool, &plan, child_seed(config.seed, &[200, stream[0], stream[1]]))?;
            let mut aug = ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[300, stream[0], stream[1]]));
            let (mut loss_sum, mut active_sum) = (0.0, 0.0);
            for (bi, batch) in batches.iter().enumerate() {
                let (frames, labels) = split_batch(batch);
                let x = batch_tensor(dataset, &frames, plan.augment.then_some(&mut aug));
                let step = match stage {
                    Stage::Triplet => triplet_step(&mut model, config, &x, labels),
                    Stage::Classifier => bce_step(&mut model, &x, &labels, config.classifier_lr(), config, true),
                    Stage::EndToEnd => bce_step(&mut model, &x, &labels, config.learning_rate, config, false),
                }
                .map_err(|source| TrainError::Step {
                    stage,
                    epoch,
                    batch: bi,
                    source,
                })?;
                if !step.loss.is_finite() {
                    return Err(TrainError::Diverged {
                        stage,
                        epoch,
                        batch: bi,
                        loss: step.loss,
                    });
                }
                loss_sum += step.loss;
                active_sum += step.active.unwrap_or(0.0);
            }
            let nb = batches.len() as f64;
            let val_auc = match val {
                Some(v) => Some(
                    score_labelled(&model, dataset, v)
                        .map(|scored| auc(&scored).ok())?
                        .unwrap_or(f64::NAN),
                ),
                None => None,
            };
            history.rows.push(HistoryRow {
                epoch,
                stage,
                loss: loss_sum / nb,
                active_fraction: (stage == Stage::Triplet).then_some(active_sum / nb),
                val_auc,
            });
        }
    }
    Ok(TrainOutput { model, history })
}
