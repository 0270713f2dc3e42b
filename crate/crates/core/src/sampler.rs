//! Batch composition for imbalanced training. An epoch is one pass over the
//! positive training frames; negatives are drawn per batch, stratified by
//! procedure so that long procedures do not dominate.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::DatasetManifest;
use crate::types::{FrameRef, Label, ProcedureId};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid batch plan: {0}")]
    Plan(String),
    #[error("training pool has no positive frames")]
    NoPositives,
    #[error("need negatives from at least 2 procedures, found {0}")]
    TooFewNegativeProcedures(usize),
    #[error("batch needs {needed} distinct negatives but the pool has {available}")]
    TooFewNegatives { needed: usize, available: usize },
    #[error("imbalance degree {degree} needs {needed} negatives; the pool has {available} (ratio {ratio:.2})")]
    Degree {
        degree: f64,
        needed: usize,
        available: usize,
        ratio: f64,
    },
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// How batches mix the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassBalance {
    /// Every full batch holds the planned positive count.
    #[default]
    Fixed,
    /// Batches are uniform draws from the pool and follow its class ratio.
    /// The batch count per epoch matches the fixed plan, so both modes
    /// take the same number of steps.
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub augment: bool,
    pub balance: ClassBalance,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            positive_fraction: 0.2,
            augment: true,
            balance: ClassBalance::Fixed,
        }
    }
}

impl BatchPlan {
    pub fn positives_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.positive_fraction).round() as usize
    }

    pub fn negatives_per_batch(&self) -> usize {
        self.batch_size - self.positives_per_batch()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(SamplerError::Plan(format!(
                "positive_fraction must lie in [0, 1], got {}",
                self.positive_fraction
            )));
        }
        let p = self.positives_per_batch();
        if p < 2 {
            return Err(SamplerError::Plan(format!(
                "{p} positives per batch; at least 2 are needed to form triplets"
            )));
        }
        if self.negatives_per_batch() < 2 {
            return Err(SamplerError::Plan(format!(
                "{} negatives per batch; no valid triplet is possible",
                self.negatives_per_batch()
            )));
        }
        Ok(())
    }
}

/// Training frames grouped for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPool {
    positives: Vec<FrameRef>,
    /// Negative frames per procedure; procedures without negatives are absent.
    negatives: Vec<(ProcedureId, Vec<FrameRef>)>,
}

impl TrainPool {
    pub fn new(positives: Vec<FrameRef>, negatives: impl IntoIterator<Item = FrameRef>) -> Self {
        let mut grouped: BTreeMap<ProcedureId, Vec<FrameRef>> = BTreeMap::new();
        for f in negatives {
            grouped.entry(f.procedure_id).or_default().push(f);
        }
        Self {
            positives,
            negatives: grouped.into_iter().collect(),
        }
    }

    /// All frames of the given procedures.
    pub fn from_manifest(manifest: &DatasetManifest, procedures: &[ProcedureId]) -> Self {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for &p in procedures {
            if let Some(info) = manifest.procedure(p) {
                positives.extend(info.frames_with(Label::Positive));
                negatives.extend(info.frames_with(Label::Negative));
            }
        }
        Self::new(positives, negatives)
    }

    pub fn positives(&self) -> &[FrameRef] {
        &self.positives
    }

    pub fn negative_groups(&self) -> &[(ProcedureId, Vec<FrameRef>)] {
        &self.negatives
    }

    pub fn negative_count(&self) -> usize {
        self.negatives.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn negatives(&self) -> impl Iterator<Item = FrameRef> + '_ {
        self.negatives.iter().flat_map(|(_, v)| v.iter().copied())
    }

    pub fn contains(&self, frame: FrameRef) -> bool {
        self.positives.contains(&frame)
            || self
                .negatives
                .iter()
                .any(|(p, v)| *p == frame.procedure_id && v.contains(&frame))
    }

    /// Keeps every positive and a uniform subsample of
    /// `round(degree · positives)` negatives.
    pub fn subsample_negatives<R: Rng>(&self, degree: f64, rng: &mut R) -> Result<TrainPool> {
        let available = self.negative_count();
        let p = self.positives.len();
        let needed = (degree * p as f64).round() as usize;
        if needed > available || !(degree > 0.0) {
            return Err(SamplerError::Degree {
                degree,
                needed,
                available,
                ratio: available as f64 / p.max(1) as f64,
            });
        }
        let all: Vec<FrameRef> = self.negatives().collect();
        let mut chosen: Vec<FrameRef> = all.choose_multiple(rng, needed).copied().collect();
        chosen.sort_unstable();
        Ok(TrainPool::new(self.positives.clone(), chosen))
    }

    fn check(&self, plan: &BatchPlan) -> Result<()> {
        plan.validate()?;
        if self.positives.is_empty() {
            return Err(SamplerError::NoPositives);
        }
        if self.negatives.len() < 2 {
            return Err(SamplerError::TooFewNegativeProcedures(self.negatives.len()));
        }
        let available = self.negative_count();
        // the padded last batch needs the most negatives
        let k = plan.positives_per_batch();
        let last = match self.positives.len() % k {
            0 => k,
            r => r,
        };
        let needed = plan.batch_size - last;
        if plan.balance == ClassBalance::Fixed && needed > available {
            return Err(SamplerError::TooFewNegatives { needed, available });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub frames: Vec<(FrameRef, Label)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.frames.iter().filter(|(_, l)| *l == label).count()
    }
}

/// Draws `n` distinct negatives: a procedure uniformly among those with
/// frames left, then a frame uniformly within it.
fn stratified_negatives<R: Rng>(pool: &TrainPool, n: usize, rng: &mut R) -> Vec<FrameRef> {
    let mut live: Vec<usize> = (0..pool.negatives.len()).collect();
    let mut taken: Vec<Vec<bool>> = pool.negatives.iter().map(|(_, v)| vec![false; v.len()]).collect();
    let mut left: Vec<usize> = pool.negatives.iter().map(|(_, v)| v.len()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n && !live.is_empty() {
        let slot = rng.gen_range(0..live.len());
        let g = live[slot];
        let frames = &pool.negatives[g].1;
        // rejection keeps the draw uniform over the frames not yet taken
        let i = loop {
            let i = rng.gen_range(0..frames.len());
            if !taken[g][i] {
                break i;
            }
        };
        taken[g][i] = true;
        left[g] -= 1;
        out.push(frames[i]);
        if left[g] == 0 {
            live.swap_remove(slot);
        }
    }
    out
}

/// One batch holding `positives` plus stratified negatives up to the batch size.
pub fn compose_batch<R: Rng>(pool: &TrainPool, plan: &BatchPlan, positives: &[FrameRef], rng: &mut R) -> Result<Batch> {
    pool.check(plan)?;
    let n_neg = plan.batch_size.saturating_sub(positives.len());
    let negatives = stratified_negatives(pool, n_neg, rng);
    let mut frames: Vec<(FrameRef, Label)> = positives.iter().map(|&f| (f, Label::Positive)).collect();
    frames.extend(negatives.into_iter().map(|f| (f, Label::Negative)));
    Ok(Batch { frames })
}

pub fn batches_per_epoch(pool: &TrainPool, plan: &BatchPlan) -> usize {
    pool.positives.len().div_ceil(plan.positives_per_batch())
}

/// All batches of one epoch. With a fixed balance every positive appears
/// exactly once and the short last batch is padded with negatives.
pub fn epoch_batches(pool: &TrainPool, plan: &BatchPlan, seed: u64) -> Result<Vec<Batch>> {
    pool.check(plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_batches = batches_per_epoch(pool, plan);
    match plan.balance {
        ClassBalance::Fixed => {
            let mut order = pool.positives.clone();
            order.shuffle(&mut rng);
            order
                .chunks(plan.positives_per_batch())
                .map(|chunk| compose_batch(pool, plan, chunk, &mut rng))
                .collect()
        }
        ClassBalance::Natural => {
            let all: Vec<(FrameRef, Label)> = pool
                .positives
                .iter()
                .map(|&f| (f, Label::Positive))
                .chain(pool.negatives().map(|f| (f, Label::Negative)))
                .collect();
            let size = plan.batch_size.min(all.len());
            Ok((0..n_batches)
                .map(|_| Batch {
                    frames: all.choose_multiple(&mut rng, size).copied().collect(),
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(pos: u32, neg_per_proc: &[u32]) -> TrainPool {
        let positives = (0..pos).map(|i| FrameRef::new(0, 10_000 + i)).collect();
        let negatives = neg_per_proc
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |i| FrameRef::new(p as u32, i)));
        TrainPool::new(positives, negatives)
    }

    #[test]
    fn default_plan_counts() {
        let plan = BatchPlan::default();
        assert_eq!(plan.positives_per_batch(), 13);
        assert_eq!(plan.negatives_per_batch(), 51);
        let b = compose_batch(&pool(13, &[40, 40]), &plan, &pool(13, &[]).positives, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.count(Label::Positive), 13);
        assert_eq!(b.count(Label::Negative), 51);
    }

    #[test]
    fn degenerate_plan_rejected() {
        let plan = BatchPlan {
            batch_size: 4,
            positive_fraction: 1.0,
            ..BatchPlan::default()
        };
        assert!(matches!(plan.validate(), Err(SamplerError::Plan(_))));
        let plan = BatchPlan {
            batch_size: 64,
            positive_fraction: 0.01,
            ..BatchPlan::default()
        };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn epoch_structure() {
        let plan = BatchPlan::default();
        let batches = epoch_batches(&pool(26, &[100, 100]), &plan, 1).unwrap();
        assert_eq!(batches.len(), 2);
        let batches = epoch_batches(&pool(30, &[100, 100]), &plan, 1).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].count(Label::Positive), 4);
        assert_eq!(batches[2].count(Label::Negative), 60);
        assert_eq!(batches, epoch_batches(&pool(30, &[100, 100]), &plan, 1).unwrap());
    }

    #[test]
    fn no_duplicates_within_batch() {
        let plan = BatchPlan::default();
        // 51 negatives needed, exactly 52 available: draws must avoid repeats
        let batches = epoch_batches(&pool(39, &[50, 2]), &plan, 9).unwrap();
        for b in batches {
            let mut f: Vec<_> = b.frames.iter().map(|x| x.0).collect();
            f.sort_unstable();
            f.dedup();
            assert_eq!(f.len(), 64);
        }
    }

    #[test]
    fn pool_errors() {
        let plan = BatchPlan::default();
        assert_eq!(epoch_batches(&pool(0, &[100, 100]), &plan, 0).unwrap_err(), SamplerError::NoPositives);
        assert_eq!(
            epoch_batches(&pool(5, &[100]), &plan, 0).unwrap_err(),
            SamplerError::TooFewNegativeProcedures(1)
        );
        assert!(matches!(
            epoch_batches(&pool(13, &[10, 10]), &plan, 0).unwrap_err(),
            SamplerError::TooFewNegatives { .. }
        ));
        // one leftover positive leaves a batch needing 63 negatives
        assert_eq!(
            epoch_batches(&pool(40, &[50, 2]), &plan, 0).unwrap_err(),
            SamplerError::TooFewNegatives { needed: 63, available: 52 }
        );
    }

    #[test]
    fn natural_balance_keeps_step_count() {
        let plan = BatchPlan {
            balance: ClassBalance::Natural,
            ..BatchPlan::default()
        };
        let p = pool(30, &[500, 500]);
        let batches = epoch_batches(&p, &plan, 2).unwrap();
        assert_eq!(batches.len(), 3);
        let positives: usize = batches.iter().map(|b| b.count(Label::Positive)).sum();
        assert!(positives < 15, "natural draws follow the pool ratio, got {positives}");
        assert!(batches.iter().all(|b| b.len() == 64));
    }

    #[test]
    fn subsample_degree() {
        let p = pool(10, &[60, 60]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sub = p.subsample_negatives(1.0, &mut rng).unwrap();
        assert_eq!(sub.negative_count(), 10);
        assert_eq!(sub.positives().len(), 10);
        let err = p.subsample_negatives(25.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("ratio 12.00"), "{err}");
    }
}
