use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest, Result};
use crate::types::{child_seed, ProcedureId};

/// Procedure-disjoint k-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<ProcedureId>>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[ProcedureId] {
        &self.folds[fold]
    }

    pub fn train(&self, fold: usize) -> Vec<ProcedureId> {
        let mut out: Vec<ProcedureId> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn fold_of(&self, procedure: ProcedureId) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&procedure))
    }
}

/// Splits procedures into `k` folds. Event-bearing and event-free procedures
/// are shuffled separately and dealt round-robin, so every fold gets at least
/// one event-bearing procedure and fold sizes differ by at most one.
pub fn split_by_procedure(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(DataError::Split(format!("need at least 2 folds, got {k}")));
    }
    let n = manifest.procedures.len();
    if n < k {
        return Err(DataError::Split(format!("{n} procedures cannot fill {k} folds")));
    }
    let (mut with, mut without): (Vec<ProcedureId>, Vec<ProcedureId>) = manifest
        .procedures
        .iter()
        .map(|p| p.procedure_id)
        .partition(|&id| manifest.procedures[id as usize].has_events());
    if with.len() < k {
        return Err(DataError::Split(format!(
            "{} event-bearing procedures cannot cover {k} folds",
            with.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[17]));
    with.shuffle(&mut rng);
    without.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in with.iter().enumerate() {
        folds[i % k].push(*id);
    }
    let offset = with.len() % k;
    for (i, id) in without.iter().enumerate() {
        folds[(offset + i) % k].push(*id);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldAssignment { folds })
}
