//! Independent reference computations shared by the integration tests and the
//! acceptance suite. Everything here is written for clarity, not speed, and
//! shares no code with the library beyond plain data types.
#![allow(dead_code)]

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += eps;
    let mut xm = x.to_vec();
    xm[i] -= eps;
    (f(&xp) - f(&xm)) / (2.0 * eps)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Every `(anchor, positive, negative)` index triple with a shared anchor
/// class, by explicit triple loop.
pub fn enumerate_triplets(labels: &[bool]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..labels.len() {
                if labels[n] != labels[a] {
                    out.push((a, p, n));
                }
            }
        }
    }
    out
}

/// Batch-all sum by triple loop.
pub fn batch_all_oracle(emb: &[Vec<f64>], labels: &[bool], alpha: f64) -> f64 {
    enumerate_triplets(labels)
        .into_iter()
        .map(|(a, p, n)| (sq_dist(&emb[a], &emb[p]) - sq_dist(&emb[a], &emb[n]) + alpha).max(0.0))
        .sum()
}

/// Per-anchor farthest positive and closest negative by linear scan, lowest
/// index on ties.
pub fn hard_selection_oracle(emb: &[Vec<f64>], labels: &[bool]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        let mut best_p: Option<(usize, f64)> = None;
        let mut best_n: Option<(usize, f64)> = None;
        for j in 0..labels.len() {
            let d = sq_dist(&emb[a], &emb[j]);
            if j != a && labels[j] == labels[a] {
                if best_p.map_or(true, |(_, bd)| d > bd) {
                    best_p = Some((j, d));
                }
            } else if labels[j] != labels[a] && best_n.map_or(true, |(_, bd)| d < bd) {
                best_n = Some((j, d));
            }
        }
        out.push((a, best_p.unwrap().0, best_n.unwrap().0));
    }
    out
}

/// Mann-Whitney statistic over all positive/negative pairs, half credit for ties.
pub fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for &(sp, lp) in scores {
        if !lp {
            continue;
        }
        for &(sn, ln) in scores {
            if ln {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Brute-force operating point: tries every candidate threshold (each score
/// and -inf), keeps those meeting the specificity target, and returns
/// `(threshold, recall)` with the highest recall (lowest threshold on ties).
pub fn brute_force_recall_at(scores: &[(f64, bool)], target: f64) -> (f64, f64) {
    let mut candidates: Vec<f64> = scores.iter().map(|s| s.0).collect();
    candidates.push(f64::NEG_INFINITY);
    let n_neg = scores.iter().filter(|s| !s.1).count() as f64;
    let n_pos = scores.iter().filter(|s| s.1).count() as f64;
    let mut best: Option<(f64, f64)> = None;
    for t in candidates {
        let tn = scores.iter().filter(|s| !s.1 && s.0 <= t).count() as f64;
        if tn / n_neg + 1e-12 < target {
            continue;
        }
        let recall = scores.iter().filter(|s| s.1 && s.0 > t).count() as f64 / n_pos;
        best = match best {
            Some((bt, br)) if br > recall || (br == recall && bt <= t) => Some((bt, br)),
            _ => Some((t, recall)),
        };
    }
    best.unwrap()
}

/// CAM by per-pixel loops: `Σ_k w_k · f_k(x, y)`.
pub fn cam_oracle(maps: &[f64], k: usize, h: usize, w: usize, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for c in 0..k {
                acc += weights[c] * maps[(c * h + y) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose ±eps segment crosses a kink of a piecewise function.
    pub excluded: usize,
    pub max_relative_error: f64,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
    }
}

/// Compares `analytic[i]` against the central difference at `eps` for every
/// `i` in `coords`. A coordinate is excluded when the differences at `eps` and
/// `eps / 2` disagree: for functions that are piecewise linear or quadratic
/// the two agree to rounding unless the segment crosses a kink, where no
/// finite difference is meaningful.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    for &i in coords {
        let fd = central_difference(f, x, i, eps);
        let fd_half = central_difference(f, x, i, eps / 2.0);
        if relative_error(fd, fd_half, 1e-6) > 1e-5 {
            out.excluded += 1;
            continue;
        }
        out.checked += 1;
        out.max_relative_error = out.max_relative_error.max(relative_error(analytic[i], fd, 1e-6));
    }
    out
}
