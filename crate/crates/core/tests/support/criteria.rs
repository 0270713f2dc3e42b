//! Property checks shared by the integration tests and the acceptance suite.
//! Each returns a verdict with a one-line summary of what was measured.
#![allow(dead_code)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rarevent_core::cam::compute_cam;
use rarevent_core::evaluator::{auc, recall_at_specificity, ScoredFrame};
use rarevent_core::losses::{batch_all_loss, batch_hard_loss, triplet_term, EmbeddingBatch, Margin};
use rarevent_core::synthdata::{plan_dataset, split_by_procedure, CountHistogram, GeneratorConfig};
use rarevent_core::types::Label;

use super::gradients::{check_layer_kind, check_loss, LAYER_KINDS, LOSSES};
use super::oracles::{
    batch_all_oracle, brute_force_recall_at, cam_oracle, enumerate_triplets, hard_selection_oracle, pairwise_auc,
    sq_dist,
};

#[derive(Debug, Clone)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub const MARGINS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

fn labels_of(flags: &[bool]) -> Vec<Label> {
    flags.iter().map(|&b| Label::from_bool(b)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, k0: usize, k1: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut flags: Vec<bool> = (0..k0 + k1).map(|i| i >= k0).collect();
    for i in (1..flags.len()).rev() {
        flags.swap(i, rng.gen_range(0..=i));
    }
    let emb = (0..k0 + k1).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (emb, flags)
}

fn to_batch(emb: &[Vec<f64>], flags: &[bool]) -> EmbeddingBatch {
    EmbeddingBatch::new(emb.concat(), emb[0].len(), labels_of(flags)).expect("well-formed batch")
}

pub fn gradient_correctness(instances: u64) -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut checked = 0;
    for kind in LAYER_KINDS {
        let r = check_layer_kind(kind, instances);
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
        if r.checked == 0 || r.max_relative_error >= 1e-4 || r.excluded * 20 > r.checked {
            failures.push(format!("{kind} {r:?}"));
        }
    }
    for loss in LOSSES {
        let r = check_loss(loss, instances);
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
        if r.checked == 0 || r.max_relative_error >= 1e-4 || r.excluded * 20 > r.checked {
            failures.push(format!("{loss} {r:?}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        failures.is_empty() && secs < 60.0,
        format!(
            "{} layer kinds + {} losses, {checked} coordinates, max rel err {worst:.2e}, {secs:.1}s{}",
            LAYER_KINDS.len(),
            LOSSES.len(),
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join("; ")) }
        ),
    )
}

pub fn triplet_count_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = Vec::new();
    for k0 in 2..=6 {
        for k1 in 2..=6 {
            let expected = k0 * k1 * (k0 + k1 - 2);
            let (emb, flags) = random_batch(&mut rng, k0, k1, 3);
            let enumerated = enumerate_triplets(&flags).len();
            let batch = to_batch(&emb, &flags);
            let counted = batch_all_loss(&batch, Margin::default()).unwrap().triplet_count;
            if enumerated != expected || counted != expected || batch.triplet_count() != expected {
                bad.push(format!("({k0},{k1}): enumerated {enumerated}, loss {counted}, expected {expected}"));
            }
        }
    }
    Verdict::new(bad.is_empty(), if bad.is_empty() { "25 class-count pairs".into() } else { bad.join("; ") })
}

pub fn mining_oracle(batches: usize) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut selection_mismatch = 0;
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let (k0, k1, dim) = (rng.gen_range(2..=10), rng.gen_range(2..=10), rng.gen_range(1..=8));
        let (emb, flags) = random_batch(&mut rng, k0, k1, dim);
        let alpha = MARGINS[rng.gen_range(0..MARGINS.len())];
        let batch = to_batch(&emb, &flags);
        let margin = Margin::new(alpha).unwrap();
        let hard = batch_hard_loss(&batch, margin).unwrap();
        let got: Vec<(usize, usize, usize)> = hard.selections.iter().map(|s| (s.anchor, s.positive, s.negative)).collect();
        if got != hard_selection_oracle(&emb, &flags) {
            selection_mismatch += 1;
        }
        let all = batch_all_loss(&batch, margin).unwrap().loss;
        worst = worst.max((all - batch_all_oracle(&emb, &flags, alpha)).abs());
    }
    Verdict::new(
        selection_mismatch == 0 && worst <= 1e-12,
        format!("{batches} batches, hard-selection mismatches {selection_mismatch}, batch-all max |diff| {worst:.1e}"),
    )
}

pub fn hinge_condition(samples: usize) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut zeros = 0;
    for _ in 0..samples {
        let dim = rng.gen_range(1..=6);
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        for alpha in MARGINS {
            let term = triplet_term(&v[0], &v[1], &v[2], Margin::new(alpha).unwrap()).unwrap();
            let satisfied = sq_dist(&v[0], &v[1]) + alpha <= sq_dist(&v[0], &v[2]);
            zeros += usize::from(term == 0.0);
            if (term == 0.0) != satisfied {
                violations += 1;
            }
        }
    }
    // exact boundary: 0.5 + 0.5 == 1.0 and 0 + 1.0 == 1.0 in binary floating point
    let boundary = [
        (vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 0.0], 0.5),
        (vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0], 1.0),
    ];
    for (a, p, n, alpha) in boundary {
        if triplet_term(&a, &p, &n, Margin::new(alpha).unwrap()).unwrap() != 0.0 {
            violations += 1;
        }
    }
    Verdict::new(
        violations == 0 && zeros > 0,
        format!("{samples} random triplets × {} margins ({zeros} satisfied) + 2 exact boundary cases, {violations} violations", MARGINS.len()),
    )
}

fn scored(scores: &[(f64, bool)]) -> Vec<ScoredFrame> {
    scores.iter().map(|&(s, l)| ScoredFrame::bare(s, Label::from_bool(l))).collect()
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.gen_range(4..=200);
    let levels = rng.gen_range(2..=20);
    let mut out: Vec<(f64, bool)> = (0..n)
        .map(|_| (rng.gen_range(0..levels) as f64 / levels as f64, rng.gen_bool(0.3)))
        .collect();
    out[0].1 = true;
    out[1].1 = false;
    out
}

pub fn auc_oracle(sets: usize) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_transform = 0.0f64;
    let transforms: [fn(f64) -> f64; 3] = [|x| (3.0 * x).exp(), |x| x * x * x + x, |x| 1.0 / (1.0 + (-10.0 * (x - 0.5)).exp())];
    for _ in 0..sets {
        let s = random_scores(&mut rng);
        let a = auc(&scored(&s)).unwrap();
        worst = worst.max((a - pairwise_auc(&s)).abs());
        for t in transforms {
            let moved: Vec<(f64, bool)> = s.iter().map(|&(x, l)| (t(x), l)).collect();
            worst_transform = worst_transform.max((auc(&scored(&moved)).unwrap() - a).abs());
        }
    }
    Verdict::new(
        worst <= 1e-9 && worst_transform == 0.0,
        format!("{sets} tied score sets, max |auc − pairwise| {worst:.1e}, max change under monotone maps {worst_transform:.1e}"),
    )
}

/// The hand-built list: ten negatives at 0.0..0.9 and positives at 0.85 and 0.55.
pub fn hand_list() -> Vec<(f64, bool)> {
    let mut s: Vec<(f64, bool)> = (0..10).map(|i| (i as f64 / 10.0, false)).collect();
    s.push((0.85, true));
    s.push((0.55, true));
    s
}

pub const TARGETS: [f64; 3] = [0.80, 0.90, 0.95];

pub fn recall_at_specificity_checks(random_lists: usize) -> Verdict {
    let mut problems = Vec::new();
    let hand = hand_list();
    for target in TARGETS {
        let op = recall_at_specificity(&scored(&hand), target).unwrap();
        let (t, r) = brute_force_recall_at(&hand, target);
        if op.threshold != t || op.recall != r {
            problems.push(format!("hand list @{target}: got ({}, {}), oracle ({t}, {r})", op.threshold, op.recall));
        }
    }
    let at90 = recall_at_specificity(&scored(&hand), 0.90).unwrap();
    if at90.threshold != 0.8 || at90.recall != 0.5 {
        problems.push(format!("hand list @0.90: ({}, {})", at90.threshold, at90.recall));
    }
    let perfect = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
    for target in TARGETS {
        if recall_at_specificity(&scored(&perfect), target).unwrap().recall != 1.0 {
            problems.push(format!("perfect classifier @{target}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut increases = 0;
    for _ in 0..random_lists {
        let s = scored(&random_scores(&mut rng));
        let recalls: Vec<f64> = TARGETS.iter().map(|&t| recall_at_specificity(&s, t).unwrap().recall).collect();
        if recalls.windows(2).any(|w| w[1] > w[0]) {
            increases += 1;
        }
        for (i, &t) in TARGETS.iter().enumerate() {
            let raw: Vec<(f64, bool)> = s.iter().map(|f| (f.score, f.label.is_positive())).collect();
            if brute_force_recall_at(&raw, t).1 != recalls[i] {
                problems.push(format!("random list disagrees with oracle at {t}"));
            }
        }
    }
    if increases > 0 {
        problems.push(format!("{increases} lists with recall rising with the target"));
    }
    Verdict::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("hand list at {TARGETS:?} matches brute force (0.90 → 0.5 at 0.8), {random_lists} random lists monotone")
        } else {
            problems.join("; ")
        },
    )
}

/// A small random generator config: enough event-bearing procedures for `k` folds.
pub fn random_config(rng: &mut ChaCha8Rng, k: usize) -> GeneratorConfig {
    let n = rng.gen_range(k..=60);
    let with_events = rng.gen_range(k..=n);
    GeneratorConfig {
        num_procedures: n,
        frac_with_events: with_events as f64 / n as f64,
        events_per_procedure_dist: CountHistogram::from_counts(&[(1, 1, 3.0), (2, 3, 1.0)]),
        frames_per_event_dist: CountHistogram::from_counts(&[(1, 4, 1.0)]),
        negative_frames_per_procedure: rng.gen_range(1..=5),
        seed: rng.gen(),
        ..GeneratorConfig::default()
    }
}

pub fn leakage_freedom(splits: usize) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut leaks = 0;
    let mut uncovered = 0;
    let mut unbalanced = 0;
    for _ in 0..splits {
        let cfg = random_config(&mut rng, 5);
        let manifest = plan_dataset(&cfg).expect("valid random config");
        let split = split_by_procedure(&manifest, 5, rng.gen()).expect("enough event-bearing procedures");
        let mut seen = vec![0usize; manifest.procedures.len()];
        for f in 0..5 {
            for &p in split.test(f) {
                seen[p as usize] += 1;
            }
            if split.train(f).iter().any(|p| split.test(f).contains(p)) {
                leaks += 1;
            }
        }
        leaks += seen.iter().filter(|&&c| c > 1).count();
        uncovered += seen.iter().filter(|&&c| c == 0).count();
        let bearing: Vec<usize> = (0..5)
            .map(|f| split.test(f).iter().filter(|&&p| manifest.procedures[p as usize].has_events()).count())
            .collect();
        if bearing.iter().max().unwrap() - bearing.iter().min().unwrap() > 1 {
            unbalanced += 1;
        }
    }
    Verdict::new(
        leaks == 0 && uncovered == 0 && unbalanced == 0,
        format!("{splits} splits: {leaks} shared procedures, {uncovered} unassigned, {unbalanced} unbalanced"),
    )
}

pub fn cam_exactness(instances: usize) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = 0.0f64;
    let mut linear = 0.0f64;
    for _ in 0..instances {
        let (k, h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let maps: Vec<f64> = (0..k * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w1: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let shape = [k, h, w];
        let c1 = compute_cam(&maps, &shape, &w1).unwrap();
        let c2 = compute_cam(&maps, &shape, &w2).unwrap();
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let cm = compute_cam(&maps, &shape, &mixed).unwrap();
        for (i, v) in cam_oracle(&maps, k, h, w, &w1).into_iter().enumerate() {
            exact = exact.max((c1[i] - v).abs());
            linear = linear.max((cm[i] - (a * c1[i] + b * c2[i])).abs());
        }
    }
    Verdict::new(
        exact <= 1e-12 && linear <= 1e-12,
        format!("{instances} random stacks, max |cam − loops| {exact:.1e}, max linearity gap {linear:.1e}"),
    )
}
