use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result, ScoredFrame};
use crate::synthdata::EventAnnotation;
use crate::types::{EventId, Morphology, SizeClass};

/// One ROC point: rates of `score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

fn class_counts(scored: &[ScoredFrame]) -> (usize, usize) {
    let pos = scored.iter().filter(|s| s.label.is_positive()).count();
    (pos, scored.len() - pos)
}

fn check_scores(scored: &[ScoredFrame]) -> Result<()> {
    if let Some(s) = scored.iter().find(|s| !s.score.is_finite()) {
        return Err(EvalError::NonFiniteScore(s.frame.to_string()));
    }
    Ok(())
}

/// Distinct scores in descending order.
fn descending(scored: &[ScoredFrame]) -> Vec<&ScoredFrame> {
    let mut sorted: Vec<&ScoredFrame> = scored.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    sorted
}

/// ROC over every distinct score used as a threshold, plus `-inf`; the curve
/// runs from `(0, 0)` to `(1, 1)`. AUC is the trapezoidal area, which equals
/// the Mann-Whitney statistic with half credit for ties.
pub fn roc_and_auc(scored: &[ScoredFrame]) -> Result<(RocCurve, f64)> {
    check_scores(scored)?;
    let (p, n) = class_counts(scored);
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass { positives: p, negatives: n });
    }
    let sorted = descending(scored);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
        let (tp0, fp0) = (tp, fp);
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok((RocCurve { points }, auc / (p as f64 * n as f64)))
}

pub fn auc(scored: &[ScoredFrame]) -> Result<f64> {
    Ok(roc_and_auc(scored)?.1)
}

/// Threshold achieving a target specificity with the highest recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_specificity: f64,
    pub threshold: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// Among thresholds (every distinct score and `-inf`) whose specificity is at
/// least `target`, picks the lowest, which maximizes recall.
pub fn recall_at_specificity(scored: &[ScoredFrame], target: f64) -> Result<OperatingPoint> {
    check_scores(scored)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(EvalError::BadTarget(target));
    }
    let (p, n) = class_counts(scored);
    if n == 0 {
        return Err(EvalError::NoNegatives);
    }
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    // walk thresholds from high to low; specificity only falls
    let sorted = descending(scored);
    let need = target * n as f64 - 1e-9;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = None;
    let mut i = 0;
    loop {
        let t = sorted.get(i).map_or(f64::NEG_INFINITY, |s| s.score);
        // frames with score > t are exactly those consumed so far
        let tn = n - fp;
        if (tn as f64) < need {
            break;
        }
        best = Some(OperatingPoint {
            target_specificity: target,
            threshold: t,
            recall: tp as f64 / p as f64,
            specificity: tn as f64 / n as f64,
        });
        if i == sorted.len() {
            break;
        }
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    // the highest threshold always has specificity 1
    Ok(best.expect("the top threshold rejects every frame"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion-matrix rates with `score > threshold` predicted positive. Rates
/// with an empty denominator are reported as 0.
pub fn threshold_metrics(scored: &[ScoredFrame], threshold: f64) -> ThresholdMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for s in scored {
        match (s.score > threshold, s.label.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    ThresholdMetrics {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, scored.len()),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCount {
    pub detected: usize,
    pub total: usize,
}

impl DetectionCount {
    pub fn rate(&self) -> f64 {
        ratio(self.detected, self.total)
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.detected += usize::from(hit);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDetection {
    pub threshold: f64,
    pub detected: Vec<(EventId, bool)>,
    pub overall: DetectionCount,
    /// Indexed like [`SizeClass::ALL`].
    pub by_size: [DetectionCount; 3],
    /// Indexed like [`Morphology::ALL`].
    pub by_morphology: [DetectionCount; 3],
    /// `by_cell[size][morphology]`.
    pub by_cell: [[DetectionCount; 3]; 3],
}

impl EventDetection {
    pub fn size(&self, class: SizeClass) -> DetectionCount {
        self.by_size[class as usize]
    }

    pub fn morphology(&self, class: Morphology) -> DetectionCount {
        self.by_morphology[class as usize]
    }
}

/// An event counts as detected when any of its frames scores above `threshold`.
pub fn event_detection_at(scored: &[ScoredFrame], threshold: f64, events: &[&EventAnnotation]) -> Result<EventDetection> {
    if let Some(s) = scored.iter().find(|s| s.label.is_positive() != s.event_id.is_some()) {
        return Err(EvalError::UnmappedFrame(s.frame.to_string()));
    }
    let mut out = EventDetection {
        threshold,
        detected: Vec::with_capacity(events.len()),
        overall: DetectionCount::default(),
        by_size: Default::default(),
        by_morphology: Default::default(),
        by_cell: Default::default(),
    };
    let mut hit: std::collections::BTreeMap<EventId, bool> = std::collections::BTreeMap::new();
    for s in scored {
        if let Some(e) = s.event_id {
            *hit.entry(e).or_default() |= s.score > threshold;
        }
    }
    for e in events {
        if e.frame_indices.is_empty() {
            return Err(EvalError::EmptyEvent(e.event_id));
        }
        let h = hit.get(&e.event_id).copied().unwrap_or(false);
        out.detected.push((e.event_id, h));
        out.overall.add(h);
        out.by_size[e.size_class as usize].add(h);
        out.by_morphology[e.morphology_class as usize].add(h);
        out.by_cell[e.size_class as usize][e.morphology_class as usize].add(h);
    }
    Ok(out)
}

/// Event detection at the recall@specificity operating point.
pub fn event_detection(scored: &[ScoredFrame], target: f64, events: &[&EventAnnotation]) -> Result<EventDetection> {
    let op = recall_at_specificity(scored, target)?;
    event_detection_at(scored, op.threshold, events)
}
