//! Reproducible synthetic "procedures": long sequences of mostly negative
//! frames with rare localized events, each event visible in a run of
//! consecutive frames with a per-frame pixel mask.
//!
//! Generation happens in two steps. [`plan_dataset`] draws the manifest
//! (which procedures carry events, how many, how long, which size and
//! morphology) and is cheap; [`generate_dataset`] additionally renders every
//! frame. Each procedure renders from its own child seed, so rendering is
//! parallel and order independent.

mod augment;
mod io;
mod render;
mod split;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::types::{child_seed, EventId, FrameRef, Label, Morphology, ProcedureId, SizeClass};

pub use augment::{augment, augment_with_mask, AugmentParams};
pub use io::{load_dataset, write_dataset};
pub use render::{Mask, SIZE_AREA_BANDS};
pub use split::{split_by_procedure, FoldAssignment};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("frame size {frame_size} is too small to render {class} events (needs at least {needed})")]
    FrameTooSmall {
        class: &'static str,
        needed: usize,
        frame_size: usize,
    },
    #[error("cannot split: {0}")]
    Split(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Pnm(#[from] crate::pnm::PnmError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One histogram bin: counts in `lo..=hi` drawn uniformly, with mass `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountBin {
    pub lo: u32,
    pub hi: u32,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountHistogram(pub Vec<CountBin>);

impl CountHistogram {
    /// Bins from `(lo, hi, weight)` rows, normalized to probabilities.
    pub fn from_counts(rows: &[(u32, u32, f64)]) -> Self {
        let total: f64 = rows.iter().map(|r| r.2).sum();
        Self(
            rows.iter()
                .map(|&(lo, hi, w)| CountBin { lo, hi, p: w / total })
                .collect(),
        )
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(DataError::Config(format!("{name} is empty")));
        }
        for b in &self.0 {
            if b.lo == 0 || b.lo > b.hi || !(b.p >= 0.0) {
                return Err(DataError::Config(format!("{name} has an invalid bin {b:?}")));
            }
        }
        let sum: f64 = self.0.iter().map(|b| b.p).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("{name} sums to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let last = self.0.len() - 1;
        for (i, b) in self.0.iter().enumerate() {
            acc += b.p;
            if u < acc || i == last {
                return rng.gen_range(b.lo..=b.hi);
            }
        }
        unreachable!()
    }

    /// Probability of drawing exactly `count`.
    pub fn probability_of(&self, count: u32) -> f64 {
        self.0
            .iter()
            .filter(|b| (b.lo..=b.hi).contains(&count))
            .map(|b| b.p / f64::from(b.hi - b.lo + 1))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|b| b.p * f64::from(b.lo + b.hi) / 2.0).sum()
    }
}

/// Joint distribution over size (rows) and morphology (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeMorphologyMix(pub [[f64; 3]; 3]);

impl SizeMorphologyMix {
    pub fn from_counts(counts: [[f64; 3]; 3]) -> Self {
        let total: f64 = counts.iter().flatten().sum();
        Self(counts.map(|row| row.map(|c| c / total)))
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().flatten().any(|p| !(*p >= 0.0)) {
            return Err(DataError::Config("size_morphology_mix has a negative entry".into()));
        }
        let sum: f64 = self.0.iter().flatten().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("size_morphology_mix sums to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn probability(&self, size: SizeClass, morphology: Morphology) -> f64 {
        self.0[size as usize][morphology as usize]
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (SizeClass, Morphology) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for s in SizeClass::ALL {
            for m in Morphology::ALL {
                acc += self.probability(s, m);
                if u < acc {
                    return (s, m);
                }
            }
        }
        // rounding slack: last class with nonzero mass
        SizeClass::ALL
            .iter()
            .flat_map(|&s| Morphology::ALL.iter().map(move |&m| (s, m)))
            .filter(|&(s, m)| self.probability(s, m) > 0.0)
            .last()
            .unwrap_or((SizeClass::Small, Morphology::Sessile))
    }

    fn has_size(&self, size: SizeClass) -> bool {
        self.0[size as usize].iter().any(|&p| p > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_procedures: usize,
    /// Fraction of procedures carrying at least one event; the count is
    /// `round(frac_with_events · num_procedures)`.
    pub frac_with_events: f64,
    /// Events per event-bearing procedure (counts ≥ 1).
    pub events_per_procedure_dist: CountHistogram,
    pub frames_per_event_dist: CountHistogram,
    pub size_morphology_mix: SizeMorphologyMix,
    pub negative_frames_per_procedure: usize,
    pub frame_size: usize,
    pub channels: usize,
    /// Share of negative frames that receive a polyp-like distractor.
    pub distractor_rate: f64,
    pub seed: u64,
}

/// Procedures by number of annotated events: 0:68 1:17 2:11 3:8 4:3 5:5 6:3 7:2 11:3.
const EVENTS_PER_PROCEDURE: [(u32, u32, f64); 8] = [
    (1, 1, 17.0),
    (2, 2, 11.0),
    (3, 3, 8.0),
    (4, 4, 3.0),
    (5, 5, 5.0),
    (6, 6, 3.0),
    (7, 7, 2.0),
    (11, 11, 3.0),
];

/// Size × morphology counts (rows small/medium/large, columns
/// sessile/pedunculated/undefined).
const SIZE_MORPHOLOGY: [[f64; 3]; 3] = [[65.0, 4.0, 19.0], [29.0, 4.0, 20.0], [8.0, 3.0, 13.0]];

impl Default for GeneratorConfig {
    /// Desk-scale defaults: 40 procedures, the clinical per-procedure and
    /// size/morphology tables, frame runs compressed about threefold, and
    /// roughly 100 negatives per positive frame.
    fn default() -> Self {
        Self {
            num_procedures: 40,
            frac_with_events: 52.0 / 120.0,
            events_per_procedure_dist: CountHistogram::from_counts(&EVENTS_PER_PROCEDURE),
            frames_per_event_dist: CountHistogram::from_counts(&[
                (1, 1, 33.0),
                (1, 2, 32.0),
                (2, 2, 20.0),
                (3, 4, 19.0),
                (4, 7, 31.0),
                (7, 14, 30.0),
            ]),
            size_morphology_mix: SizeMorphologyMix::from_counts(SIZE_MORPHOLOGY),
            negative_frames_per_procedure: 550,
            frame_size: 32,
            channels: 3,
            distractor_rate: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Clinical-scale tables as published: 120 procedures, frame runs 1-2,
    /// 3-4, 5-6, 7-10, 11-20 and 21+ (taken as 21-60).
    pub fn clinical_tables() -> Self {
        Self {
            num_procedures: 120,
            frames_per_event_dist: CountHistogram::from_counts(&[
                (1, 2, 33.0),
                (3, 4, 32.0),
                (5, 6, 20.0),
                (7, 10, 19.0),
                (11, 20, 31.0),
                (21, 60, 30.0),
            ]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_procedures < 2 {
            return Err(DataError::Config(format!(
                "num_procedures must be at least 2, got {}",
                self.num_procedures
            )));
        }
        if !(0.0..=1.0).contains(&self.frac_with_events) {
            return Err(DataError::Config(format!(
                "frac_with_events must lie in [0, 1], got {}",
                self.frac_with_events
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(DataError::Config(format!(
                "distractor_rate must lie in [0, 1], got {}",
                self.distractor_rate
            )));
        }
        if self.channels != 3 {
            return Err(DataError::Config(format!("channels must be 3, got {}", self.channels)));
        }
        if self.negative_frames_per_procedure == 0 {
            return Err(DataError::Config("negative_frames_per_procedure must be positive".into()));
        }
        if self.frame_size < 16 {
            return Err(DataError::Config(format!("frame_size must be at least 16, got {}", self.frame_size)));
        }
        self.events_per_procedure_dist.validate("events_per_procedure_dist")?;
        self.frames_per_event_dist.validate("frames_per_event_dist")?;
        self.size_morphology_mix.validate()?;
        for class in SizeClass::ALL.iter().rev() {
            let needed = render::required_frame_size(*class);
            if self.size_morphology_mix.has_size(*class) && self.frame_size < needed {
                return Err(DataError::FrameTooSmall {
                    class: class.name(),
                    needed,
                    frame_size: self.frame_size,
                });
            }
        }
        Ok(())
    }

    pub fn event_bearing_count(&self) -> usize {
        (self.frac_with_events * self.num_procedures as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureInfo {
    pub procedure_id: ProcedureId,
    pub event_ids: Vec<EventId>,
    /// Label of every frame, indexed by frame index.
    pub labels: Vec<Label>,
    /// Negative frames that carry a distractor.
    pub distractor_frames: Vec<u32>,
}

impl ProcedureInfo {
    pub fn num_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn has_events(&self) -> bool {
        !self.event_ids.is_empty()
    }

    pub fn frames_with(&self, label: Label) -> impl Iterator<Item = FrameRef> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, l)| **l == label)
            .map(|(i, _)| FrameRef::new(self.procedure_id, i as u32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub event_id: EventId,
    pub procedure_id: ProcedureId,
    /// Consecutive frame indices where the event is visible.
    pub frame_indices: Vec<u32>,
    pub size_class: SizeClass,
    pub morphology_class: Morphology,
    /// Mask pixel count per frame (masks themselves live in `masks`).
    pub mask_areas: Vec<u32>,
    #[serde(skip)]
    pub masks: Vec<Mask>,
}

impl EventAnnotation {
    pub fn frames(&self) -> impl Iterator<Item = FrameRef> + '_ {
        self.frame_indices.iter().map(|&f| FrameRef::new(self.procedure_id, f))
    }

    pub fn mask_for(&self, frame_index: u32) -> Option<&Mask> {
        let pos = self.frame_indices.iter().position(|&f| f == frame_index)?;
        self.masks.get(pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub frame_size: usize,
    pub channels: usize,
    pub procedures: Vec<ProcedureInfo>,
    pub events: Vec<EventAnnotation>,
}

impl DatasetManifest {
    pub fn procedure(&self, id: ProcedureId) -> Option<&ProcedureInfo> {
        self.procedures.get(id as usize).filter(|p| p.procedure_id == id)
    }

    pub fn event_bearing(&self) -> usize {
        self.procedures.iter().filter(|p| p.has_events()).count()
    }

    pub fn label(&self, frame: FrameRef) -> Option<Label> {
        self.procedure(frame.procedure_id)?
            .labels
            .get(frame.frame_index as usize)
            .copied()
    }

    pub fn event(&self, id: EventId) -> Option<&EventAnnotation> {
        self.events.get(id as usize).filter(|e| e.event_id == id)
    }

    /// Event covering a frame, if any.
    pub fn event_of(&self, frame: FrameRef) -> Option<EventId> {
        let proc = self.procedure(frame.procedure_id)?;
        proc.event_ids.iter().copied().find(|&e| {
            self.events[e as usize].frame_indices.contains(&frame.frame_index)
        })
    }

    /// Frame → event lookup for every positive frame.
    pub fn event_index(&self) -> BTreeMap<FrameRef, EventId> {
        self.events
            .iter()
            .flat_map(|e| e.frames().map(move |f| (f, e.event_id)))
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.procedures.iter().map(|p| p.frames_with(Label::Positive).count()).sum()
    }

    pub fn negative_count(&self) -> usize {
        self.procedures.iter().map(|p| p.frames_with(Label::Negative).count()).sum()
    }

    /// Checks the structural invariants: labels agree with events, events
    /// reference existing procedures, every event frame has a nonempty mask.
    pub fn validate(&self, require_masks: bool) -> Result<()> {
        for (i, p) in self.procedures.iter().enumerate() {
            if p.procedure_id as usize != i {
                return Err(DataError::Manifest(format!("procedure at position {i} has id {}", p.procedure_id)));
            }
        }
        let mut covered: BTreeMap<FrameRef, EventId> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            if e.event_id as usize != i {
                return Err(DataError::Manifest(format!("event at position {i} has id {}", e.event_id)));
            }
            let proc = self
                .procedure(e.procedure_id)
                .ok_or_else(|| DataError::Manifest(format!("event {} references missing procedure {}", e.event_id, e.procedure_id)))?;
            if !proc.event_ids.contains(&e.event_id) {
                return Err(DataError::Manifest(format!("procedure {} does not list event {}", e.procedure_id, e.event_id)));
            }
            if e.frame_indices.is_empty() {
                return Err(DataError::Manifest(format!("event {} has no frames", e.event_id)));
            }
            if e.mask_areas.len() != e.frame_indices.len() || e.mask_areas.contains(&0) {
                return Err(DataError::Manifest(format!("event {} has an empty or missing mask", e.event_id)));
            }
            if require_masks && (e.masks.len() != e.frame_indices.len() || e.masks.iter().any(|m| m.area() == 0)) {
                return Err(DataError::Manifest(format!("event {} has an empty or missing mask", e.event_id)));
            }
            for f in e.frames() {
                if covered.insert(f, e.event_id).is_some() {
                    return Err(DataError::Manifest(format!("frame {f} belongs to two events")));
                }
            }
        }
        for p in &self.procedures {
            for (i, l) in p.labels.iter().enumerate() {
                let f = FrameRef::new(p.procedure_id, i as u32);
                if l.is_positive() != covered.contains_key(&f) {
                    return Err(DataError::Manifest(format!("label of {f} disagrees with the event annotations")));
                }
            }
        }
        Ok(())
    }
}

/// A decoded frame, `channels × size × size` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame: FrameRef,
    pub pixels: Tensor,
}

impl Frame {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Quantized pixel storage: 8 bits per sample, channel-major per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStore {
    frame_size: usize,
    channels: usize,
    procedures: Vec<Vec<u8>>,
}

impl FrameStore {
    pub(crate) fn new(frame_size: usize, channels: usize, procedures: Vec<Vec<u8>>) -> Self {
        Self {
            frame_size,
            channels,
            procedures,
        }
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.frame_size * self.frame_size
    }

    pub fn raw(&self, frame: FrameRef) -> &[u8] {
        let n = self.frame_len();
        let start = frame.frame_index as usize * n;
        &self.procedures[frame.procedure_id as usize][start..start + n]
    }

    pub fn frame(&self, frame: FrameRef) -> Frame {
        let data = self.raw(frame).iter().map(|&b| f64::from(b) / 255.0).collect();
        Frame {
            frame,
            pixels: Tensor::new(vec![self.channels, self.frame_size, self.frame_size], data)
                .expect("stored frames have a fixed size"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub store: FrameStore,
}

impl Dataset {
    pub fn frame(&self, frame: FrameRef) -> Frame {
        self.store.frame(frame)
    }

    /// `(procedure, frame)` pairs together with their labels, for a set of procedures.
    pub fn frames_of(&self, procedures: &[ProcedureId]) -> Vec<(FrameRef, Label)> {
        procedures
            .iter()
            .filter_map(|&p| self.manifest.procedure(p))
            .flat_map(|p| {
                p.labels
                    .iter()
                    .enumerate()
                    .map(move |(i, &l)| (FrameRef::new(p.procedure_id, i as u32), l))
            })
            .collect()
    }
}

/// Draws the manifest (structure, labels, event classes) without rendering.
pub fn plan_dataset(config: &GeneratorConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[0]));
    let mut ids: Vec<ProcedureId> = (0..config.num_procedures as ProcedureId).collect();
    ids.shuffle(&mut rng);
    let mut bearing = ids[..config.event_bearing_count()].to_vec();
    bearing.sort_unstable();

    struct PlannedEvent {
        procedure: ProcedureId,
        frames: u32,
        size: SizeClass,
        morphology: Morphology,
    }
    let mut planned = Vec::new();
    for &p in &bearing {
        let n = config.events_per_procedure_dist.sample(&mut rng);
        for _ in 0..n {
            let frames = config.frames_per_event_dist.sample(&mut rng);
            let (size, morphology) = config.size_morphology_mix.sample(&mut rng);
            planned.push(PlannedEvent {
                procedure: p,
                frames,
                size,
                morphology,
            });
        }
    }

    let mut events: Vec<EventAnnotation> = Vec::with_capacity(planned.len());
    let mut procedures = Vec::with_capacity(config.num_procedures);
    for pid in 0..config.num_procedures as ProcedureId {
        let mut prng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[1, u64::from(pid)]));
        // Items are single negative frames (None) or whole event runs (Some).
        let mut items: Vec<Option<usize>> = vec![None; config.negative_frames_per_procedure];
        let first_event = events.len();
        for (k, e) in planned.iter().filter(|e| e.procedure == pid).enumerate() {
            events.push(EventAnnotation {
                event_id: (first_event + k) as EventId,
                procedure_id: pid,
                frame_indices: Vec::with_capacity(e.frames as usize),
                size_class: e.size,
                morphology_class: e.morphology,
                mask_areas: Vec::new(),
                masks: Vec::new(),
            });
            items.push(Some(first_event + k));
        }
        items.shuffle(&mut prng);
        let mut labels = Vec::new();
        let mut distractor_frames = Vec::new();
        for item in items {
            match item {
                None => {
                    if prng.gen_bool(config.distractor_rate) {
                        distractor_frames.push(labels.len() as u32);
                    }
                    labels.push(Label::Negative);
                }
                Some(e) => {
                    let frames = planned[e].frames;
                    for _ in 0..frames {
                        events[e].frame_indices.push(labels.len() as u32);
                        labels.push(Label::Positive);
                    }
                }
            }
        }
        procedures.push(ProcedureInfo {
            procedure_id: pid,
            event_ids: (first_event..events.len()).map(|e| e as EventId).collect(),
            labels,
            distractor_frames,
        });
    }
    Ok(DatasetManifest {
        seed: config.seed,
        frame_size: config.frame_size,
        channels: config.channels,
        procedures,
        events,
    })
}

/// Plans and renders a full dataset. Deterministic in `config.seed`.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    let mut manifest = plan_dataset(config)?;
    let rendered: Vec<render::RenderedProcedure> = manifest
        .procedures
        .par_iter()
        .map(|p| render::render_procedure(config, &manifest, p))
        .collect();
    let mut pixels = Vec::with_capacity(rendered.len());
    for r in rendered {
        for (event_id, masks) in r.masks {
            let e = &mut manifest.events[event_id as usize];
            e.mask_areas = masks.iter().map(|m| m.area() as u32).collect();
            e.masks = masks;
        }
        pixels.push(r.pixels);
    }
    manifest.validate(true)?;
    Ok(Dataset {
        store: FrameStore::new(config.frame_size, config.channels, pixels),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_procedures: 6,
            frac_with_events: 0.5,
            negative_frames_per_procedure: 20,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
        GeneratorConfig::clinical_tables().validate().unwrap();
        let mix = &GeneratorConfig::default().size_morphology_mix;
        assert!((mix.probability(SizeClass::Small, Morphology::Sessile) - 65.0 / 165.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config(0);
        c.num_procedures = 1;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.frames_per_event_dist.0[0].p += 0.01;
        assert!(c.validate().unwrap_err().to_string().contains("frames_per_event_dist"));
        let mut c = small_config(0);
        c.frame_size = 12;
        assert!(c.validate().is_err());
    }

    #[test]
    fn frame_too_small_names_class() {
        let mut c = small_config(0);
        c.frame_size = 20;
        let err = c.validate().unwrap_err();
        assert!(matches!(err, DataError::FrameTooSmall { class: "large", .. }), "{err}");
        // without large events the same frame size may still be too small for medium ones
        c.size_morphology_mix = SizeMorphologyMix::from_counts([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]]);
        let needed = render::required_frame_size(SizeClass::Medium);
        if needed > 20 {
            assert!(matches!(c.validate().unwrap_err(), DataError::FrameTooSmall { class: "medium", .. }));
        } else {
            c.validate().unwrap();
        }
    }

    #[test]
    fn no_events_means_all_negative() {
        let mut c = small_config(3);
        c.frac_with_events = 0.0;
        let d = generate_dataset(&c).unwrap();
        assert!(d.manifest.events.is_empty());
        assert_eq!(d.manifest.positive_count(), 0);
        assert_eq!(d.manifest.negative_count(), 6 * 20);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_config(11)).unwrap();
        let b = generate_dataset(&small_config(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_config(12)).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn labels_match_masks() {
        let d = generate_dataset(&small_config(5)).unwrap();
        d.manifest.validate(true).unwrap();
        assert_eq!(d.manifest.event_bearing(), 3);
        for e in &d.manifest.events {
            let runs: Vec<u32> = e.frame_indices.windows(2).map(|w| w[1] - w[0]).collect();
            assert!(runs.iter().all(|&r| r == 1), "event frames are consecutive");
            for (m, &f) in e.masks.iter().zip(&e.frame_indices) {
                let (lo, hi) = SIZE_AREA_BANDS[e.size_class as usize];
                assert!((lo..=hi).contains(&m.area()), "{:?} area {}", e.size_class, m.area());
                assert_eq!(d.manifest.label(FrameRef::new(e.procedure_id, f)), Some(Label::Positive));
            }
        }
    }

    #[test]
    fn histogram_sampling_and_probabilities() {
        let h = CountHistogram::from_counts(&[(1, 2, 1.0), (5, 5, 3.0)]);
        assert!((h.probability_of(1) - 0.125).abs() < 1e-15);
        assert!((h.probability_of(5) - 0.75).abs() < 1e-15);
        assert_eq!(h.probability_of(3), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!([1, 2, 5].contains(&h.sample(&mut rng)));
        }
    }
}
