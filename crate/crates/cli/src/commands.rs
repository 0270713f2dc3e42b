use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rarevent_core::cam::{export_overlay, frame_cams, localize, upsample};
use rarevent_core::evaluator::{
    cross_validate, evaluate_scores, imbalance_sweep, recall_at_specificity, CrossValidation, DetectionCount, MeanStd,
    ScoredFrame,
};
use rarevent_core::nn::{read_checkpoint, write_checkpoint, ModelState};
use rarevent_core::sampler::TrainPool;
use rarevent_core::synthdata::{
    generate_dataset, load_dataset, split_by_procedure, write_dataset, Dataset, EventAnnotation, FoldAssignment,
};
use rarevent_core::trainer::{score_labelled, train, TrainConfig};
use rarevent_core::types::{child_seed, FrameRef, Morphology, ProcedureId, SizeClass};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::run::{sha256_hex, DatasetSource, RunDir};

/// Shared state of one command invocation.
pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub run: &'a mut RunDir,
    pub dataset: &'a Dataset,
}

/// Loads `dir` when given, otherwise generates the configured dataset.
pub fn prepare_dataset(config: &ExperimentConfig, dir: Option<&Path>) -> Result<(Dataset, DatasetSource), CliError> {
    let (dataset, source, path) = match dir {
        Some(d) => (
            load_dataset(d).map_err(|e| CliError::Config(format!("dataset: {e}")))?,
            "loaded",
            Some(d.display().to_string()),
        ),
        None => (generate_dataset(&config.data).map_err(CliError::runtime)?, "generated", None),
    };
    let manifest = serde_json::to_string(&dataset.manifest).map_err(CliError::runtime)?;
    let source = DatasetSource {
        source,
        path,
        manifest_sha256: sha256_hex(manifest.as_bytes()),
    };
    Ok((dataset, source))
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn percent_label(target: f64) -> String {
    format!("{}", (target * 100.0).round())
}

fn events_in<'a>(dataset: &'a Dataset, procedures: &[ProcedureId]) -> Vec<&'a EventAnnotation> {
    procedures
        .iter()
        .filter_map(|&p| dataset.manifest.procedure(p))
        .flat_map(|p| p.event_ids.iter().filter_map(|&e| dataset.manifest.event(e)))
        .collect()
}

fn checkpoint_bytes(model: &ModelState) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(CliError::runtime)?;
    Ok(buf)
}

fn split(ctx: &Context) -> Result<FoldAssignment, CliError> {
    split_by_procedure(&ctx.dataset.manifest, ctx.config.eval.folds, ctx.config.seed)
        .map_err(|e| CliError::Config(format!("split: {e}")))
}

fn check_fold(split: &FoldAssignment, fold: usize) -> Result<(), CliError> {
    if fold >= split.k() {
        return Err(CliError::Config(format!("fold {fold} is out of range for {} folds", split.k())));
    }
    Ok(())
}

fn scores_csv(run: &mut RunDir, rel: &str, scored: &[ScoredFrame]) -> Result<(), CliError> {
    let header = ["procedure", "frame", "label", "event", "score"].map(String::from);
    let rows: Vec<Vec<String>> = scored
        .iter()
        .map(|s| {
            vec![
                s.frame.procedure_id.to_string(),
                s.frame.frame_index.to_string(),
                u8::from(s.label.is_positive()).to_string(),
                s.event_id.map(|e| e.to_string()).unwrap_or_default(),
                s.score.to_string(),
            ]
        })
        .collect();
    run.write_csv(rel, &header, &rows)
}

#[derive(Serialize)]
struct DatasetSummary {
    procedures: usize,
    event_bearing_procedures: usize,
    events: usize,
    positive_frames: usize,
    negative_frames: usize,
    frame_size: usize,
}

pub fn gen_data(ctx: &mut Context) -> Result<(), CliError> {
    let d = ctx.dataset;
    ctx.run
        .write_with("dataset", |path| write_dataset(d, path).map_err(CliError::runtime))?;
    let m = &d.manifest;
    ctx.run.write_json(
        "summary.json",
        &DatasetSummary {
            procedures: m.procedures.len(),
            event_bearing_procedures: m.event_bearing(),
            events: m.events.len(),
            positive_frames: m.positive_count(),
            negative_frames: m.negative_count(),
            frame_size: d.store.frame_size(),
        },
    )
}

#[derive(Serialize)]
struct SplitRecord<'a> {
    fold: usize,
    train_procedures: &'a [ProcedureId],
    test_procedures: &'a [ProcedureId],
}

/// Trains on every fold but `fold` with the same seed cross-validation uses
/// for that fold, so the model matches the corresponding `eval` fold model.
pub fn train_one(ctx: &mut Context, fold: usize) -> Result<(), CliError> {
    let split = split(ctx)?;
    check_fold(&split, fold)?;
    let d = ctx.dataset;
    let train_procs = split.train(fold);
    let test_procs = split.test(fold).to_vec();
    let config = TrainConfig {
        seed: child_seed(ctx.config.train.seed, &[fold as u64]),
        ..ctx.config.train.clone()
    };
    let pool = TrainPool::from_manifest(&d.manifest, &train_procs);
    let held_out = d.frames_of(&test_procs);
    let out = train(&config, d, &pool, Some(&held_out)).map_err(CliError::runtime)?;
    let scored = score_labelled(&out.model, d, &held_out).map_err(CliError::runtime)?;
    let report = evaluate_scores(&scored, &events_in(d, &test_procs), &ctx.config.eval).map_err(CliError::runtime)?;
    ctx.run.write("model.ckpt", &checkpoint_bytes(&out.model)?)?;
    ctx.run.write("history.csv", out.history.to_csv().as_bytes())?;
    scores_csv(ctx.run, "scores.csv", &scored)?;
    ctx.run.write_json("metrics.json", &report)?;
    ctx.run.write_json(
        "split.json",
        &SplitRecord {
            fold,
            train_procedures: &train_procs,
            test_procedures: &test_procs,
        },
    )
}

fn metric_header(targets: &[f64], first: &str) -> Vec<String> {
    let mut h: Vec<String> = [first, "accuracy", "sensitivity", "specificity", "auc"].map(String::from).to_vec();
    h.extend(targets.iter().map(|&t| format!("recall_at_{}", percent_label(t))));
    h
}

/// Mean ± std of the per-fold columns.
fn aggregate_cells(cv: &CrossValidation) -> Vec<String> {
    let mut row: Vec<String> = [cv.accuracy, cv.sensitivity, cv.specificity, cv.auc]
        .iter()
        .map(MeanStd::to_string)
        .collect();
    row.extend(cv.recall_at.iter().map(|(_, m)| m.to_string()));
    row
}

/// One row per fold plus the aggregate row.
fn fold_table(cv: &CrossValidation, targets: &[f64]) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = cv
        .folds
        .iter()
        .map(|f| {
            let r = &f.report;
            let mut row = vec![
                f.fold.to_string(),
                num(r.at_threshold.accuracy),
                num(r.at_threshold.sensitivity),
                num(r.at_threshold.specificity),
                num(r.auc),
            ];
            row.extend(targets.iter().map(|&t| r.operating_point(t).map_or_else(String::new, |o| num(o.recall))));
            row
        })
        .collect();
    let mut agg = vec!["mean ± std".to_string()];
    agg.extend(aggregate_cells(cv));
    rows.push(agg);
    rows
}

/// Event detection per size and morphology class, pooled over folds.
fn event_table(cv: &CrossValidation, targets: &[f64]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for &t in targets {
        let mut overall = DetectionCount::default();
        let mut size = [DetectionCount::default(); 3];
        let mut morph = [DetectionCount::default(); 3];
        for f in &cv.folds {
            if let Some(det) = f.report.detection_at(t) {
                overall.detected += det.overall.detected;
                overall.total += det.overall.total;
                for i in 0..3 {
                    size[i].detected += det.by_size[i].detected;
                    size[i].total += det.by_size[i].total;
                    morph[i].detected += det.by_morphology[i].detected;
                    morph[i].total += det.by_morphology[i].total;
                }
            }
        }
        let mut push = |group: &str, class: &str, c: DetectionCount| {
            rows.push(vec![
                percent_label(t),
                group.to_string(),
                class.to_string(),
                c.detected.to_string(),
                c.total.to_string(),
                num(c.rate()),
            ]);
        };
        push("all", "all", overall);
        for (i, s) in SizeClass::ALL.iter().enumerate() {
            push("size", s.name(), size[i]);
        }
        for (i, m) in Morphology::ALL.iter().enumerate() {
            push("morphology", m.name(), morph[i]);
        }
    }
    rows
}

fn write_cross_validation(run: &mut RunDir, dir: &str, cv: &CrossValidation, targets: &[f64]) -> Result<(), CliError> {
    run.write_csv(&format!("{dir}/folds.csv"), &metric_header(targets, "fold"), &fold_table(cv, targets))?;
    let header = ["specificity_target", "group", "class", "detected", "total", "rate"].map(String::from);
    run.write_csv(&format!("{dir}/events.csv"), &header, &event_table(cv, targets))?;
    for f in &cv.folds {
        run.write(&format!("{dir}/fold{}/history.csv", f.fold), f.history.to_csv().as_bytes())?;
        if let Some(m) = &f.model {
            run.write(&format!("{dir}/fold{}/model.ckpt", f.fold), &checkpoint_bytes(m)?)?;
        }
        scores_csv(run, &format!("{dir}/fold{}/scores.csv", f.fold), &f.scored)?;
    }
    run.write_json(&format!("{dir}/report.json"), cv)
}

fn run_cv(ctx: &Context, config: &TrainConfig) -> Result<CrossValidation, CliError> {
    cross_validate(ctx.dataset, config, &ctx.config.eval, ctx.config.seed).map_err(CliError::runtime)
}

pub fn eval(ctx: &mut Context) -> Result<(), CliError> {
    let targets = ctx.config.eval.specificity_targets.clone();
    let mut summary = Vec::new();
    for &method in &ctx.config.methods {
        let cv = run_cv(ctx, &ctx.config.train_for(method))?;
        write_cross_validation(ctx.run, method.tag(), &cv, &targets)?;
        let mut row = vec![method.tag().to_string()];
        row.extend(aggregate_cells(&cv));
        summary.push(row);
    }
    ctx.run.write_csv("summary.csv", &metric_header(&targets, "method"), &summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Margin,
    Embedding,
    Imbalance,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Margin => "margin",
            SweepKind::Embedding => "embedding",
            SweepKind::Imbalance => "imbalance",
        }
    }
}

pub fn sweep(ctx: &mut Context, kind: SweepKind) -> Result<(), CliError> {
    let targets = ctx.config.eval.specificity_targets.clone();
    let base = &ctx.config.train;
    let variants: Vec<(String, TrainConfig)> = match kind {
        SweepKind::Margin => {
            if !base.method.is_triplet() {
                return Err(CliError::Config(format!("margin sweep needs a triplet method, got {}", base.method.tag())));
            }
            ctx.config
                .sweep
                .margins
                .iter()
                .map(|&m| (m.value().to_string(), TrainConfig { margin: m, ..base.clone() }))
                .collect()
        }
        SweepKind::Embedding => std::iter::once(None)
            .chain(ctx.config.sweep.embedding_sizes.iter().map(|&s| Some(s)))
            .map(|h| {
                let label = h.map_or_else(|| "none".to_string(), |s| s.to_string());
                (label, TrainConfig { embedding_head: h, ..base.clone() })
            })
            .collect(),
        SweepKind::Imbalance => return imbalance(ctx),
    };
    let mut rows = Vec::new();
    for (label, config) in &variants {
        let cv = run_cv(ctx, config)?;
        write_cross_validation(ctx.run, &format!("{}_{label}", kind.name()), &cv, &targets)?;
        let mut row = vec![label.clone()];
        row.extend(aggregate_cells(&cv));
        rows.push(row);
    }
    ctx.run
        .write_csv(&format!("sweep_{}.csv", kind.name()), &metric_header(&targets, kind.name()), &rows)
}

fn imbalance(ctx: &mut Context) -> Result<(), CliError> {
    let s = &ctx.config.sweep;
    let configs: Vec<TrainConfig> = s
        .imbalance_methods
        .iter()
        .map(|&m| TrainConfig {
            epochs: s.imbalance_epochs.unwrap_or(ctx.config.train.epochs),
            ..ctx.config.train_for(m)
        })
        .collect();
    let report = imbalance_sweep(ctx.dataset, &configs, &s.imbalance, ctx.config.seed).map_err(CliError::runtime)?;
    let mut rows = Vec::new();
    for &m in &s.imbalance_methods {
        for &d in &s.imbalance.degrees {
            let n = report.cells.iter().filter(|c| c.method == m && c.degree == d).count();
            rows.push(vec![m.tag().to_string(), d.to_string(), report.summary(m, d).to_string(), n.to_string()]);
        }
    }
    let header = ["method", "degree", "auc", "repeats"].map(String::from);
    ctx.run.write_csv("sweep_imbalance.csv", &header, &rows)?;
    let cells: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.method.tag().to_string(),
                c.degree.to_string(),
                c.repeat.to_string(),
                c.train_positives.to_string(),
                c.train_negatives.to_string(),
                c.auc.to_string(),
            ]
        })
        .collect();
    let header = ["method", "degree", "repeat", "train_positives", "train_negatives", "auc"].map(String::from);
    ctx.run.write_csv("cells.csv", &header, &cells)?;
    ctx.run.write_json("sweep_imbalance.json", &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Outcome {
    Tp,
    Fp,
    Fn,
}

impl Outcome {
    fn name(self) -> &'static str {
        match self {
            Outcome::Tp => "tp",
            Outcome::Fp => "fp",
            Outcome::Fn => "fn",
        }
    }
}

pub struct CamRequest {
    pub checkpoint: PathBuf,
    pub fold: usize,
    pub select: Vec<Outcome>,
    pub frames: Vec<FrameRef>,
}

#[derive(Serialize)]
struct LocalizationSummary {
    fold: usize,
    target_specificity: f64,
    threshold: f64,
    specificity: f64,
    recall: f64,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    dilation: usize,
    localized: usize,
    localization_rate: f64,
}

fn load_model(path: &Path) -> Result<ModelState, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_overlays(ctx: &mut Context, model: &ModelState, dir: &str, frames: &[FrameRef]) -> Result<(), CliError> {
    let d = ctx.dataset;
    let size = d.store.frame_size();
    let maps = frame_cams(model, d, frames, 1).map_err(CliError::runtime)?;
    for map in &maps {
        let up = upsample(map, size, size).map_err(CliError::runtime)?;
        let pixels = d.frame(map.frame).pixels;
        ctx.run.write_with(&format!("{dir}/{}.ppm", map.frame), |p| {
            export_overlay(&pixels, &up, p).map_err(CliError::runtime)
        })?;
        ctx.run.write(&format!("{dir}/{}.csv", map.frame), map.to_csv().as_bytes())?;
    }
    Ok(())
}

/// Scores the held-out fold, sorts frames into TP, FP and FN at the
/// configured specificity, writes overlay galleries and the localization
/// rate of the true positives.
pub fn cam(ctx: &mut Context, req: &CamRequest) -> Result<(), CliError> {
    let model = load_model(&req.checkpoint)?;
    let split = split(ctx)?;
    check_fold(&split, req.fold)?;
    let settings = ctx.config.cam.clone();
    let d = ctx.dataset;
    let size = d.store.frame_size();
    if model.input_shape() != [d.store.channels(), size, size] {
        return Err(CliError::Config(format!(
            "checkpoint expects input {:?}, dataset frames are {:?}",
            model.input_shape(),
            [d.store.channels(), size, size]
        )));
    }
    if let Some(f) = req.frames.iter().find(|f| d.manifest.label(**f).is_none()) {
        return Err(CliError::Config(format!("frame {f} is not in the dataset")));
    }
    let test = split.test(req.fold).to_vec();
    let scored = score_labelled(&model, d, &d.frames_of(&test)).map_err(CliError::runtime)?;
    let op = recall_at_specificity(&scored, settings.target_specificity).map_err(CliError::runtime)?;
    let outcome_of = |s: &ScoredFrame| match (s.label.is_positive(), s.score > op.threshold) {
        (true, true) => Some(Outcome::Tp),
        (false, true) => Some(Outcome::Fp),
        (true, false) => Some(Outcome::Fn),
        (false, false) => None,
    };
    let mut by_outcome: [Vec<&ScoredFrame>; 3] = Default::default();
    for s in &scored {
        if let Some(o) = outcome_of(s) {
            by_outcome[o as usize].push(s);
        }
    }
    // galleries show the most confident calls, and the most confident misses
    for (i, list) in by_outcome.iter_mut().enumerate() {
        let ascending = i == Outcome::Fn as usize;
        list.sort_by(|a, b| {
            let o = a.score.total_cmp(&b.score);
            (if ascending { o } else { o.reverse() }).then(a.frame.cmp(&b.frame))
        });
    }
    let tps: Vec<FrameRef> = by_outcome[Outcome::Tp as usize].iter().map(|s| s.frame).collect();
    let records = localize(&model, d, &tps, settings.dilation).map_err(CliError::runtime)?;
    let localized = records.iter().filter(|r| r.hit).count();
    let summary = LocalizationSummary {
        fold: req.fold,
        target_specificity: settings.target_specificity,
        threshold: op.threshold,
        specificity: op.specificity,
        recall: op.recall,
        true_positives: tps.len(),
        false_positives: by_outcome[Outcome::Fp as usize].len(),
        false_negatives: by_outcome[Outcome::Fn as usize].len(),
        dilation: settings.dilation,
        localized,
        localization_rate: if tps.is_empty() { 0.0 } else { localized as f64 / tps.len() as f64 },
    };
    let galleries: Vec<(Outcome, Vec<FrameRef>)> = req
        .select
        .iter()
        .map(|&o| (o, by_outcome[o as usize].iter().take(settings.gallery).map(|s| s.frame).collect()))
        .collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.frame.procedure_id.to_string(),
                r.frame.frame_index.to_string(),
                r.peak.0.to_string(),
                r.peak.1.to_string(),
                u8::from(r.hit).to_string(),
            ]
        })
        .collect();
    let header = ["procedure", "frame", "peak_x", "peak_y", "hit"].map(String::from);
    ctx.run.write_csv("localization.csv", &header, &rows)?;
    ctx.run.write_json("localization.json", &summary)?;
    for (o, frames) in &galleries {
        write_overlays(ctx, &model, &format!("overlays/{}", o.name()), frames)?;
    }
    if !req.frames.is_empty() {
        write_overlays(ctx, &model, "overlays/selected", &req.frames)?;
    }
    Ok(())
}

/// Parses `procedure:frame`.
pub fn parse_frame(s: &str) -> Result<FrameRef, String> {
    let (p, f) = s.split_once(':').ok_or_else(|| format!("expected procedure:frame, got {s:?}"))?;
    let p = p.parse().map_err(|e| format!("procedure in {s:?}: {e}"))?;
    let f = f.parse().map_err(|e| format!("frame in {s:?}: {e}"))?;
    Ok(FrameRef::new(p, f))
}
