//! Experiment drivers shared by the command line and the acceptance tests: the desk
//! preset, ablation rows, model evaluation and the bin-count sweep.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate_interframe, AggregationMethod};
use crate::cdfi::{CdfiConfig, InputMode};
use crate::error::{Error, Result};
use crate::event_stream::Sequence;
use crate::metrics::{evaluate, report, Report, SequenceEval};
use crate::model::{Model, ModelConfig};
use crate::simulator::{desk_specs, simulate, SceneSpec};
use crate::tracker::{init, track_sequence, track_step, TrackRecord, TrackerConfig};
use crate::training::{train, TrainConfig, TrainSummary, FINAL_CHECKPOINT};

pub const DESK_WIDTH: usize = 128;
pub const DESK_HEIGHT: usize = 96;
pub const DESK_FRAMES: usize = 40;
/// Seed of the held-out desk scenes.
pub const DESK_TEST_SEED: u64 = 99;

/// Toy-width model whose input matches the desk geometry.
pub fn desk_model_config(mode: InputMode, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.cdfi.input_width = DESK_WIDTH;
    cfg.cdfi.input_height = DESK_HEIGHT;
    cfg.cdfi.input_mode = mode;
    cfg.seed = seed;
    cfg
}

/// Ten epochs of 64 steps; enough for the IoU head to leave its initial bias.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps_per_epoch: 64,
        seed,
        ..TrainConfig::default()
    }
}

pub fn desk_scene_specs(count: usize, seed: u64) -> Vec<SceneSpec> {
    desk_specs(count, DESK_WIDTH, DESK_HEIGHT, DESK_FRAMES, seed)
}

/// Simulates `specs` in memory, in order.
pub fn simulate_all(specs: &[SceneSpec]) -> Result<Vec<Sequence>> {
    specs.par_iter().map(|s| Ok(simulate(s)?.sequence)).collect()
}

/// Tracks every sequence from its frame-0 ground truth and scores the result.
pub fn evaluate_model(model: &Model, seqs: &[Sequence], cfg: &TrackerConfig) -> Result<Vec<SequenceEval>> {
    seqs.par_iter()
        .map(|seq| {
            let records = track_sequence(model, seq, cfg)?;
            let pred = records.iter().map(|r| (r.frame, r.bbox)).collect();
            evaluate(seq.name(), &seq.meta.attributes, &pred, &seq.gt.boxes)
        })
        .collect()
}

/// One configuration of the component study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub id: char,
    pub label: &'static str,
}

pub const ABLATION_ROWS: [AblationRow; 16] = [
    AblationRow { id: 'A', label: "frame only" },
    AblationRow { id: 'B', label: "event only" },
    AblationRow { id: 'C', label: "event to frame" },
    AblationRow { id: 'D', label: "frame to event" },
    AblationRow { id: 'E', label: "without edge attention" },
    AblationRow { id: 'F', label: "without cross-domain modulation" },
    AblationRow { id: 'G', label: "without self attention" },
    AblationRow { id: 'H', label: "without cross attention" },
    AblationRow { id: 'I', label: "without adaptive weighting" },
    AblationRow { id: 'J', label: "tsltd aggregation" },
    AblationRow { id: 'K', label: "time surface aggregation" },
    AblationRow { id: 'L', label: "event count aggregation" },
    AblationRow { id: 'M', label: "event frame aggregation" },
    AblationRow { id: 'N', label: "zhu voxel aggregation" },
    AblationRow { id: 'O', label: "all bin weights 1" },
    AblationRow { id: 'P', label: "full model" },
];

impl AblationRow {
    pub fn parse(id: &str) -> Result<AblationRow> {
        let c = id.trim().to_ascii_uppercase();
        ABLATION_ROWS
            .iter()
            .copied()
            .find(|r| c.len() == 1 && c.starts_with(r.id))
            .ok_or_else(|| Error::Config(format!("unknown ablation row {id:?}")))
    }

    /// `base` with this row's change applied.
    pub fn apply(&self, base: &CdfiConfig) -> CdfiConfig {
        let mut c = base.clone();
        match self.id {
            'A' => c.input_mode = InputMode::FrameOnly,
            'B' => c.input_mode = InputMode::EventOnly,
            'C' => c.input_mode = InputMode::ConcatToFrame,
            'D' => c.input_mode = InputMode::ConcatToEvent,
            'E' => c.use_eab = false,
            'F' => c.use_cdms = false,
            'G' => c.use_self_attention = false,
            'H' => c.use_cross_attention = false,
            'I' => c.use_adaptive_weighting = false,
            'J' => c.aggregation = AggregationMethod::Tsltd,
            'K' => c.aggregation = AggregationMethod::TimeSurface,
            'L' => c.aggregation = AggregationMethod::EventCount,
            'M' => c.aggregation = AggregationMethod::EventFrame,
            'N' => c.aggregation = AggregationMethod::ZhuVoxel,
            'O' => c.fixed_branch_weights = true,
            _ => {}
        }
        c
    }

    /// Whether the full model's parameter `key` belongs to a sub-module this row removes.
    pub fn removes(&self, key: &str) -> bool {
        let cdms = key.starts_with("cdms.");
        match self.id {
            'A' | 'C' => key.starts_with("efe.") || cdms,
            'B' | 'D' => key.starts_with("ffe.") || cdms,
            'E' => key.starts_with("efe.branch") && key.contains(".eab"),
            'F' => cdms,
            'G' => cdms && key.contains(".self."),
            'H' => cdms && key.contains(".cross."),
            'I' => cdms && key.contains(".aw_"),
            'O' => key.starts_with("efe.w_"),
            _ => false,
        }
    }
}

/// Parameter names present in only one of two checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KeyDiff {
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

impl KeyDiff {
    pub fn between<'a>(reference: impl IntoIterator<Item = &'a str>, other: impl IntoIterator<Item = &'a str>) -> KeyDiff {
        let a: BTreeSet<&str> = reference.into_iter().collect();
        let b: BTreeSet<&str> = other.into_iter().collect();
        KeyDiff {
            missing: a.difference(&b).map(|s| s.to_string()).collect(),
            extra: b.difference(&a).map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub row: char,
    pub label: &'static str,
    pub config: ModelConfig,
    pub checkpoint: PathBuf,
    /// Against the full model's parameters.
    pub keys: KeyDiff,
    pub report: Report,
}

/// Trains and evaluates each row into `out_dir/row_<id>/`.
pub fn ablate(
    rows: &[AblationRow],
    base: &ModelConfig,
    train_data: &[Sequence],
    eval_data: &[Sequence],
    train_cfg: &TrainConfig,
    tracker_cfg: &TrackerConfig,
    out_dir: &Path,
) -> Result<Vec<AblationResult>> {
    let full = Model::new(base)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let config = ModelConfig {
            cdfi: row.apply(&base.cdfi),
            ..base.clone()
        };
        let dir = out_dir.join(format!("row_{}", row.id));
        log::info!("row {} ({}): training", row.id, row.label);
        let mut model = Model::new(&config)?;
        let summary = train(&mut model, train_data, train_cfg, &dir)?;
        let evals = evaluate_model(&model, eval_data, tracker_cfg)?;
        let rep = report(&evals, Some(serde_json::to_value(&config)?));
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
        let keys = KeyDiff::between(full.store.names(), model.store.names());
        log::info!(
            "row {}: rsr {:.3} rpr {:.3}, {} parameters removed",
            row.id,
            rep.rsr,
            rep.rpr,
            keys.missing.len()
        );
        out.push(AblationResult {
            row: row.id,
            label: row.label,
            config,
            checkpoint: summary.final_checkpoint,
            keys,
            report: rep,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub rsr: f64,
    pub rpr: f64,
    /// Tracked frames per wall-clock second.
    pub fps: f64,
    /// Events aggregated per wall-clock second.
    pub events_per_s: f64,
}

/// Tracks `eval_data` with one model per bin count in `ns`, trained first when
/// `train_cfg` is given.
///
/// Tracking is repeated in `repeats` rounds that visit every bin count in turn. Each
/// frame does identical work in every round, so its fastest round is kept and the
/// frame rate is computed from the sum of those; this filters out slow spells of a
/// shared machine.
pub fn bench(
    ns: &[usize],
    base: &ModelConfig,
    train_data: &[Sequence],
    eval_data: &[Sequence],
    train_cfg: Option<(&TrainConfig, &Path)>,
    tracker_cfg: &TrackerConfig,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if eval_data.is_empty() {
        return Err(Error::Data("bench needs at least one sequence".into()));
    }
    let mut models = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut config = base.clone();
        config.cdfi.n_bins = n;
        let mut model = Model::new(&config)?;
        if let Some((tc, dir)) = train_cfg {
            let _: TrainSummary = train(&mut model, train_data, tc, &dir.join(format!("n{n}")))?;
        }
        models.push(model);
    }
    let frames: usize = eval_data.iter().map(|s| s.frames.len().saturating_sub(1)).sum();
    let mut best = vec![vec![f64::INFINITY; frames]; ns.len()];
    let mut evals = vec![Vec::new(); ns.len()];
    for round in 0..repeats.max(1) {
        let mut slot = 0;
        for seq in eval_data {
            let (records, times) = lockstep_track(&models, seq, tracker_cfg)?;
            for (k, t) in times.iter().enumerate() {
                for (j, &v) in t.iter().enumerate() {
                    best[k][slot + j] = best[k][slot + j].min(v);
                }
            }
            slot += seq.frames.len().saturating_sub(1);
            if round == 0 {
                for (k, rec) in records.iter().enumerate() {
                    let pred = rec.iter().map(|r| (r.frame, r.bbox)).collect();
                    evals[k].push(evaluate(seq.name(), &seq.meta.attributes, &pred, &seq.gt.boxes)?);
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(ns.len());
    for (k, &n) in ns.iter().enumerate() {
        let rep = report(&evals[k], None);
        let total: f64 = best[k].iter().sum();
        let row = BenchRow {
            n,
            rsr: rep.rsr,
            rpr: rep.rpr,
            fps: frames as f64 / total.max(1e-12),
            events_per_s: aggregation_throughput(eval_data, n, base.cdfi.aggregation)?,
        };
        log::info!("n={n}: {:.2} fps, {:.3e} events/s", row.fps, row.events_per_s);
        rows.push(row);
    }
    Ok(rows)
}

/// Runs `track_sequence` for every model at once, frame by frame, so the models are
/// timed under the same machine load. Returns each model's records and the wall-clock
/// seconds of each of its tracked frames after the first.
fn lockstep_track(models: &[Model], seq: &Sequence, cfg: &TrackerConfig) -> Result<(Vec<Vec<TrackRecord>>, Vec<Vec<f64>>)> {
    let box0 = *seq
        .gt
        .get(0)
        .ok_or_else(|| Error::Data(format!("{}: no ground truth for frame 0", seq.name())))?;
    let mut states = Vec::with_capacity(models.len());
    let mut records = Vec::with_capacity(models.len());
    for m in models {
        let (state, first) = init(m, seq, 0, box0, cfg)?;
        states.push(state);
        records.push(vec![first]);
    }
    let mut times = vec![Vec::with_capacity(seq.frames.len()); models.len()];
    for j in 1..seq.frames.len() {
        for (k, m) in models.iter().enumerate() {
            let t = Instant::now();
            records[k].push(track_step(m, &mut states[k], seq, j, cfg)?);
            times[k].push(t.elapsed().as_secs_f64());
        }
    }
    Ok((records, times))
}

/// Events per second through `aggregate_interframe` over every frame interval.
pub fn aggregation_throughput(seqs: &[Sequence], n: usize, method: AggregationMethod) -> Result<f64> {
    let mut events = 0usize;
    let t = Instant::now();
    for seq in seqs {
        for j in 1..seq.frames.len() {
            let (t0, t1) = seq.event_window(j);
            let a = aggregate_interframe(&seq.stream, t0, t1, n, method)?;
            std::hint::black_box(&a);
        }
        events += seq.stream.len();
    }
    Ok(events as f64 / t.elapsed().as_secs_f64().max(1e-12))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,rsr,rpr,fps\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.n, r.rsr, r.rpr, r.fps));
    }
    s
}

/// Final checkpoint path inside a training output directory.
pub fn checkpoint_in(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}
