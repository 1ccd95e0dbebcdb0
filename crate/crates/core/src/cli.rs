//! The `fetrack` command line: argument parsing, logging setup and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::aggregation::{aggregate_interframe, AggregationMethod};
use crate::autodiff::gradcheck::GradCheckOptions;
use crate::cdfi::InputMode;
use crate::checks::run_checks;
use crate::error::{Error, Result};
use crate::event_stream::{load_sequence, sequence_dirs, write_sequence, EventFileFormat, Sequence};
use crate::experiments::{
    ablate, bench, bench_csv, desk_model_config, desk_scene_specs, desk_train_config, simulate_all, AblationRow,
    ABLATION_ROWS, DESK_FRAMES, DESK_HEIGHT, DESK_TEST_SEED, DESK_WIDTH,
};
use crate::image::{boxes_ppm_bytes, GrayImage};
use crate::metrics::{curves_csv, evaluate, read_predictions, report};
use crate::model::{Model, ModelConfig};
use crate::simulator::{desk_specs, make_dataset, SceneSpec};
use crate::tracker::{format_predictions, track_sequence, TrackerConfig};
use crate::training::{train, RunConfig, CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(name = "fetrack", version, about = "Frame and event fusion tracking toolkit")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic sequences with events and ground truth.
    Simulate(SimulateArgs),
    /// Aggregate the events of a sequence into per-bin frames.
    Aggregate(AggregateArgs),
    /// Train a model on a directory of sequences.
    Train(TrainArgs),
    /// Track one sequence (or every sequence below a directory).
    Track(TrackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the component study rows.
    Ablate(AblateArgs),
    /// Sweep the number of time bins and time tracking.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Evt,
    Csv,
}

impl From<Format> for EventFileFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Evt => EventFileFormat::Binary,
            Format::Csv => EventFileFormat::Csv,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scene spec JSON: one object or a list.
    #[arg(long, conflicts_with = "desk", required_unless_present = "desk")]
    spec: Option<PathBuf>,
    /// Generate this many varied desk scenes instead of reading a spec.
    #[arg(long)]
    desk: Option<usize>,
    #[arg(long, default_value_t = DESK_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = DESK_HEIGHT)]
    height: usize,
    #[arg(long, default_value_t = DESK_FRAMES)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Evt)]
    format: Format,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long)]
    seq: PathBuf,
    /// Write every bin plane as PGM here.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    bins: usize,
    #[arg(long, default_value = "latest_polarity")]
    method: AggregationMethod,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config JSON with `model` and `train` sections; defaults to the toy model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Fused,
    FrameOnly,
    EventOnly,
    ConcatToFrame,
    ConcatToEvent,
}

impl From<ModeArg> for InputMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fused => InputMode::Fused,
            ModeArg::FrameOnly => InputMode::FrameOnly,
            ModeArg::EventOnly => InputMode::EventOnly,
            ModeArg::ConcatToFrame => InputMode::ConcatToFrame,
            ModeArg::ConcatToEvent => InputMode::ConcatToEvent,
        }
    }
}

#[derive(Debug, Args)]
struct TrackerFlags {
    /// Tracker config JSON; the flags below override it.
    #[arg(long)]
    tracker: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Process a crop around the previous box instead of the full frame.
    #[arg(long)]
    crop: bool,
}

impl TrackerFlags {
    fn resolve(&self, seed: Option<u64>) -> Result<TrackerConfig> {
        let mut cfg: TrackerConfig = match &self.tracker {
            Some(p) => read_json(p)?,
            None => TrackerConfig::default(),
        };
        if let Some(c) = self.candidates {
            cfg.candidates = c;
        }
        if let Some(r) = self.refine_steps {
            cfg.refine_steps = r;
        }
        if self.crop {
            cfg.crop = true;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    model: PathBuf,
    /// A sequence directory, or a directory of them.
    #[arg(long)]
    seq: PathBuf,
    /// Prediction file, or a directory of `<sequence>.txt` files when `--seq` holds several.
    #[arg(long)]
    out: PathBuf,
    /// Model or run config; defaults to `config.json` beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write every frame with predicted (red) and ground-truth (green) boxes as PPM.
    #[arg(long)]
    dump_vis: Option<PathBuf>,
    #[command(flatten)]
    tracker: TrackerFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Prediction file, or a directory of `<sequence>.txt` files.
    #[arg(long)]
    pred: PathBuf,
    /// A sequence directory, or a directory of them.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for per-sequence success and precision curve CSVs.
    #[arg(long)]
    plot_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Seeds per check, starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Comma-separated subset of: ops, conv_bn_relu_pool_fc, predict_iou, model.
    #[arg(long, value_delimiter = ',')]
    checks: Vec<String>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    floor: Option<f64>,
}

#[derive(Debug, Args)]
struct DataFlags {
    /// Training sequences; defaults to simulated desk scenes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation sequences; defaults to held-out simulated desk scenes.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    desk_train: usize,
    #[arg(long, default_value_t = 4)]
    desk_eval: usize,
    /// Run config JSON giving the base model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Comma-separated row letters; all rows by default.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    tracker: TrackerFlags,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    ns: Vec<usize>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report with throughput and the resolved config.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Train each model before timing (into this directory); untrained otherwise.
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    tracker: TrackerFlags,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("FETRACK_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a, cli.seed),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Track(a) => track_cmd(a, cli.seed),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.seed.unwrap_or(0)),
        Command::Ablate(a) => ablate_cmd(a, cli.seed),
        Command::Bench(a) => bench_cmd(a, cli.seed),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn log_config<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => log::info!("resolved {what}: {s}"),
        Err(e) => log::warn!("cannot serialize {what}: {e}"),
    }
}

fn load_all(root: &Path) -> Result<Vec<Sequence>> {
    let dirs = sequence_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequence directories in {}", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn simulate_cmd(a: &SimulateArgs, seed: Option<u64>) -> Result<()> {
    let specs: Vec<SceneSpec> = match (&a.spec, a.desk) {
        (Some(path), _) => {
            let v: serde_json::Value = read_json(path)?;
            let mut specs: Vec<SceneSpec> = if v.is_array() {
                serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            } else {
                vec![serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?]
            };
            if let Some(s) = seed {
                for (i, spec) in specs.iter_mut().enumerate() {
                    spec.seed = s.wrapping_add(i as u64);
                }
            }
            specs
        }
        (None, Some(n)) => desk_specs(n, a.width, a.height, a.frames, seed.unwrap_or(0)),
        (None, None) => return Err(Error::Config("either --spec or --desk is required".into())),
    };
    for s in &specs {
        s.validate()?;
    }
    log_config("scene specs", &specs);
    fs::create_dir_all(&a.out)?;
    let format: EventFileFormat = a.format.into();
    if format == EventFileFormat::Binary {
        let counts = make_dataset(&specs, &a.out)?;
        println!("wrote {} sequences, {} events", counts.len(), counts.iter().sum::<usize>());
    } else {
        let seqs = simulate_all(&specs)?;
        for (s, seq) in specs.iter().zip(&seqs) {
            write_sequence(&a.out.join(&s.name), seq, format)?;
        }
        println!("wrote {} sequences, {} events", seqs.len(), seqs.iter().map(|s| s.stream.len()).sum::<usize>());
    }
    Ok(())
}

fn aggregate_cmd(a: &AggregateArgs) -> Result<()> {
    let seq = load_sequence(&a.seq)?;
    log::info!("resolved aggregation: bins {} method {}", a.bins, a.method);
    if let Some(d) = &a.dump_dir {
        fs::create_dir_all(d)?;
    }
    let start = std::time::Instant::now();
    let mut events = 0usize;
    for j in 0..seq.frames.len() {
        let (t0, t1) = seq.event_window(j);
        let agg = aggregate_interframe(&seq.stream, t0, t1, a.bins, a.method)?;
        events += seq
            .stream
            .events()
            .iter()
            .filter(|e| (e.t > t0 || j == 0 && e.t == t0) && e.t <= t1)
            .count();
        if let Some(d) = &a.dump_dir {
            for c in 0..agg.channels() {
                let img = GrayImage::new(agg.width, agg.height, agg.plane(c).to_vec())?;
                let (bin, ch) = (c / agg.channels_per_bin, c % agg.channels_per_bin);
                img.write_pgm(&d.join(format!("{j:06}_bin{bin}_ch{ch}.pgm")))?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64().max(1e-12);
    println!(
        "{} intervals, {} events, {:.3e} events/s",
        seq.frames.len(),
        events,
        events as f64 / secs
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig {
            model: ModelConfig::toy(),
            ..RunConfig::default()
        },
    };
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.steps_per_epoch {
        run.train.steps_per_epoch = s;
    }
    if let Some(m) = a.mode {
        run.model.cdfi.input_mode = m.into();
    }
    if let Some(s) = seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    run.model.validate()?;
    run.train.validate()?;
    log_config("run config", &run);
    let data = load_all(&a.data)?;
    let mut model = Model::new(&run.model)?;
    let summary = train(&mut model, &data, &run.train, &a.out)?;
    let last = summary.losses.last().map_or(f64::NAN, |l| l.total);
    println!(
        "trained {} steps, final loss {last:.5}, checkpoint {}",
        summary.losses.len(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

/// A model config file holds either a run config or a bare model config.
fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let v: serde_json::Value = read_json(path)?;
    let cfg = if v.get("model").is_some() {
        serde_json::from_value::<RunConfig>(v).map(|r| r.model)
    } else {
        serde_json::from_value::<ModelConfig>(v)
    }
    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn track_cmd(a: &TrackArgs, seed: Option<u64>) -> Result<()> {
    let cfg_path = match &a.config {
        Some(p) => p.clone(),
        None => a.model.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let model_cfg = read_model_config(&cfg_path)?;
    let tracker = a.tracker.resolve(seed)?;
    log_config("model config", &model_cfg);
    log_config("tracker config", &tracker);
    let model = Model::load(&model_cfg, &a.model)?;
    let dirs = sequence_dirs(&a.seq)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequence directories in {}", a.seq.display())));
    }
    let single = a.seq.join("meta.json").exists();
    if !single {
        fs::create_dir_all(&a.out)?;
    }
    for dir in &dirs {
        let seq = load_sequence(dir)?;
        let t = std::time::Instant::now();
        let records = track_sequence(&model, &seq, &tracker)?;
        let fps = records.len().saturating_sub(1) as f64 / t.elapsed().as_secs_f64().max(1e-12);
        let out = if single {
            a.out.clone()
        } else {
            a.out.join(format!("{}.txt", seq.name()))
        };
        if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(&out, format_predictions(&records))?;
        log::info!("{}: {} frames at {fps:.2} fps -> {}", seq.name(), records.len(), out.display());
        if let Some(vis) = &a.dump_vis {
            let vis = if single { vis.clone() } else { vis.join(seq.name()) };
            fs::create_dir_all(&vis)?;
            for r in &records {
                let mut boxes = vec![(r.bbox, [255, 0, 0])];
                if let Some(g) = seq.gt.get(r.frame) {
                    boxes.insert(0, (*g, [0, 255, 0]));
                }
                let img = &seq.frames[r.frame].image;
                fs::write(vis.join(format!("{:06}.ppm", r.frame)), boxes_ppm_bytes(img, &boxes))?;
            }
        }
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let dirs = sequence_dirs(&a.gt)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequence directories in {}", a.gt.display())));
    }
    let mut evals = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let seq = load_sequence(dir)?;
        let pred_path = if a.pred.is_dir() {
            a.pred.join(format!("{}.txt", seq.name()))
        } else if dirs.len() == 1 {
            a.pred.clone()
        } else {
            return Err(Error::Config("several ground-truth sequences need a prediction directory".into()));
        };
        let pred = read_predictions(&pred_path)?;
        evals.push(evaluate(seq.name(), &seq.meta.attributes, &pred, &seq.gt.boxes)?);
    }
    let config = serde_json::json!({
        "pred": a.pred.display().to_string(),
        "gt": a.gt.display().to_string(),
    });
    let rep = report(&evals, Some(config));
    println!(
        "rsr {:.4} rpr {:.4} op50 {:.4} op75 {:.4} over {} sequences",
        rep.rsr,
        rep.rpr,
        rep.op50,
        rep.op75,
        evals.len()
    );
    if let Some(p) = &a.report {
        write_json(p, &rep)?;
    }
    if let Some(d) = &a.plot_csv {
        fs::create_dir_all(d)?;
        for e in &evals {
            let (s, p) = curves_csv(e);
            fs::write(d.join(format!("{}_success.csv", e.name)), s)?;
            fs::write(d.join(format!("{}_precision.csv", e.name)), p)?;
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let defaults = GradCheckOptions::default();
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        h: a.step.unwrap_or(defaults.h),
        floor: a.floor.unwrap_or(defaults.floor),
        ..defaults
    };
    log::info!(
        "resolved gradcheck: tolerance {} step {} floor {} seeds {}..{}",
        opts.tolerance,
        opts.h,
        opts.floor,
        seed,
        seed + a.seeds
    );
    let names: Vec<&str> = a.checks.iter().map(String::as_str).collect();
    let runs = run_checks(&names, seed..seed + a.seeds, &opts)?;
    if runs.is_empty() {
        return Err(Error::Config(format!("no check named in {:?}", a.checks)));
    }
    // worst error per (check, entry) over seeds, with the number of re-measured coordinates
    let mut worst: Vec<(String, f64, u64, usize)> = Vec::new();
    for r in &runs {
        for e in &r.report.entries {
            let key = format!("{}/{}", r.check, e.name);
            match worst.iter_mut().find(|w| w.0 == key) {
                Some(w) => {
                    w.3 += e.refined;
                    if e.max_rel_err > w.1 {
                        w.1 = e.max_rel_err;
                        w.2 = r.seed;
                    }
                }
                None => worst.push((key, e.max_rel_err, r.seed, e.refined)),
            }
        }
    }
    let width = worst.iter().map(|w| w.0.len()).max().unwrap_or(4).max(4);
    println!("{:width$}  {:>12}  {:>5}  {:>7}  status", "name", "max_rel_err", "seed", "refined");
    let mut failed = 0;
    for (k, err, s, refined) in &worst {
        let ok = *err <= opts.tolerance;
        failed += usize::from(!ok);
        println!("{k:width$}  {err:>12.3e}  {s:>5}  {refined:>7}  {}", if ok { "ok" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(Error::Numerics(format!(
            "{failed} of {} gradient checks exceed tolerance {}",
            worst.len(),
            opts.tolerance
        )));
    }
    println!("all {} gradient checks within {}", worst.len(), opts.tolerance);
    Ok(())
}

/// Base model, training config and the two data sets of `ablate` and `bench`.
fn resolve_data(d: &DataFlags, seed: Option<u64>) -> Result<(ModelConfig, crate::training::TrainConfig, Vec<Sequence>, Vec<Sequence>)> {
    let s = seed.unwrap_or(0);
    let (mut model, mut tc) = match &d.config {
        Some(p) => {
            let r = RunConfig::from_json_file(p)?;
            (r.model, r.train)
        }
        None => (desk_model_config(InputMode::Fused, s), desk_train_config(s)),
    };
    if let Some(e) = d.epochs {
        tc.epochs = e;
    }
    if let Some(n) = d.steps_per_epoch {
        tc.steps_per_epoch = n;
    }
    if let Some(s) = seed {
        model.seed = s;
        tc.seed = s;
    }
    model.validate()?;
    tc.validate()?;
    let train = match &d.data {
        Some(p) => load_all(p)?,
        None => simulate_all(&desk_scene_specs(d.desk_train, s))?,
    };
    let eval = match &d.eval {
        Some(p) => load_all(p)?,
        None => simulate_all(&desk_scene_specs(d.desk_eval, DESK_TEST_SEED))?,
    };
    Ok((model, tc, train, eval))
}

fn ablate_cmd(a: &AblateArgs, seed: Option<u64>) -> Result<()> {
    let rows: Vec<AblationRow> = if a.rows.is_empty() {
        ABLATION_ROWS.to_vec()
    } else {
        a.rows.iter().map(|r| AblationRow::parse(r)).collect::<Result<_>>()?
    };
    let (model, tc, train_data, eval_data) = resolve_data(&a.data, seed)?;
    let tracker = a.tracker.resolve(seed)?;
    log_config("base model", &model);
    log_config("train config", &tc);
    log_config("tracker config", &tracker);
    let results = ablate(&rows, &model, &train_data, &eval_data, &tc, &tracker, &a.out)?;
    println!("row,label,rsr,op50,op75,rpr,removed_params");
    for r in &results {
        println!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{}",
            r.row,
            r.label,
            r.report.rsr,
            r.report.op50,
            r.report.op75,
            r.report.rpr,
            r.keys.missing.len()
        );
    }
    write_json(
        &a.out.join("ablation.json"),
        &serde_json::json!({
            "seed": seed.unwrap_or(0),
            "train": tc,
            "tracker": tracker,
            "rows": results,
        }),
    )
}

fn bench_cmd(a: &BenchArgs, seed: Option<u64>) -> Result<()> {
    if a.ns.contains(&0) {
        return Err(Error::Config("bin counts must be positive".into()));
    }
    let (model, tc, train_data, eval_data) = resolve_data(&a.data, seed)?;
    let tracker = a.tracker.resolve(seed)?;
    log_config("base model", &model);
    log_config("tracker config", &tracker);
    if a.train_dir.is_some() {
        log_config("train config", &tc);
    }
    let rows = bench(
        &a.ns,
        &model,
        &train_data,
        &eval_data,
        a.train_dir.as_deref().map(|d| (&tc, d)),
        &tracker,
        a.repeats,
    )?;
    let csv = bench_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    for r in &rows {
        eprintln!("n={}: aggregation {:.3e} events/s", r.n, r.events_per_s);
    }
    if let Some(p) = &a.report {
        write_json(
            p,
            &serde_json::json!({
                "seed": seed.unwrap_or(0),
                "model": model,
                "tracker": tracker,
                "trained": a.train_dir.is_some(),
                "rows": rows,
            }),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["fetrack", "frobnicate"]), 1);
        assert_eq!(run(["fetrack", "eval", "--pred", "p", "--gt", "g", "--bogus"]), 1);
        assert_eq!(run(["fetrack", "--help"]), 0);
    }

    #[test]
    fn missing_data_exits_two() {
        assert_eq!(run(["fetrack", "eval", "--pred", "/nonexistent/p", "--gt", "/nonexistent/g"]), 2);
    }
}
