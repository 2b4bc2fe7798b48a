//! `bzf`: fit, synthesise, train, predict, evaluate, gradient-check and plot.

mod plot;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use bezierformer::eval::{evaluate_sets, DEFAULT_THRESHOLD};
use bezierformer::fit::{fit_curve, FitConfig, FitInit};
use bezierformer::gradsuite::run_gradient_suite;
use bezierformer::lanes::{Lane, LaneSet, Mode};
use bezierformer::model::{default_e, predict_scenes, train, Model, ModelConfig, TrainConfig};
use bezierformer::synth::{generate_corpus, load_corpus, save_scene, SynthConfig};

/// Raised for argument combinations clap cannot check; exits with 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "bzf", version, about = "Bézier-curve lane detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one cubic curve to a point sequence.
    Fit(FitArgs),
    /// Write a seeded synthetic scene corpus.
    Synth(SynthArgs),
    /// Train a detector on a corpus and save a checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint over a corpus and write one lane set per scene.
    Predict(PredictArgs),
    /// Score predicted lane sets against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Draw lane sets as an SVG overlay.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoD => Mode::TwoD,
            ModeArg::ThreeD => Mode::ThreeD,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    LeastSquares,
    Chord,
}

#[derive(Args)]
struct FitArgs {
    /// Points as `[[x, y(, z)], ...]` or `{"points": [...]}`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file with fit settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    e: Option<f64>,
    #[arg(long)]
    ndis: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init: Option<InitArg>,
    #[arg(long, default_value = "fit")]
    scene_id: String,
    /// Also write an SVG of the input points and the fitted curve.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ndis: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `synth`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON file `{"model": {...}, "train": {...}}`; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    e: Option<f64>,
    #[arg(long)]
    ndis: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-step loss breakdown as JSON lines; `-` for stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; one `<scene_id>.json` per scene.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted lane set file or directory.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth lane set file or directory (scene files work too).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Lane half-width; defaults by mode.
    #[arg(long)]
    e: Option<f64>,
    #[arg(long, default_value_t = 200)]
    ndis: usize,
    /// Print one CSV row per scene instead of the JSON report.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Lane set files, one colour each.
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn from_config<T: DeserializeOwned + Default>(v: Option<&Value>, what: &str) -> Result<T> {
    match v {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone()).with_context(|| format!("invalid {what} settings")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let v = read_json(path)?;
    let arr = match &v {
        Value::Object(o) => o.get("points").ok_or_else(|| anyhow!("{}: missing \"points\"", path.display()))?,
        other => other,
    };
    serde_json::from_value(arr.clone()).with_context(|| format!("{}: points must be an array of coordinate arrays", path.display()))
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let file_cfg = a.config.as_deref().map(read_json).transpose()?;
    let mut cfg: FitConfig = from_config(file_cfg.as_ref(), "fit")?;
    cfg.e = a.e.unwrap_or(cfg.e);
    cfg.n_dis = a.ndis.unwrap_or(cfg.n_dis);
    cfg.iters = a.iters.unwrap_or(cfg.iters);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.lr_min = cfg.lr_min.min(cfg.lr);
    if let Some(i) = a.init {
        cfg.init = match i {
            InitArg::LeastSquares => FitInit::LeastSquares,
            InitArg::Chord => FitInit::Chord,
        };
    }
    let points = read_points(&a.input)?;
    let mode = match points.first().map(Vec::len) {
        Some(2) => Mode::TwoD,
        Some(3) => Mode::ThreeD,
        _ => bail!("points must have 2 or 3 coordinates"),
    };
    let result = fit_curve(&points, &cfg)?;
    let set = LaneSet::new(
        a.scene_id,
        mode,
        None,
        vec![Lane {
            category: 1,
            score: None,
            control_points: result.control_points.clone(),
            points: None,
        }],
    )?;
    let doc = serde_json::to_string_pretty(&set.to_json())?;
    match &a.out {
        Some(p) => write_text(p, &doc)?,
        None => println!("{doc}"),
    }
    if let Some(svg) = &a.svg {
        let layers = [plot::Layer {
            label: "fit".into(),
            set,
        }];
        write_text(svg, &plot::render_with_points(&layers, &points)?)?;
    }
    eprintln!("final loss {:.6e} after {} iterations", result.final_loss(), cfg.iters);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file_cfg = a.config.as_deref().map(read_json).transpose()?;
    let mut cfg = match (&file_cfg, a.mode) {
        (Some(v), _) => {
            let mut c: SynthConfig = from_config(Some(v), "synth")?;
            if let Some(m) = a.mode {
                c.mode = m.into();
            }
            c
        }
        (None, m) => SynthConfig::for_mode(m.map(Mode::from).unwrap_or_default()),
    };
    cfg.n_dis = a.ndis.unwrap_or(cfg.n_dis);
    let scenes = generate_corpus(a.seed, a.count, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for s in &scenes {
        save_scene(s, &a.out)?;
    }
    eprintln!("wrote {} {} scenes to {}", scenes.len(), cfg.mode, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let scenes = load_corpus(&a.input)?;
    let first = &scenes[0];
    let mode = first.mode();
    if scenes.iter().any(|s| s.mode() != mode || s.raster.shape() != first.raster.shape()) {
        bail!("corpus mixes modes or raster shapes");
    }
    let file_cfg = a.config.as_deref().map(read_json).transpose()?;
    let model_v = file_cfg.as_ref().and_then(|v| v.get("model"));
    let train_v = file_cfg.as_ref().and_then(|v| v.get("train"));

    let mut mcfg: ModelConfig = from_config(model_v, "model")?;
    let shape = first.raster.shape();
    mcfg.mode = mode;
    mcfg.image_h = shape[0];
    mcfg.image_w = shape[1];
    mcfg.input_channels = shape[2];
    if model_v.and_then(|m| m.get("num_classes")).is_none() {
        mcfg.num_classes = shape[2] + 1;
    }
    let mut tcfg = match train_v {
        Some(v) => {
            let mut t: TrainConfig = from_config(Some(v), "train")?;
            if v.get("e").is_none() {
                t.e = default_e(mode);
            }
            t
        }
        None => TrainConfig::for_mode(mode),
    };
    tcfg.seed = a.seed.unwrap_or(tcfg.seed);
    tcfg.e = a.e.unwrap_or(tcfg.e);
    tcfg.n_dis = a.ndis.unwrap_or(tcfg.n_dis);
    tcfg.steps = a.steps.unwrap_or(tcfg.steps);
    if let Some(lr) = a.lr {
        tcfg.lr = lr;
        tcfg.lr_min = tcfg.lr_min.min(lr);
    }

    let mut model = Model::new(mcfg, tcfg.seed)?;
    let mut log: Option<Box<dyn Write>> = match &a.log {
        None => None,
        Some(p) if p.as_os_str() == "-" => Some(Box::new(std::io::stdout().lock())),
        Some(p) => Some(Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        ))),
    };
    let mut io_err = None;
    let logs = train(&mut model, &scenes, &tcfg, |step, _| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = serde_json::to_writer(&mut *w, step).map_err(std::io::Error::from).and_then(|_| writeln!(w)) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing the training log");
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    model.save(&a.out)?;
    if let Some(last) = logs.last() {
        eprintln!("step {} loss {:.4}; checkpoint {}", last.step, last.l_total, a.out.display());
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let scenes = load_corpus(&a.input)?;
    let preds = predict_scenes(&model, &scenes)?;
    std::fs::create_dir_all(&a.out)?;
    for p in &preds {
        p.save(&a.out.join(format!("{}.json", p.scene_id)))?;
    }
    eprintln!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

/// Lane sets from a file or from every `*.json` in a directory, keyed by
/// scene id.
fn load_sets(path: &Path) -> Result<BTreeMap<String, LaneSet>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = BTreeMap::new();
    for f in files {
        let set = LaneSet::load(&f)?;
        if out.insert(set.scene_id.clone(), set).is_some() {
            bail!("{}: duplicate scene id", f.display());
        }
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let preds = load_sets(&a.pred)?;
    let mut gts = load_sets(&a.gt)?;
    let mut pairs = Vec::with_capacity(preds.len());
    for (id, p) in preds {
        let g = gts.remove(&id).ok_or_else(|| anyhow!("no ground truth for scene {id:?}"))?;
        pairs.push((p, g));
    }
    // Ground truth without a prediction counts as all misses.
    for (id, g) in gts {
        let empty = LaneSet {
            scene_id: id,
            mode: g.mode,
            camera: g.camera.clone(),
            lanes: Vec::new(),
        };
        pairs.push((empty, g));
    }
    let Some((_, first_gt)) = pairs.first() else {
        bail!("no scenes to evaluate");
    };
    let e = a.e.unwrap_or_else(|| default_e(first_gt.mode));
    let report = evaluate_sets(&pairs, a.threshold, e, a.ndis)?;
    let text = if a.csv {
        report.to_csv()
    } else {
        serde_json::to_string_pretty(&report)? + "\n"
    };
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    eprintln!("f1 {:.4} precision {:.4} recall {:.4}", report.f1, report.precision, report.recall);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cases = run_gradient_suite(a.seed)?;
    let ok = cases.iter().all(|c| c.passed());
    let ops: Vec<Value> = cases
        .iter()
        .map(|c| {
            json!({
                "op": c.name,
                "max_rel_error": c.max_rel_error,
                "tolerance": c.tolerance,
                "coordinates": c.coordinates,
                "passed": c.passed(),
                "seconds": c.seconds,
            })
        })
        .collect();
    let total: f64 = cases.iter().map(|c| c.seconds).sum();
    let doc = json!({"passed": ok, "seconds": total, "ops": ops});
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(ok)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let layers = a
        .inputs
        .iter()
        .map(|p| {
            Ok(plot::Layer {
                label: p.display().to_string(),
                set: LaneSet::load(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_text(&a.out, &plot::render(&layers)?)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BZF_THREADS") {
        let n: usize = v.parse().map_err(|_| usage(format!("BZF_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(usage("BZF_THREADS must be a positive integer"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => cmd_fit(a)?,
        Command::Synth(a) => cmd_synth(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Plot(a) => cmd_plot(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
