use std::sync::OnceLock;
use std::time::Instant;

use bezierformer::attention::{fv_sample_references, FeaturePyramid};
use bezierformer::bezier::ControlPolygon;
use bezierformer::camera::CameraModel;
use bezierformer::diff::Tensor;
use bezierformer::eval::EvalReport;
use bezierformer::lanes::Mode;
use bezierformer::model::{default_e, evaluate_model, train, Model, ModelConfig, StepLog, TrainConfig};
use bezierformer::synth::{generate_corpus, Scene, SynthConfig};

use crate::Outcome;

const SCENES: usize = 512;
const STEPS: usize = 2000;
const BUDGET_SECONDS: f64 = 600.0;
const MIN_DROP: f64 = 0.8;
const MIN_F1: f64 = 0.8;
/// Frozen regression baselines `(drop, F1)` from the first verified runs,
/// reported next to the targets; they do not decide pass or fail.
const BASELINE_2D: (f64, f64) = (0.70, 0.97);
const BASELINE_3D: (f64, f64) = (0.55, 0.82);
/// Steps between the geometric checks made during 3D training.
const CHECK_EVERY: usize = 100;

struct Run {
    logs: Vec<StepLog>,
    report: EvalReport,
    seconds: f64,
    /// Worst collinearity residual and mode-consistency gap seen during
    /// training, with the number of checks made.
    geometry: Option<(f64, f64, usize)>,
}

impl Run {
    /// `1 − mean(last 20) / mean(first 10)` of the logged total loss.
    fn drop(&self) -> f64 {
        let mean = |s: &[StepLog]| s.iter().map(|l| l.l_total).sum::<f64>() / s.len() as f64;
        1.0 - mean(&self.logs[self.logs.len() - 20..]) / mean(&self.logs[..10])
    }

    fn summary(&self) -> String {
        let mean = |s: &[StepLog]| s.iter().map(|l| l.l_total).sum::<f64>() / s.len() as f64;
        format!(
            "loss {:.3} -> {:.3}, drop {:.3} (need {MIN_DROP}); train F1 {:.3} (P {:.3}, R {:.3}, need {MIN_F1}); {:.0}s (budget {BUDGET_SECONDS:.0}s)",
            mean(&self.logs[..10]),
            mean(&self.logs[self.logs.len() - 20..]),
            self.drop(),
            self.report.f1,
            self.report.precision,
            self.report.recall,
            self.seconds
        )
    }

    fn baseline(&self, (drop, f1): (f64, f64)) -> String {
        let held = self.drop() >= drop && self.report.f1 >= f1;
        format!("baseline drop >= {drop}, F1 >= {f1}: {}", if held { "held" } else { "REGRESSED" })
    }

    fn passed(&self) -> bool {
        self.drop() >= MIN_DROP && self.report.f1 >= MIN_F1 && self.seconds < BUDGET_SECONDS
    }
}

fn toy_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        num_layers: 2,
        ..ModelConfig::default()
    }
}

fn train_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        steps: STEPS,
        lr: 1e-3,
        n_dis: 50,
        ..TrainConfig::for_mode(mode)
    }
}

/// Projected points of a 3D segment must stay on one image line.
fn collinearity_residual(cam: &CameraModel, a: &[f64], b: &[f64]) -> Option<f64> {
    let at = |f: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + f * (q - p)).collect() };
    let pa = cam.project(a).ok()?;
    let pb = cam.project(b).ok()?;
    let u = [pb[0] - pa[0], pb[1] - pa[1]];
    let mut worst: f64 = 0.0;
    for f in [0.25, 0.5, 0.75] {
        let pm = cam.project(&at(f)).ok()?;
        let v = [pm[0] - pa[0], pm[1] - pa[1]];
        let scale = (u[0].hypot(u[1]) * v[0].hypot(v[1])).max(1.0);
        worst = worst.max((u[0] * v[1] - u[1] * v[0]).abs() / scale);
    }
    Some(worst)
}

/// Gap between 3D-mode references of a lane on a plane of constant depth,
/// seen by a camera at the origin, and 2D-mode references of the projected
/// control polygon.
fn mode_gap(cam: &CameraModel, curve: &ControlPolygon, cfg: &ModelConfig) -> anyhow::Result<f64> {
    let planar = curve.map_points(|p| vec![p[0], 0.2 * p[1] - 4.0, 20.0])?;
    let projected: Vec<Vec<f64>> = planar
        .points()
        .map(|p| cam.project(p).map(|v| v.to_vec()))
        .collect::<bezierformer::Result<_>>()?;
    let flat = ControlPolygon::new(&projected)?;
    let levels = (0..cfg.levels)
        .map(|l| {
            let (h, w) = (cfg.image_h >> (l + 1), cfg.image_w >> (l + 1));
            Tensor::zeros(&[h, w, 1])
        })
        .collect();
    let geometry = FeaturePyramid::new(levels, cfg.image_w, cfg.image_h)?.geometry().clone();
    let ts = cfg.ref_ts();
    let three = fv_sample_references(&planar, Some(cam), &ts, &geometry)?;
    let two = fv_sample_references(&flat, None, &ts, &geometry)?;
    let mut gap: f64 = 0.0;
    for (a, b) in three.iter().flatten().zip(two.iter().flatten()) {
        gap = gap.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
    }
    Ok(gap)
}

fn run(mode: Mode) -> anyhow::Result<Run> {
    let start = Instant::now();
    let scenes: Vec<Scene> = generate_corpus(7, SCENES, &SynthConfig::for_mode(mode))?;
    let mcfg = toy_config(mode);
    let mut model = Model::new(mcfg.clone(), 1)?;
    let tcfg = train_config(mode);
    let identity = CameraModel::new(40.0, 40.0, 32.0, 32.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], [0.0; 3], 64, 64)?;
    let probe = &scenes[0];
    let mut geometry = (0.0f64, 0.0f64, 0usize);
    let mut geometry_error: Option<anyhow::Error> = None;
    let logs = train(&mut model, &scenes, &tcfg, |log, model| {
        if mode != Mode::ThreeD || log.step % CHECK_EVERY != 0 || geometry_error.is_some() {
            return;
        }
        let mut check = || -> anyhow::Result<()> {
            let cam = probe.camera().expect("3D scenes carry a camera");
            let out = model.forward(&probe.raster, Some(cam))?;
            let last = out.last().expect("layers");
            for q in 0..mcfg.num_queries {
                let curve = last.queries.curve(q)?;
                if let Some(r) = collinearity_residual(cam, curve.point(0), curve.point(3)) {
                    geometry.0 = geometry.0.max(r);
                }
                geometry.1 = geometry.1.max(mode_gap(&identity, &curve, &mcfg)?);
                geometry.2 += 1;
            }
            Ok(())
        };
        if let Err(e) = check() {
            geometry_error = Some(e);
        }
    })?;
    if let Some(e) = geometry_error {
        return Err(e.context("geometric check during training"));
    }
    let report = evaluate_model(&model, &scenes, 0.5, default_e(mode), 200)?;
    Ok(Run {
        logs,
        report,
        seconds: start.elapsed().as_secs_f64(),
        geometry: (mode == Mode::ThreeD).then_some(geometry),
    })
}

fn shared(mode: Mode) -> Result<&'static Run, String> {
    static TWO: OnceLock<Result<Run, String>> = OnceLock::new();
    static THREE: OnceLock<Result<Run, String>> = OnceLock::new();
    let cell = match mode {
        Mode::TwoD => &TWO,
        Mode::ThreeD => &THREE,
    };
    cell.get_or_init(|| run(mode).map_err(|e| format!("{e:#}"))).as_ref().map_err(Clone::clone)
}

pub fn toy_2d() -> anyhow::Result<Outcome> {
    let r = shared(Mode::TwoD).map_err(anyhow::Error::msg)?;
    Ok(Outcome::new(r.passed(), format!("{}; {}", r.summary(), r.baseline(BASELINE_2D))))
}

pub fn toy_3d() -> anyhow::Result<Outcome> {
    let r = shared(Mode::ThreeD).map_err(anyhow::Error::msg)?;
    let (collinear, gap, checks) = r.geometry.expect("3D runs record geometry");
    let geometry_ok = checks > 0 && collinear <= 1e-6 && gap <= 1e-9;
    Ok(Outcome::new(
        r.passed() && geometry_ok,
        format!(
            "{}; {}; during training over {checks} curve checks: collinearity {collinear:.1e} (tol 1e-6), 3D vs 2D references {gap:.1e} (tol 1e-9)",
            r.summary(),
            r.baseline(BASELINE_3D)
        ),
    ))
}

pub fn loss_composition() -> anyhow::Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut layer_counts_ok = true;
    for mode in [Mode::TwoD, Mode::ThreeD] {
        let r = shared(mode).map_err(anyhow::Error::msg)?;
        for log in &r.logs {
            let sum: f64 = log.layers.iter().map(|b| b.l_reg + b.l_cls).sum();
            worst = worst.max((log.l_total - sum).abs());
            layer_counts_ok &= log.layers.len() == toy_config(mode).num_layers + 1;
            steps += 1;
        }
    }
    Ok(Outcome::new(
        worst <= 1e-9 && layer_counts_ok && steps == 2 * STEPS,
        format!("{steps} logged steps (2D and 3D runs), worst |total - sum of layer terms| {worst:.1e} (tol 1e-9), three layer entries each: {layer_counts_ok}"),
    ))
}
