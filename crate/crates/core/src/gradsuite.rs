//! Finite-difference checks of every differentiable operation, including a
//! whole micro-scale model and its training loss.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionParams, NormScope, PyramidVars};
use crate::bezier::{uniform_ts, ControlPolygon};
use crate::camera::CameraModel;
use crate::diff::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};
use crate::lanes::Mode;
use crate::loss::{GtCurve, LossConfig};
use crate::model::{layer_losses, Model, ModelConfig};

/// Tolerance on the relative error of single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Point = BTreeMap<String, Tensor>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Fractional parts kept away from the bilinear kinks at integers.
fn off_grid(rng: &mut ChaCha8Rng, rows: usize, hi_x: f64, hi_y: f64) -> Tensor {
    let mut pick = |hi: f64| {
        let whole = rng.random_range(0..hi.floor() as usize) as f64;
        whole + rng.random_range(0.15..0.85)
    };
    let data = (0..rows).flat_map(|_| [pick(hi_x), pick(hi_y)]).collect();
    Tensor::matrix(rows, 2, data).expect("shape matches")
}

/// `Σ weights ⊙ v`, turning any output into a scalar.
fn contract(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let v = if g.value(v).shape() == weights.shape() {
        v
    } else {
        g.reshape(v, weights.shape())?
    };
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let shape = store.get(&n).expect("listed").shape().to_vec();
        store.insert(n, uniform(rng, &shape, -scale, scale));
    }
}

struct Runner {
    cases: Vec<SuiteCase>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, tolerance: f64, point: &Point, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + Sync,
    {
        let start = Instant::now();
        let GradCheckReport {
            max_rel_error,
            worst,
            coordinates,
        } = grad_check(f, point, STEP)?;
        self.cases.push(SuiteCase {
            name: name.to_string(),
            max_rel_error,
            worst,
            coordinates,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

fn attention_config(dim: usize, scope: NormScope) -> AttentionConfig {
    AttentionConfig {
        embed_dim: 8,
        heads: 2,
        feature_dim: 3,
        levels: 2,
        ref_ts: uniform_ts(3),
        samples: 2,
        point_dim: dim,
        pe_freqs: 4,
        scope,
    }
}

/// Micro model of the end-to-end checks: two queries, `C_e = 8` and a
/// 12×12 input pooled to 6×6 and 3×3 maps.
pub fn micro_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        num_queries: 2,
        num_layers: 1,
        levels: 2,
        embed_dim: 8,
        heads: 2,
        n_ref: 3,
        samples: 2,
        num_classes: 3,
        feature_dim: 4,
        input_channels: 2,
        image_w: 12,
        image_h: 12,
        pe_freqs: 4,
        init_hidden: 8,
        ..ModelConfig::default()
    }
}

fn micro_camera() -> Result<CameraModel> {
    CameraModel::forward_looking(1.5, 0.1, 8.0, 12, 12)
}

/// Runs every check; `seed` fixes all random inputs.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Runner { cases: Vec::new() };
    let tol = OP_TOLERANCE;

    // Bernstein basis in t, for every index of the cubic.
    let t = uniform(&mut rng, &[7], 0.05, 0.95);
    let w = uniform(&mut rng, &[7], -1.0, 1.0);
    let point = Point::from([("t".into(), t)]);
    r.check("bernstein", tol, &point, |g, v| {
        let mut acc: Option<Var> = None;
        for n in 0..=3 {
            let b = g.bernstein(v["t"], n, 3)?;
            let c = contract(g, b, &w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, c)?,
                None => c,
            });
        }
        Ok(acc.expect("four terms"))
    })?;

    // Curve evaluation in control points and parameters, 2D and 3D.
    for dim in [2, 3] {
        let cp = uniform(&mut rng, &[4, dim], -5.0, 5.0);
        let ts = Tensor::vector((0..9).map(|i| (i as f64 + rng.random_range(0.2..0.8)) / 9.0).collect());
        let w = uniform(&mut rng, &[9, dim], -1.0, 1.0);
        let point = Point::from([("cp".into(), cp), ("ts".into(), ts)]);
        r.check(&format!("evaluate_{dim}d"), tol, &point, |g, v| {
            let s = g.bezier_eval(v["cp"], v["ts"])?;
            contract(g, s, &w)
        })?;
    }

    let cp = uniform(&mut rng, &[4, 2], 0.0, 20.0);
    let point = Point::from([("cp".into(), cp)]);
    r.check("curve_length", tol, &point, |g, v| g.curve_length(v["cp"], 49))?;

    // Projection of points in front of a pitched camera.
    let cam = CameraModel::forward_looking(1.5, 0.1, 40.0, 64, 64)?;
    let mut pts = Vec::new();
    for _ in 0..6 {
        pts.extend([rng.random_range(-4.0..4.0), rng.random_range(5.0..40.0), rng.random_range(-0.5..0.5)]);
    }
    let pts = Tensor::matrix(6, 3, pts)?;
    let w = uniform(&mut rng, &[6, 2], -1.0, 1.0);
    let point = Point::from([("points".into(), pts)]);
    r.check("project", tol, &point, |g, v| {
        let p = g.project(v["points"], &cam, crate::camera::DEFAULT_Z_MIN)?;
        contract(g, p, &w)
    })?;

    // Bilinear sampling in the map and in the locations.
    let map = uniform(&mut rng, &[5, 6, 3], -1.0, 1.0);
    let locs = off_grid(&mut rng, 7, 5.0, 4.0);
    let w = uniform(&mut rng, &[7, 3], -1.0, 1.0);
    let point = Point::from([("map".into(), map), ("locs".into(), locs)]);
    r.check("bilinear_sample", tol, &point, |g, v| {
        let s = g.bilinear_sample(v["map"], v["locs"])?;
        contract(g, s, &w)
    })?;

    let x = uniform(&mut rng, &[5, 4, 2], -1.0, 1.0);
    let kernel = uniform(&mut rng, &[18, 3], -0.5, 0.5);
    let w = uniform(&mut rng, &[2, 2, 3], -1.0, 1.0);
    let point = Point::from([("x".into(), x), ("kernel".into(), kernel)]);
    r.check("conv3x3_avg_pool2", tol, &point, |g, v| {
        let y = g.conv3x3(v["x"], v["kernel"])?;
        let p = g.avg_pool2(y)?;
        contract(g, p, &w)
    })?;

    // Attention blocks with every parameter randomised.
    let q = 3;
    for (scope, tag) in [(NormScope::Joint, "joint"), (NormScope::PerLevel, "per_level")] {
        let cfg = attention_config(2, scope);
        let params = AttentionParams::new("attn", cfg.clone())?;
        let mut store = ParamStore::new();
        params.init(&mut store, &mut rng);
        randomize(&mut store, &mut rng, 0.4);
        let mut point: Point = store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        point.insert("e".into(), uniform(&mut rng, &[q, 8], -1.0, 1.0));
        point.insert("refs".into(), uniform(&mut rng, &[q * 3, 2], 0.1, 0.9));

        if tag == "joint" {
            let w = uniform(&mut rng, &[q, 8], -1.0, 1.0);
            let sa_point: Point = point
                .iter()
                .filter(|(k, _)| k.starts_with("attn.pe") || k.starts_with("attn.sa") || *k == "e" || *k == "refs")
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            r.check("positional_encoding_self_attention", tol, &sa_point, |g, v| {
                let pe = params.positional_encoding(g, &store, v["refs"])?;
                let out = params.self_attention(g, &store, v["e"], pe)?;
                contract(g, out.output, &w)
            })?;
        }

        let mut ca_point: Point = point
            .iter()
            .filter(|(k, _)| k.starts_with("attn.ca") || *k == "e")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ca_point.insert("level0".into(), uniform(&mut rng, &[6, 6, 3], -1.0, 1.0));
        ca_point.insert("level1".into(), uniform(&mut rng, &[3, 3, 3], -1.0, 1.0));
        ca_point.insert("ref_px".into(), off_grid(&mut rng, q * 3, 11.0, 11.0));
        let w = uniform(&mut rng, &[q, 8], -1.0, 1.0);
        r.check(&format!("bezier_curve_attention_{tag}"), tol, &ca_point, |g, v| {
            let pyramid = PyramidVars::new(g, vec![v["level0"], v["level1"]], 12, 12)?;
            let out = params.curve_attention(g, &store, v["e"], v["ref_px"], &pyramid)?;
            contract(g, out.output, &w)
        })?;
    }

    // Losses on curve samples.
    for dim in [2, 3] {
        let a = uniform(&mut rng, &[12, dim], 0.0, 10.0);
        let b = uniform(&mut rng, &[12, dim], 0.0, 10.0);
        let point = Point::from([("a".into(), a.clone()), ("b".into(), b)]);
        r.check(&format!("chamfer_iou_directed_{dim}d"), tol, &point, |g, v| g.chamfer_iou(v["a"], v["b"], 4.0))?;
        r.check(&format!("location_loss_{dim}d"), tol, &point, |g, v| g.location_loss(v["a"], v["b"], 4.0))?;

        let gt_cp = ControlPolygon::from_flat(dim, uniform(&mut rng, &[4 * dim], 0.0, 20.0).into_data())?;
        let cfg = LossConfig::new(4.0, 12, vec![20.0; dim])?;
        let gt = GtCurve::from_control_points(&gt_cp, &cfg)?;
        let point = Point::from([("a".into(), a)]);
        r.check(&format!("shape_constraints_{dim}d"), tol, &point, |g, v| {
            let (len, end) = g.shape_constraints(v["a"], &gt, &cfg)?;
            g.add(len, end)
        })?;
    }

    let logits = uniform(&mut rng, &[4, 3], -3.0, 3.0);
    let cfg = LossConfig::new(1.0, 2, vec![1.0, 1.0])?;
    let point = Point::from([("logits".into(), logits)]);
    r.check("focal_loss", tol, &point, |g, v| g.focal_loss(v["logits"], vec![0, 1, 2, 1], &cfg))?;

    for mode in [Mode::TwoD, Mode::ThreeD] {
        micro_model_case(&mut r, &mut rng, mode)?;
    }
    Ok(r.cases)
}

/// Gradient of the full per-layer training loss of a micro model with
/// respect to every parameter.
fn micro_model_case(r: &mut Runner, rng: &mut ChaCha8Rng, mode: Mode) -> Result<()> {
    let cfg = micro_config(mode);
    let mut model = Model::new(cfg.clone(), rng.random())?;
    randomize(&mut model.params, rng, 0.3);
    let raster = uniform(rng, &[12, 12, 2], 0.0, 1.0);
    let cam = match mode {
        Mode::TwoD => None,
        Mode::ThreeD => Some(micro_camera()?),
    };
    let gt_points: Vec<Vec<f64>> = match mode {
        Mode::TwoD => vec![vec![3.0, 11.0], vec![4.0, 8.0], vec![5.5, 5.0], vec![7.0, 2.0]],
        Mode::ThreeD => vec![vec![-1.0, 6.0, 0.0], vec![-0.5, 12.0, 0.1], vec![0.5, 20.0, 0.1], vec![1.0, 28.0, 0.2]],
    };
    let loss = LossConfig::new(
        if mode == Mode::TwoD { 2.0 } else { 1.0 },
        16,
        cfg.extent(),
    )?;
    let gt = GtCurve::from_control_points(&ControlPolygon::new(&gt_points)?, &loss)?;
    let gts = vec![(1usize, gt)];
    let point: Point = model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if point.is_empty() {
        return Err(invalid("micro model has no parameters"));
    }
    r.check(&format!("end_to_end_{}", mode.as_str()), MODEL_TOLERANCE, &point, |g, _| {
        let layers = model.forward_graph(g, &raster, cam.as_ref())?;
        Ok(layer_losses(g, &layers, &gts, &loss, &model.config)?.0)
    })
}
