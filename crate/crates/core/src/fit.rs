//! Fitting one cubic to a point sequence by gradient descent on a curve loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bezier::{fit_control_points, polyline_length, uniform_ts, ControlPolygon};
use crate::diff::{poly_lr, AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::loss::{GtCurve, LossConfig};

/// Starting polygon of the descent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitInit {
    /// Chord-length least squares.
    #[default]
    LeastSquares,
    /// Evenly spaced points on the segment between the first and last input.
    Chord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub e: f64,
    pub n_dis: usize,
    pub iters: usize,
    /// Step size in units of the input's bounding-box diagonal.
    pub lr: f64,
    pub lr_min: f64,
    pub init: FitInit,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            e: 10.0,
            n_dis: 200,
            iters: 2000,
            lr: 1e-3,
            lr_min: 1e-6,
            init: FitInit::LeastSquares,
        }
    }
}

/// What a fitting objective sees: the target resampled to `n_dis` points
/// evenly spaced by arc length, and the loss settings.
#[derive(Clone, Debug)]
pub struct FitTarget {
    pub gt: GtCurve,
    pub loss: LossConfig,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub control_points: ControlPolygon,
    /// Objective value before each update, then after the last.
    pub history: Vec<f64>,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }
}

/// `n` points evenly spaced by arc length along a polyline.
pub fn resample_polyline(points: &[Vec<f64>], n: usize) -> Result<Vec<Vec<f64>>> {
    if points.len() < 2 || n < 2 {
        return Err(invalid("resampling needs at least two points in and out"));
    }
    let dim = points[0].len();
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let total = polyline_length(&flat, dim);
    if total <= 0.0 {
        return Err(Error::Degenerate("input points coincide".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut walked = 0.0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        loop {
            let len = crate::bezier::dist(&points[seg], &points[seg + 1]);
            if walked + len >= target || seg + 2 == points.len() {
                let f = if len > 0.0 { ((target - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push(points[seg].iter().zip(&points[seg + 1]).map(|(a, b)| a + f * (b - a)).collect());
                break;
            }
            walked += len;
            seg += 1;
        }
    }
    Ok(out)
}

fn bbox(points: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let dim = points[0].len();
    let lo: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let diag = lo.iter().zip(&hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    (lo, diag)
}

/// The regression loss `L_loc + L_len + L_endpoint` against the target.
pub fn regression_objective(g: &mut Graph, pred: Var, target: &FitTarget) -> Result<Var> {
    Ok(g.regression_loss(pred, &target.gt, &target.loss)?.l_reg)
}

/// Fits with [`regression_objective`].
pub fn fit_curve(points: &[Vec<f64>], cfg: &FitConfig) -> Result<FitResult> {
    fit_curve_with(points, cfg, regression_objective)
}

/// Fits a cubic to `points` by Adam on `objective`, which receives the
/// predicted curve as `n_dis×D` samples at uniform parameters.
pub fn fit_curve_with<F>(points: &[Vec<f64>], cfg: &FitConfig, objective: F) -> Result<FitResult>
where
    F: Fn(&mut Graph, Var, &FitTarget) -> Result<Var>,
{
    if points.len() < 4 {
        return Err(invalid(format!("fitting needs at least 4 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(invalid("points must be finite and share one dimension"));
    }
    let (lo, diag) = bbox(points);
    if diag <= 0.0 {
        return Err(Error::Degenerate("input points coincide".into()));
    }
    let loss = LossConfig::new(cfg.e, cfg.n_dis, vec![diag; dim])?;
    let dense = resample_polyline(points, cfg.n_dis)?;
    let gt = GtCurve::from_samples(Tensor::matrix(cfg.n_dis, dim, dense.concat())?)?;
    let target = FitTarget { gt, loss };

    let start = match cfg.init {
        FitInit::LeastSquares => fit_control_points(points)?,
        FitInit::Chord => {
            let (a, b) = (&points[0], &points[points.len() - 1]);
            let cps: Vec<Vec<f64>> = uniform_ts(4)
                .iter()
                .map(|f| a.iter().zip(b).map(|(x, y)| x + f * (y - x)).collect())
                .collect();
            ControlPolygon::new(&cps)?
        }
    };
    // Optimise in box-relative units so the step size is scale-free.
    let unit: Vec<f64> = start
        .points()
        .flat_map(|p| p.iter().zip(&lo).map(|(v, l)| (v - l) / diag).collect::<Vec<_>>())
        .collect();
    let mut store = ParamStore::new();
    store.insert("control_points", Tensor::matrix(1, 4 * dim, unit)?);
    let offset = Tensor::vector((0..4).flat_map(|_| lo.iter().copied()).collect());
    let ts = uniform_ts(cfg.n_dis);
    let adam = AdamWConfig::default();
    let mut opt = AdamW::new();
    let mut history = Vec::with_capacity(cfg.iters + 1);

    let run = |store: &ParamStore| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let u = g.param(store, "control_points")?;
        let scaled = g.scale(u, diag)?;
        let off = g.constant(offset.clone())?;
        let cp = g.add_row(scaled, off)?;
        let pred = g.bezier_eval_batch(cp, dim, &ts)?;
        let value = objective(&mut g, pred, &target)?;
        let grads = g.backward_scalar(value)?;
        Ok((g.scalar(value), grads.named(&g)))
    };
    for it in 0..cfg.iters {
        let (value, grads) = run(&store)?;
        history.push(value);
        opt.update(&mut store, &grads, poly_lr(cfg.lr, cfg.lr_min, 1.0, it, cfg.iters), &adam)?;
    }
    history.push(run(&store)?.0);

    let u = store.get("control_points").expect("inserted").data();
    let cps: Vec<Vec<f64>> = u
        .chunks(dim)
        .map(|p| p.iter().zip(&lo).map(|(v, l)| v * diag + l).collect())
        .collect();
    Ok(FitResult {
        control_points: ControlPolygon::new(&cps)?,
        history,
    })
}
