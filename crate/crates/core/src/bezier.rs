//! Bézier curve geometry: Bernstein basis, evaluation, sampling, length and
//! a least-squares cubic fit.
//!
//! Curves are stored as `(N+1)×D` control polygons (D = 2 for image pixels,
//! D = 3 for metres in the ego frame). The model path always uses cubics.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diff::{CustomOp, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};

pub const CUBIC: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPolygon {
    dim: usize,
    points: Vec<f64>,
}

impl ControlPolygon {
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| invalid("control polygon needs at least one point"))?;
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(invalid(format!(
                    "control points of mixed dimension {} and {dim}",
                    p.len()
                )));
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat(dim, flat)
    }

    pub fn from_flat(dim: usize, points: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
        }
        if points.len() < 2 * dim || points.len() % dim != 0 {
            return Err(invalid(format!(
                "{} coordinates do not form ≥ 2 points of dimension {dim}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("control point coordinates must be finite"));
        }
        Ok(Self { dim, points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [_, d] => Self::from_flat(*d, t.data().to_vec()),
            s => Err(shape_err("ControlPolygon::from_tensor", format!("{s:?}"))),
        }
    }

    /// Curve order N (number of points minus one).
    pub fn order(&self) -> usize {
        self.points.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.points.clone()).expect("sized")
    }

    pub fn reversed(&self) -> Self {
        let mut pts: Vec<&[f64]> = self.points().collect();
        pts.reverse();
        Self {
            dim: self.dim,
            points: pts.concat(),
        }
    }

    /// Applies `f` to every control point.
    pub fn map_points(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let pts: Vec<Vec<f64>> = self.points().map(f).collect();
        Self::new(&pts)
    }
}

/// Points sampled along a curve at ascending parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSamples {
    ts: Vec<f64>,
    dim: usize,
    points: Vec<f64>,
}

impl CurveSamples {
    pub fn new(ts: Vec<f64>, dim: usize, points: Vec<f64>) -> Result<Self> {
        if ts.len() * dim != points.len() {
            return Err(shape_err(
                "CurveSamples",
                format!("{} parameters for {} coordinates of dim {dim}", ts.len(), points.len()),
            ));
        }
        if ts.first().is_some_and(|t| *t < 0.0)
            || ts.last().is_some_and(|t| *t > 1.0)
            || ts.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(invalid("sample parameters must be strictly increasing in [0, 1]"));
        }
        Ok(Self { ts, dim, points })
    }

    /// Dense points with uniform parameters attached; used for ground-truth
    /// point lists whose parameterisation is unknown.
    pub fn from_points(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = points.len() / dim.max(1);
        Self::new(uniform_ts(n), dim, points)
    }

    pub fn ts(&self) -> &[f64] {
        &self.ts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.points.clone()).expect("sized")
    }
}

/// `n` uniformly spaced parameters covering `[0, 1]` (`n ≥ 2`), or `[0.5]`.
pub fn uniform_ts(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn bernstein_unchecked(n: usize, order: usize, t: f64) -> f64 {
    binomial(order, n) * t.powi(n as i32) * (1.0 - t).powi((order - n) as i32)
}

/// `d/dt` of the Bernstein polynomial.
fn bernstein_dt_unchecked(n: usize, order: usize, t: f64) -> f64 {
    if order == 0 {
        return 0.0;
    }
    let lo = if n >= 1 { bernstein_unchecked(n - 1, order - 1, t) } else { 0.0 };
    let hi = if n < order { bernstein_unchecked(n, order - 1, t) } else { 0.0 };
    order as f64 * (lo - hi)
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("curve parameter {t} outside [0, 1]")));
    }
    Ok(())
}

/// Bernstein basis polynomial `C(N, n) tⁿ (1−t)^(N−n)`.
pub fn bernstein(n: usize, order: usize, t: f64) -> Result<f64> {
    if n > order {
        return Err(invalid(format!("basis index {n} exceeds order {order}")));
    }
    check_t(t)?;
    Ok(bernstein_unchecked(n, order, t))
}

/// `S(t) = Σₙ bₙ,N(t) · cₙ₊₁` at every `t` in `ts`.
pub fn evaluate(cp: &ControlPolygon, ts: &[f64]) -> Result<CurveSamples> {
    let order = cp.order();
    let dim = cp.dim();
    let mut points = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        check_t(t)?;
        // Summing offsets from the nearer endpoint keeps endpoints and
        // coincident control points exact.
        let anchor = if t <= 0.5 { cp.point(0) } else { cp.point(order) };
        let mut p = anchor.to_vec();
        for (n, c) in cp.points().enumerate() {
            let b = bernstein_unchecked(n, order, t);
            for ((pd, cd), ad) in p.iter_mut().zip(c).zip(anchor) {
                *pd += b * (cd - ad);
            }
        }
        points.extend(p);
    }
    CurveSamples::new(ts.to_vec(), dim, points)
}

/// Total length of a point sequence taken as a polyline.
pub fn polyline_length(points: &[f64], dim: usize) -> f64 {
    points
        .chunks(dim)
        .zip(points.chunks(dim).skip(1))
        .map(|(a, b)| dist(a, b))
        .sum()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Polyline length over `n_seg + 1` uniform parameter samples.
pub fn curve_length(cp: &ControlPolygon, n_seg: usize) -> Result<f64> {
    if n_seg == 0 {
        return Err(invalid("curve_length needs at least one segment"));
    }
    let s = evaluate(cp, &uniform_ts(n_seg + 1))?;
    Ok(polyline_length(s.flat(), s.dim()))
}

/// Cap on parameter-correction rounds in [`fit_control_points`].
const MAX_CORRECTIONS: usize = 2000;

fn solve_cubic(points: &[Vec<f64>], ts: &[f64]) -> Result<(ControlPolygon, f64)> {
    let (n, dim) = (points.len(), points[0].len());
    let basis = DMatrix::from_fn(n, CUBIC + 1, |i, j| bernstein_unchecked(j, CUBIC, ts[i]));
    let rhs = DMatrix::from_fn(n, dim, |i, j| points[i][j]);
    let sol = basis
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Degenerate(format!("least-squares solve failed: {e}")))?;
    let residual = (basis * &sol - rhs).norm_squared();
    let flat: Vec<f64> = (0..=CUBIC).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| sol[(i, j)]).collect();
    Ok((ControlPolygon::from_flat(dim, flat)?, residual))
}

/// Value, first and second derivative of a cubic at `t`.
fn cubic_jet(cp: &ControlPolygon, t: f64) -> [Vec<f64>; 3] {
    let dim = cp.dim();
    let c = |i: usize, d: usize| cp.point(i)[d];
    let mut out = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    for d in 0..dim {
        out[0][d] = (0..=CUBIC).map(|i| bernstein_unchecked(i, CUBIC, t) * c(i, d)).sum();
        out[1][d] = 3.0 * (0..CUBIC).map(|i| bernstein_unchecked(i, 2, t) * (c(i + 1, d) - c(i, d))).sum::<f64>();
        out[2][d] = 6.0
            * (0..CUBIC - 1)
                .map(|i| bernstein_unchecked(i, 1, t) * (c(i + 2, d) - 2.0 * c(i + 1, d) + c(i, d)))
                .sum::<f64>();
    }
    out
}

/// One safeguarded Newton step towards the parameter of the point of `cp`
/// nearest to `p`; the step is halved until the distance does not grow.
fn project_onto(cp: &ControlPolygon, p: &[f64], t: f64) -> f64 {
    let [s, d1, d2] = cubic_jet(cp, t);
    let diff: Vec<f64> = s.iter().zip(p).map(|(a, b)| a - b).collect();
    let grad: f64 = diff.iter().zip(&d1).map(|(a, b)| a * b).sum();
    let curv: f64 = d1.iter().map(|v| v * v).sum::<f64>() + diff.iter().zip(&d2).map(|(a, b)| a * b).sum::<f64>();
    let speed: f64 = d1.iter().map(|v| v * v).sum();
    // Gauss-Newton when the full Hessian is not positive.
    let den = if curv > 0.0 { curv } else { speed };
    if !(den > 0.0) {
        return t;
    }
    let d0: f64 = diff.iter().map(|v| v * v).sum();
    let mut step = grad / den;
    for _ in 0..30 {
        let cand = (t - step).clamp(0.0, 1.0);
        let q = cubic_jet(cp, cand);
        let d: f64 = q[0].iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d <= d0 {
            return cand;
        }
        step *= 0.5;
    }
    t
}

/// Least-squares cubic through `points`. Parameters start at normalised
/// chord length; interior ones are then refined by Newton projection onto
/// the current fit and the system re-solved, for as long as the residual
/// keeps falling. The first and last points stay at `t = 0` and `t = 1`.
pub fn fit_control_points(points: &[Vec<f64>]) -> Result<ControlPolygon> {
    if points.len() < 4 {
        return Err(invalid(format!(
            "cubic fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("fit input points have mixed dimension"));
    }
    let mut chord = vec![0.0];
    for w in points.windows(2) {
        let last = *chord.last().expect("non-empty");
        chord.push(last + dist(&w[0], &w[1]));
    }
    let total = *chord.last().expect("non-empty");
    if total <= 0.0 {
        return Err(Error::Degenerate("all fit input points coincide".into()));
    }
    let mut ts: Vec<f64> = chord.iter().map(|c| c / total).collect();
    let (mut best, mut residual) = solve_cubic(points, &ts)?;
    let n = points.len();
    for _ in 0..MAX_CORRECTIONS {
        if residual <= 0.0 {
            break;
        }
        for i in 1..n - 1 {
            ts[i] = project_onto(&best, &points[i], ts[i]);
        }
        let (cp, r) = solve_cubic(points, &ts)?;
        if !(r < residual * (1.0 - 1e-12)) {
            if r < residual {
                best = cp;
            }
            break;
        }
        best = cp;
        residual = r;
    }
    Ok(polish(points, best, &mut ts))
}

/// Sum of squared distances between `points` and the curve at `ts`.
fn fit_residual(cp: &ControlPolygon, points: &[Vec<f64>], ts: &[f64]) -> f64 {
    points
        .iter()
        .zip(ts)
        .map(|(p, &t)| cubic_jet(cp, t)[0].iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// Levenberg-Marquardt over control points and interior parameters jointly.
fn polish(points: &[Vec<f64>], start: ControlPolygon, ts: &mut [f64]) -> ControlPolygon {
    let (n, dim) = (points.len(), start.dim());
    let n_cp = (CUBIC + 1) * dim;
    let n_var = n_cp + n - 2;
    let mut cp = start;
    let mut res = fit_residual(&cp, points, ts);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        if res <= 0.0 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(n * dim, n_var);
        let mut r = nalgebra::DVector::<f64>::zeros(n * dim);
        for (i, (p, &t)) in points.iter().zip(ts.iter()).enumerate() {
            let [s, d1, _] = cubic_jet(&cp, t);
            for d in 0..dim {
                let row = i * dim + d;
                r[row] = s[d] - p[d];
                for j in 0..=CUBIC {
                    jac[(row, j * dim + d)] = bernstein_unchecked(j, CUBIC, t);
                }
                if i > 0 && i < n - 1 {
                    jac[(row, n_cp + i - 1)] = d1[d];
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for k in 0..n_var {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let flat: Vec<f64> = cp.flat().iter().zip(step.iter()).map(|(c, s)| c + s).collect();
            let Ok(cand) = ControlPolygon::from_flat(dim, flat) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand_ts = ts.to_vec();
            for i in 1..n - 1 {
                cand_ts[i] = (ts[i] + step[n_cp + i - 1]).clamp(0.0, 1.0);
            }
            let cand_res = fit_residual(&cand, points, &cand_ts);
            if cand_res < res {
                let gain = res - cand_res;
                cp = cand;
                ts.copy_from_slice(&cand_ts);
                res = cand_res;
                lambda = (lambda / 3.0).max(1e-12);
                improved = gain > 1e-30;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    cp
}

/// Bernstein polynomial `b_{n,N}` applied elementwise to a tensor of `t`.
#[derive(Debug)]
pub struct BernsteinOp {
    pub n: usize,
    pub order: usize,
}

impl CustomOp for BernsteinOp {
    fn name(&self) -> &'static str {
        "bernstein"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let t = inputs[0];
        let mut data = Vec::with_capacity(t.len());
        for &v in t.data() {
            data.push(bernstein(self.n, self.order, v)?);
        }
        Tensor::new(t.shape().to_vec(), data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let t = inputs[0];
        let data = t
            .data()
            .iter()
            .zip(grad.data())
            .map(|(v, g)| g * bernstein_dt_unchecked(self.n, self.order, *v))
            .collect();
        Ok(vec![Some(Tensor::new(t.shape().to_vec(), data)?)])
    }
}

/// Curve evaluation: control points `(N+1)×D` and parameters `K` → `K×D`.
#[derive(Debug, Default)]
pub struct BezierEvalOp;

impl CustomOp for BezierEvalOp {
    fn name(&self) -> &'static str {
        "bezier_eval"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let cp = ControlPolygon::from_tensor(inputs[0])?;
        let s = evaluate(&cp, inputs[1].data())?;
        Tensor::new(vec![s.len(), cp.dim()], s.points)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (cp, ts) = (inputs[0], inputs[1]);
        let (rows, dim) = (cp.rows(), cp.cols());
        let order = rows - 1;
        let gd = grad.data();
        let mut gcp = needs[0].then(|| vec![0.0; cp.len()]);
        let mut gts = needs[1].then(|| vec![0.0; ts.len()]);
        for (k, &t) in ts.data().iter().enumerate() {
            let gk = &gd[k * dim..(k + 1) * dim];
            for n in 0..=order {
                let c = &cp.data()[n * dim..(n + 1) * dim];
                if let Some(gc) = gcp.as_mut() {
                    let b = bernstein_unchecked(n, order, t);
                    for (a, g) in gc[n * dim..(n + 1) * dim].iter_mut().zip(gk) {
                        *a += b * g;
                    }
                }
                if let Some(gt) = gts.as_mut() {
                    let db = bernstein_dt_unchecked(n, order, t);
                    gt[k] += db * c.iter().zip(gk).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        Ok(vec![
            gcp.map(|d| Tensor::new(cp.shape().to_vec(), d)).transpose()?,
            gts.map(|d| Tensor::new(ts.shape().to_vec(), d)).transpose()?,
        ])
    }
}

/// Bernstein basis matrix `K×(N+1)` for parameters `ts`.
pub fn basis_matrix(ts: &[f64], order: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * (order + 1));
    for &t in ts {
        check_t(t)?;
        data.extend((0..=order).map(|n| bernstein_unchecked(n, order, t)));
    }
    Tensor::new(vec![ts.len(), order + 1], data)
}

impl Graph {
    pub fn bernstein(&mut self, t: Var, n: usize, order: usize) -> Result<Var> {
        if n > order {
            return Err(invalid(format!("basis index {n} exceeds order {order}")));
        }
        self.custom(Arc::new(BernsteinOp { n, order }), &[t])
    }

    pub fn bezier_eval(&mut self, cp: Var, ts: Var) -> Result<Var> {
        self.custom(Arc::new(BezierEvalOp), &[cp, ts])
    }

    /// Evaluates a batch of curves. `cps` is `Q×((N+1)·D)` with points laid
    /// out row by row; the result is `(Q·K)×D`, query-major.
    pub fn bezier_eval_batch(&mut self, cps: Var, dim: usize, ts: &[f64]) -> Result<Var> {
        let (q, width) = (self.value(cps).rows(), self.value(cps).cols());
        if dim == 0 || width % dim != 0 || width / dim < 2 {
            return Err(shape_err("bezier_eval_batch", format!("{width} columns for dimension {dim}")));
        }
        let np = width / dim;
        let basis = basis_matrix(ts, np - 1)?;
        let k = ts.len();
        let mut block = vec![0.0; q * k * q * np];
        for b in 0..q {
            for i in 0..k {
                let row = (b * k + i) * q * np + b * np;
                block[row..row + np].copy_from_slice(basis.row(i));
            }
        }
        let block = self.constant(Tensor::new(vec![q * k, q * np], block)?)?;
        let pts = self.reshape(cps, &[q * np, dim])?;
        self.matmul(block, pts)
    }

    /// Polyline length of the rows of a `K×D` point matrix.
    pub fn polyline_length(&mut self, points: Var) -> Result<Var> {
        let k = self.value(points).rows();
        if k < 2 {
            return Err(invalid("polyline needs at least two points"));
        }
        let head: Vec<usize> = (0..k - 1).collect();
        let tail: Vec<usize> = (1..k).collect();
        let a = self.take_rows(points, &head)?;
        let b = self.take_rows(points, &tail)?;
        let d = self.sub(b, a)?;
        let n = self.row_norm(d)?;
        self.sum(n)
    }

    /// Differentiable `curve_length` of a control polygon variable.
    pub fn curve_length(&mut self, cp: Var, n_seg: usize) -> Result<Var> {
        if n_seg == 0 {
            return Err(invalid("curve_length needs at least one segment"));
        }
        let ts = self.constant(Tensor::vector(uniform_ts(n_seg + 1)))?;
        let pts = self.bezier_eval(cp, ts)?;
        self.polyline_length(pts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(points: &[[f64; 2]]) -> ControlPolygon {
        ControlPolygon::new(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn bernstein_examples() {
        assert_eq!(bernstein(0, 3, 0.0).unwrap(), 1.0);
        assert_eq!(bernstein(3, 3, 1.0).unwrap(), 1.0);
        assert!((bernstein(1, 3, 0.5).unwrap() - 0.375).abs() < 1e-15);
        assert!(bernstein(4, 3, 0.5).is_err());
        assert!(bernstein(1, 3, 1.5).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let line = cp(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let s = evaluate(&line, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(s.point(0), &[0.0, 0.0]);
        assert!((s.point(1)[0] - 1.5).abs() < 1e-15 && (s.point(1)[1] - 1.5).abs() < 1e-15);
        assert_eq!(s.point(2), &[3.0, 3.0]);

        let arch = cp(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        let s = evaluate(&arch, &[0.5]).unwrap();
        assert!((s.point(0)[0] - 0.5).abs() < 1e-15);
        assert!((s.point(0)[1] - 0.75).abs() < 1e-15);

        assert!(evaluate(&arch, &[1.01]).is_err());
    }

    #[test]
    fn length_examples() {
        let straight = cp(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        assert!((curve_length(&straight, 199).unwrap() - 3.0).abs() < 1e-12);
        let point = cp(&[[2.0, 5.0]; 4]);
        assert_eq!(curve_length(&point, 199).unwrap(), 0.0);
        assert!(curve_length(&point, 0).is_err());
    }

    #[test]
    fn fit_rejects_bad_input() {
        let few = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(fit_control_points(&few), Err(Error::InvalidArgument(_))));
        let same = vec![vec![1.0, 1.0]; 6];
        assert!(matches!(fit_control_points(&same), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fit_collinear_stays_collinear() {
        let pts: Vec<Vec<f64>> = (0..9).map(|i| {
            let s = (i as f64 / 8.0).powi(2) * 10.0;
            vec![1.0 + 2.0 * s, -3.0 + 0.5 * s]
        }).collect();
        let fit = fit_control_points(&pts).unwrap();
        for p in fit.points() {
            // distance to the line through (1,-3) with direction (2, 0.5)
            let (dx, dy) = (p[0] - 1.0, p[1] + 3.0);
            let cross = (dx * 0.5 - dy * 2.0).abs() / (4.0f64 + 0.25).sqrt();
            assert!(cross < 1e-9, "off-line by {cross}");
        }
    }

    #[test]
    fn control_polygon_validation() {
        assert!(ControlPolygon::new(&[vec![0.0, 0.0], vec![1.0, 1.0, 1.0]]).is_err());
        assert!(ControlPolygon::new(&[vec![0.0], vec![1.0]]).is_err());
        assert!(ControlPolygon::new(&[vec![0.0, f64::NAN], vec![1.0, 1.0]]).is_err());
        let c = cp(&[[0.0, 0.0], [1.0, 2.0], [3.0, 3.0], [4.0, 1.0]]);
        assert_eq!(c.order(), 3);
        assert_eq!(c.reversed().point(0), &[4.0, 1.0]);
    }
}
