//! Chamfer-IoU regression losses, the two shape constraints, focal
//! classification loss and the per-layer sum.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bezier::{curve_length, uniform_ts, ControlPolygon, CurveSamples};
use crate::diff::{sigmoid, CustomOp, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};

/// Ground-truth lengths below this are rejected by the length constraint.
pub const MIN_GT_LENGTH: f64 = 1e-9;
/// Lower clamp on `p_t` inside the focal loss.
pub const FOCAL_P_MIN: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Lane half-envelope width (pixels in 2D, metres in 3D).
    pub e: f64,
    /// Dense samples per curve.
    pub n_dis: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Per-coordinate normaliser for endpoints: image extent in 2D, scene
    /// extent in 3D.
    pub extent: Vec<f64>,
}

impl LossConfig {
    pub fn new(e: f64, n_dis: usize, extent: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            e,
            n_dis,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            extent,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e > 0.0) {
            return Err(invalid(format!("lane width e must be positive, got {}", self.e)));
        }
        if self.n_dis < 2 {
            return Err(invalid(format!("N_dis must be at least 2, got {}", self.n_dis)));
        }
        if self.extent.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("endpoint normaliser must be positive"));
        }
        Ok(())
    }

    pub fn ts(&self) -> Vec<f64> {
        uniform_ts(self.n_dis)
    }
}

/// Per-layer loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_loc: f64,
    pub l_len: f64,
    pub l_endpoint: f64,
    pub l_reg: f64,
    pub l_cls: f64,
}

impl LossBreakdown {
    pub fn new(l_loc: f64, l_len: f64, l_endpoint: f64, l_cls: f64) -> Self {
        Self {
            l_loc,
            l_len,
            l_endpoint,
            l_reg: l_loc + l_len + l_endpoint,
            l_cls,
        }
    }

    pub fn total(&self) -> f64 {
        self.l_reg + self.l_cls
    }
}

fn ciou_term(d: f64, e: f64) -> f64 {
    (2.0 * e - d) / (2.0 * e + d)
}

fn ciou_term_dd(d: f64, e: f64) -> f64 {
    -4.0 * e / ((2.0 * e + d) * (2.0 * e + d))
}

/// Nearest point of `b` for each point of `a` (lowest index on ties).
fn nearest(a: &[f64], b: &[f64], dim: usize) -> Vec<(usize, f64)> {
    match dim {
        2 => nearest_fixed::<2>(a, b),
        3 => nearest_fixed::<3>(a, b),
        _ => a
            .chunks(dim)
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, q) in b.chunks(dim).enumerate() {
                    let d2: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                    if d2 < best.1 {
                        best = (j, d2);
                    }
                }
                (best.0, best.1.sqrt())
            })
            .collect(),
    }
}

// Same search with the dimension known at compile time; the inner loop is
// the hot spot of curve fitting and training.
fn nearest_fixed<const D: usize>(a: &[f64], b: &[f64]) -> Vec<(usize, f64)> {
    let (a, _) = a.as_chunks::<D>();
    let (b, _) = b.as_chunks::<D>();
    a.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in b.iter().enumerate() {
                let mut d2 = 0.0;
                for k in 0..D {
                    let t = p[k] - q[k];
                    d2 += t * t;
                }
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

fn check_pair(a_len: usize, b_len: usize, a_dim: usize, b_dim: usize) -> Result<()> {
    if a_len != b_len {
        return Err(shape_err(
            "chamfer_iou",
            format!("sample counts differ: {a_len} vs {b_len}"),
        ));
    }
    if a_dim != b_dim {
        return Err(shape_err(
            "chamfer_iou",
            format!("dimensions differ: {a_dim} vs {b_dim}"),
        ));
    }
    if a_len == 0 {
        return Err(shape_err("chamfer_iou", "empty sample sets"));
    }
    Ok(())
}

/// Directed Chamfer IoU on raw point buffers.
pub fn chamfer_iou_points(a: &[f64], b: &[f64], dim: usize, e: f64) -> f64 {
    let n = a.len() / dim;
    nearest(a, b, dim).iter().map(|(_, d)| ciou_term(*d, e)).sum::<f64>() / n as f64
}

/// `CIoU_{A→B} = mean_i (2e − dᵢ)/(2e + dᵢ)` with `dᵢ` the distance from
/// `pᵢᴬ` to its nearest point of `B`.
pub fn chamfer_iou_directed(a: &CurveSamples, b: &CurveSamples, e: f64) -> Result<f64> {
    check_pair(a.len(), b.len(), a.dim(), b.dim())?;
    if !(e > 0.0) {
        return Err(invalid("lane width e must be positive"));
    }
    Ok(chamfer_iou_points(a.flat(), b.flat(), a.dim(), e))
}

/// `1 − ½(CIoU_{pred→gt} + CIoU_{gt→pred})`.
pub fn location_loss(pred: &CurveSamples, gt: &CurveSamples, e: f64) -> Result<f64> {
    let ab = chamfer_iou_directed(pred, gt, e)?;
    let ba = chamfer_iou_directed(gt, pred, e)?;
    Ok(1.0 - 0.5 * (ab + ba))
}

/// `(L_len, L_endpoint)` for a predicted and a ground-truth polygon.
pub fn shape_constraints(
    pred: &ControlPolygon,
    gt: &ControlPolygon,
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() || cfg.extent.len() != gt.dim() {
        return Err(shape_err(
            "shape_constraints",
            format!(
                "dimensions pred {} gt {} extent {}",
                pred.dim(),
                gt.dim(),
                cfg.extent.len()
            ),
        ));
    }
    let n_seg = cfg.n_dis - 1;
    let gt_len = curve_length(gt, n_seg)?;
    if gt_len < MIN_GT_LENGTH {
        return Err(Error::Degenerate(format!("ground-truth length {gt_len}")));
    }
    let l_len = (curve_length(pred, n_seg)? / gt_len - 1.0).abs();
    let norm_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(&cfg.extent)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let last = pred.len() - 1;
    let l_end = 0.5
        * (norm_dist(pred.point(0), gt.point(0))
            + norm_dist(pred.point(last), gt.point(gt.len() - 1)));
    Ok((l_len, l_end))
}

/// Sigmoid focal loss for one score vector, summed over classes.
pub fn focal_loss(logits: &[f64], target: usize, cfg: &LossConfig) -> Result<f64> {
    if target >= logits.len() {
        return Err(invalid(format!(
            "target class {target} outside {} classes",
            logits.len()
        )));
    }
    Ok(logits
        .iter()
        .enumerate()
        .map(|(k, x)| focal_term(*x, k == target, cfg.focal_alpha, cfg.focal_gamma).0)
        .sum())
}

/// Focal term and its derivative with respect to the logit.
fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let s = if positive { 1.0 } else { -1.0 };
    let alpha_t = if positive { alpha } else { 1.0 - alpha };
    let pt = sigmoid(s * x);
    let one_minus = sigmoid(-s * x);
    let clamped = pt < FOCAL_P_MIN;
    let log_pt = pt.max(FOCAL_P_MIN).ln();
    let w = one_minus.powf(gamma);
    let value = -alpha_t * w * log_pt;
    // d/dpt of −α (1−pt)^γ ln(pt)
    let dw = if gamma == 0.0 { 0.0 } else { -gamma * one_minus.powf(gamma - 1.0) };
    let dlog = if clamped { 0.0 } else { 1.0 / pt };
    let dpt = -alpha_t * (dw * log_pt + w * dlog);
    (value, dpt * s * pt * one_minus)
}

/// Total over layers of `L_reg + L_cls`.
pub fn total_loss(per_layer: &[LossBreakdown]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(invalid("total_loss needs at least one layer"));
    }
    Ok(per_layer.iter().map(LossBreakdown::total).sum())
}

/// Directed Chamfer IoU between two `N×D` point matrices; scalar output.
/// Gradients follow the current nearest-neighbour pairs.
#[derive(Debug)]
pub struct ChamferIouOp {
    pub e: f64,
}

impl CustomOp for ChamferIouOp {
    fn name(&self) -> &'static str {
        "chamfer_iou"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        check_pair(a.rows(), b.rows(), a.cols(), b.cols())?;
        Ok(Tensor::scalar(chamfer_iou_points(a.data(), b.data(), a.cols(), self.e)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let dim = a.cols();
        let n = a.rows() as f64;
        let g = grad.item();
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        for (i, (j, d)) in nearest(a.data(), b.data(), dim).into_iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let coef = g * ciou_term_dd(d, self.e) / (n * d);
            for k in 0..dim {
                let diff = a.data()[i * dim + k] - b.data()[j * dim + k];
                ga[i * dim + k] += coef * diff;
                gb[j * dim + k] -= coef * diff;
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(a.shape().to_vec(), ga)).transpose()?,
            needs[1].then(|| Tensor::new(b.shape().to_vec(), gb)).transpose()?,
        ])
    }
}

/// Sigmoid focal loss over a `Q×K` logit matrix with one target per row;
/// scalar output summed over rows and classes.
#[derive(Debug)]
pub struct FocalLossOp {
    pub targets: Vec<usize>,
    pub alpha: f64,
    pub gamma: f64,
}

impl FocalLossOp {
    fn check(&self, logits: &Tensor) -> Result<usize> {
        let k = logits.cols();
        if logits.rows() != self.targets.len() {
            return Err(shape_err(
                "focal_loss",
                format!("{} targets for {} rows", self.targets.len(), logits.rows()),
            ));
        }
        if let Some(t) = self.targets.iter().find(|t| **t >= k) {
            return Err(invalid(format!("target class {t} outside {k} classes")));
        }
        Ok(k)
    }
}

impl CustomOp for FocalLossOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let k = self.check(inputs[0])?;
        let mut total = 0.0;
        for (row, &t) in inputs[0].data().chunks(k).zip(&self.targets) {
            for (c, x) in row.iter().enumerate() {
                total += focal_term(*x, c == t, self.alpha, self.gamma).0;
            }
        }
        Ok(Tensor::scalar(total))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let k = self.check(logits)?;
        let g = grad.item();
        let mut d = Vec::with_capacity(logits.len());
        for (row, &t) in logits.data().chunks(k).zip(&self.targets) {
            for (c, x) in row.iter().enumerate() {
                d.push(g * focal_term(*x, c == t, self.alpha, self.gamma).1);
            }
        }
        Ok(vec![Some(Tensor::new(logits.shape().to_vec(), d)?)])
    }
}

/// Ground-truth quantities the regression loss compares against.
#[derive(Clone, Debug)]
pub struct GtCurve {
    pub samples: Tensor,
    pub length: f64,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl GtCurve {
    pub fn from_control_points(cp: &ControlPolygon, cfg: &LossConfig) -> Result<Self> {
        let s = crate::bezier::evaluate(cp, &cfg.ts())?;
        Self::from_samples(s.to_tensor())
    }

    /// Dense points already at the loss's sampling density.
    pub fn from_samples(samples: Tensor) -> Result<Self> {
        let dim = samples.cols();
        let n = samples.rows();
        if n < 2 {
            return Err(invalid("ground truth needs at least two samples"));
        }
        let length = crate::bezier::polyline_length(samples.data(), dim);
        if length < MIN_GT_LENGTH {
            return Err(Error::Degenerate(format!("ground-truth length {length}")));
        }
        Ok(Self {
            start: samples.row(0).to_vec(),
            end: samples.row(n - 1).to_vec(),
            samples,
            length,
        })
    }
}

/// Graph nodes for one prediction/ground-truth regression pair.
#[derive(Clone, Copy, Debug)]
pub struct RegressionTerms {
    pub l_loc: Var,
    pub l_len: Var,
    pub l_endpoint: Var,
    pub l_reg: Var,
}

impl Graph {
    pub fn chamfer_iou(&mut self, a: Var, b: Var, e: f64) -> Result<Var> {
        self.custom(Arc::new(ChamferIouOp { e }), &[a, b])
    }

    pub fn location_loss(&mut self, pred: Var, gt: Var, e: f64) -> Result<Var> {
        let ab = self.chamfer_iou(pred, gt, e)?;
        let ba = self.chamfer_iou(gt, pred, e)?;
        let s = self.add(ab, ba)?;
        let h = self.scale(s, -0.5)?;
        self.add_scalar(h, 1.0)
    }

    pub fn focal_loss(&mut self, logits: Var, targets: Vec<usize>, cfg: &LossConfig) -> Result<Var> {
        self.custom(
            Arc::new(FocalLossOp {
                targets,
                alpha: cfg.focal_alpha,
                gamma: cfg.focal_gamma,
            }),
            &[logits],
        )
    }

    /// `L_len` and `L_endpoint` for predicted dense samples (`N_dis×D`, first
    /// and last rows are the curve endpoints).
    pub fn shape_constraints(&mut self, pred_samples: Var, gt: &GtCurve, cfg: &LossConfig) -> Result<(Var, Var)> {
        let n = self.value(pred_samples).rows();
        let dim = self.value(pred_samples).cols();
        if cfg.extent.len() != dim || gt.start.len() != dim {
            return Err(shape_err("shape_constraints", "dimension mismatch"));
        }
        let len = self.polyline_length(pred_samples)?;
        let ratio = self.scale(len, 1.0 / gt.length)?;
        let off = self.add_scalar(ratio, -1.0)?;
        let l_len = self.abs(off)?;

        let ends = self.take_rows(pred_samples, &[0, n - 1])?;
        let target = self.constant(Tensor::matrix(2, dim, [gt.start.clone(), gt.end.clone()].concat())?)?;
        let diff = self.sub(ends, target)?;
        let inv = self.constant(Tensor::vector(cfg.extent.iter().map(|s| 1.0 / s).collect()))?;
        let scaled = self.mul_row(diff, inv)?;
        let norms = self.row_norm(scaled)?;
        let s = self.sum(norms)?;
        let l_end = self.scale(s, 0.5)?;
        Ok((l_len, l_end))
    }

    /// Full `L_reg = L_loc + L_len + L_endpoint` for predicted samples.
    pub fn regression_loss(&mut self, pred_samples: Var, gt: &GtCurve, cfg: &LossConfig) -> Result<RegressionTerms> {
        let gt_var = self.constant(gt.samples.clone())?;
        let l_loc = self.location_loss(pred_samples, gt_var, cfg.e)?;
        let (l_len, l_endpoint) = self.shape_constraints(pred_samples, gt, cfg)?;
        let a = self.add(l_loc, l_len)?;
        let l_reg = self.add(a, l_endpoint)?;
        Ok(RegressionTerms {
            l_loc,
            l_len,
            l_endpoint,
            l_reg,
        })
    }
}

/// Regression loss for a predicted polygon without a graph (used for costs).
pub fn regression_loss_value(pred_samples: &[f64], gt: &GtCurve, cfg: &LossConfig) -> f64 {
    let dim = gt.samples.cols();
    let gd = gt.samples.data();
    let ab = chamfer_iou_points(pred_samples, gd, dim, cfg.e);
    let ba = chamfer_iou_points(gd, pred_samples, dim, cfg.e);
    let l_loc = 1.0 - 0.5 * (ab + ba);
    let len = crate::bezier::polyline_length(pred_samples, dim);
    let l_len = (len / gt.length - 1.0).abs();
    let n = pred_samples.len() / dim;
    let nd = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(&cfg.extent)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let l_end = 0.5 * (nd(&pred_samples[..dim], &gt.start) + nd(&pred_samples[(n - 1) * dim..], &gt.end));
    l_loc + l_len + l_end
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segment(y: f64, n: usize) -> CurveSamples {
        let ts = uniform_ts(n);
        let pts = ts.iter().flat_map(|t| [10.0 * t, y]).collect();
        CurveSamples::new(ts, 2, pts).unwrap()
    }

    fn cfg() -> LossConfig {
        LossConfig::new(10.0, 200, vec![100.0, 100.0]).unwrap()
    }

    #[test]
    fn ciou_analytic_cases() {
        let a = segment(0.0, 200);
        assert_eq!(chamfer_iou_directed(&a, &a, 10.0).unwrap(), 1.0);
        let b = segment(10.0, 200);
        assert!((chamfer_iou_directed(&a, &b, 10.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let c = segment(20.0, 200);
        assert!(chamfer_iou_directed(&a, &c, 10.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ciou_rejects_mismatched_sets() {
        assert!(chamfer_iou_directed(&segment(0.0, 10), &segment(0.0, 11), 1.0).is_err());
    }

    #[test]
    fn location_loss_cases() {
        let a = segment(0.0, 200);
        let b = segment(10.0, 200);
        assert_eq!(location_loss(&a, &a, 10.0).unwrap(), 0.0);
        assert!((location_loss(&a, &b, 10.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let ab = location_loss(&a, &b, 10.0).unwrap();
        let ba = location_loss(&b, &a, 10.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn shape_constraint_cases() {
        let c = cfg();
        let gt = ControlPolygon::new(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let (l_len, l_end) = shape_constraints(&gt, &gt, &c).unwrap();
        assert!(l_len.abs() < 1e-12);
        assert_eq!(l_end, 0.0);
        let long = ControlPolygon::new(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0], vec![6.0, 0.0]]).unwrap();
        let (l_len, _) = shape_constraints(&long, &gt, &c).unwrap();
        assert!((l_len - 1.0).abs() < 1e-12);
        let dot = ControlPolygon::new(&vec![vec![1.0, 1.0]; 4]).unwrap();
        assert!(matches!(shape_constraints(&gt, &dot, &c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn focal_cases() {
        let c = cfg();
        // the positive term at p_t = 0.5
        let (v, _) = focal_term(0.0, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.04332).abs() < 1e-5);
        // confident and correct
        assert!(focal_loss(&[40.0, -40.0], 0, &c).unwrap() < 1e-12);
        // confidently wrong: bounded by the clamp
        let worst = focal_loss(&[-40.0], 0, &c).unwrap();
        assert!((worst - 0.25 * (1.0f64).powi(2) * -(FOCAL_P_MIN.ln())).abs() < 1e-6);
        assert!(focal_loss(&[0.0, 0.0], 2, &c).is_err());
    }

    #[test]
    fn total_loss_cases() {
        assert!(total_loss(&[]).is_err());
        assert_eq!(total_loss(&[LossBreakdown::default(); 3]).unwrap(), 0.0);
        let one = LossBreakdown::new(0.5, 0.25, 0.25, 0.0);
        assert_eq!(total_loss(&[one; 7]).unwrap(), 7.0);
    }
}
