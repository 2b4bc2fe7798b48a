use std::collections::BTreeMap;

use rayon::prelude::*;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, point: &BTreeMap<String, Tensor>, grad: bool) -> Result<(f64, Graph, BTreeMap<String, Var>, Var)>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut vars = BTreeMap::new();
    for (name, t) in point {
        vars.insert(name.clone(), g.input(name, t.clone(), grad)?);
    }
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            node: out.index(),
            op: "grad_check",
        });
    }
    Ok((v, g, vars, out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) − f(x−h)) / 2h` at every coordinate of every input.
///
/// The error per coordinate is `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &BTreeMap<String, Tensor>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + Sync,
{
    if !(step > 0.0) {
        return Err(invalid(format!("step must be positive, got {step}")));
    }
    let (_, g, vars, out) = evaluate(&f, point, true)?;
    let grads = g.backward_scalar(out)?;
    let analytic: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(name, v)| {
            let t = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
            (name.clone(), t)
        })
        .collect();

    let coords: Vec<(String, usize)> = point
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();

    let errors: Vec<(f64, String, usize)> = coords
        .par_iter()
        .map(|(name, i)| -> Result<(f64, String, usize)> {
            let mut shifted = point.clone();
            let x0 = point[name].data()[*i];
            shifted.get_mut(name).expect("present").data_mut()[*i] = x0 + step;
            let (fp, ..) = evaluate(&f, &shifted, false)?;
            shifted.get_mut(name).expect("present").data_mut()[*i] = x0 - step;
            let (fm, ..) = evaluate(&f, &shifted, false)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[name].data()[*i];
            Ok(((a - numeric).abs() / numeric.abs().max(1.0), name.clone(), *i))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: errors.len(),
    };
    for (e, name, i) in errors {
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((name, i));
        }
    }
    Ok(report)
}
