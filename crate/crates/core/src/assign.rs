//! One-to-one label assignment: each ground truth claims its cheapest query,
//! and a query wanted by several ground truths goes to the cheapest claim.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `N_gt × N_query` matching costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n_gt: usize,
    n_query: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_gt: usize, n_query: usize, values: Vec<f64>) -> Result<Self> {
        if n_gt == 0 || n_query == 0 {
            return Err(invalid("cost matrix must be non-empty"));
        }
        if values.len() != n_gt * n_query {
            return Err(invalid(format!(
                "{} costs for a {n_gt}×{n_query} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("costs must be finite"));
        }
        Ok(Self {
            n_gt,
            n_query,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_query = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_query) {
            return Err(invalid("ragged cost rows"));
        }
        Self::new(rows.len(), n_query, rows.concat())
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn get(&self, gt: usize, query: usize) -> f64 {
        self.values[gt * self.n_query + query]
    }

    pub fn row(&self, gt: usize) -> &[f64] {
        &self.values[gt * self.n_query..(gt + 1) * self.n_query]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Query granted to each ground truth.
    pub gt_to_pred: Vec<Option<usize>>,
    pub unassigned_gts: Vec<usize>,
}

impl Assignment {
    /// Ground truth owning each query; `None` is background.
    pub fn pred_to_gt(&self, n_query: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_query];
        for (gt, q) in self.gt_to_pred.iter().enumerate() {
            if let Some(q) = q {
                out[*q] = Some(gt);
            }
        }
        out
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.gt_to_pred
            .iter()
            .enumerate()
            .filter_map(|(gt, q)| q.map(|q| (gt, q)))
    }
}

/// Assignment with one query per ground truth.
///
/// Ground truths propose to queries in ascending cost order (lower query
/// index first on ties). A query keeps the cheapest proposal seen so far,
/// lower ground-truth index first on ties, and the displaced ground truth
/// moves on to its next choice. Ground truths that run out of queries stay
/// unassigned.
pub fn simota_assign(costs: &CostMatrix) -> Assignment {
    let (n_gt, n_q) = (costs.n_gt(), costs.n_query());
    let prefs: Vec<Vec<usize>> = (0..n_gt)
        .map(|i| {
            let mut order: Vec<usize> = (0..n_q).collect();
            order.sort_by(|&a, &b| costs.get(i, a).total_cmp(&costs.get(i, b)).then(a.cmp(&b)));
            order
        })
        .collect();
    let mut next = vec![0usize; n_gt];
    let mut holder: Vec<Option<usize>> = vec![None; n_q];
    let mut free: Vec<usize> = (0..n_gt).rev().collect();

    while let Some(gt) = free.pop() {
        let Some(&q) = prefs[gt].get(next[gt]) else {
            continue;
        };
        next[gt] += 1;
        match holder[q] {
            None => holder[q] = Some(gt),
            Some(cur) => {
                let better = costs
                    .get(gt, q)
                    .total_cmp(&costs.get(cur, q))
                    .then(gt.cmp(&cur))
                    .is_lt();
                if better {
                    holder[q] = Some(gt);
                    free.push(cur);
                } else {
                    free.push(gt);
                }
            }
        }
    }

    let mut gt_to_pred = vec![None; n_gt];
    for (q, h) in holder.iter().enumerate() {
        if let Some(gt) = h {
            gt_to_pred[*gt] = Some(q);
        }
    }
    let unassigned_gts = (0..n_gt).filter(|i| gt_to_pred[*i].is_none()).collect();
    Assignment {
        gt_to_pred,
        unassigned_gts,
    }
}
