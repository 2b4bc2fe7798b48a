//! Prediction/ground-truth matching and detection metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bezier::{evaluate, uniform_ts};
use crate::error::{invalid, Result};
use crate::lanes::LaneSet;
use crate::loss::chamfer_iou_points;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Counts and category hits for one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub correct_category: usize,
    /// `(prediction, ground truth)` index pairs.
    pub matches: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub category_accuracy: f64,
    pub scenes: Vec<SceneScore>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneScore>) -> Self {
        let tp = scenes.iter().map(|s| s.tp).sum();
        let fp = scenes.iter().map(|s| s.fp).sum();
        let fn_ = scenes.iter().map(|s| s.fn_).sum();
        let correct: usize = scenes.iter().map(|s| s.correct_category).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            category_accuracy: ratio(correct, tp),
            scenes,
        }
    }

    /// One row per scene.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,tp,fp,fn,precision,recall,f1,category_accuracy\n");
        for s in &self.scenes {
            let r = EvalReport::from_scenes(vec![s.clone()]);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.scene_id, s.tp, s.fp, s.fn_, r.precision, r.recall, r.f1, r.category_accuracy
            ));
        }
        out
    }
}

/// `½(CIoU_{A→B} + CIoU_{B→A})` on equally sized flat point sets.
pub fn symmetric_ciou(a: &[f64], b: &[f64], dim: usize, e: f64) -> f64 {
    0.5 * (chamfer_iou_points(a, b, dim, e) + chamfer_iou_points(b, a, dim, e))
}

fn point_to_polyline(p: &[f64], poly: &[f64], dim: usize) -> f64 {
    let pts: Vec<&[f64]> = poly.chunks(dim).collect();
    if pts.len() == 1 {
        return crate::bezier::dist(p, pts[0]);
    }
    pts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let ab: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
            let t = if ab > 0.0 {
                let ap: f64 = a.iter().zip(b).zip(p).map(|((x, y), z)| (y - x) * (z - x)).sum();
                (ap / ab).clamp(0.0, 1.0)
            } else {
                0.0
            };
            p.iter()
                .zip(a.iter().zip(b))
                .map(|(z, (x, y))| (x + t * (y - x) - z).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Mean point-to-polyline distance, averaged over both directions.
pub fn symmetric_chamfer_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let one_way = |x: &[f64], y: &[f64]| {
        let n = x.len() / dim;
        x.chunks(dim).map(|p| point_to_polyline(p, y, dim)).sum::<f64>() / n as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

/// Greedy one-to-one matching of one scene. Predictions are visited by
/// descending score (lane index on ties); each claims the unmatched ground
/// truth of highest symmetric CIoU if that reaches `threshold`.
pub fn match_and_score(preds: &LaneSet, gts: &LaneSet, threshold: f64, e: f64, n_dis: usize) -> Result<SceneScore> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    if !(e > 0.0) || n_dis < 2 {
        return Err(invalid("need e > 0 and at least two samples"));
    }
    if preds.mode != gts.mode {
        return Err(invalid("prediction and ground-truth modes differ"));
    }
    let dim = gts.mode.dim();
    let ts = uniform_ts(n_dis);
    let dense = |set: &LaneSet| -> Result<Vec<Vec<f64>>> {
        set.lanes
            .iter()
            .map(|l| Ok(evaluate(&l.control_points, &ts)?.flat().to_vec()))
            .collect()
    };
    let (pd, gd) = (dense(preds)?, dense(gts)?);
    let mut order: Vec<usize> = (0..preds.lanes.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (preds.lanes[a].score.unwrap_or(1.0), preds.lanes[b].score.unwrap_or(1.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });

    let mut taken = vec![false; gts.lanes.len()];
    let mut score = SceneScore {
        scene_id: gts.scene_id.clone(),
        ..SceneScore::default()
    };
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, used) in taken.iter().enumerate() {
            if *used {
                continue;
            }
            let s = symmetric_ciou(&pd[p], &gd[g], dim, e);
            if s >= threshold && best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                score.tp += 1;
                if preds.lanes[p].category == gts.lanes[g].category {
                    score.correct_category += 1;
                }
                score.matches.push((p, g));
            }
            None => score.fp += 1,
        }
    }
    score.fn_ = taken.iter().filter(|t| !**t).count();
    Ok(score)
}

/// Scores `(prediction, ground truth)` pairs scene by scene.
pub fn evaluate_sets(pairs: &[(LaneSet, LaneSet)], threshold: f64, e: f64, n_dis: usize) -> Result<EvalReport> {
    let scenes = pairs
        .par_iter()
        .map(|(p, g)| match_and_score(p, g, threshold, e, n_dis))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(scenes))
}
