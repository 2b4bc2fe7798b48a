use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LayerVars, Model, ModelConfig};
use crate::assign::{simota_assign, CostMatrix};
use crate::diff::{poly_lr, AdamW, AdamWConfig, Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_sets, EvalReport};
use crate::lanes::{LaneSet, Mode};
use crate::loss::{focal_loss, regression_loss_value, GtCurve, LossBreakdown, LossConfig};
use crate::synth::Scene;

/// Lane half-width used by default for pixel-space curves.
pub const DEFAULT_E_2D: f64 = 3.0;
/// Lane half-width used by default for metric curves.
pub const DEFAULT_E_3D: f64 = 0.9;

pub fn default_e(mode: Mode) -> f64 {
    match mode {
        Mode::TwoD => DEFAULT_E_2D,
        Mode::ThreeD => DEFAULT_E_3D,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Starting learning rate; decays polynomially to `lr_min`.
    pub lr: f64,
    pub lr_min: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the batch gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    pub e: f64,
    pub n_dis: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            lr_min: 1e-5,
            poly_power: 2.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            e: DEFAULT_E_2D,
            n_dis: 200,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            e: default_e(mode),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(invalid("need 0 <= lr_min <= lr with lr > 0"));
        }
        self.adam().validate()?;
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("gradient clip must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self, model: &ModelConfig) -> Result<LossConfig> {
        let mut c = LossConfig::new(self.e, self.n_dis, model.extent())?;
        c.focal_alpha = self.focal_alpha;
        c.focal_gamma = self.focal_gamma;
        Ok(c)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        poly_lr(self.lr, self.lr_min, self.poly_power, step, self.steps)
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One training step's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_total: f64,
    /// Batch-mean breakdown of layers `0..=N_layer`.
    pub layers: Vec<LossBreakdown>,
}

/// Loss of one scene with parameter gradients.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: f64,
    pub layers: Vec<LossBreakdown>,
    pub grads: BTreeMap<String, Tensor>,
}

fn gt_curves(scene: &Scene, loss: &LossConfig) -> Result<Vec<(usize, GtCurve)>> {
    scene
        .lanes
        .lanes
        .iter()
        .map(|l| Ok((l.category, GtCurve::from_control_points(&l.control_points, loss)?)))
        .collect()
}

/// Records the per-layer losses on `g`: assignment on off-graph costs, then
/// regression on matched pairs and classification on every query, each
/// divided by `max(1, N_gt)`. Returns the summed loss node.
pub fn layer_losses(
    g: &mut Graph,
    layers: &[LayerVars],
    gts: &[(usize, GtCurve)],
    loss: &LossConfig,
    model: &ModelConfig,
) -> Result<(Var, Vec<LossBreakdown>)> {
    let (q_n, dim, k) = (model.num_queries, model.dim(), model.num_classes);
    let ts = loss.ts();
    let n = ts.len();
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut total: Option<Var> = None;
    let mut breakdowns = Vec::with_capacity(layers.len());
    for lv in layers {
        let dense = g.bezier_eval_batch(lv.control_points, dim, &ts)?;
        let pts = g.value(dense).data().to_vec();
        let logits = g.value(lv.logits).data().to_vec();
        let mut targets = vec![0usize; q_n];
        let mut pairs = Vec::new();
        if !gts.is_empty() {
            let mut costs = Vec::with_capacity(gts.len() * q_n);
            for (class, gt) in gts {
                for q in 0..q_n {
                    let reg = regression_loss_value(&pts[q * n * dim..(q + 1) * n * dim], gt, loss);
                    let cls = focal_loss(&logits[q * k..(q + 1) * k], *class, loss)?;
                    costs.push(reg + cls);
                }
            }
            let a = simota_assign(&CostMatrix::new(gts.len(), q_n, costs)?);
            pairs = a.pairs().collect();
        }
        let (mut loc, mut len, mut end) = (0.0, 0.0, 0.0);
        let mut reg: Option<Var> = None;
        for &(gi, q) in &pairs {
            targets[q] = gts[gi].0;
            let rows: Vec<usize> = (q * n..(q + 1) * n).collect();
            let pred = g.take_rows(dense, &rows)?;
            let terms = g.regression_loss(pred, &gts[gi].1, loss)?;
            loc += g.scalar(terms.l_loc);
            len += g.scalar(terms.l_len);
            end += g.scalar(terms.l_endpoint);
            reg = Some(match reg {
                Some(r) => g.add(r, terms.l_reg)?,
                None => terms.l_reg,
            });
        }
        let cls = g.focal_loss(lv.logits, targets, loss)?;
        let cls_value = g.scalar(cls);
        let layer = match reg {
            Some(r) => g.add(r, cls)?,
            None => cls,
        };
        let layer = g.scale(layer, norm)?;
        breakdowns.push(LossBreakdown::new(loc * norm, len * norm, end * norm, cls_value * norm));
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    let total = total.ok_or_else(|| invalid("no layers to supervise"))?;
    Ok((total, breakdowns))
}

pub fn scene_loss(model: &Model, scene: &Scene, loss: &LossConfig) -> Result<SceneLoss> {
    let run = || -> Result<SceneLoss> {
        let gts = gt_curves(scene, loss)?;
        let mut g = Graph::new();
        let layers = model.forward_graph(&mut g, &scene.raster, scene.camera())?;
        let (total, breakdowns) = layer_losses(&mut g, &layers, &gts, loss, &model.config)?;
        let grads = g.backward_scalar(total)?;
        Ok(SceneLoss {
            total: g.scalar(total),
            layers: breakdowns,
            grads: grads.named(&g),
        })
    };
    run().map_err(|e| Error::Scene {
        scene: scene.scene_id().to_string(),
        source: Box::new(e),
    })
}

fn mean_breakdowns(all: &[SceneLoss]) -> Vec<LossBreakdown> {
    let b = all.len() as f64;
    (0..all[0].layers.len())
        .map(|i| {
            let sum = |f: fn(&LossBreakdown) -> f64| all.iter().map(|s| f(&s.layers[i])).sum::<f64>() / b;
            LossBreakdown::new(sum(|x| x.l_loc), sum(|x| x.l_len), sum(|x| x.l_endpoint), sum(|x| x.l_cls))
        })
        .collect()
}

/// Forward and backward over `batch` (scenes in parallel), a batch-mean
/// gradient and one optimiser update.
pub fn train_step(model: &mut Model, batch: &[&Scene], opt: &mut AdamW, cfg: &TrainConfig, step: usize) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let loss = cfg.loss_config(&model.config)?;
    let shared: &Model = model;
    let results = batch
        .par_iter()
        .map(|s| scene_loss(shared, s, &loss))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in &results {
        for (name, gr) in &r.grads {
            match grads.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name.clone(), gr.clone());
                }
            }
        }
    }
    let mut norm2 = 0.0;
    for gr in grads.values_mut() {
        gr.data_mut().iter_mut().for_each(|v| *v *= scale);
        norm2 += gr.data().iter().map(|v| v * v).sum::<f64>();
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = norm2.sqrt();
        if norm > clip {
            let f = clip / norm;
            grads.values_mut().for_each(|gr| gr.data_mut().iter_mut().for_each(|v| *v *= f));
        }
    }
    let layers = mean_breakdowns(&results);
    // The graph's own total, not a re-sum of the breakdown.
    let l_total = results.iter().map(|r| r.total).sum::<f64>() * scale;
    let lr = cfg.lr_at(step);
    opt.update(&mut model.params, &grads, lr, &cfg.adam())?;
    Ok(StepLog {
        step,
        lr,
        l_total,
        layers,
    })
}

/// Runs `cfg.steps` steps on batches drawn without replacement from
/// `scenes` by a generator seeded with `cfg.seed`. `on_step` sees each log
/// and the model after that step's update.
pub fn train(
    model: &mut Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Model),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(invalid("no training scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new();
    let b = cfg.batch_size.min(scenes.len());
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Scene> = sample(&mut rng, scenes.len(), b).iter().map(|i| &scenes[i]).collect();
        let log = train_step(model, &batch, &mut opt, cfg, step)?;
        on_step(&log, model);
        logs.push(log);
    }
    Ok(logs)
}

pub fn predict_scenes(model: &Model, scenes: &[Scene]) -> Result<Vec<LaneSet>> {
    scenes
        .par_iter()
        .map(|s| model.predict(s.scene_id(), &s.raster, s.camera()))
        .collect()
}

/// Detection metrics of `model` on `scenes`.
pub fn evaluate_model(model: &Model, scenes: &[Scene], threshold: f64, e: f64, n_dis: usize) -> Result<EvalReport> {
    let preds = predict_scenes(model, scenes)?;
    let pairs: Vec<(LaneSet, LaneSet)> = preds.into_iter().zip(scenes.iter().map(|s| s.lanes.clone())).collect();
    evaluate_sets(&pairs, threshold, e, n_dis)
}
