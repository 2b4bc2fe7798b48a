//! The toy detector: a small convolutional pyramid, query initialisation,
//! stacked decoder layers and per-layer heads.

mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{AttentionConfig, AttentionParams, NormScope, PyramidVars, QueryState, DEFAULT_PE_FREQS};
use crate::bezier::{uniform_ts, ControlPolygon};
use crate::camera::{CameraModel, DEFAULT_Z_MIN};
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::lanes::{Lane, LaneSet, Mode};
use crate::nn::{init_mlp2, mlp2};
use crate::synth::SCENE_BOUNDS_3D;

pub use train::{
    default_e, evaluate_model, layer_losses, predict_scenes, scene_loss, train, train_step, SceneLoss, StepLog, TrainConfig, DEFAULT_E_2D, DEFAULT_E_3D,
};

/// Control points per curve.
pub const CURVE_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub num_queries: usize,
    pub num_layers: usize,
    pub levels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub n_ref: usize,
    pub samples: usize,
    /// Categories including background (class 0).
    pub num_classes: usize,
    pub scope: NormScope,
    /// Channels of every pyramid level.
    pub feature_dim: usize,
    /// Raster channels of the input.
    pub input_channels: usize,
    pub image_w: usize,
    pub image_h: usize,
    /// Per-coordinate `[low, high]` of the curve space; defaults to the
    /// image in 2D and to the synthetic scene bounds in 3D.
    pub bounds: Option<Vec<[f64; 2]>>,
    pub pe_freqs: usize,
    /// Depth clamp applied when projecting reference points.
    pub z_min: f64,
    /// Cut gradients through the reference points of each layer.
    pub detach_refs: bool,
    /// Hidden width of the query initialisation MLP.
    pub init_hidden: usize,
    pub init_input: InitInput,
    /// Pyramid level read by the query initialisation, counted from the
    /// coarsest (0).
    pub init_level: usize,
}

/// What the query initialisation MLP reads from the coarsest level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitInput {
    /// The whole map, flattened row-major.
    #[default]
    Flattened,
    /// The channel-wise spatial mean.
    Pooled,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TwoD,
            num_queries: 8,
            num_layers: 6,
            levels: 4,
            embed_dim: 32,
            heads: 4,
            n_ref: 5,
            samples: 5,
            num_classes: 3,
            scope: NormScope::Joint,
            feature_dim: 32,
            input_channels: 2,
            image_w: 64,
            image_h: 64,
            bounds: None,
            pe_freqs: DEFAULT_PE_FREQS,
            z_min: DEFAULT_Z_MIN,
            detach_refs: false,
            init_hidden: 64,
            init_input: InitInput::default(),
            init_level: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.num_layers == 0 {
            return Err(invalid("need at least one query and one decoder layer"));
        }
        if self.init_level >= self.levels {
            return Err(invalid("init_level must name an existing pyramid level"));
        }
        if self.num_classes < 2 || self.input_channels == 0 || self.init_hidden == 0 {
            return Err(invalid("need a lane category and at least one input channel"));
        }
        if self.levels == 0 || self.image_h >> self.levels == 0 || self.image_w >> self.levels == 0 {
            return Err(invalid(format!(
                "{}×{} input is too small for {} levels",
                self.image_w, self.image_h, self.levels
            )));
        }
        let b = self.bounds();
        if b.len() != self.dim() || b.iter().any(|[lo, hi]| !(hi > lo)) {
            return Err(invalid("bounds need one increasing [low, high] pair per coordinate"));
        }
        if !(self.z_min > 0.0) {
            return Err(invalid("z_min must be positive"));
        }
        self.attention().validate()
    }

    pub fn dim(&self) -> usize {
        self.mode.dim()
    }

    pub fn bounds(&self) -> Vec<[f64; 2]> {
        match (&self.bounds, self.mode) {
            (Some(b), _) => b.clone(),
            (None, Mode::TwoD) => vec![[0.0, self.image_w as f64], [0.0, self.image_h as f64]],
            (None, Mode::ThreeD) => SCENE_BOUNDS_3D.iter().map(|(lo, hi)| [*lo, *hi]).collect(),
        }
    }

    /// Extent of each coordinate, used to normalise endpoint errors.
    pub fn extent(&self) -> Vec<f64> {
        self.bounds().iter().map(|[lo, hi]| hi - lo).collect()
    }

    pub fn ref_ts(&self) -> Vec<f64> {
        uniform_ts(self.n_ref)
    }

    /// Extent of the level the query initialisation reads.
    pub fn init_map_size(&self) -> (usize, usize) {
        let l = self.levels - self.init_level;
        (self.image_h >> l, self.image_w >> l)
    }

    /// Input width of the query initialisation MLP.
    pub fn init_features(&self) -> usize {
        let (h, w) = self.init_map_size();
        match self.init_input {
            InitInput::Flattened => h * w * self.feature_dim,
            InitInput::Pooled => self.feature_dim,
        }
    }

    pub fn curve_width(&self) -> usize {
        CURVE_POINTS * self.dim()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
            feature_dim: self.feature_dim,
            levels: self.levels,
            ref_ts: self.ref_ts(),
            samples: self.samples,
            point_dim: self.dim(),
            pe_freqs: self.pe_freqs,
            scope: self.scope,
        }
    }
}

/// Graph handles of one layer's prediction.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// `Q×(4·D)` in normalised `[0,1]` units.
    pub normalized: Var,
    /// `Q×(4·D)` in pixels or metres.
    pub control_points: Var,
    pub embeddings: Var,
    pub logits: Var,
    /// Refinement added by this layer (`None` for layer 0).
    pub delta: Option<Var>,
}

/// Plain values of one layer's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub queries: QueryState,
    /// `Q×num_classes` category logits.
    pub logits: Tensor,
}

impl LayerOutput {
    pub fn control_points(&self) -> &Tensor {
        &self.queries.control_points
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.queries.embeddings
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.02, 0.98);
    (p / (1.0 - p)).ln()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let (ce, cf) = (c.embed_dim, c.feature_dim);

        p.init_glorot("extractor.conv.w", 9 * (c.input_channels + 2), cf, &mut rng);
        p.init_zeros("extractor.conv.b", &[cf]);

        let width = c.num_queries * c.curve_width();
        let hidden = c.init_hidden;
        init_mlp2(&mut p, "query.init", c.init_features(), hidden, width, &mut rng);
        let small: Vec<f64> = p.get("query.init.w2").expect("registered").data().iter().map(|v| 0.1 * v).collect();
        p.insert("query.init.w2", Tensor::new(vec![hidden, width], small)?);
        p.insert("query.init.b2", Tensor::vector(Self::anchors(c).into_iter().map(logit).collect()));
        p.init_uniform("query.embed", &[c.num_queries, ce], 1.0, &mut rng);

        for i in 0..=c.num_layers {
            p.init_glorot(&format!("layer{i}.cls.w"), ce, c.num_classes, &mut rng);
            p.init_zeros(&format!("layer{i}.cls.b"), &[c.num_classes]);
            if i == 0 {
                continue;
            }
            AttentionParams::new(format!("layer{i}.attn"), c.attention())?.init(&mut p, &mut rng);
            let ffn = format!("layer{i}.ffn");
            init_mlp2(&mut p, &ffn, ce, ce, c.curve_width(), &mut rng);
            let w2 = format!("{ffn}.w2");
            let scaled: Vec<f64> = p.get(&w2).expect("registered").data().iter().map(|v| 0.1 * v).collect();
            p.insert(w2, Tensor::new(vec![ce, c.curve_width()], scaled)?);
        }
        Ok(Self { config, params: p })
    }

    /// Spread-out starting curves in normalised units: one upright lane per
    /// query, ordered left to right.
    fn anchors(c: &ModelConfig) -> Vec<f64> {
        let q = c.num_queries as f64;
        let mut out = Vec::with_capacity(c.num_queries * c.curve_width());
        for i in 0..c.num_queries {
            let x = (i as f64 + 0.5) / q;
            for k in 0..CURVE_POINTS {
                let f = k as f64 / (CURVE_POINTS - 1) as f64;
                match c.mode {
                    Mode::TwoD => out.extend([x, 0.95 - 0.85 * f]),
                    Mode::ThreeD => out.extend([0.25 + 0.5 * x, 0.12 + 0.6 * f, 0.5]),
                }
            }
        }
        out
    }

    fn check_camera(&self, cam: Option<&CameraModel>) -> Result<()> {
        match (self.config.mode, cam) {
            (Mode::TwoD, None) | (Mode::ThreeD, Some(_)) => Ok(()),
            (Mode::ThreeD, None) => Err(invalid("3d mode needs a camera")),
            (Mode::TwoD, Some(_)) => Err(invalid("2d mode takes no camera")),
        }
    }

    /// Feature pyramid from an `H×W×C_in` raster. Two normalised coordinate
    /// channels are appended before a 3×3 convolution; the levels are
    /// successive 2×2 average pools.
    pub fn extract(&self, g: &mut Graph, raster: &Tensor) -> Result<PyramidVars> {
        let c = &self.config;
        let [h, w, ch] = raster.shape() else {
            return Err(shape_err("extract", format!("raster {:?}", raster.shape())));
        };
        let (h, w, ch) = (*h, *w, *ch);
        if (h, w, ch) != (c.image_h, c.image_w, c.input_channels) {
            return Err(shape_err(
                "extract",
                format!(
                    "raster {h}×{w}×{ch}, model expects {}×{}×{}",
                    c.image_h, c.image_w, c.input_channels
                ),
            ));
        }
        let mut data = Vec::with_capacity(h * w * (ch + 2));
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * ch;
                data.extend_from_slice(&raster.data()[base..base + ch]);
                data.push(2.0 * j as f64 / (w - 1).max(1) as f64 - 1.0);
                data.push(2.0 * i as f64 / (h - 1).max(1) as f64 - 1.0);
            }
        }
        let x = g.constant(Tensor::new(vec![h, w, ch + 2], data)?)?;
        let wc = g.param(&self.params, "extractor.conv.w")?;
        let bc = g.param(&self.params, "extractor.conv.b")?;
        let y = g.conv3x3(x, wc)?;
        let y = g.reshape(y, &[h * w, c.feature_dim])?;
        let y = g.add_row(y, bc)?;
        let y = g.relu(y)?;
        let mut cur = g.reshape(y, &[h, w, c.feature_dim])?;
        let mut levels = Vec::with_capacity(c.levels);
        for _ in 0..c.levels {
            cur = g.avg_pool2(cur)?;
            levels.push(cur);
        }
        PyramidVars::new(g, levels, w, h)
    }

    fn denormalize(&self, g: &mut Graph, normalized: Var) -> Result<Var> {
        let bounds = self.config.bounds();
        let span: Vec<f64> = (0..CURVE_POINTS).flat_map(|_| bounds.iter().map(|[lo, hi]| hi - lo)).collect();
        let low: Vec<f64> = (0..CURVE_POINTS).flat_map(|_| bounds.iter().map(|[lo, _]| *lo)).collect();
        let span = g.constant(Tensor::vector(span))?;
        let low = g.constant(Tensor::vector(low))?;
        let scaled = g.mul_row(normalized, span)?;
        g.add_row(scaled, low)
    }

    fn head(&self, g: &mut Graph, layer: usize, e: Var) -> Result<Var> {
        let w = g.param(&self.params, &format!("layer{layer}.cls.w"))?;
        let b = g.param(&self.params, &format!("layer{layer}.cls.b"))?;
        g.linear(e, w, b)
    }

    /// `(C₀, E₀)` with `C₀` in normalised units.
    pub fn init_queries(&self, g: &mut Graph, pyramid: &PyramidVars) -> Result<(Var, Var)> {
        let c = &self.config;
        let level = pyramid.levels.len() - 1 - c.init_level;
        let coarsest = pyramid.levels[level];
        let (lh, lw) = pyramid.geometry.sizes[level];
        let features = match c.init_input {
            InitInput::Flattened => g.reshape(coarsest, &[1, lh * lw * c.feature_dim])?,
            InitInput::Pooled => {
                let flat = g.reshape(coarsest, &[lh * lw, c.feature_dim])?;
                let ones = g.constant(Tensor::full(&[1, lh * lw], 1.0 / (lh * lw) as f64))?;
                g.matmul(ones, flat)?
            }
        };
        let raw = mlp2(g, &self.params, "query.init", features)?;
        let squashed = g.sigmoid(raw)?;
        let c0 = g.reshape(squashed, &[c.num_queries, c.curve_width()])?;
        let e0 = g.param(&self.params, "query.embed")?;
        Ok((c0, e0))
    }

    /// One refinement stage. `prev` holds normalised control points.
    pub fn decoder_layer(
        &self,
        g: &mut Graph,
        layer: usize,
        pyramid: &PyramidVars,
        prev: Var,
        e_prev: Var,
        cam: Option<&CameraModel>,
    ) -> Result<LayerVars> {
        let c = &self.config;
        let attn = AttentionParams::new(format!("layer{layer}.attn"), c.attention())?;
        let ts = c.ref_ts();
        let base = if c.detach_refs { g.detach(prev)? } else { prev };
        let ref_norm = g.bezier_eval_batch(base, c.dim(), &ts)?;
        let real = self.denormalize(g, base)?;
        let ref_real = g.bezier_eval_batch(real, c.dim(), &ts)?;
        let ref_px = g.reference_pixels(ref_real, cam, c.z_min)?;
        let pe = attn.positional_encoding(g, &self.params, ref_norm)?;
        let sa = attn.self_attention(g, &self.params, e_prev, pe)?;
        let ca = attn.curve_attention(g, &self.params, sa.output, ref_px, pyramid)?;
        let e = ca.output;
        let logits = self.head(g, layer, e)?;
        let delta = mlp2(g, &self.params, &format!("layer{layer}.ffn"), e)?;
        let normalized = g.add(prev, delta)?;
        let control_points = self.denormalize(g, normalized)?;
        Ok(LayerVars {
            normalized,
            control_points,
            embeddings: e,
            logits,
            delta: Some(delta),
        })
    }

    /// Records the full forward pass; returns `N_layer + 1` layer outputs.
    pub fn forward_graph(&self, g: &mut Graph, raster: &Tensor, cam: Option<&CameraModel>) -> Result<Vec<LayerVars>> {
        self.check_camera(cam)?;
        let pyramid = self.extract(g, raster)?;
        let (c0, e0) = self.init_queries(g, &pyramid)?;
        let logits = self.head(g, 0, e0)?;
        let control_points = self.denormalize(g, c0)?;
        let mut out = vec![LayerVars {
            normalized: c0,
            control_points,
            embeddings: e0,
            logits,
            delta: None,
        }];
        for layer in 1..=self.config.num_layers {
            let prev = out[layer - 1];
            out.push(self.decoder_layer(g, layer, &pyramid, prev.normalized, prev.embeddings, cam)?);
        }
        Ok(out)
    }

    pub fn forward(&self, raster: &Tensor, cam: Option<&CameraModel>) -> Result<Vec<LayerOutput>> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, raster, cam)?;
        let (q, d) = (self.config.num_queries, self.config.dim());
        vars.iter()
            .map(|v| {
                let cps = g.value(v.control_points).clone().reshaped(&[q, CURVE_POINTS, d])?;
                Ok(LayerOutput {
                    queries: QueryState::new(cps, g.value(v.embeddings).clone())?,
                    logits: g.value(v.logits).clone(),
                })
            })
            .collect()
    }

    /// Lanes of the last layer: a query is a lane when its most likely class
    /// is not background; the score is that class's probability.
    pub fn predict(&self, scene_id: &str, raster: &Tensor, cam: Option<&CameraModel>) -> Result<LaneSet> {
        let out = self.forward(raster, cam)?;
        let last = out.last().expect("at least one layer");
        let k = self.config.num_classes;
        let mut lanes = Vec::new();
        for q in 0..self.config.num_queries {
            let row = &last.logits.data()[q * k..(q + 1) * k];
            let (best, logit) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
            if best == 0 {
                continue;
            }
            lanes.push(Lane {
                category: best,
                score: Some(crate::diff::sigmoid(logit)),
                control_points: last.queries.curve(q)?,
                points: None,
            });
        }
        LaneSet::new(scene_id, self.config.mode, cam.cloned(), lanes)
    }

    /// Checkpoint: parameter map plus a `"config"` block.
    pub fn to_json(&self) -> Value {
        let mut v = self.params.to_json();
        v["config"] = serde_json::to_value(&self.config).expect("config serialises");
        v
    }

    pub fn from_json(v: &Value, path: &str) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(v.get("config").cloned().unwrap_or(Value::Null)).map_err(|e| {
            Error::Format {
                path: path.to_string(),
                pointer: "/config".into(),
                detail: e.to_string(),
            }
        })?;
        config.validate()?;
        let params = ParamStore::from_json(v, &["config"]).map_err(|e| match e {
            Error::Format { pointer, detail, .. } => Error::Format {
                path: path.to_string(),
                pointer,
                detail,
            },
            other => other,
        })?;
        let fresh = Model::new(config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Format {
                        path: path.to_string(),
                        pointer: format!("/{name}"),
                        detail: format!("missing or misshapen parameter (expected {:?})", t.shape()),
                    })
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format {
            path: name.clone(),
            pointer: String::new(),
            detail: e.to_string(),
        })?;
        Self::from_json(&v, &name)
    }
}

/// Control polygon of query `q` from a `Q×(4·D)` matrix.
pub fn query_curve(t: &Tensor, q: usize, dim: usize) -> Result<ControlPolygon> {
    ControlPolygon::from_flat(dim, t.row(q).to_vec())
}
