//! Reference sampling along curves, query positional encoding, multi-head
//! self-attention over queries and curve attention over a feature pyramid.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bezier::{evaluate, ControlPolygon};
use crate::camera::{to_grid, CameraModel};
use crate::diff::{CustomOp, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{init_mlp2, mlp2};

/// Curve parameters of the reference points.
pub const DEFAULT_REF_TS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Sine frequencies per coordinate.
pub const DEFAULT_PE_FREQS: usize = 64;
const PE_BASE: f64 = 10000.0;

/// Which weights a curve-attention softmax normalises together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    /// One softmax per head over all (reference, level, sample) triples.
    #[default]
    Joint,
    /// One softmax per head and level; the weights of a head then sum to L.
    PerLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Query embedding width `C_e`.
    pub embed_dim: usize,
    pub heads: usize,
    /// Channel count of the feature pyramid.
    pub feature_dim: usize,
    pub levels: usize,
    pub ref_ts: Vec<f64>,
    /// Sampling offsets per reference, level and head.
    pub samples: usize,
    /// Curve dimension (2 or 3).
    pub point_dim: usize,
    pub pe_freqs: usize,
    pub scope: NormScope,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(invalid(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.feature_dim == 0 || self.levels == 0 || self.samples == 0 || self.pe_freqs == 0 {
            return Err(invalid("attention extents must be positive"));
        }
        if self.ref_ts.is_empty() || self.ref_ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("reference parameters must be non-empty and inside [0, 1]"));
        }
        if !(self.point_dim == 2 || self.point_dim == 3) {
            return Err(invalid(format!("curve dimension {} is not 2 or 3", self.point_dim)));
        }
        Ok(())
    }

    pub fn value_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn n_ref(&self) -> usize {
        self.ref_ts.len()
    }
}

/// Spatial extents of a pyramid: `(height, width)` per level and the image
/// the levels were computed from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidGeometry {
    pub sizes: Vec<(usize, usize)>,
    pub channels: usize,
    pub image_w: usize,
    pub image_h: usize,
}

impl PyramidGeometry {
    fn from_shapes(shapes: &[&[usize]], image_w: usize, image_h: usize) -> Result<Self> {
        if shapes.is_empty() {
            return Err(invalid("pyramid needs at least one level"));
        }
        if image_w == 0 || image_h == 0 {
            return Err(invalid("image extent must be positive"));
        }
        let mut sizes = Vec::with_capacity(shapes.len());
        let mut channels = None;
        for s in shapes {
            let [h, w, c] = s else {
                return Err(shape_err("pyramid", format!("level of shape {s:?}")));
            };
            if *channels.get_or_insert(*c) != *c {
                return Err(shape_err("pyramid", "levels disagree on channel count"));
            }
            if let Some(&(ph, pw)) = sizes.last() {
                if *h >= ph || *w >= pw {
                    return Err(shape_err("pyramid", "level extents must strictly decrease"));
                }
            }
            if *h == 0 || *w == 0 {
                return Err(shape_err("pyramid", "empty level"));
            }
            sizes.push((*h, *w));
        }
        Ok(Self {
            sizes,
            channels: channels.unwrap_or(0),
            image_w,
            image_h,
        })
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    /// Pixel → grid scale factors `(x, y)` of level `l`.
    pub fn grid_scale(&self, l: usize) -> [f64; 2] {
        let (h, w) = self.sizes[l];
        to_grid([1.0, 1.0], w, h, self.image_w, self.image_h)
    }
}

/// Multi-scale `H_l×W_l×C` feature maps held as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    geometry: PyramidGeometry,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, image_w: usize, image_h: usize) -> Result<Self> {
        let shapes: Vec<&[usize]> = levels.iter().map(Tensor::shape).collect();
        let geometry = PyramidGeometry::from_shapes(&shapes, image_w, image_h)?;
        Ok(Self { levels, geometry })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn geometry(&self) -> &PyramidGeometry {
        &self.geometry
    }

    /// Records the levels as untracked graph values.
    pub fn bind(&self, g: &mut Graph) -> Result<PyramidVars> {
        let levels = self
            .levels
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<_>>()?;
        Ok(PyramidVars {
            levels,
            geometry: self.geometry.clone(),
        })
    }
}

/// A pyramid whose levels live on a graph (possibly computed by it).
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
    pub geometry: PyramidGeometry,
}

impl PyramidVars {
    pub fn new(g: &Graph, levels: Vec<Var>, image_w: usize, image_h: usize) -> Result<Self> {
        let shapes: Vec<&[usize]> = levels.iter().map(|v| g.value(*v).shape()).collect();
        let geometry = PyramidGeometry::from_shapes(&shapes, image_w, image_h)?;
        Ok(Self { levels, geometry })
    }
}

/// Control points and embeddings of every query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryState {
    /// `Q×(N+1)×D`.
    pub control_points: Tensor,
    /// `Q×C_e`.
    pub embeddings: Tensor,
}

impl QueryState {
    pub fn new(control_points: Tensor, embeddings: Tensor) -> Result<Self> {
        if control_points.shape().len() != 3 || embeddings.shape().len() != 2 {
            return Err(shape_err("query_state", "expected Q×(N+1)×D points and Q×C_e embeddings"));
        }
        if control_points.shape()[0] != embeddings.shape()[0] {
            return Err(shape_err("query_state", "query counts differ"));
        }
        if !embeddings.is_finite() {
            return Err(invalid("embeddings must be finite"));
        }
        Ok(Self {
            control_points,
            embeddings,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn curve(&self, q: usize) -> Result<ControlPolygon> {
        let s = self.control_points.shape();
        let n = s[1] * s[2];
        ControlPolygon::from_flat(s[2], self.control_points.data()[q * n..(q + 1) * n].to_vec())
    }
}

fn check_mode(dim: usize, cam: Option<&CameraModel>) -> Result<()> {
    match (dim, cam) {
        (2, None) | (3, Some(_)) => Ok(()),
        (2, Some(_)) => Err(invalid("2D curves are sampled without a camera")),
        (3, None) => Err(invalid("3D curves need a camera")),
        (d, _) => Err(invalid(format!("curve dimension {d} is not 2 or 3"))),
    }
}

/// Image-pixel positions of the reference points of one curve. 3D curves
/// are projected; a reference behind the camera is an error here.
pub fn reference_pixels(cp: &ControlPolygon, cam: Option<&CameraModel>, ts: &[f64]) -> Result<Vec<[f64; 2]>> {
    check_mode(cp.dim(), cam)?;
    let s = evaluate(cp, ts)?;
    s.points()
        .map(|p| match cam {
            Some(c) => c.project(p),
            None => Ok([p[0], p[1]]),
        })
        .collect()
}

/// Reference points of one curve in grid units of every pyramid level.
pub fn fv_sample_references(
    cp: &ControlPolygon,
    cam: Option<&CameraModel>,
    ts: &[f64],
    pyramid: &PyramidGeometry,
) -> Result<Vec<Vec<[f64; 2]>>> {
    let px = reference_pixels(cp, cam, ts)?;
    Ok(pyramid
        .sizes
        .iter()
        .map(|&(h, w)| {
            px.iter()
                .map(|p| to_grid(*p, w, h, pyramid.image_w, pyramid.image_h))
                .collect()
        })
        .collect())
}

fn pe_frequencies(freqs: usize) -> Vec<f64> {
    (0..freqs)
        .map(|i| 2.0 * PI / PE_BASE.powf(i as f64 / freqs as f64))
        .collect()
}

/// Per-coordinate `sin/cos` features: `M×D → M×(D·2F)`, ordered
/// coordinate-major with `sin, cos` interleaved per frequency.
#[derive(Debug)]
pub struct SineEncodeOp {
    freqs: Vec<f64>,
}

impl SineEncodeOp {
    pub fn new(freqs: usize) -> Self {
        Self {
            freqs: pe_frequencies(freqs),
        }
    }
}

impl CustomOp for SineEncodeOp {
    fn name(&self) -> &'static str {
        "sine_encode"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let width = x.cols() * 2 * self.freqs.len();
        let mut out = Vec::with_capacity(x.rows() * width);
        for v in x.data() {
            for f in &self.freqs {
                let (s, c) = (v * f).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
        Tensor::new(vec![x.rows(), width], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let per = 2 * self.freqs.len();
        let data = x
            .data()
            .iter()
            .zip(grad.data().chunks(per))
            .map(|(v, g)| {
                self.freqs
                    .iter()
                    .zip(g.chunks(2))
                    .map(|(f, gs)| {
                        let (s, c) = (v * f).sin_cos();
                        f * (gs[0] * c - gs[1] * s)
                    })
                    .sum()
            })
            .collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), data)?)])
    }
}

/// Result of self-attention: updated embeddings and one `Q×Q` weight matrix
/// per head.
#[derive(Clone, Debug)]
pub struct SelfAttentionOut {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Result of curve attention. `weights` holds the normalised sampling
/// weights laid out `(query, head, level, reference, sample)`, reshaped so
/// each row is one softmax group of the configured scope.
#[derive(Clone, Debug)]
pub struct CurveAttentionOut {
    pub output: Var,
    pub weights: Var,
    /// Sampling locations per level, rows `(query, head, reference, sample)`.
    pub locations: Vec<Var>,
}

/// Parameter names and shapes of one attention block under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub prefix: String,
    pub config: AttentionConfig,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            config,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn pe_input_dim(&self) -> usize {
        self.config.n_ref() * self.config.point_dim * 2 * self.config.pe_freqs
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = &self.config;
        let ce = c.embed_dim;
        init_mlp2(store, &self.name("pe"), self.pe_input_dim(), ce, ce, rng);
        for part in ["sa.u", "sa.v", "sa.wv", "sa.wo", "ca.wo"] {
            store.init_glorot(&self.name(part), ce, ce, rng);
        }
        store.init_glorot(&self.name("ca.wv"), c.feature_dim, ce, rng);

        let n_off = c.heads * c.samples * 2;
        init_mlp2(store, &self.name("ca.off"), c.feature_dim, ce, n_off, rng);
        store.init_zeros(&self.name("ca.off.w2"), &[ce, n_off]);
        // Start each head on its own ray with samples spaced along it.
        let mut bias = Vec::with_capacity(n_off);
        for m in 0..c.heads {
            let (sin, cos) = (2.0 * PI * m as f64 / c.heads as f64).sin_cos();
            for s in 0..c.samples {
                let r = 0.5 * s as f64;
                bias.extend([r * cos, r * sin]);
            }
        }
        store.insert(self.name("ca.off.b2"), Tensor::vector(bias));

        let n_wt = c.heads * c.samples;
        init_mlp2(store, &self.name("ca.wt"), c.feature_dim, ce, n_wt, rng);
        store.init_zeros(&self.name("ca.wt.w2"), &[ce, n_wt]);
    }

    /// Sine encoding of reference points in normalised coordinates,
    /// `(Q·N_ref)×D`, mapped to `Q×C_e`.
    pub fn positional_encoding(&self, g: &mut Graph, store: &ParamStore, points: Var) -> Result<Var> {
        let c = &self.config;
        let (rows, dim) = (g.value(points).rows(), g.value(points).cols());
        if dim != c.point_dim || rows % c.n_ref() != 0 {
            return Err(shape_err(
                "positional_encoding",
                format!("{rows}×{dim} reference points for {} per query in {}D", c.n_ref(), c.point_dim),
            ));
        }
        let enc = g.custom(Arc::new(SineEncodeOp::new(c.pe_freqs)), &[points])?;
        let q = rows / c.n_ref();
        let flat = g.reshape(enc, &[q, self.pe_input_dim()])?;
        mlp2(g, store, &self.name("pe"), flat)
    }

    /// Multi-head self-attention with the encoding added to queries and keys.
    pub fn self_attention(&self, g: &mut Graph, store: &ParamStore, e: Var, pe: Var) -> Result<SelfAttentionOut> {
        let c = &self.config;
        let shape = g.value(e).shape().to_vec();
        if shape.len() != 2 || shape[1] != c.embed_dim || g.value(pe).shape() != shape.as_slice() {
            return Err(shape_err(
                "self_attention",
                format!("embeddings {shape:?}, encodings {:?}", g.value(pe).shape()),
            ));
        }
        let u = g.param(store, &self.name("sa.u"))?;
        let v = g.param(store, &self.name("sa.v"))?;
        let wv = g.param(store, &self.name("sa.wv"))?;
        let wo = g.param(store, &self.name("sa.wo"))?;
        let x = g.add(e, pe)?;
        let queries = g.matmul(x, u)?;
        let keys = g.matmul(x, v)?;
        let values = g.matmul(e, wv)?;
        let cv = c.value_dim();
        let scale = 1.0 / (cv as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        let mut weights = Vec::with_capacity(c.heads);
        for m in 0..c.heads {
            let (lo, hi) = (m * cv, (m + 1) * cv);
            let qm = g.slice_cols(queries, lo, hi)?;
            let km = g.slice_cols(keys, lo, hi)?;
            let vm = g.slice_cols(values, lo, hi)?;
            let logits = g.matmul_nt(qm, km)?;
            let logits = g.scale(logits, scale)?;
            let a = g.softmax_rows(logits)?;
            heads.push(g.matmul(a, vm)?);
            weights.push(a);
        }
        let cat = g.concat_cols(&heads)?;
        let out = g.matmul(cat, wo)?;
        let output = g.add(e, out)?;
        Ok(SelfAttentionOut { output, weights })
    }

    /// Curve attention from reference pixels `(Q·N_ref)×2`, query-major.
    pub fn curve_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e: Var,
        ref_pixels: Var,
        pyramid: &PyramidVars,
    ) -> Result<CurveAttentionOut> {
        let c = &self.config;
        let geo = &pyramid.geometry;
        let q_n = g.value(e).rows();
        let (k_n, m_n, s_n, l_n) = (c.n_ref(), c.heads, c.samples, geo.levels());
        if g.value(e).cols() != c.embed_dim {
            return Err(shape_err("curve_attention", "embedding width"));
        }
        if g.value(ref_pixels).shape() != [q_n * k_n, 2] {
            return Err(shape_err(
                "curve_attention",
                format!(
                    "{:?} reference points for {q_n} queries with {k_n} references each",
                    g.value(ref_pixels).shape()
                ),
            ));
        }
        if l_n != c.levels || geo.channels != c.feature_dim {
            return Err(shape_err("curve_attention", "pyramid does not match the configuration"));
        }

        let off_idx: Arc<[usize]> = iproduct4(q_n, m_n, k_n, s_n)
            .flat_map(|(q, m, k, s)| {
                let base = ((q * k_n + k) * m_n + m) * s_n * 2 + s * 2;
                [base, base + 1]
            })
            .collect();
        let ref_rows: Vec<usize> = iproduct4(q_n, m_n, k_n, s_n).map(|(q, _, k, _)| q * k_n + k).collect();

        let mut samples = Vec::with_capacity(l_n);
        let mut logits = Vec::with_capacity(l_n);
        let mut locations = Vec::with_capacity(l_n);
        for (l, &map) in pyramid.levels.iter().enumerate() {
            let scale = g.constant(Tensor::vector(geo.grid_scale(l).to_vec()))?;
            let grid = g.mul_row(ref_pixels, scale)?;
            let feats = g.bilinear_sample(map, grid)?;
            let off = mlp2(g, store, &self.name("ca.off"), feats)?;
            let off = g.take(off, off_idx.clone(), &[q_n * m_n * k_n * s_n, 2])?;
            let base = g.take_rows(grid, &ref_rows)?;
            let locs = g.add(base, off)?;
            samples.push(g.bilinear_sample(map, locs)?);
            logits.push(mlp2(g, store, &self.name("ca.wt"), feats)?);
            locations.push(locs);
        }

        // logits rows are (level, query, reference), columns (head, sample)
        let logits = g.concat_rows(&logits)?;
        let w_idx: Arc<[usize]> = iproduct5(q_n, m_n, l_n, k_n, s_n)
            .map(|(q, m, l, k, s)| ((l * q_n + q) * k_n + k) * m_n * s_n + m * s_n + s)
            .collect();
        let group_shape = match c.scope {
            NormScope::Joint => [q_n * m_n, l_n * k_n * s_n],
            NormScope::PerLevel => [q_n * m_n * l_n, k_n * s_n],
        };
        let w = g.take(logits, w_idx, &group_shape)?;
        let weights = g.softmax_rows(w)?;

        // reorder to the sample row layout (level, query, head, reference, sample)
        let back: Arc<[usize]> = iproduct5(l_n, q_n, m_n, k_n, s_n)
            .map(|(l, q, m, k, s)| (((q * m_n + m) * l_n + l) * k_n + k) * s_n + s)
            .collect();
        let per_row = g.take(weights, back, &[l_n * q_n * m_n * k_n * s_n])?;
        let samples = g.concat_rows(&samples)?;
        let weighted = g.scale_rows(samples, per_row)?;
        let groups: Arc<[usize]> = iproduct5(l_n, q_n, m_n, k_n, s_n)
            .map(|(_, q, m, _, _)| q * m_n + m)
            .collect();
        let pooled = g.group_sum_rows(weighted, groups, q_n * m_n)?;

        let wv = g.param(store, &self.name("ca.wv"))?;
        let wo = g.param(store, &self.name("ca.wo"))?;
        let projected = g.matmul(pooled, wv)?;
        let cv = c.value_dim();
        let ce = c.embed_dim;
        let head_idx: Arc<[usize]> = (0..q_n)
            .flat_map(|q| (0..m_n).flat_map(move |m| (0..cv).map(move |j| (q * m_n + m) * ce + m * cv + j)))
            .collect();
        let heads = g.take(projected, head_idx, &[q_n, ce])?;
        let out = g.matmul(heads, wo)?;
        let output = g.add(e, out)?;
        Ok(CurveAttentionOut {
            output,
            weights,
            locations,
        })
    }
}

fn iproduct4(a: usize, b: usize, c: usize, d: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..a).flat_map(move |i| (0..b).flat_map(move |j| (0..c).flat_map(move |k| (0..d).map(move |l| (i, j, k, l)))))
}

fn iproduct5(
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    e: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> {
    (0..a).flat_map(move |i| iproduct4(b, c, d, e).map(move |(j, k, l, m)| (i, j, k, l, m)))
}

impl Graph {
    /// Reference pixels `(Q·K)×2` from curve points `(Q·K)×D`. 3D points are
    /// projected with depth clamped at `z_min`.
    pub fn reference_pixels(&mut self, points: Var, cam: Option<&CameraModel>, z_min: f64) -> Result<Var> {
        check_mode(self.value(points).cols(), cam)?;
        match cam {
            Some(c) => self.project(points, c, z_min),
            None => Ok(points),
        }
    }
}

/// Positional encoding of one curve given in normalised coordinates.
pub fn positional_encoding(cp: &ControlPolygon, params: &AttentionParams, store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pts = evaluate(cp, &params.config.ref_ts)?;
    let pts = g.constant(pts.to_tensor())?;
    let pe = params.positional_encoding(&mut g, store, pts)?;
    Ok(g.value(pe).data().to_vec())
}

/// Self-attention on plain tensors.
pub fn self_attention(e: &Tensor, pe: &Tensor, params: &AttentionParams, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let ev = g.constant(e.clone())?;
    let pv = g.constant(pe.clone())?;
    let out = params.self_attention(&mut g, store, ev, pv)?;
    Ok(g.value(out.output).clone())
}

/// Curve attention on plain tensors; `refs` holds the reference pixels of
/// each query.
pub fn bezier_curve_attention(
    e: &Tensor,
    refs: &[Vec<[f64; 2]>],
    pyramid: &FeaturePyramid,
    params: &AttentionParams,
    store: &ParamStore,
) -> Result<Tensor> {
    let k = params.config.n_ref();
    if refs.iter().any(|r| r.len() != k) {
        return Err(invalid(format!("expected {k} reference points per query")));
    }
    let mut g = Graph::new();
    let ev = g.constant(e.clone())?;
    let flat: Vec<f64> = refs.iter().flatten().flat_map(|p| p.to_vec()).collect();
    let rv = g.constant(Tensor::matrix(refs.len() * k, 2, flat)?)?;
    let pv = pyramid.bind(&mut g)?;
    let out = params.curve_attention(&mut g, store, ev, rv, &pv)?;
    Ok(g.value(out.output).clone())
}
