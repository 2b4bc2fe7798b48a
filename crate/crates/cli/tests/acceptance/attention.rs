use bezierformer::attention::{bezier_curve_attention, AttentionConfig, AttentionParams, FeaturePyramid, NormScope};
use bezierformer::diff::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const IMAGE: usize = 32;
const EMBED: usize = 8;
const HEADS: usize = 2;
const FEATURES: usize = 3;
const SAMPLES: usize = 2;
const LEVEL_SIZES: [usize; 2] = [8, 4];

struct Fixture {
    params: AttentionParams,
    store: ParamStore,
    pyramid: FeaturePyramid,
    e: Tensor,
    refs: Vec<Vec<[f64; 2]>>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

/// Random parameters, features and references for `queries` queries with
/// references at `ref_ts`.
fn fixture(seed: u64, scope: NormScope, queries: usize, ref_ts: Vec<f64>) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ref = ref_ts.len();
    let config = AttentionConfig {
        embed_dim: EMBED,
        heads: HEADS,
        feature_dim: FEATURES,
        levels: LEVEL_SIZES.len(),
        ref_ts,
        samples: SAMPLES,
        point_dim: 2,
        pe_freqs: 4,
        scope,
    };
    let params = AttentionParams::new("attn", config).expect("valid configuration");
    let mut store = ParamStore::new();
    params.init(&mut store, &mut rng);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let shape = store.get(&name).expect("listed").shape().to_vec();
        store.insert(name, random_tensor(&mut rng, &shape, 0.5));
    }
    let levels = LEVEL_SIZES.iter().map(|&s| random_tensor(&mut rng, &[s, s, FEATURES], 1.0)).collect();
    let pyramid = FeaturePyramid::new(levels, IMAGE, IMAGE).expect("valid pyramid");
    let e = random_tensor(&mut rng, &[queries, EMBED], 1.0);
    let refs = (0..queries)
        .map(|_| {
            (0..n_ref)
                .map(|_| [rng.random_range(0.0..IMAGE as f64), rng.random_range(0.0..IMAGE as f64)])
                .collect()
        })
        .collect();
    Fixture {
        params,
        store,
        pyramid,
        e,
        refs,
    }
}

fn weight_sum_error(f: &Fixture) -> anyhow::Result<(f64, usize)> {
    let mut g = Graph::new();
    let e = g.constant(f.e.clone())?;
    let flat: Vec<f64> = f.refs.iter().flatten().flat_map(|p| p.to_vec()).collect();
    let r = g.constant(Tensor::matrix(flat.len() / 2, 2, flat)?)?;
    let p = f.pyramid.bind(&mut g)?;
    let out = f.params.curve_attention(&mut g, &f.store, e, r, &p)?;
    let w = g.value(out.weights);
    let worst = (0..w.rows()).map(|r| (w.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    Ok((worst, w.rows()))
}

/// Zero-padded bilinear read of an `H×W×C` map at column `x`, row `y`.
fn sample(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let [h, w, c] = map.shape() else { panic!("maps are H×W×C") };
    let (h, w, c) = (*h as i64, *w as i64, *c);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = vec![0.0; c];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (i, j) = (y0 as i64 + dy, x0 as i64 + dx);
            if i < 0 || j < 0 || i >= h || j >= w {
                continue;
            }
            let base = ((i * w + j) as usize) * c;
            for k in 0..c {
                out[k] += wy * wx * map.data()[base + k];
            }
        }
    }
    out
}

/// `x·W + b` for a row vector.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    (0..cols)
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

fn two_layer(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let get = |p: &str| store.get(&format!("{prefix}.{p}")).expect("parameter exists");
    let hidden: Vec<f64> = affine(x, get("w1"), get("b1")).into_iter().map(|v| v.max(0.0)).collect();
    affine(&hidden, get("w2"), get("b2"))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|x| x / s).collect()
}

/// Multi-scale deformable attention around one reference point per query:
/// on each level, offsets and weights come from the feature read at the
/// reference; each head pools `SAMPLES` points per level.
fn single_reference_deformable(f: &Fixture, scope: NormScope) -> Vec<Vec<f64>> {
    let wv = f.store.get("attn.ca.wv").expect("value projection");
    let wo = f.store.get("attn.ca.wo").expect("output projection");
    let zero_c = Tensor::vector(vec![0.0; EMBED]);
    let value_dim = EMBED / HEADS;
    let mut outputs = Vec::new();
    for (q, refs) in f.refs.iter().enumerate() {
        let r = refs[0];
        // per level: (logits[head][sample], values[head][sample][channel])
        let mut logits = vec![vec![Vec::new(); HEADS]; LEVEL_SIZES.len()];
        let mut values = vec![vec![Vec::new(); HEADS]; LEVEL_SIZES.len()];
        for (l, map) in f.pyramid.levels().iter().enumerate() {
            let s = LEVEL_SIZES[l] as f64 / IMAGE as f64;
            let (gx, gy) = (r[0] * s, r[1] * s);
            let feat = sample(map, gx, gy);
            let off = two_layer(&f.store, "attn.ca.off", &feat);
            let wt = two_layer(&f.store, "attn.ca.wt", &feat);
            for m in 0..HEADS {
                for k in 0..SAMPLES {
                    let o = (m * SAMPLES + k) * 2;
                    values[l][m].push(sample(map, gx + off[o], gy + off[o + 1]));
                    logits[l][m].push(wt[m * SAMPLES + k]);
                }
            }
        }
        let mut concat = Vec::with_capacity(EMBED);
        for m in 0..HEADS {
            let weights: Vec<Vec<f64>> = match scope {
                NormScope::Joint => {
                    let all: Vec<f64> = logits.iter().flat_map(|lv| lv[m].clone()).collect();
                    softmax(&all).chunks(SAMPLES).map(|c| c.to_vec()).collect()
                }
                NormScope::PerLevel => logits.iter().map(|lv| softmax(&lv[m])).collect(),
            };
            let mut pooled = vec![0.0; FEATURES];
            for l in 0..LEVEL_SIZES.len() {
                for k in 0..SAMPLES {
                    for c in 0..FEATURES {
                        pooled[c] += weights[l][k] * values[l][m][k][c];
                    }
                }
            }
            let projected = affine(&pooled, wv, &zero_c);
            concat.extend_from_slice(&projected[m * value_dim..(m + 1) * value_dim]);
        }
        let delta = affine(&concat, wo, &zero_c);
        outputs.push(f.e.row(q).iter().zip(delta).map(|(a, b)| a + b).collect());
    }
    outputs
}

pub fn attention_invariants() -> anyhow::Result<Outcome> {
    let mut sum_err: f64 = 0.0;
    let mut groups = 0;
    for seed in 0..50 {
        for scope in [NormScope::Joint, NormScope::PerLevel] {
            let (err, rows) = weight_sum_error(&fixture(seed, scope, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0]))?;
            sum_err = sum_err.max(err);
            groups += rows;
        }
    }

    let mut independence_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..50 {
        let f = fixture(1000 + seed, NormScope::Joint, 4, vec![0.0, 0.5, 1.0]);
        let victim = rng.random_range(0..4);
        let before = bezier_curve_attention(&f.e, &f.refs, &f.pyramid, &f.params, &f.store)?;
        let mut e = f.e.clone();
        e.data_mut()[victim * EMBED..(victim + 1) * EMBED].iter_mut().for_each(|v| *v += 0.7);
        let mut refs = f.refs.clone();
        refs[victim] = vec![[1.0, 2.0], [20.0, 9.0], [30.0, 30.0]];
        let after = bezier_curve_attention(&e, &refs, &f.pyramid, &f.params, &f.store)?;
        for q in 0..4 {
            let same = before.row(q) == after.row(q);
            independence_ok &= if q == victim { !same } else { same };
        }
    }

    let mut reduction: f64 = 0.0;
    for seed in 0..50 {
        for scope in [NormScope::Joint, NormScope::PerLevel] {
            let mut f = fixture(2000 + seed, scope, 3, vec![0.5]);
            // each query's reference is the middle of a random curve
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for r in f.refs.iter_mut() {
                let p: Vec<[f64; 2]> = (0..4)
                    .map(|_| [rng.random_range(0.0..IMAGE as f64), rng.random_range(0.0..IMAGE as f64)])
                    .collect();
                let cp = bezierformer::bezier::ControlPolygon::new(&p.iter().map(|v| v.to_vec()).collect::<Vec<_>>())?;
                let mid = bezierformer::attention::reference_pixels(&cp, None, &[0.5])?;
                let direct = [
                    (p[0][0] + 3.0 * p[1][0] + 3.0 * p[2][0] + p[3][0]) / 8.0,
                    (p[0][1] + 3.0 * p[1][1] + 3.0 * p[2][1] + p[3][1]) / 8.0,
                ];
                reduction = reduction.max((mid[0][0] - direct[0]).abs()).max((mid[0][1] - direct[1]).abs());
                *r = mid;
            }
            let lib = bezier_curve_attention(&f.e, &f.refs, &f.pyramid, &f.params, &f.store)?;
            for (q, expect) in single_reference_deformable(&f, scope).iter().enumerate() {
                for (a, b) in lib.row(q).iter().zip(expect) {
                    reduction = reduction.max((a - b).abs());
                }
            }
        }
    }

    let passed = sum_err <= 1e-6 && independence_ok && reduction <= 1e-9;
    Ok(Outcome::new(
        passed,
        format!(
            "weight sums off by {sum_err:.1e} over {groups} groups in both scopes (tol 1e-6); cross-query independence: {independence_ok}; single reference at t=0.5 vs dedicated deformable attention {reduction:.1e} (tol 1e-9)"
        ),
    ))
}
