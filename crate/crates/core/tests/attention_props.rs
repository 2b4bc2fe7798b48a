use bezierformer::attention::{
    bezier_curve_attention, fv_sample_references, reference_pixels, AttentionConfig, AttentionParams, FeaturePyramid,
    NormScope,
};
use bezierformer::bezier::ControlPolygon;
use bezierformer::diff::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IMAGE: usize = 32;

struct Fixture {
    params: AttentionParams,
    store: ParamStore,
    pyramid: FeaturePyramid,
    e: Tensor,
    refs: Vec<Vec<[f64; 2]>>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn fixture(seed: u64, scope: NormScope, queries: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = AttentionConfig {
        embed_dim: 8,
        heads: 2,
        feature_dim: 3,
        levels: 2,
        ref_ts: vec![0.0, 0.5, 1.0],
        samples: 2,
        point_dim: 2,
        pe_freqs: 4,
        scope,
    };
    let params = AttentionParams::new("attn", config).unwrap();
    let mut store = ParamStore::new();
    params.init(&mut store, &mut rng);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.insert(name, random_tensor(&mut rng, &shape, 0.5));
    }
    let pyramid = FeaturePyramid::new(
        vec![random_tensor(&mut rng, &[8, 8, 3], 1.0), random_tensor(&mut rng, &[4, 4, 3], 1.0)],
        IMAGE,
        IMAGE,
    )
    .unwrap();
    let e = random_tensor(&mut rng, &[queries, 8], 1.0);
    let refs = (0..queries)
        .map(|_| (0..3).map(|_| [rng.random_range(0.0..IMAGE as f64), rng.random_range(0.0..IMAGE as f64)]).collect())
        .collect();
    Fixture {
        params,
        store,
        pyramid,
        e,
        refs,
    }
}

fn curve_weights(f: &Fixture) -> Tensor {
    let mut g = Graph::new();
    let e = g.constant(f.e.clone()).unwrap();
    let flat: Vec<f64> = f.refs.iter().flatten().flat_map(|p| p.to_vec()).collect();
    let r = g.constant(Tensor::matrix(flat.len() / 2, 2, flat).unwrap()).unwrap();
    let p = f.pyramid.bind(&mut g).unwrap();
    let out = f.params.curve_attention(&mut g, &f.store, e, r, &p).unwrap();
    g.value(out.weights).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_weights_normalise_per_group(seed in any::<u64>(), per_level in any::<bool>()) {
        let scope = if per_level { NormScope::PerLevel } else { NormScope::Joint };
        let f = fixture(seed, scope, 3);
        let w = curve_weights(&f);
        for r in 0..w.rows() {
            let s: f64 = w.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        // rows are (query, head) jointly or (query, head, level) per level
        let groups = if per_level { 3 * 2 * 2 } else { 3 * 2 };
        prop_assert_eq!(w.rows(), groups);
    }

    #[test]
    fn self_attention_rows_sum_to_one(seed in any::<u64>()) {
        let f = fixture(seed, NormScope::Joint, 4);
        let mut g = Graph::new();
        let e = g.constant(f.e.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let pe = g.constant(random_tensor(&mut rng, &[4, 8], 1.0)).unwrap();
        let out = f.params.self_attention(&mut g, &f.store, e, pe).unwrap();
        for a in out.weights {
            for r in 0..4 {
                prop_assert!((g.value(a).row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn queries_do_not_interact_in_curve_attention(seed in any::<u64>(), victim in 0usize..3, target in 0usize..3) {
        prop_assume!(victim != target);
        let f = fixture(seed, NormScope::Joint, 3);
        let before = bezier_curve_attention(&f.e, &f.refs, &f.pyramid, &f.params, &f.store).unwrap();
        let mut e = f.e.clone();
        e.data_mut()[victim * 8..(victim + 1) * 8].iter_mut().for_each(|v| *v += 0.7);
        let mut refs = f.refs.clone();
        refs[victim] = vec![[1.0, 2.0], [20.0, 9.0], [30.0, 30.0]];
        let after = bezier_curve_attention(&e, &refs, &f.pyramid, &f.params, &f.store).unwrap();
        prop_assert_eq!(before.row(target), after.row(target));
        prop_assert_ne!(before.row(victim), after.row(victim));
    }
}

#[test]
fn zero_offsets_and_flat_weights_average_the_references() {
    let mut f = fixture(3, NormScope::Joint, 2);
    for part in ["attn.ca.off.w1", "attn.ca.off.b1", "attn.ca.off.w2", "attn.ca.off.b2", "attn.ca.wt.w2", "attn.ca.wt.b2"] {
        let shape = f.store.get(part).unwrap().shape().to_vec();
        f.store.init_zeros(part, &shape);
    }
    let out = bezier_curve_attention(&f.e, &f.refs, &f.pyramid, &f.params, &f.store).unwrap();
    let geo = f.pyramid.geometry();
    let wv = f.store.get("attn.ca.wv").unwrap();
    let wo = f.store.get("attn.ca.wo").unwrap();
    for (q, refs) in f.refs.iter().enumerate() {
        // mean feature over levels and references (samples coincide)
        let mut mean = [0.0; 3];
        for (l, map) in f.pyramid.levels().iter().enumerate() {
            let s = geo.grid_scale(l);
            for r in refs {
                let v = bezierformer::diff::bilinear_sample(map, r[0] * s[0], r[1] * s[1]).unwrap();
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / 6.0);
            }
        }
        let proj: Vec<f64> = (0..8).map(|j| (0..3).map(|c| mean[c] * wv.data()[c * 8 + j]).sum()).collect();
        for j in 0..8 {
            let expect = f.e.row(q)[j] + (0..8).map(|i| proj[i] * wo.data()[i * 8 + j]).sum::<f64>();
            assert!((out.row(q)[j] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn references_of_a_diagonal_line() {
    let cp = ControlPolygon::new(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
    let px = reference_pixels(&cp, None, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    let expect = [0.0, 0.75, 1.5, 2.25, 3.0];
    for (p, e) in px.iter().zip(expect) {
        assert!((p[0] - e).abs() < 1e-12 && (p[1] - e).abs() < 1e-12);
    }
    let f = fixture(0, NormScope::Joint, 1);
    let grid = fv_sample_references(&cp, None, &[0.5], f.pyramid.geometry()).unwrap();
    assert_eq!(grid, vec![vec![[0.375, 0.375]], vec![[0.1875, 0.1875]]]);
}

#[test]
fn three_d_curves_need_a_camera() {
    let cp = ControlPolygon::new(&vec![vec![0.0, 10.0, 0.0]; 4]).unwrap();
    assert!(reference_pixels(&cp, None, &[0.5]).is_err());
}
