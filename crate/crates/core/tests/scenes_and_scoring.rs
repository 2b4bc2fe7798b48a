use bezierformer::bezier::{evaluate, uniform_ts, ControlPolygon};
use bezierformer::eval::{evaluate_sets, match_and_score};
use bezierformer::lanes::{Lane, LaneSet, Mode};
use bezierformer::synth::{generate_corpus, generate_scene, load_scene, save_scene, SynthConfig};
use proptest::prelude::*;

fn lane(cps: [[f64; 2]; 4], category: usize, score: Option<f64>) -> Lane {
    let v: Vec<Vec<f64>> = cps.iter().map(|p| p.to_vec()).collect();
    Lane {
        category,
        score,
        control_points: ControlPolygon::new(&v).unwrap(),
        points: None,
    }
}

fn vertical(x: f64, tilt: f64, category: usize, score: Option<f64>) -> Lane {
    lane(
        [[x, 60.0], [x + tilt, 40.0], [x + 2.0 * tilt, 20.0], [x + 3.0 * tilt, 2.0]],
        category,
        score,
    )
}

fn set(id: &str, lanes: Vec<Lane>) -> LaneSet {
    LaneSet::new(id, Mode::TwoD, None, lanes).unwrap()
}

#[test]
fn scenes_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::TwoD, Mode::ThreeD] {
        let scene = generate_scene(11, &SynthConfig::for_mode(mode)).unwrap();
        let path = save_scene(&scene, dir.path()).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back.lanes, scene.lanes);
        assert_eq!(back.rng_seed, scene.rng_seed);
        let bits = |t: &bezierformer::diff::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.raster), bits(&scene.raster));
        assert_eq!(back.raster.shape(), scene.raster.shape());
    }
}

#[test]
fn lane_sets_round_trip_through_json() {
    let s = set("x", vec![vertical(10.0, 1.0, 2, Some(0.75)), vertical(40.0, -0.5, 1, None)]);
    let back = LaneSet::from_json(&s.to_json(), "mem").unwrap();
    assert_eq!(back, s);
}

#[test]
fn malformed_lane_sets_name_the_offending_field() {
    let mut v = set("x", vec![vertical(10.0, 1.0, 2, None)]).to_json();
    v["lanes"][0]["control_points"][2] = serde_json::json!([1.0]);
    let err = LaneSet::from_json(&v, "bad.json").unwrap_err().to_string();
    assert!(err.contains("bad.json") && err.contains("/lanes/0/control_points"), "{err}");
}

#[test]
fn ground_truth_points_are_exact_curve_samples() {
    for mode in [Mode::TwoD, Mode::ThreeD] {
        let cfg = SynthConfig::for_mode(mode);
        for scene in generate_corpus(5, 8, &cfg).unwrap() {
            for l in &scene.lanes.lanes {
                let dense = evaluate(&l.control_points, &uniform_ts(cfg.n_dis)).unwrap();
                let pts: Vec<f64> = l.points.as_ref().unwrap().iter().flatten().copied().collect();
                let err = dense.flat().iter().zip(&pts).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-9);
            }
        }
    }
}

#[test]
fn corpora_are_deterministic_and_bounded() {
    let cfg = SynthConfig::default();
    let a = generate_corpus(3, 16, &cfg).unwrap();
    assert_eq!(a, generate_corpus(3, 16, &cfg).unwrap());
    for s in &a {
        assert_eq!(s.raster.shape(), [64, 64, 2]);
        assert!((1..=4).contains(&s.lanes.lanes.len()));
        assert!(s.lanes.lanes.iter().all(|l| (1..3).contains(&l.category)));
    }
}

#[test]
fn identical_sets_score_perfectly() {
    let g = set("s", vec![vertical(10.0, 1.0, 1, None), vertical(40.0, -1.0, 2, None)]);
    let r = evaluate_sets(&[(g.clone(), g)], 0.5, 3.0, 200).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_, r.f1, r.category_accuracy), (2, 0, 0, 1.0, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_is_one_to_one_and_monotone_in_threshold(
        gts in prop::collection::vec((4.0..60.0f64, -3.0..3.0f64), 0..4),
        preds in prop::collection::vec((4.0..60.0f64, -3.0..3.0f64), 0..5),
    ) {
        let g = set("s", gts.iter().map(|(x, t)| vertical(*x, *t, 1, None)).collect());
        let p = set("s", preds.iter().map(|(x, t)| vertical(*x, *t, 1, Some(0.5))).collect());
        let mut last_f1 = f64::INFINITY;
        for th in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let s = match_and_score(&p, &g, th, 3.0, 100).unwrap();
            let mut gs: Vec<usize> = s.matches.iter().map(|m| m.1).collect();
            let mut ps: Vec<usize> = s.matches.iter().map(|m| m.0).collect();
            gs.sort();
            gs.dedup();
            ps.sort();
            ps.dedup();
            prop_assert_eq!(gs.len(), s.matches.len());
            prop_assert_eq!(ps.len(), s.matches.len());
            prop_assert_eq!(s.tp + s.fp, p.lanes.len());
            prop_assert_eq!(s.tp + s.fn_, g.lanes.len());
            let f1 = evaluate_sets(&[(p.clone(), g.clone())], th, 3.0, 100).unwrap().f1;
            prop_assert!(f1 <= last_f1 + 1e-12);
            last_f1 = f1;
        }
    }

    #[test]
    fn prediction_order_is_irrelevant_when_scores_differ(
        xs in prop::collection::vec(4.0..60.0f64, 1..5),
        rot in 0usize..5,
    ) {
        let g = set("s", xs.iter().map(|x| vertical(*x, 0.0, 1, None)).collect());
        let mut lanes: Vec<Lane> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| vertical(x + 1.0, 0.5, 1, Some(0.9 - 0.1 * i as f64)))
            .collect();
        let a = match_and_score(&set("s", lanes.clone()), &g, 0.5, 3.0, 100).unwrap();
        let k = rot % lanes.len();
        lanes.rotate_left(k);
        let n = lanes.len();
        let b = match_and_score(&set("s", lanes), &g, 0.5, 3.0, 100).unwrap();
        prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
        let mut mapped: Vec<(usize, usize)> = b.matches.iter().map(|(p, gt)| ((p + k) % n, *gt)).collect();
        let mut orig = a.matches.clone();
        mapped.sort();
        orig.sort();
        prop_assert_eq!(mapped, orig);
    }
}
