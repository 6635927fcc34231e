//! Evaluation metrics and binarisation against brute-force pixel-loop oracles.

mod common;

use bbsnet::metrics::{
    e_measure_binary, e_measure_curve, evaluate_pairs, f_measure_curve, mae, pr_curve, s_measure, EvalOptions, BETA2,
};
use bbsnet::postproc::{adaptive_threshold, otsu_threshold, Method, ADAPTIVE_EPS};
use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random_pair(r: &mut rand_chacha::ChaCha8Rng) -> (Array2<f32>, Array2<f32>) {
    let h = r.random_range(8..=16);
    let w = r.random_range(8..=16);
    (uniform_map(h, w, r), random_mask(h, w, r))
}

#[test]
fn mae_matches_pixel_loop() {
    let mut r = rng(1);
    for _ in 0..200 {
        let (s, g) = random_pair(&mut r);
        let want = oracle::mae(&oracle::grid(&s), &oracle::grid(&g));
        assert!((mae(s.view(), g.view()).unwrap() - want).abs() <= 1e-12);
    }
    let z = Array2::<f32>::zeros((4, 4));
    let o = Array2::<f32>::ones((4, 4));
    assert_eq!(mae(z.view(), z.view()).unwrap(), 0.0);
    assert_eq!(mae(o.view(), z.view()).unwrap(), 1.0);
}

#[test]
fn precision_recall_match_confusion_counts() {
    let mut r = rng(2);
    let mut checked = 0;
    for _ in 0..200 {
        let (s, g) = random_pair(&mut r);
        let (sg, gg) = (oracle::grid(&s), oracle::grid(&g));
        let Some((curve, max_f)) = f_measure_curve(s.view(), g.view()).unwrap() else {
            assert_eq!(gg.iter().flatten().sum::<f64>(), 0.0);
            continue;
        };
        let (p, rc) = oracle::precision_recall(&sg, &gg);
        assert_eq!(curve.precision, p);
        assert_eq!(curve.recall, rc);
        let want = p.iter().zip(&rc).map(|(&a, &b)| oracle::f_beta(a, b, BETA2)).fold(0.0, f64::max);
        assert!((max_f - want).abs() <= 1e-12);
        checked += 1;
    }
    assert!(checked > 150);
}

#[test]
fn e_measure_matches_pixel_loop() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (s, g) = random_pair(&mut r);
        let (sg, gg) = (oracle::grid(&s), oracle::grid(&g));
        let (curve, max_e) = e_measure_curve(s.view(), g.view()).unwrap();
        let mut want_max: f64 = 0.0;
        for k in (0..256).step_by(5).chain([255]) {
            let want = oracle::e_binary(&oracle::binarize(&sg, k), &gg);
            assert!((curve[k] - want).abs() <= 1e-10, "k = {k}: {} vs {want}", curve[k]);
        }
        for k in 0..256 {
            want_max = want_max.max(oracle::e_binary(&oracle::binarize(&sg, k), &gg));
        }
        assert!((max_e - want_max).abs() <= 1e-10);
    }
}

#[test]
fn s_measure_matches_reference_oracle() {
    let mut r = rng(4);
    for i in 0..100 {
        let (s, g) = if i % 2 == 0 {
            (uniform_map(16, 16, &mut r), random_mask(16, 16, &mut r))
        } else {
            random_pair(&mut r)
        };
        let want = oracle::s_measure(&oracle::grid(&s), &oracle::grid(&g), 0.5);
        let got = s_measure(s.view(), g.view(), 0.5).unwrap();
        assert!((got - want).abs() <= 1e-6, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn s_measure_examples() {
    let mut r = rng(5);
    let g = random_mask(12, 12, &mut r);
    assert!((s_measure(g.view(), g.view(), 0.5).unwrap() - 1.0).abs() < 1e-12);
    let z = Array2::<f32>::zeros((6, 6));
    assert_eq!(s_measure(z.view(), z.view(), 0.5).unwrap(), 1.0);
}

#[test]
fn otsu_matches_exhaustive_search() {
    let mut r = rng(6);
    for i in 0..100 {
        let s = uniform_map(16, 16, &mut r);
        let grid = oracle::grid(&s);
        let (t_oracle, v_oracle) = oracle::otsu(&grid).unwrap();
        let b = otsu_threshold(s.view());
        let t = (b.threshold * 255.0).round() as usize;
        if t != t_oracle {
            // only a floating-point near tie may separate the two searches
            let v = oracle::within_variance(&grid, t);
            assert!((v - v_oracle).abs() <= 1e-9 * v_oracle.max(1.0), "map {i}: {t} vs {t_oracle}");
        }
        for (&p, &q) in b.map.iter().zip(s.iter()) {
            let bin = (q as f64 * 255.0).round() as usize;
            assert_eq!(p, if bin >= t { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn otsu_examples() {
    let mut s = Array2::<f32>::zeros((2, 5));
    s.row_mut(1).fill(1.0);
    let b = otsu_threshold(s.view());
    assert_eq!(b.map, s);
    assert!(b.threshold > 0.0 && b.threshold <= 1.0);
    let c = Array2::from_elem((4, 4), 0.42f32);
    let b = otsu_threshold(c.view());
    assert_eq!(b.threshold, 0.0);
    assert!(b.map.iter().all(|&v| v == 1.0));
    assert_eq!(b.method, Method::Otsu);
}

#[test]
fn adaptive_threshold_closed_form() {
    let c = Array2::from_elem((4, 4), 0.3f32);
    let b = adaptive_threshold(c.view());
    assert!((b.threshold - 0.6).abs() < 1e-7);
    assert!(b.map.iter().all(|&v| v == 0.0));

    let mut half = Array2::<f32>::zeros((4, 4));
    half.slice_mut(ndarray::s![.., 2..]).fill(0.8);
    let b = adaptive_threshold(half.view());
    assert!((b.threshold - 0.8).abs() < 1e-7);
    assert_eq!(b.map, half.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));

    // a bright map clamps the threshold just below one
    let bright = Array2::from_shape_fn((4, 4), |(y, x)| if x + y == 0 { 1.0f32 } else { 0.7 });
    let b = adaptive_threshold(bright.view());
    assert_eq!(b.threshold, 1.0 - ADAPTIVE_EPS);
    assert_eq!(b.map.sum(), 1.0);
}

#[test]
fn complement_prediction() {
    let mut r = rng(7);
    let g = random_mask(10, 10, &mut r);
    let c = g.mapv(|v| 1.0 - v);
    let (curve, max_f) = f_measure_curve(c.view(), g.view()).unwrap().unwrap();
    assert!(curve.recall[1..255].iter().all(|&v| v == 0.0));
    assert!(max_f < 1.0);
    assert!(curve.f_curve()[1..255].iter().all(|&v| v == 0.0));
    assert!(e_measure_binary(c.view(), g.view()).unwrap() < 1e-12);
}

/// Over every binary 4x4 prediction, the complement of the mask scores the
/// minimum E-measure.
#[test]
fn complement_minimises_e_measure_exhaustively() {
    let g = Array2::from_shape_fn((4, 4), |(y, x)| if (1..3).contains(&y) && x < 3 { 1.0f32 } else { 0.0 });
    let comp = g.mapv(|v| 1.0 - v);
    let e_comp = e_measure_binary(comp.view(), g.view()).unwrap();
    let gg = oracle::grid(&g);
    for bits in 0u32..(1 << 16) {
        let b = Array2::from_shape_fn((4, 4), |(y, x)| ((bits >> (4 * y + x)) & 1) as f32);
        let e = e_measure_binary(b.view(), g.view()).unwrap();
        assert!(e >= e_comp);
        if bits % 997 == 0 {
            assert!((e - oracle::e_binary(&oracle::grid(&b), &gg)).abs() < 1e-12);
        }
    }
}

#[test]
fn dataset_aggregation() {
    let mut r = rng(8);
    let opts = EvalOptions::default();
    let pairs: Vec<(Array2<f32>, Array2<f32>)> = (0..4).map(|_| random_pair(&mut r)).collect();
    // singleton dataset equals the image scores
    let (s, g) = &pairs[0];
    let rep = evaluate_pairs([(s.view(), g.view())], &EvalOptions { normalize: false, ..opts }).unwrap();
    assert_eq!(rep.mae, mae(s.view(), g.view()).unwrap());
    assert_eq!(rep.s_alpha, s_measure(s.view(), g.view(), 0.5).unwrap());
    assert_eq!(rep.max_f, f_measure_curve(s.view(), g.view()).unwrap().unwrap().1);
    assert_eq!(rep.max_e, e_measure_curve(s.view(), g.view()).unwrap().1);
    // perfect predictions
    let rep = evaluate_pairs(pairs.iter().map(|(_, g)| (g.view(), g.view())), &opts).unwrap();
    assert_eq!(rep.mae, 0.0);
    for v in [rep.s_alpha, rep.max_f, rep.max_e] {
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }
    // an empty mask is counted and left out of precision/recall
    let z = Array2::<f32>::zeros((8, 8));
    let rep = evaluate_pairs([(pairs[1].0.view(), pairs[1].1.view()), (z.view(), z.view())], &opts).unwrap();
    assert_eq!(rep.n_samples, 2);
    assert_eq!(rep.n_empty_gt, 1);
    assert_eq!(rep.pr_averaging, "dataset-mean");
    let single = pr_curve(bbsnet::metrics::min_max_normalize(pairs[1].0.view()).view(), pairs[1].1.view()).unwrap().unwrap();
    assert_eq!(rep.precision, single.precision);
}

fn permute(a: &Array2<f32>, perm: &[usize]) -> Array2<f32> {
    let w = a.ncols();
    let flat: Vec<f32> = a.iter().copied().collect();
    Array2::from_shape_fn(a.dim(), |(y, x)| flat[perm[y * w + x]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mae_and_pr_are_permutation_invariant(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (s, g) = random_pair(&mut r);
        let mut perm: Vec<usize> = (0..s.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let (ps, pg) = (permute(&s, &perm), permute(&g, &perm));
        prop_assert_eq!(mae(s.view(), g.view()).unwrap(), mae(ps.view(), pg.view()).unwrap());
        prop_assert_eq!(pr_curve(s.view(), g.view()).unwrap(), pr_curve(ps.view(), pg.view()).unwrap());
    }

    #[test]
    fn metric_ranges_and_monotone_recall(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (s, g) = random_pair(&mut r);
        let m = mae(s.view(), g.view()).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let sa = s_measure(s.view(), g.view(), 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&sa));
        let (e, max_e) = e_measure_curve(s.view(), g.view()).unwrap();
        prop_assert!((0.0..=1.0).contains(&max_e));
        prop_assert!(e.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        if let Some(c) = pr_curve(s.view(), g.view()).unwrap() {
            prop_assert!(c.precision.iter().chain(&c.recall).all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(c.recall.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn ground_truth_is_the_best_prediction(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (s, g) = random_pair(&mut r);
        let (_, e_s) = e_measure_curve(s.view(), g.view()).unwrap();
        let (_, e_g) = e_measure_curve(g.view(), g.view()).unwrap();
        prop_assert!(e_g >= e_s);
        if let (Some((_, f_s)), Some((_, f_g))) = (f_measure_curve(s.view(), g.view()).unwrap(), f_measure_curve(g.view(), g.view()).unwrap()) {
            prop_assert!(f_g >= f_s);
        }
    }

    #[test]
    fn binarisation_is_binary_and_idempotent(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let s = uniform_map(r.random_range(4..12), r.random_range(4..12), &mut r);
        for m in [adaptive_threshold(s.view()), otsu_threshold(s.view())] {
            prop_assert!(m.map.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!((0.0..=1.0).contains(&m.threshold));
            if m.map.iter().any(|&v| v == 1.0) && m.map.iter().any(|&v| v == 0.0) {
                prop_assert_eq!(&adaptive_threshold(m.map.view()).map, &m.map);
                prop_assert_eq!(&otsu_threshold(m.map.view()).map, &m.map);
            }
        }
    }

    /// Moving values inside their 256-level bins changes nothing.
    #[test]
    fn otsu_depends_only_on_the_histogram(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let s = uniform_map(10, 10, &mut r);
        let moved = s.mapv(|v| {
            let bin = (v as f64 * 255.0).round();
            let lo = ((bin - 0.45) / 255.0).max(0.0);
            let hi = ((bin + 0.45) / 255.0).min(1.0);
            r.random_range(lo..=hi) as f32
        });
        prop_assert_eq!(otsu_threshold(s.view()).map, otsu_threshold(moved.view()).map);
    }
}
