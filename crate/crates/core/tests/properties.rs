use denoise_ad::data::{denormalize, normalize, window_count, make_windows, TimeSeries};
use denoise_ad::detection::{
    evaluate_scores, extract_segments, segments_to_flags, sweep_threshold_scores, threshold_candidates,
};
use denoise_ad::tensor::{apply_activation, Activation, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..20).prop_map(|v| v as f64 / 4.0), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

fn brute_confusion(scores: &[f64], labels: &[u8], threshold: f64) -> [usize; 4] {
    let mut c = [0; 4];
    for (s, l) in scores.iter().zip(labels) {
        let flagged = *s > threshold;
        let idx = match (flagged, *l == 1) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[idx] += 1;
    }
    c
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in (1usize..4, 1usize..4, 1usize..4, 1usize..4)
        .prop_flat_map(|(m, n, k, r)| (matrix(m, n), matrix(n, k), matrix(k, r)))) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn activations_stay_in_range(x in -800.0f64..800.0) {
        let m = Matrix::filled(1, 1, x);
        let s = apply_activation(&m, Activation::Sigmoid).get(0, 0);
        let t = apply_activation(&m, Activation::Tanh).get(0, 0);
        prop_assert!((0.0..=1.0).contains(&s) && s.is_finite());
        prop_assert!((-1.0..=1.0).contains(&t));
    }

    #[test]
    fn window_count_matches_enumeration(t in 2usize..200, l in 2usize..30, step in 1usize..7) {
        prop_assume!(l <= t);
        let values: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let series = TimeSeries::univariate("s", &values, None).unwrap();
        let set = make_windows(&series, l, step).unwrap();
        let expected = (0..).map(|k| k * step).take_while(|s| s + l <= t).count();
        prop_assert_eq!(window_count(t, l, step), expected);
        prop_assert_eq!(set.len(), expected);
        for (w, origin) in set.windows.iter().zip(&set.origins) {
            prop_assert_eq!(w.get(0, 0), *origin as f64);
        }
    }

    #[test]
    fn normalize_is_monotone_and_invertible(values in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        let series = TimeSeries::univariate("s", &values, None).unwrap();
        prop_assume!(values.iter().any(|v| *v != values[0]));
        let (norm, params) = normalize(&series, None).unwrap();
        let n = norm.values.as_slice();
        for i in 0..values.len() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&n[i]));
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(n[i] <= n[j]);
                }
            }
        }
        let back = denormalize(&norm, &params).unwrap();
        for (a, b) in back.values.as_slice().iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn metrics_match_brute_force((scores, labels) in scored_labels(), threshold in -1.0f64..6.0) {
        let report = evaluate_scores(&scores, &labels, threshold).unwrap();
        let [tp, fp, fneg, tn] = brute_confusion(&scores, &labels, threshold);
        prop_assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives, report.true_negatives),
            (tp, fp, fneg, tn)
        );
    }

    #[test]
    fn evaluation_is_permutation_equivariant((scores, labels) in scored_labels(), threshold in -1.0f64..6.0, rot in 0usize..60) {
        let k = rot % scores.len();
        let mut s2 = scores.clone();
        let mut l2 = labels.clone();
        s2.rotate_left(k);
        l2.rotate_left(k);
        prop_assert_eq!(evaluate_scores(&scores, &labels, threshold).unwrap(), evaluate_scores(&s2, &l2, threshold).unwrap());
    }

    #[test]
    fn raising_threshold_never_adds_flags((scores, labels) in scored_labels(), a in -1.0f64..6.0, b in -1.0f64..6.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = evaluate_scores(&scores, &labels, lo).unwrap();
        let high = evaluate_scores(&scores, &labels, hi).unwrap();
        prop_assert!(high.true_positives <= low.true_positives);
        prop_assert!(high.false_positives <= low.false_positives);
        prop_assert!(high.recall <= low.recall);
    }

    #[test]
    fn sweep_finds_exhaustive_best((scores, labels) in scored_labels()) {
        prop_assume!(labels.contains(&1));
        let (threshold, best) = sweep_threshold_scores(&scores, &labels, 200).unwrap();
        let mut exhaustive: Vec<f64> = scores.clone();
        exhaustive.push(f64::NEG_INFINITY);
        let top = exhaustive
            .iter()
            .map(|&t| evaluate_scores(&scores, &labels, t).unwrap().f1)
            .fold(f64::MIN, f64::max);
        prop_assert_eq!(best.f1, top);
        prop_assert_eq!(evaluate_scores(&scores, &labels, threshold).unwrap(), best);
    }

    #[test]
    fn candidates_bracket_the_scores(scores in prop::collection::vec(-5.0f64..5.0, 1..100), n in 2usize..50) {
        let cands = threshold_candidates(&scores, n).unwrap();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(cands.iter().any(|&c| c < min));
        prop_assert!(cands.iter().any(|&c| c > max));
        prop_assert!(cands.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn segments_roundtrip(flags in prop::collection::vec(0u8..=1, 0..80)) {
        let segments = extract_segments(&flags);
        prop_assert_eq!(segments_to_flags(&segments, flags.len()), flags.clone());
        prop_assert_eq!(segments.iter().map(|s| s.len).sum::<usize>(), flags.iter().filter(|&&f| f == 1).count());
    }
}
