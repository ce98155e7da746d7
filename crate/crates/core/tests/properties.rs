mod common;

use common::random_probs;
use featclip::analysis::{overconfidence_counts, select_groups};
use featclip::calibrators::{clip_features, clip_logits};
use featclip::datastore::{compute_logits, Head};
use featclip::metrics::{accuracy, ece_adaptive, ece_classwise, ece_equal_width, softmax, ProbMatrix};
use featclip::rng::SplitMix64;
use featclip::theory::{theory_point, Model, TheoryParams};
use featclip::{split, Matrix, SplitSpec};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn sized_matrix(lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    (1usize..20, 1usize..8).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

/// Random probability instance plus a permutation of its rows.
fn instance() -> impl Strategy<Value = (ProbMatrix, Vec<u32>, Vec<usize>, usize)> {
    (any::<u64>(), 1usize..80, 2usize..6, 1usize..20).prop_map(|(seed, n, k, m)| {
        let mut rng = SplitMix64::new(seed);
        let (p, y) = random_probs(&mut rng, n, k);
        (p, y, rng.permutation(n), m)
    })
}

fn permuted(p: &ProbMatrix, y: &[u32], perm: &[usize]) -> (ProbMatrix, Vec<u32>) {
    (
        ProbMatrix::new(p.matrix().select_rows(perm)).unwrap(),
        perm.iter().map(|&i| y[i]).collect(),
    )
}

proptest! {
    #[test]
    fn ece_is_bounded_and_permutation_invariant((p, y, perm, m) in instance()) {
        let (pp, yp) = permuted(&p, &y, &perm);
        let (e, bins) = ece_equal_width(&p, &y, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(bins.total(), y.len());
        prop_assert!((e - ece_equal_width(&pp, &yp, m).unwrap().0).abs() <= 1e-12);

        let c = ece_classwise(&p, &y, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((c - ece_classwise(&pp, &yp, m).unwrap()).abs() <= 1e-12);

        let ma = m.min(y.len());
        let (a, abins) = ece_adaptive(&p, &y, ma).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(abins.total(), y.len());
        // adaptive bins depend on the stable tie order, so permutation
        // invariance only holds when confidences are distinct
        let mut conf = p.confidences();
        conf.sort_by(f64::total_cmp);
        if conf.windows(2).all(|w| w[0] != w[1]) {
            prop_assert!((a - ece_adaptive(&pp, &yp, ma).unwrap().0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_bin_ece_is_accuracy_confidence_gap((p, y, _perm, _m) in instance()) {
        let mean_conf = p.confidences().iter().sum::<f64>() / y.len() as f64;
        let gap = (accuracy(&p, &y).unwrap() - mean_conf).abs();
        prop_assert!((ece_equal_width(&p, &y, 1).unwrap().0 - gap).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(z in sized_matrix(-30.0, 30.0), shift in -50.0f64..50.0) {
        let p = softmax(&z).unwrap();
        let q = softmax(&z.map(|v| v + shift)).unwrap();
        for i in 0..z.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..z.cols() {
                prop_assert!((p.row(i)[j] - q.row(i)[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn clipping_is_idempotent_and_nested(x in sized_matrix(-10.0, 10.0), c in 0.01f64..12.0, extra in 0.0f64..5.0) {
        let once = clip_features(&x, c).unwrap();
        prop_assert_eq!(&clip_features(&once, c).unwrap(), &once);
        prop_assert_eq!(&clip_features(&once, c + extra).unwrap(), &once);
        prop_assert_eq!(&clip_logits(&clip_logits(&x, c).unwrap(), c).unwrap(), &clip_logits(&x, c).unwrap());
        for (a, b) in x.as_slice().iter().zip(once.as_slice()) {
            prop_assert!(b.abs() <= c);
            if a.abs() <= c {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn temperature_keeps_every_argmax(z in sized_matrix(-20.0, 20.0), t in 0.05f64..20.0) {
        let p = softmax(&z).unwrap();
        let q = softmax(&z.map(|v| v / t)).unwrap();
        for i in 0..z.rows() {
            prop_assert_eq!(p.prediction(i).0, q.prediction(i).0);
        }
    }

    #[test]
    fn split_is_a_pure_partition(n in 2usize..2000, f in 0.01f64..0.99, seed in any::<u64>()) {
        let spec = SplitSpec::Fraction { val_fraction: f, seed };
        match split(n, &spec) {
            Ok(s) => {
                prop_assert_eq!(&s, &split(n, &spec).unwrap());
                prop_assert_eq!(s.val.len(), (n as f64 * f).round() as usize);
                let mut all: Vec<usize> = s.val.iter().chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            Err(_) => {
                let v = (n as f64 * f).round() as usize;
                prop_assert!(v == 0 || v >= n);
            }
        }
    }

    #[test]
    fn logits_follow_row_permutations(
        (x, w) in (1usize..15, 1usize..6, 1usize..5)
            .prop_flat_map(|(n, d, k)| (matrix(n, d, -3.0, 3.0), matrix(k, d, -1.0, 1.0))),
        seed in any::<u64>(),
    ) {
        let head = Head { bias: (0..w.rows()).map(|j| j as f64 * 0.1).collect(), weights: w };
        let perm = SplitMix64::new(seed).permutation(x.rows());
        let z = compute_logits(&head, &x).unwrap();
        let zp = compute_logits(&head, &x.select_rows(&perm)).unwrap();
        prop_assert_eq!(zp, z.select_rows(&perm));
    }

    #[test]
    fn theory_point_is_self_consistent(sigma in 0.01f64..3.0, c in 0.01f64..5.0) {
        let p = theory_point(&TheoryParams::new(sigma, c, Model::RectifiedMixture).unwrap()).unwrap();
        prop_assert!((p.h_clipped - p.h_original - p.delta_h).abs() <= 1e-12);
        prop_assert!(p.delta_h.is_finite() && p.d_delta_h_d_sigma.is_finite());
    }

    #[test]
    fn groups_are_disjoint_and_counts_nested((p, y, _perm, _m) in instance(), tau in 0.01f64..0.99) {
        let sel = select_groups(&p, &y, tau).unwrap();
        prop_assert!(sel.hce_idx.iter().all(|i| !sel.lce_idx.contains(i)));
        prop_assert!(sel.hce_idx.len() + sel.lce_idx.len() <= y.len());
        let rows = overconfidence_counts(&p, &y, &[tau * 0.5, tau, (tau + 1.0) / 2.0]).unwrap();
        prop_assert_eq!((rows[1].correct, rows[1].wrong), (sel.lce_idx.len(), sel.hce_idx.len()));
        for w in rows.windows(2) {
            prop_assert!(w[1].correct <= w[0].correct && w[1].wrong <= w[0].wrong);
        }
    }
}
