//! Property tests over the pure building blocks.

use proptest::prelude::*;

use relufy::activations::{sparsity, ActivationSpec};
use relufy::flops::{dense_macs, effective_macs, ArchSpec, SparsityProfile};
use relufy::instrument::{random_baseline, AggregatedTrace, PreactHistogram};
use relufy::linalg::{matvec_dense, matvec_sparse, sparsify, DenseMatrix, MacCounter};
use relufy::specdec::{expected_tokens, optimal_gamma, thm1_speedup, thm2_speedup, SaggCurve};

fn matrix_and_vector() -> impl Strategy<Value = (DenseMatrix, Vec<f64>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(-3.0f64..3.0, r * c),
            prop::collection::vec(prop_oneof![Just(0.0), -2.0f64..2.0], r),
        )
            .prop_map(move |(w, x)| (DenseMatrix::from_vec(r, c, w).unwrap(), x))
    })
}

proptest! {
    #[test]
    fn sparse_matvec_matches_dense((w, x) in matrix_and_vector()) {
        let mut dm = MacCounter::new();
        let mut sm = MacCounter::new();
        let dense = matvec_dense(&w, &x, &mut dm, "w").unwrap();
        let sv = sparsify(&x, 0.0);
        let sparse = matvec_sparse(&w, &sv, &mut sm, "w").unwrap();
        for (a, b) in dense.iter().zip(&sparse) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        prop_assert_eq!(sm.macs("w"), (sv.nnz() * w.cols()) as u64);
        prop_assert_eq!(dm.macs("w"), (w.rows() * w.cols()) as u64);
    }

    #[test]
    fn sparsify_keeps_exactly_entries_above_tau(v in prop::collection::vec(-1.0f64..1.0, 0..40), tau in 0.0f64..0.5) {
        let s = sparsify(&v, tau);
        for (i, (orig, kept)) in v.iter().zip(s.values()).enumerate() {
            if orig.abs() > tau {
                prop_assert_eq!(orig, kept);
                prop_assert!(s.active().contains(&i));
            } else {
                prop_assert_eq!(*kept, 0.0);
            }
        }
    }

    #[test]
    fn sparsity_is_permutation_invariant(mut v in prop::collection::vec(-2.0f64..2.0, 1..50), seed in any::<u64>()) {
        let relu = ActivationSpec::Relu.apply(&v);
        let before = sparsity(&relu, 0.0).unwrap();
        let n = v.len();
        v.rotate_left((seed % n as u64) as usize);
        let after = sparsity(&ActivationSpec::Relu.apply(&v), 0.0).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn expected_tokens_bounds(alpha in 0.0f64..0.999, gamma in 1u32..64) {
        let e = expected_tokens(alpha, gamma).unwrap();
        let series: f64 = (0..=gamma).map(|k| alpha.powi(k as i32)).sum();
        prop_assert!((e - series).abs() < 1e-9 * series);
        prop_assert!(e >= 1.0 && e <= gamma as f64 + 1.0 + 1e-12);
    }

    #[test]
    fn sparsity_never_slows_decoding(alpha in 0.0f64..0.99, c in 0.001f64..1.0, gamma in 1u32..40, s in 0.0f64..0.99) {
        prop_assert!(thm1_speedup(c, gamma, s).unwrap() >= 1.0 - 1e-12);
        prop_assert!(thm2_speedup(alpha, c, gamma, s).unwrap() >= thm2_speedup(alpha, c, gamma, 0.0).unwrap() - 1e-12);
    }

    #[test]
    fn sparse_optimal_gamma_not_larger(alpha in 0.05f64..0.95, c in 0.005f64..0.5, s in 0.05f64..0.95) {
        let dense = optimal_gamma(alpha, c, &SaggCurve::Constant { value: 0.0 }, 64).unwrap();
        for curve in [SaggCurve::Random { s }, SaggCurve::Constant { value: s }] {
            prop_assert!(optimal_gamma(alpha, c, &curve, 64).unwrap() <= dense);
        }
    }

    #[test]
    fn effective_macs_monotone(q in 0.0f64..1.0, u in 0.0f64..1.0, d in 0.0f64..1.0, extra in 0.0f64..1.0) {
        for name in ArchSpec::preset_names() {
            let arch = ArchSpec::preset(name).unwrap();
            let dense = dense_macs(&arch).unwrap().dense_total;
            let p = SparsityProfile::new(q, u, d).unwrap();
            let e = effective_macs(&arch, &p).unwrap().effective_total;
            prop_assert!(e <= dense);
            let more = SparsityProfile::new(q, u, d + (1.0 - d) * extra).unwrap();
            prop_assert!(effective_macs(&arch, &more).unwrap().effective_total <= e + 1e-6);
        }
    }

    #[test]
    fn histogram_conserves_counts(xs in prop::collection::vec(prop_oneof![-20.0f64..20.0, Just(f64::NAN)], 0..200)) {
        let mut h = PreactHistogram::default();
        h.extend(xs.iter().copied());
        let binned: u64 = h.counts().iter().sum();
        prop_assert_eq!(binned + h.underflow() + h.overflow(), xs.len() as u64);
        prop_assert_eq!(h.total(), xs.len() as u64);
    }

    #[test]
    fn quantile_is_monotone(xs in prop::collection::vec(-5.0f64..5.0, 1..200), q1 in 0.01f64..0.99, q2 in 0.01f64..0.99) {
        let mut h = PreactHistogram::default();
        h.extend(xs.iter().copied());
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(h.quantile(lo).unwrap() <= h.quantile(hi).unwrap());
        // the target mass is reached at the returned edge
        prop_assert!(h.mass_below(h.quantile(hi).unwrap()) >= hi - 1e-12);
    }

    #[test]
    fn trace_is_non_increasing(masks in prop::collection::vec(prop::collection::vec(0usize..16, 0..6), 1..30)) {
        let mut tr = AggregatedTrace::new(1, 16);
        for m in &masks {
            tr.update(&[m.clone()]).unwrap();
        }
        for w in tr.layer(0).windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn random_baseline_is_a_power(s in 0.0f64..1.0, t in 0u32..50) {
        let b = random_baseline(&[s], t).unwrap();
        prop_assert!((b[0] - s.powi(t as i32)).abs() < 1e-15);
    }
}
