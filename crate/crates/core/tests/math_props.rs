use histocon::math::{
    cosine_sim, l2_normalize, log_sum_exp, norm, psi, similarity_matrix, EmbeddingBatch, FeatureVector, Role,
    Temperature,
};
use proptest::prelude::*;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, d).prop_filter("non-zero", |v| norm(v) > 1e-3)
}

proptest! {
    #[test]
    fn normalized_vectors_have_unit_norm(v in (1usize..32).prop_flat_map(vec_strategy)) {
        let n = l2_normalize(&FeatureVector::new(v.clone()).unwrap()).unwrap();
        prop_assert!((n.norm() - 1.0).abs() < 1e-6);
        // direction preserved
        let scale = norm(&v);
        for (a, b) in n.as_slice().iter().zip(&v) {
            prop_assert!((a * scale - b).abs() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        (a, b) in (1usize..16).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d))),
        s in 0.01f64..100.0,
    ) {
        let fa = FeatureVector::new(a.clone()).unwrap();
        let fb = FeatureVector::new(b.clone()).unwrap();
        let c = cosine_sim(&fa, &fb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, cosine_sim(&fb, &fa).unwrap());
        let scaled = FeatureVector::new(a.iter().map(|x| x * s).collect()).unwrap();
        prop_assert!((cosine_sim(&scaled, &fb).unwrap() - c).abs() < 1e-12);
        let tau = Temperature::new(0.2).unwrap();
        prop_assert!((psi(&fa, &fb, tau).unwrap() - (c / 0.2).exp()).abs() < 1e-9 * (c / 0.2).exp());
    }

    #[test]
    fn log_sum_exp_matches_direct_sum(xs in prop::collection::vec(-30.0f64..30.0, 1..50)) {
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..50),
        c in -500.0f64..500.0,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&xs) - c).abs() < 1e-9);
    }

    #[test]
    fn similarity_matrix_entries_are_cosines(
        (rows, cols) in (1usize..8).prop_flat_map(|d| (
            prop::collection::vec(vec_strategy(d), 1..6),
            prop::collection::vec(vec_strategy(d), 1..6),
        )),
    ) {
        let r = EmbeddingBatch::from_rows(&rows, Role::Query).unwrap();
        let c = EmbeddingBatch::from_rows(&cols, Role::Key).unwrap();
        let m = similarity_matrix(&r, &c).unwrap();
        prop_assert_eq!((m.rows(), m.cols()), (rows.len(), cols.len()));
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in cols.iter().enumerate() {
                let want = cosine_sim(&FeatureVector::new(a.clone()).unwrap(), &FeatureVector::new(b.clone()).unwrap()).unwrap();
                prop_assert!((m.get(i, j) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_vectors_and_bad_temperatures_rejected() {
    assert!(l2_normalize(&FeatureVector::new(vec![0.0, 0.0]).unwrap()).is_err());
    assert!(Temperature::new(0.0).is_err());
    assert!(Temperature::new(-0.1).is_err());
    assert!(Temperature::new(f64::NAN).is_err());
    assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    // overflow-prone magnitudes stay finite
    assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
}
