use fbmheat::density::{self, QhMethod, QhOptions};
use fbmheat::fbm::{self, Hurst, SamplerTag, TimeGrid};
use fbmheat::fields::{ConstantFrame, StructureConstants};
use fbmheat::geometry;
use fbmheat::io;
use fbmheat::lie::{self, Word};
use fbmheat::linalg;
use proptest::prelude::*;

fn hurst() -> impl Strategy<Value = f64> {
    0.55f64..0.95
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn increment_gram_is_positive_definite(h in hurst(), n in 2usize..24, horizon in 0.1f64..3.0) {
        let g = TimeGrid::new(horizon, n).unwrap();
        let gram = fbm::increment_gram(&g, Hurst::new(h).unwrap());
        prop_assert!(linalg::is_spd(&gram, n));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(gram[i * n + j], gram[j * n + i]);
            }
        }
    }

    #[test]
    fn covariance_is_symmetric_and_bounded(h in hurst(), t in 0.0f64..2.0, s in 0.0f64..2.0) {
        let hh = Hurst::new(h).unwrap();
        let c = fbm::covariance(t, s, hh).unwrap();
        prop_assert_eq!(c, fbm::covariance(s, t, hh).unwrap());
        let vt = fbm::covariance(t, t, hh).unwrap();
        let vs = fbm::covariance(s, s, hh).unwrap();
        prop_assert!(c * c <= vt * vs * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn shuffle_identity_on_piecewise_linear_paths(vals in prop::collection::vec(-2.0f64..2.0, 2 * 9), i in 0usize..2, j in 0usize..2) {
        // S(i) S(j) = S(ij) + S(ji) for any path
        let mut path = vals;
        path[0] = 0.0;
        path[1] = 0.0;
        let s = |w: Vec<usize>| lie::signature_word(&path, 2, &Word::new(w).unwrap(), 8);
        let lhs = s(vec![i]) * s(vec![j]);
        let rhs = s(vec![i, j]) + s(vec![j, i]);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn permuted_word_round_trip(letters in prop::collection::vec(0usize..3, 1..=4), seed in 0usize..24) {
        let w = Word::new(letters).unwrap();
        let perms = lie::permutations(w.len());
        let sigma = &perms[seed % perms.len()];
        let mut inv = vec![0; sigma.len()];
        for (a, &b) in sigma.iter().enumerate() {
            inv[b] = a;
        }
        prop_assert_eq!(w.permuted(sigma).permuted(&inv), w);
    }

    #[test]
    fn lambda_weights_sum_to_zero_above_level_one(k in 2usize..=4) {
        let total: f64 = lie::permutations(k).iter().map(|s| lie::lambda_weight(s)).sum();
        prop_assert!(total.abs() < 1e-12);
    }

    #[test]
    fn flat_distance_is_a_metric(a in prop::array::uniform2(-1.0f64..1.0), b in prop::array::uniform2(-1.0f64..1.0), c in prop::array::uniform2(-1.0f64..1.0)) {
        let f = ConstantFrame::new(2, vec![1.2, 0.4, -0.3, 0.9]).unwrap();
        let d = |x: &[f64], y: &[f64]| geometry::distance(&f, x, y).unwrap().distance;
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-9);
        prop_assert!(d(&a, &b) <= d(&a, &c) + d(&c, &b) + 1e-9);
        prop_assert!(d(&a, &a) < 1e-12);
    }

    #[test]
    fn fbm1_round_trip(dim in 1usize..4, n in 1usize..12, paths in 1usize..6, seed in any::<u64>()) {
        let p = fbm::sample_fbm_cholesky(TimeGrid::new(1.0, n).unwrap(), dim, paths, Hurst::new(0.7).unwrap(), seed).unwrap();
        let mut buf = Vec::new();
        io::write_fbm1(&p, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 8 + 8 + 8 + 1 + 8 * paths * (n + 1) * dim);
        prop_assert_eq!(io::read_fbm1(buf.as_slice()).unwrap(), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn quadrature_qh_is_quadratic(c in 0.2f64..3.0) {
        let eps = StructureConstants::levi_civita();
        let o = QhOptions { n_steps: 32, ..Default::default() };
        let h = Hurst::new(0.7).unwrap();
        let q1 = density::qh_estimate(&eps, h, 200, 9, QhMethod::Quadrature, &o).unwrap().value;
        let qc = density::qh_estimate(&eps.scaled(c), h, 200, 9, QhMethod::Quadrature, &o).unwrap().value;
        prop_assert!((qc - c * c * q1).abs() < 1e-10 * qc.abs().max(1.0));
    }

    #[test]
    fn same_seed_same_paths(seed in any::<u64>(), chunk in 1usize..64) {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let h = Hurst::new(0.7).unwrap();
        let a = fbm::FbmSampler::new(g, 2, h, SamplerTag::Cholesky, seed).unwrap().with_chunk_size(chunk).sample(70);
        let b = fbm::FbmSampler::new(g, 2, h, SamplerTag::Cholesky, seed).unwrap().with_chunk_size(chunk).sample(70);
        prop_assert_eq!(a, b);
    }
}
