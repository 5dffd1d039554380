//! Randomized invariants. Dimensions and seeds come from proptest so failures
//! shrink to small shapes; matrix entries come from a seeded ChaCha stream.

use geoerm::harness::mean_sd;
use geoerm::manifold::{
    polar_retract, polar_retract_svd, project_tangent, random_stiefel, thin_svd, StiefelPoint, TangentVector,
};
use geoerm::objective::{ambient, penalty, PenaltyNorm};
use geoerm::solver::prox_l2;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// (p, r) with 1 ≤ r ≤ p ≤ 20.
fn shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=20).prop_flat_map(|p| (Just(p), 1..=p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_an_orthogonal_projector((p, r) in shape(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stiefel(p, r, &mut rng).unwrap();
        let g = gaussian(p, r, &mut rng);
        let k = gaussian(p, r, &mut rng);
        let pg = project_tangent(&a, &g).unwrap();
        let pk = project_tangent(&a, &k).unwrap();
        let ath = a.matrix().tr_mul(pg.matrix());
        prop_assert!((&ath + ath.transpose()).norm() <= 1e-10);
        prop_assert!((project_tangent(&a, pg.matrix()).unwrap().matrix() - pg.matrix()).norm() <= 1e-10);
        prop_assert!((pg.matrix().dot(&k) - g.dot(pk.matrix())).abs() <= 1e-10);
        // the residual is normal: A·S with S symmetric
        let s = a.matrix().tr_mul(&(&g - pg.matrix()));
        prop_assert!((&s - s.transpose()).norm() <= 1e-10);
    }

    #[test]
    fn retraction_lands_on_the_manifold((p, r) in shape(), seed in any::<u64>(), log_scale in -4.0f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stiefel(p, r, &mut rng).unwrap();
        let h = project_tangent(&a, &(gaussian(p, r, &mut rng) * 10f64.powf(log_scale))).unwrap();
        let gram = polar_retract(&a, &h).unwrap();
        let svd = polar_retract_svd(&a, &h).unwrap();
        prop_assert!(gram.orthonormality_residual() <= 1e-10);
        prop_assert!((gram.matrix() - svd.matrix()).norm() <= 1e-9);
        let still = polar_retract(&a, &TangentVector::zero(&a)).unwrap();
        prop_assert_eq!(still.matrix(), a.matrix());
    }

    #[test]
    fn retraction_is_first_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stiefel(7, 3, &mut rng).unwrap();
        let h = project_tangent(&a, &gaussian(7, 3, &mut rng)).unwrap();
        // R(A, tH) = A + tH + O(t²)
        let t = 1e-4;
        let moved = polar_retract(&a, &h.scale(t)).unwrap();
        let err = (moved.matrix() - a.matrix() - h.matrix() * t).norm();
        prop_assert!(err <= 10.0 * t * t * h.matrix().norm_squared().max(1.0));
    }

    #[test]
    fn svd_reconstructs(rows in 1usize..15, cols in 1usize..15, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(rows, cols, &mut rng);
        let svd = thin_svd(&m).unwrap();
        let sigma = DMatrix::from_diagonal(&svd.singular_values);
        prop_assert!((&svd.u * sigma * svd.v.transpose() - &m).norm() <= 1e-12 * m.norm().max(1.0));
        prop_assert!(svd.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!((svd.v.tr_mul(&svd.v) - DMatrix::identity(svd.v.ncols(), svd.v.ncols())).norm() <= 1e-12);
    }

    #[test]
    fn penalty_depends_only_on_the_subspaces((p, r) in shape(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stiefel(p, r, &mut rng).unwrap();
        let b = random_stiefel(p, r, &mut rng).unwrap();
        let q = random_stiefel(r, r, &mut rng).unwrap();
        let rotated = StiefelPoint::new(a.matrix() * q.matrix()).unwrap();
        for norm in [PenaltyNorm::Spectral, PenaltyNorm::Frobenius] {
            let base = ambient::penalty(a.matrix(), b.matrix(), 0.0, norm).unwrap().norm;
            let swapped = ambient::penalty(b.matrix(), a.matrix(), 0.0, norm).unwrap().norm;
            let rot = ambient::penalty(rotated.matrix(), b.matrix(), 0.0, norm).unwrap().norm;
            prop_assert!((base - swapped).abs() <= 1e-10, "{base} vs {swapped} ({norm:?})");
            prop_assert!((base - rot).abs() <= 1e-10);
            prop_assert!(ambient::penalty(a.matrix(), rotated.matrix(), 0.0, norm).unwrap().norm <= 1e-7);
            // dense reference for ‖AAᵀ − BBᵀ‖
            let d = a.matrix() * a.matrix().transpose() - b.matrix() * b.matrix().transpose();
            let dense = match norm {
                PenaltyNorm::Spectral => d.symmetric_eigenvalues().amax(),
                PenaltyNorm::Frobenius => d.norm(),
            };
            prop_assert!((base - dense).abs() <= 1e-9);
        }
        // difference of projectors has spectral norm ≤ 1; smoothing only lowers it
        let smoothed = penalty(&a, &b, 1e-3).unwrap();
        let raw = penalty(&a, &b, 0.0).unwrap();
        prop_assert!(raw <= 1.0 + 1e-12);
        prop_assert!(smoothed <= raw + 1e-15 && smoothed >= 0.0);
    }

    #[test]
    fn prox_is_block_soft_thresholding(
        dim in 1usize..8,
        seed in any::<u64>(),
        tau in 0.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pv = prox_l2(&v, &c, tau);
        let pw = prox_l2(&w, &c, tau);
        // non-expansive
        prop_assert!((&pv - &pw).norm() <= (&v - &w).norm() + 1e-12);
        // moves along v − c, shrinking its length by τ (floored at 0)
        let d = &v - &c;
        prop_assert!(((&pv - &c).norm() - (d.norm() - tau).max(0.0)).abs() <= 1e-12);
        prop_assert!(((&pv - &c).dot(&d) - (&pv - &c).norm() * d.norm()).abs() <= 1e-10);
        prop_assert!((prox_l2(&v, &c, 0.0) - &v).norm() <= 1e-12);
    }

    #[test]
    fn welford_matches_two_pass(xs in prop::collection::vec(-1e6f64..1e6, 2..200)) {
        let (mean, sd) = mean_sd(&xs);
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        prop_assert!((mean - m).abs() <= 1e-9 * m.abs().max(1.0));
        prop_assert!((sd - var.sqrt()).abs() <= 1e-7 * var.sqrt().max(1.0));
    }
}
