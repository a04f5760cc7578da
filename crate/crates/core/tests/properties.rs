use kftune_core::campaign::CampaignConfig;
use kftune_core::costs::compute_costs;
use kftune_core::estimators::{apply_mask, TrimMask};
use kftune_core::filter::{dynamical_pass, ekf_forward, rts_smooth};
use kftune_core::linalg::{diag_matrix, min_eigenvalue};
use kftune_core::model::{AugmentedState, SpringMassDamper};
use kftune_core::rrr::{run_rrr, StartPoint};
use kftune_core::sim::{load_dataset, save_dataset, simulate, NoiseSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn psd_and_symmetric(p: &DMatrix<f64>) -> bool {
    let scale = p.amax().max(1e-300);
    (p - p.transpose()).amax() <= 1e-12 * scale && min_eigenvalue(p) >= -1e-12 * p.trace().abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn passes_keep_covariances_symmetric_psd(
        k in 2.0f64..6.0,
        c in 0.1f64..0.8,
        cubic in 0.0f64..1.0,
        r_scale in 0.2f64..5.0,
        q_on in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let model = SpringMassDamper::default();
        let r = [0.001 * r_scale, 0.004 * r_scale];
        let q = if q_on { [0.001, 0.002] } else { [0.0, 0.0] };
        let truth = AugmentedState::new(vec![1.0, 0.0], vec![k, c, cubic]);
        let ds = simulate(&model, &truth, &NoiseSpec::diagonal(&r, &q), 60, seed).unwrap();
        let x0 = truth.to_vector();
        let p0 = diag_matrix(&[0.0, 0.0, 0.1, 0.1, 0.1]);
        let mut qa = DMatrix::zeros(5, 5);
        qa[(0, 0)] = q[0].max(1e-10);
        qa[(1, 1)] = q[1].max(1e-10);
        let pass = ekf_forward(&model, &x0, &p0, &qa, &diag_matrix(&r), &ds.z).unwrap();
        let sm = rts_smooth(&model, &pass, &ds.z).unwrap();
        for s in &pass.steps {
            prop_assert!(psd_and_symmetric(&s.p_prior));
            prop_assert!(psd_and_symmetric(&s.p_post));
        }
        for p in &sm.p_smooth {
            prop_assert!(psd_and_symmetric(p));
        }
        let n = pass.len();
        prop_assert_eq!(&sm.x_smooth[n], pass.x_post(n));
        prop_assert_eq!(&sm.p_smooth[n], pass.p_post(n));

        let theta: DVector<f64> = pass.final_state().rows(2, 3).into_owned();
        let dp = dynamical_pass(&model, &sm, &theta).unwrap();
        let a = compute_costs(&model, &ds.z, &pass, &sm, &dp, None).unwrap();
        let b = compute_costs(&model, &ds.z, &pass, &sm, &dp, None).unwrap();
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        prop_assert!(a.j1 >= 0.0 && a.j3 >= 0.0 && a.j4 >= 0.0);
    }

    #[test]
    fn masks_are_idempotent_projections(entries in proptest::collection::vec(-5.0f64..5.0, 25)) {
        let a = DMatrix::from_vec(5, 5, entries);
        let a = &a + a.transpose();
        for mask in [TrimMask::ReferenceParamOnly, TrimMask::ReferenceStateOnly, TrimMask::Diagonal, TrimMask::Full, TrimMask::DiagOnly] {
            let once = apply_mask(&a, mask, 2);
            prop_assert_eq!(&apply_mask(&once, mask, 2), &once);
            for (x, y) in once.iter().zip(a.iter()) {
                prop_assert!(*x == 0.0 || x == y);
            }
        }
    }

    #[test]
    fn datasets_round_trip_bitwise(seed in 0u64..10_000) {
        let model = SpringMassDamper::default();
        let truth = AugmentedState::new(vec![1.0, 0.0], vec![4.0, 0.4, 0.6]);
        let ds = simulate(&model, &truth, &NoiseSpec::diagonal(&[0.001, 0.004], &[0.001, 0.002]), 20, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_dataset(&ds, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}

#[test]
fn tuning_is_repeatable_and_history_consistent() {
    let model = SpringMassDamper::default();
    let cfg = CampaignConfig::smd(false);
    let (ds, theta) = cfg.simulation(&model, 7).unwrap();
    let start = StartPoint {
        x0: cfg.truth.x0.clone(),
        theta,
    };
    let a = run_rrr(&model, &ds, &cfg.tuning, &start).unwrap();
    let b = run_rrr(&model, &ds, &cfg.tuning, &start).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.history.len(), a.iterations_used);
    assert!(a.converged);
    let last = a.history.last().unwrap();
    assert!(last.max_rel_change.unwrap() <= cfg.tuning.convergence_tol);
    assert_eq!(last.theta_final, a.theta_hat);
    for (t, truth) in a.theta_hat.iter().zip(&cfg.truth.theta) {
        assert!(((t - truth) / truth).abs() < 0.1, "{t} vs {truth}");
    }
}
