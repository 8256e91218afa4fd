mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use survitmle::cate::{build_long_increments, fit_cate, increments, predict_cate, CateEstimate, LearnerConfig};
use survitmle::data::{SurvivalDataset, SurvivalRecord, TimeGrid};
use survitmle::eval::{aggregate, rmse_by_time};
use survitmle::sieve::{build_basis, DegreeRule, SieveBasis};
use survitmle::simulation::TruthCurves;
use survitmle::targeting::{target, TargetingConfig};

fn grid_of(k: usize) -> TimeGrid {
    TimeGrid::new((1..=k).map(|j| j as f64).collect()).unwrap()
}

fn estimate(theta: Array2<f64>) -> CateEstimate {
    let k = theta.ncols();
    CateEstimate {
        query_ids: (0..theta.nrows()).map(|i| i.to_string()).collect(),
        grid: grid_of(k),
        theta,
        estimator: "x".into(),
        clamped: 0,
        config: String::new(),
    }
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..=1.0, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_outcomes_and_curves_stay_in_unit_interval(seed in any::<u64>()) {
        let (ds, bundle) = common::random_case(seed);
        let basis = build_basis(&ds, DegreeRule::default()).unwrap();
        let (_, pseudo) = target(&ds, &bundle, &basis, &TargetingConfig::default()).unwrap();
        prop_assert!(pseudo.y.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        let model = fit_cate(&build_long_increments(&pseudo, &ds).unwrap(), &LearnerConfig::default()).unwrap();
        let q = Array2::from_shape_fn((5, ds.p()), |(i, j)| (i as f64 - 2.0) * 10.0 + j as f64);
        let est = predict_cate(&model, q.view(), &pseudo.grid).unwrap();
        prop_assert!(est.theta.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn increments_sum_back_to_the_curve(y in matrix(6, 8)) {
        let dy = increments(y.view());
        let mut back = dy.clone();
        back.accumulate_axis_inplace(Axis(1), |prev, cur| *cur += *prev);
        for (a, b) in back.iter().zip(y.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(dy.column(0), y.column(0));
    }

    #[test]
    fn constant_shift_gives_rmse_equal_to_shift(y in matrix(6, 5), c in -0.5f64..0.5) {
        let truth = TruthCurves {
            grid: grid_of(y.ncols()),
            theta: y.clone(),
            mc_se: Array2::zeros(y.dim()),
            mc_reps: 1,
        };
        let r = rmse_by_time(&estimate(&y + c), &truth).unwrap();
        prop_assert!(r.iter().all(|v| (v - c.abs()).abs() < 1e-12));
        prop_assert!(rmse_by_time(&estimate(y), &truth).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aggregate_overall_is_grand_mean(reps in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..10)) {
        let a = aggregate(&reps).unwrap();
        let grand = reps.iter().flatten().sum::<f64>() / (4 * reps.len()) as f64;
        prop_assert!((a.overall - grand).abs() < 1e-12);
        let lo = reps.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = reps.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a.per_time.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn sieve_is_deterministic_and_bounded(x in matrix(12, 3), degree in 0usize..6) {
        let b1 = SieveBasis::from_rows(x.view(), degree).unwrap();
        let b2 = SieveBasis::from_rows(x.view(), degree).unwrap();
        let e1 = b1.evaluate(x.view()).unwrap();
        prop_assert_eq!(&e1, &b2.evaluate(x.view()).unwrap());
        prop_assert!(e1.column(0).iter().all(|v| *v == 1.0));
        prop_assert!(e1.iter().all(|v| v.abs() <= 1.0));
        prop_assert_eq!(e1.ncols(), b1.dim());
    }

    #[test]
    fn binary_heterogeneity_gives_at_most_two_curves(seed in any::<u64>()) {
        let (ds, bundle) = common::random_case(seed);
        // replace the first covariate by a binary flag and condition on it alone
        let records: Vec<SurvivalRecord> = ds
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut r = r.clone();
                r.z[0] = (i % 2) as f64;
                r
            })
            .collect();
        let ds = SurvivalDataset::new(records, ds.covariate_names().to_vec(), Some(vec![0])).unwrap();
        let basis = build_basis(&ds, DegreeRule::default()).unwrap();
        let (_, pseudo) = target(&ds, &bundle, &basis, &TargetingConfig::default()).unwrap();
        let model = fit_cate(&build_long_increments(&pseudo, &ds).unwrap(), &LearnerConfig::default()).unwrap();
        let q = ds.heterogeneity_covariates();
        let est = predict_cate(&model, q.view(), &pseudo.grid).unwrap();
        let mut distinct: Vec<Vec<u64>> = est.theta.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        distinct.sort();
        distinct.dedup();
        prop_assert!(distinct.len() <= 2);
    }
}
