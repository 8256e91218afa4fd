mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use survitmle::solver::{
    cross_validate_lambda, fit, fit_path, CvRule, DesignMatrix, Family, FitSpec, LambdaPath,
};

fn random_problem(seed: u64, n: usize, d: usize) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let beta: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { rng.gen_range(-2.0..2.0) } else { 0.0 }).collect();
    let y = (0..n)
        .map(|i| 0.5 + (0..d).map(|j| x[[i, j]] * beta[j]).sum::<f64>() + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let w = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
    (x, y, w)
}

#[test]
fn lasso_kkt_on_path() {
    let (x, y, _) = random_problem(11, 20, 5);
    let w = vec![1.0; 20];
    let mut spec = FitSpec::new(Family::Linear, 1.0);
    spec.standardize = false;
    spec.tol = 1e-12;
    let path = fit_path(&DesignMatrix::new(x.clone(), None).unwrap(), &y, &spec).unwrap();
    assert_eq!(path.len(), 50);
    assert!(path[0].betas.iter().all(|b| *b == 0.0));
    for c in &path {
        let res = common::kkt_residual(&x, &y, &w, c.intercept, c.betas.as_slice().unwrap(), c.lambda_used);
        assert!(res < 1e-6, "lambda {} kkt {res}", c.lambda_used);
    }
}

#[test]
fn ols_matches_normal_equations() {
    for seed in 0..10 {
        let (x, y, w) = random_problem(100 + seed, 60, 6);
        let mut spec = FitSpec::new(Family::Linear, 0.5).with_lambda(0.0);
        spec.weights = Some(w.clone());
        spec.tol = 1e-14;
        let c = fit(&DesignMatrix::new(x.clone(), None).unwrap(), &y, &spec).unwrap();
        let exact = common::normal_equations(&x, &y, &w);
        let mut got = vec![c.intercept];
        got.extend(c.betas.iter());
        for (g, e) in got.iter().zip(&exact) {
            assert!((g - e).abs() <= 1e-8 * e.abs().max(1.0), "{g} vs {e}");
        }
    }
}

#[test]
fn pure_noise_selects_largest_lambda_often() {
    let mut hits = 0;
    let mut hits_min = 0;
    let reps = 50;
    for seed in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = Array2::from_shape_fn((100, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dm = DesignMatrix::new(x, None).unwrap();
        let cvm = cross_validate_lambda(&dm, &y, &FitSpec::new(Family::Linear, 1.0), 5, seed, CvRule::Min).unwrap();
        if cvm.index == 0 {
            hits_min += 1;
        }
        let cv = cross_validate_lambda(
            &dm,
            &y,
            &FitSpec::new(Family::Linear, 1.0),
            5,
            seed,
            CvRule::OneStandardError,
        )
        .unwrap();
        if cv.index == 0 {
            hits += 1;
        }
    }
    println!("noise: min rule {hits_min}/{reps}, 1se rule {hits}/{reps}");
    assert!(hits * 10 >= reps * 8, "{hits}/{reps}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn sweeps_never_increase_objective(seed in 0u64..10_000, alpha in 0.0f64..=1.0, logistic in any::<bool>()) {
        let (x, y, w) = random_problem(seed, 40, 4);
        let (family, y) = if logistic {
            (Family::Logistic, y.iter().map(|v| f64::from(*v > 0.5)).collect::<Vec<_>>())
        } else {
            (Family::Linear, y)
        };
        let mut spec = FitSpec::new(family, alpha);
        spec.weights = Some(w);
        spec.trace = true;
        spec.lambda = LambdaPath::Auto { n_lambda: 10, min_ratio: 1e-3 };
        let path = fit_path(&DesignMatrix::new(x, None).unwrap(), &y, &spec).unwrap();
        for c in &path {
            for pair in c.trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12 * (1.0 + pair[0].abs()));
            }
        }
    }
}
