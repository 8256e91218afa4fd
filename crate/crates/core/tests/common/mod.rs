#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survitmle::data::{SurvivalDataset, SurvivalRecord, TimeGrid};
use survitmle::nuisance::{survival_from_hazard, NuisanceBundle, NuisanceConfig, NuisanceDiagnostics};
use survitmle::targeting::{compute_weights, TargetingData};

/// Product-limit survival on a grid computed straight from the records:
/// the risk set of `(t_{k-1}, t_k]` is everyone entered by `t_{k-1}` and
/// still under observation after it.
pub fn product_limit(records: &[SurvivalRecord], grid: &TimeGrid, arm: u8) -> Vec<f64> {
    let mut s = 1.0;
    let mut out = Vec::new();
    for k in 0..grid.len() {
        let lo = if k == 0 { 0.0 } else { grid.points()[k - 1] };
        let hi = grid.points()[k];
        let risk = records
            .iter()
            .filter(|r| r.a == arm && r.entry <= lo && r.time_obs > lo)
            .count();
        let died = records
            .iter()
            .filter(|r| r.a == arm && r.entry <= lo && r.time_obs > lo && r.time_obs <= hi && r.event)
            .count();
        if risk > 0 {
            s *= 1.0 - died as f64 / risk as f64;
        }
        out.push(s);
    }
    out
}

fn pick(rng: &mut ChaCha8Rng, lo: f64, hi: f64, edge: f64) -> f64 {
    // a third of draws sit on or next to a bound
    match rng.gen_range(0..6) {
        0 => lo,
        1 => hi,
        2 => lo + edge * rng.gen::<f64>(),
        3 => hi - edge * rng.gen::<f64>(),
        _ => rng.gen_range(lo..=hi),
    }
}

/// A small dataset with an arbitrary, possibly extreme, but contract-valid
/// nuisance bundle on the evaluation grid itself.
pub fn random_case(seed: u64) -> (SurvivalDataset, NuisanceBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(6..=24);
    let k = rng.gen_range(1..=4);
    let p = rng.gen_range(1..=2);
    let mut pts = Vec::with_capacity(k);
    let mut t = 0.0;
    for _ in 0..k {
        t += rng.gen_range(0.2..1.0);
        pts.push(t);
    }
    let grid = TimeGrid::new(pts).unwrap();
    let tau = grid.tau();
    let truncated = rng.gen_bool(0.5);
    let records: Vec<SurvivalRecord> = (0..n)
        .map(|i| {
            let entry = if truncated && rng.gen_bool(0.6) { rng.gen_range(0.0..tau) } else { 0.0 };
            SurvivalRecord {
                id: format!("r{i}"),
                z: (0..p).map(|_| rng.gen::<f64>()).collect(),
                a: if i < 2 { i as u8 } else { u8::from(rng.gen_bool(0.5)) },
                time_obs: entry + rng.gen_range(0.0..1.5 * tau),
                event: rng.gen_bool(0.6),
                entry,
            }
        })
        .collect();
    let names = (0..p).map(|j| format!("z{j}")).collect();
    let ds = SurvivalDataset::new(records, names, None).unwrap();
    let cfg = NuisanceConfig::default();
    let (hm, gm, pm) = (cfg.h_min, cfg.g_min, cfg.pi_min);
    let hazard = Array3::from_shape_fn((n, k, 2), |_| pick(&mut rng, hm, 1.0 - hm, 1e-3));
    let censoring = Array2::from_shape_fn((n, k), |_| pick(&mut rng, gm, 1.0, 1e-3));
    let denominator = Array2::from_shape_fn((n, k), |_| pick(&mut rng, 1e-12, 1.0, 1e-6));
    let entry_hazard = Array2::from_shape_fn((n, k), |_| rng.gen_range(hm..=1.0));
    let propensity = (0..n).map(|_| pick(&mut rng, pm, 1.0 - pm, 1e-3)).collect();
    let bundle = NuisanceBundle {
        ids: ds.records().iter().map(|r| r.id.clone()).collect(),
        grid: grid.clone(),
        eval_grid: grid,
        eval_index: (0..k).collect(),
        survival: survival_from_hazard(&hazard),
        hazard,
        censoring,
        entry_hazard,
        entry_cdf: Array2::ones((n, k)),
        denominator,
        iptw_entry: vec![1.0; n],
        propensity,
        folds: vec![0; n],
        config: cfg,
        diagnostics: NuisanceDiagnostics::default(),
    };
    (ds, bundle)
}

/// Subject mean of the uncentered influence function at horizon `j`, and
/// its standard error: plug-in contrast minus the weighted hazard residuals.
pub fn eif_mean_se(bundle: &NuisanceBundle, data: &TargetingData, j: usize, cap: f64) -> (f64, f64) {
    let n = bundle.n();
    let t = bundle.eval_index[j];
    let mut eif: Vec<f64> = (0..n)
        .map(|i| bundle.survival[[i, t, 1]] - bundle.survival[[i, t, 0]])
        .collect();
    for k in 0..=t {
        let w = compute_weights(bundle, data, j, k, cap).unwrap();
        for i in 0..n {
            if data.at_risk[[i, k]] {
                let a = data.arms[i] as usize;
                let s = if a == 1 { 1.0 } else { -1.0 };
                let r = f64::from(u8::from(data.events[[i, k]])) - bundle.hazard[[i, k, a]];
                eif[i] -= s * w.values[i] * r;
            }
        }
    }
    let m = eif.iter().sum::<f64>() / n as f64;
    let var = eif.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n as f64 - 1.0);
    (m, (var / n as f64).sqrt())
}

/// Largest violation of the lasso subgradient conditions on the original
/// scale, objective `(2W)⁻¹ Σ w r² + λ‖β‖₁`.
pub fn kkt_residual(x: &Array2<f64>, y: &[f64], w: &[f64], b0: f64, beta: &[f64], lambda: f64) -> f64 {
    let total: f64 = w.iter().sum();
    let n = y.len();
    let r: Vec<f64> = (0..n)
        .map(|i| y[i] - b0 - (0..beta.len()).map(|j| x[[i, j]] * beta[j]).sum::<f64>())
        .collect();
    let mut worst = (r.iter().zip(w).map(|(r, w)| r * w).sum::<f64>() / total).abs();
    for j in 0..beta.len() {
        let g = (0..n).map(|i| w[i] * x[[i, j]] * r[i]).sum::<f64>() / total;
        let v = if beta[j] != 0.0 {
            (g - lambda * beta[j].signum()).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Weighted least squares with intercept by Gauss-Jordan elimination.
pub fn normal_equations(x: &Array2<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
    let (n, d) = x.dim();
    let p = d + 1;
    let row = |i: usize, j: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..n {
        for j in 0..p {
            for k in 0..p {
                a[j][k] += w[i] * row(i, j) * row(i, k);
            }
            a[j][p] += w[i] * row(i, j) * y[i];
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&r1, &r2| a[r1][c].abs().total_cmp(&a[r2][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..p).map(|j| a[j][p] / a[j][j]).collect()
}
