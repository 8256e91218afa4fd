//! Second stage: pooled regression of pseudo-outcome increments on
//! `(X, time)`, plus the T-learner and per-time baselines.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SurvivalDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::nuisance::{cumulative_survival, fit_event_model, refine_grid, NuisanceBundle, NuisanceConfig};
use crate::rng::derive_seed;
use crate::solver::{gaussian_cv, gaussian_path, CvRule, GaussianMoments, LambdaPath, PenaltyOptions};
use crate::targeting::PseudoOutcomeMatrix;

/// Long table: one row per subject per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct LongIncrementTable {
    pub ids: Vec<String>,
    pub grid: TimeGrid,
    /// Heterogeneity covariates, `n x p`.
    pub x: Array2<f64>,
    /// Increments `Y(k) - Y(k-1)`, `n x |grid|`.
    pub dy: Array2<f64>,
}

impl LongIncrementTable {
    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.dy.len()
    }

    /// Running sums of the increments, which give back the pseudo-outcomes.
    pub fn cumulative(&self) -> Array2<f64> {
        let mut y = self.dy.clone();
        for mut row in y.rows_mut() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        y
    }
}

/// Differences along time with `Y(0) = 0`.
pub fn increments(y: ArrayView2<f64>) -> Array2<f64> {
    let mut dy = y.to_owned();
    for j in (1..y.ncols()).rev() {
        for i in 0..y.nrows() {
            dy[[i, j]] = y[[i, j]] - y[[i, j - 1]];
        }
    }
    dy
}

/// Rows of the dataset's heterogeneity covariates in the order of `ids`.
fn aligned_rows(ids: &[String], dataset: &SurvivalDataset) -> Result<Array2<f64>> {
    let pos: HashMap<&str, usize> = dataset.records().iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut bad: Vec<String> = ids.iter().filter(|id| !pos.contains_key(id.as_str())).cloned().collect();
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    bad.extend(dataset.records().iter().filter(|r| !wanted.contains(r.id.as_str())).map(|r| r.id.clone()));
    if !bad.is_empty() {
        bad.sort();
        bad.dedup();
        return Err(Error::Misaligned(bad));
    }
    let hx = dataset.heterogeneity_covariates();
    let mut x = Array2::zeros((ids.len(), hx.ncols()));
    for (r, id) in ids.iter().enumerate() {
        x.row_mut(r).assign(&hx.row(pos[id.as_str()]));
    }
    Ok(x)
}

pub fn build_long_increments(pseudo: &PseudoOutcomeMatrix, dataset: &SurvivalDataset) -> Result<LongIncrementTable> {
    let x = aligned_rows(&pseudo.ids, dataset)?;
    Ok(LongIncrementTable {
        ids: pseudo.ids.clone(),
        grid: pseudo.grid.clone(),
        x,
        dy: increments(pseudo.y.view()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Cosine-in-time terms `cos(jπ t/τ)`, `j = 1..=cos_terms`.
    pub cos_terms: usize,
    /// 0 is ridge.
    pub alpha: f64,
    pub cv_folds: usize,
    pub cv_rule: CvRule,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            cos_terms: 4,
            alpha: 0.0,
            cv_folds: 5,
            cv_rule: CvRule::Min,
            n_lambda: 50,
            lambda_min_ratio: 1e-6,
            seed: 0,
        }
    }
}

/// Column layout of the pooled design. With a single grid point only the
/// covariates enter, since every time column would be constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub p: usize,
    pub tau: f64,
    pub cos_terms: usize,
    pub time_varying: bool,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        if self.time_varying {
            // X, t, X t, cos_j, X cos_j
            self.p + 1 + self.p + self.cos_terms * (1 + self.p)
        } else {
            self.p
        }
    }

    fn fill(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let p = self.p;
        out[..p].copy_from_slice(x);
        if !self.time_varying {
            return;
        }
        out[p] = t;
        for d in 0..p {
            out[p + 1 + d] = x[d] * t;
        }
        let mut c = 2 * p + 1;
        for j in 1..=self.cos_terms {
            let b = (j as f64 * PI * t / self.tau).cos();
            out[c] = b;
            for d in 0..p {
                out[c + 1 + d] = x[d] * b;
            }
            c += 1 + p;
        }
    }

    /// Design rows for every `(subject, grid point)` pair, subject-major.
    pub fn design(&self, x: ArrayView2<f64>, grid: &TimeGrid) -> Array2<f64> {
        let k = grid.len();
        let mut out = Array2::zeros((x.nrows() * k, self.dim()));
        let mut buf = vec![0.0; self.dim()];
        for i in 0..x.nrows() {
            let xi = x.row(i).to_vec();
            for (j, &t) in grid.points().iter().enumerate() {
                self.fill(&xi, t, &mut buf);
                out.row_mut(i * k + j).assign(&Array1::from(buf.clone()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub features: FeatureMap,
    pub intercept: f64,
    pub betas: Vec<f64>,
    pub lambda: f64,
    pub grid: TimeGrid,
    pub heterogeneity_index: Vec<usize>,
    pub config: LearnerConfig,
}

impl CateModel {
    /// Predicted increments `Δθ̂(k|x)` for each query row, before summation.
    pub fn increments(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.features.p {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} heterogeneity covariates, got {}",
                self.features.p,
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite covariate in query rows".into()));
        }
        let k = self.grid.len();
        let beta = Array1::from(self.betas.clone());
        let eta = self.features.design(x, &self.grid).dot(&beta) + self.intercept;
        Ok(Array2::from_shape_vec((x.nrows(), k), eta.to_vec()).expect("design rows are subject-major"))
    }
}

fn zero_variance(v: &[f64]) -> bool {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().all(|y| (y - m).abs() <= 1e-14 * m.abs().max(1.0))
}

/// Penalized linear fit on a subject-major design, lambda chosen by
/// cross-validation with folds grouped by subject.
fn fit_grouped(x: &Array2<f64>, y: &[f64], rows_per: usize, cfg: &LearnerConfig) -> Result<(f64, Vec<f64>, f64)> {
    let d = x.ncols();
    let opts = PenaltyOptions {
        alpha: cfg.alpha,
        penalty_factor: vec![1.0; d],
        intercept: true,
        standardize: true,
        max_iter: 100_000,
        tol: 1e-10,
        trace: false,
    };
    let n_subj = y.len() / rows_per;
    let v = vec![1.0; y.len()];
    let path = LambdaPath::Auto {
        n_lambda: cfg.n_lambda,
        min_ratio: cfg.lambda_min_ratio,
    };
    let total = GaussianMoments::from_data(x.view(), y, &v);
    let lambda = if n_subj >= cfg.cv_folds.max(2) && cfg.cv_folds >= 2 {
        let labels = crate::solver::random_folds(n_subj, cfg.cv_folds, derive_seed(cfg.seed, &[0xCA7E]));
        let folds: Vec<GaussianMoments> = (0..cfg.cv_folds)
            .map(|f| {
                let rows: Vec<usize> = (0..y.len()).filter(|r| labels[r / rows_per] == f).collect();
                let xs = x.select(ndarray::Axis(0), &rows);
                let ys: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
                GaussianMoments::from_data(xs.view(), &ys, &vec![1.0; rows.len()])
            })
            .collect();
        gaussian_cv(&folds, &opts, &path, cfg.cv_rule, None)?.lambda
    } else {
        log::warn!("too few subjects for cross-validation; using the smallest penalty on the path");
        *crate::solver::gaussian_lambda_path(&total, &opts, &path)?
            .last()
            .unwrap_or(&0.0)
    };
    let fit = gaussian_path(&total, &opts, &[lambda])?.pop().expect("one path point");
    Ok((fit.intercept, fit.betas.to_vec(), lambda))
}

pub fn fit_cate(long: &LongIncrementTable, cfg: &LearnerConfig) -> Result<CateModel> {
    let k = long.grid.len();
    if long.n_subjects() == 0 || k == 0 {
        return Err(Error::EmptyDataset);
    }
    if long.x.nrows() != long.n_subjects() || long.dy.dim() != (long.n_subjects(), k) {
        return Err(Error::DimensionMismatch("long table parts disagree in shape".into()));
    }
    if long.x.iter().chain(long.dy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in long table".into()));
    }
    let features = FeatureMap {
        p: long.x.ncols(),
        tau: long.grid.tau(),
        cos_terms: cfg.cos_terms,
        time_varying: k > 1,
    };
    let y: Vec<f64> = long.dy.iter().copied().collect();
    let (intercept, betas, lambda) = if zero_variance(&y) {
        (y[0], vec![0.0; features.dim()], f64::INFINITY)
    } else {
        fit_grouped(&features.design(long.x.view(), &long.grid), &y, k, cfg)?
    };
    Ok(CateModel {
        features,
        intercept,
        betas,
        lambda,
        grid: long.grid.clone(),
        heterogeneity_index: Vec::new(),
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateEstimate {
    pub query_ids: Vec<String>,
    pub grid: TimeGrid,
    /// `m x |grid|`.
    pub theta: Array2<f64>,
    pub estimator: String,
    /// Entries moved by the final clamp to `[-1, 1]`.
    pub clamped: usize,
    pub config: String,
}

fn default_ids(m: usize) -> Vec<String> {
    (0..m).map(|i| i.to_string()).collect()
}

fn clamp_unit(theta: &mut Array2<f64>) -> usize {
    let mut n = 0;
    for v in theta.iter_mut() {
        if *v < -1.0 || *v > 1.0 {
            n += 1;
            *v = v.clamp(-1.0, 1.0);
        }
    }
    n
}

pub fn predict_cate(model: &CateModel, x: ArrayView2<f64>, grid: &TimeGrid) -> Result<CateEstimate> {
    if grid != &model.grid {
        return Err(Error::GridMismatch("prediction grid differs from the fitted grid".into()));
    }
    let mut theta = model.increments(x)?;
    for mut row in theta.rows_mut() {
        let mut acc = 0.0;
        for v in row.iter_mut() {
            acc += *v;
            *v = acc;
        }
    }
    let clamped = clamp_unit(&mut theta);
    if clamped > 0 {
        log::info!("{clamped} predicted contrasts clamped to [-1, 1]");
    }
    Ok(CateEstimate {
        query_ids: default_ids(x.nrows()),
        grid: model.grid.clone(),
        theta,
        estimator: "surv_itmle".into(),
        clamped,
        config: serde_json::to_string(&model.config)?,
    })
}

/// In-sample T-learner from the untargeted cross-fitted surfaces.
pub fn t_learner(bundle: &NuisanceBundle) -> CateEstimate {
    let s = bundle.eval_survival();
    let theta = Array2::from_shape_fn((bundle.n(), bundle.eval_index.len()), |(i, j)| s[[i, j, 1]] - s[[i, j, 0]]);
    CateEstimate {
        query_ids: bundle.ids.clone(),
        grid: bundle.eval_grid.clone(),
        theta,
        estimator: "t_learner".into(),
        clamped: 0,
        config: serde_json::to_string(&bundle.config).unwrap_or_default(),
    }
}

/// Out-of-sample T-learner: the event model refit on the whole training
/// set, evaluated on new covariate rows (all covariates, not only the
/// heterogeneity subset).
pub fn t_learner_predict(
    dataset: &SurvivalDataset,
    eval_grid: &TimeGrid,
    cfg: &NuisanceConfig,
    z: ArrayView2<f64>,
) -> Result<CateEstimate> {
    if z.ncols() != dataset.p() {
        return Err(Error::DimensionMismatch(format!(
            "query rows have {} covariates, training data {}",
            z.ncols(),
            dataset.p()
        )));
    }
    let (grid, eval_index) = refine_grid(eval_grid, cfg.refine, cfg.lead_in)?;
    let model = fit_event_model(dataset, &grid, cfg)?;
    let clip = |h: f64| h.clamp(cfg.h_min, 1.0 - cfg.h_min);
    let rows: Vec<Vec<f64>> = (0..z.nrows())
        .into_par_iter()
        .map(|i| {
            let s1 = cumulative_survival(&model.hazards(z.row(i), 1).into_iter().map(clip).collect::<Vec<_>>());
            let s0 = cumulative_survival(&model.hazards(z.row(i), 0).into_iter().map(clip).collect::<Vec<_>>());
            eval_index.iter().map(|&k| s1[k] - s0[k]).collect()
        })
        .collect();
    let theta = Array2::from_shape_fn((z.nrows(), eval_grid.len()), |(i, j)| rows[i][j]);
    Ok(CateEstimate {
        query_ids: default_ids(z.nrows()),
        grid: eval_grid.clone(),
        theta,
        estimator: "t_learner".into(),
        clamped: 0,
        config: serde_json::to_string(cfg)?,
    })
}

/// One independent regression of `Y(t)` on `X` per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveModel {
    pub grid: TimeGrid,
    pub per_time: Vec<CateModel>,
}

pub fn fit_naive(pseudo: &PseudoOutcomeMatrix, dataset: &SurvivalDataset, cfg: &LearnerConfig) -> Result<NaiveModel> {
    let x = aligned_rows(&pseudo.ids, dataset)?;
    let per_time = (0..pseudo.grid.len())
        .into_par_iter()
        .map(|j| {
            let t = pseudo.grid.points()[j];
            let long = LongIncrementTable {
                ids: pseudo.ids.clone(),
                grid: TimeGrid::new(vec![t])?,
                x: x.clone(),
                dy: pseudo.y.column(j).to_owned().insert_axis(ndarray::Axis(1)),
            };
            fit_cate(&long, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NaiveModel {
        grid: pseudo.grid.clone(),
        per_time,
    })
}

impl NaiveModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<CateEstimate> {
        let mut theta = Array2::zeros((x.nrows(), self.grid.len()));
        for (j, m) in self.per_time.iter().enumerate() {
            theta.column_mut(j).assign(&m.increments(x)?.column(0));
        }
        let clamped = clamp_unit(&mut theta);
        Ok(CateEstimate {
            query_ids: default_ids(x.nrows()),
            grid: self.grid.clone(),
            theta,
            estimator: "naive".into(),
            clamped,
            config: self.per_time.first().map(|m| serde_json::to_string(&m.config)).transpose()?.unwrap_or_default(),
        })
    }
}

/// Per-time regressions on the pseudo-outcomes, evaluated at `x`.
pub fn naive_per_time(
    pseudo: &PseudoOutcomeMatrix,
    dataset: &SurvivalDataset,
    cfg: &LearnerConfig,
    x: ArrayView2<f64>,
) -> Result<CateEstimate> {
    fit_naive(pseudo, dataset, cfg)?.predict(x)
}

/// Pooled fit and prediction in one call.
pub fn surv_itmle_curves(
    pseudo: &PseudoOutcomeMatrix,
    dataset: &SurvivalDataset,
    cfg: &LearnerConfig,
    x: ArrayView2<f64>,
) -> Result<CateEstimate> {
    let mut model = fit_cate(&build_long_increments(pseudo, dataset)?, cfg)?;
    model.heterogeneity_index = dataset.heterogeneity_index().to_vec();
    predict_cate(&model, x, &pseudo.grid)
}

/// `Σ_k |θ(t_k) - θ(t_{k-1})|` per row, over the grid points only.
pub fn total_variation(theta: ArrayView2<f64>) -> Vec<f64> {
    theta
        .rows()
        .into_iter()
        .map(|r| r.windows(2).into_iter().map(|w| (w[1] - w[0]).abs()).sum())
        .collect()
}

pub fn mean_total_variation(est: &CateEstimate) -> f64 {
    let tv = total_variation(est.theta.view());
    if tv.is_empty() {
        0.0
    } else {
        tv.iter().sum::<f64>() / tv.len() as f64
    }
}

impl CateEstimate {
    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.theta.nrows() {
            return Err(Error::DimensionMismatch(format!("{} ids for {} curves", ids.len(), self.theta.nrows())));
        }
        self.query_ids = ids;
        Ok(self)
    }

    /// Long rows `query_id, t, theta_hat, estimator`.
    pub fn write_rows<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (i, id) in self.query_ids.iter().enumerate() {
            for (j, t) in self.grid.points().iter().enumerate() {
                w.write_record([id.clone(), t.to_string(), self.theta[[i, j]].to_string(), self.estimator.clone()])?;
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_curves(path, std::slice::from_ref(self))
    }
}

pub fn write_curves(path: &Path, estimates: &[CateEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_id", "t", "theta_hat", "estimator"])?;
    for e in estimates {
        e.write_rows(&mut w)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid(pts: &[f64]) -> TimeGrid {
        TimeGrid::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn differencing_examples() {
        let dy = increments(array![[0.2, 0.5, 0.4], [0.3, 0.3, 0.3]].view());
        let want = array![[0.2, 0.3, -0.1], [0.3, 0.0, 0.0]];
        for (a, b) in dy.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_time_is_reproduced() {
        let g = grid(&[0.5, 1.0, 1.5, 2.0]);
        let n = 60;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * (j + 3)) % 17) as f64 / 17.0);
        let dy = Array2::from_shape_fn((n, 4), |(_, k)| 0.01 + 0.02 * g.points()[k]);
        let long = LongIncrementTable {
            ids: default_ids(n),
            grid: g.clone(),
            x: x.clone(),
            dy: dy.clone(),
        };
        let m = fit_cate(&long, &LearnerConfig::default()).unwrap();
        let inc = m.increments(x.view()).unwrap();
        for (a, b) in inc.iter().zip(dy.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_model_and_constant_target() {
        let g = grid(&[1.0, 2.0]);
        let long = LongIncrementTable {
            ids: default_ids(3),
            grid: g.clone(),
            x: array![[0.1], [0.5], [0.9]],
            dy: Array2::zeros((3, 2)),
        };
        let m = fit_cate(&long, &LearnerConfig::default()).unwrap();
        let est = predict_cate(&m, array![[0.3], [0.3]].view(), &g).unwrap();
        assert!(est.theta.iter().all(|v| *v == 0.0));
        assert!(predict_cate(&m, array![[0.3]].view(), &grid(&[1.0, 3.0])).is_err());
        assert!(m.increments(array![[f64::NAN]].view()).is_err());
    }
}
