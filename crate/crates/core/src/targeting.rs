//! Iterative fluctuation of the cross-fitted hazards along the sieve and the
//! resulting plug-in pseudo-outcomes.
//!
//! Every horizon `t` owns a private copy of the working hazards. For each
//! interval `k ≤ t` the fluctuation regresses `N(k)` on `(2A-1)·φ(X)` among
//! the at-risk subjects with the current hazard as offset, then moves the two
//! arms in opposite directions. Weights are fixed at the initial surfaces, so
//! the problems at different `k` do not interact.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{expand_person_period, SurvivalDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::nuisance::{survival_from_hazard, NuisanceBundle};
use crate::rng::derive_seed;
use crate::sieve::SieveBasis;
use crate::solver::{
    cross_validate_with_folds, fit, gaussian_cv, gaussian_path, random_folds, CvRule, DesignMatrix, Family,
    FitSpec, GaussianMoments, LambdaPath, PenaltyOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluctuationFamily {
    /// Additive update on the hazard scale.
    Linear,
    /// Additive on the logit scale.
    Logistic,
    /// Additive on the log scale.
    LogLinear,
}

impl FluctuationFamily {
    fn solver_family(self) -> Family {
        match self {
            Self::Linear => Family::Linear,
            Self::Logistic => Family::Logistic,
            Self::LogLinear => Family::LogLinear,
        }
    }

    fn link(self, h: f64) -> f64 {
        match self {
            Self::Linear => h,
            Self::Logistic => (h / (1.0 - h)).ln(),
            Self::LogLinear => h.ln(),
        }
    }

    fn inverse(self, eta: f64) -> f64 {
        match self {
            Self::Linear => eta,
            Self::Logistic => 1.0 / (1.0 + (-eta).exp()),
            Self::LogLinear => eta.min(700.0).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetingPenalty {
    /// Lasso, lambda chosen by cross-validation on the first fit of each
    /// `(t, k)` problem and reused in later iterations.
    CvLasso,
    Fixed(f64),
    Unpenalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetingConfig {
    pub family: FluctuationFamily,
    pub penalty: TargetingPenalty,
    pub alpha: f64,
    pub cv_folds: usize,
    pub cv_rule: CvRule,
    /// Stop the cross-validation path after this many non-improving lambdas.
    pub cv_patience: Option<usize>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub eps_tol: f64,
    pub max_iter: usize,
    /// Step halvings tried before a step that raises the score is rejected.
    pub max_halvings: usize,
    /// Cap on the targeting weights; falls back to the bundle's cap.
    pub weight_max: Option<f64>,
    /// Decrement arm 1 and increment arm 0 instead.
    pub flip_sign: bool,
    pub seed: u64,
    pub solver_tol: f64,
    /// Use `1(T̃ ≥ Q)` in the weights instead of `1(t ≥ Q)`. Every retained
    /// subject satisfies it, so late entrants keep their weight.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub observed_time_entry: bool,
}

impl Default for TargetingConfig {
    fn default() -> Self {
        Self {
            family: FluctuationFamily::Linear,
            penalty: TargetingPenalty::CvLasso,
            alpha: 1.0,
            cv_folds: 5,
            cv_rule: CvRule::Min,
            cv_patience: Some(3),
            n_lambda: 30,
            lambda_min_ratio: 1e-3,
            eps_tol: 1e-4,
            max_iter: 20,
            max_halvings: 4,
            weight_max: None,
            flip_sign: false,
            seed: 0,
            solver_tol: 1e-9,
            observed_time_entry: false,
        }
    }
}

/// Per-subject observed quantities the fluctuation needs, aligned with a bundle.
#[derive(Debug, Clone)]
pub struct TargetingData {
    pub arms: Vec<u8>,
    pub entries: Vec<f64>,
    /// `n x K` on the bundle's model grid.
    pub at_risk: Array2<bool>,
    pub events: Array2<bool>,
    /// `n x d` sieve evaluated at each subject's heterogeneity covariates.
    pub phi: Array2<f64>,
}

impl TargetingData {
    pub fn new(ds: &SurvivalDataset, bundle: &NuisanceBundle, basis: &SieveBasis) -> Result<Self> {
        check_alignment(ds, &bundle.ids)?;
        let table = expand_person_period(ds, &bundle.grid);
        let phi = basis.evaluate(ds.heterogeneity_covariates().view())?;
        Ok(Self {
            arms: ds.records().iter().map(|r| r.a).collect(),
            entries: ds.records().iter().map(|r| r.entry).collect(),
            at_risk: table.at_risk_matrix(),
            events: table.event_matrix(),
            phi,
        })
    }

    pub fn n(&self) -> usize {
        self.arms.len()
    }
}

pub(crate) fn check_alignment(ds: &SurvivalDataset, ids: &[String]) -> Result<()> {
    if ds.n() != ids.len() {
        return Err(Error::Misaligned(vec![format!("{} subjects vs {} ids", ds.n(), ids.len())]));
    }
    let bad: Vec<String> = ds
        .records()
        .iter()
        .zip(ids)
        .filter(|(r, id)| &r.id != *id)
        .map(|(r, id)| format!("{} != {id}", r.id))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Misaligned(bad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetingWeights {
    pub values: Vec<f64>,
    /// Number of weights hitting the cap.
    pub capped: usize,
}

fn weight_cap(bundle: &NuisanceBundle, cfg: &TargetingConfig) -> f64 {
    cfg.weight_max.unwrap_or(bundle.config.weight_max)
}

/// Targeting weights for evaluation horizon `t_index` and model interval
/// `k_index`, using the observed arm's initial surfaces.
pub fn compute_weights(
    bundle: &NuisanceBundle,
    data: &TargetingData,
    t_index: usize,
    k_index: usize,
    weight_max: f64,
) -> Result<TargetingWeights> {
    weights_with(bundle, data, t_index, k_index, weight_max, false)
}

fn weights_with(
    bundle: &NuisanceBundle,
    data: &TargetingData,
    t_index: usize,
    k_index: usize,
    weight_max: f64,
    observed_time_entry: bool,
) -> Result<TargetingWeights> {
    let t = *bundle
        .eval_index
        .get(t_index)
        .ok_or_else(|| Error::InvalidInput(format!("horizon {t_index} outside the grid")))?;
    if k_index > t {
        return Err(Error::InvalidInput(format!("interval {k_index} after horizon {t}")));
    }
    let t_time = bundle.eval_grid.points()[t_index];
    let mut capped = 0;
    let mut values = Vec::with_capacity(bundle.n());
    for i in 0..bundle.n() {
        if !observed_time_entry && data.entries[i] > t_time {
            values.push(0.0);
            continue;
        }
        let a = data.arms[i] as usize;
        let pi = bundle.propensity[i];
        let arm = if a == 1 { 1.0 / pi } else { 1.0 / (1.0 - pi) };
        let denom = bundle.survival[[i, k_index, a]] * bundle.denominator[[i, k_index]];
        if !(denom > 0.0) {
            return Err(Error::Positivity(format!(
                "zero targeting denominator for subject {} at interval {k_index}",
                bundle.ids[i]
            )));
        }
        let w = arm * bundle.survival[[i, t, a]] / denom;
        if !w.is_finite() {
            return Err(Error::Positivity(format!("non-finite targeting weight for {}", bundle.ids[i])));
        }
        if w > weight_max {
            capped += 1;
            values.push(weight_max);
        } else {
            values.push(w);
        }
    }
    Ok(TargetingWeights { values, capped })
}

/// Outcome of one `(t, k)` fluctuation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTrace {
    pub k: usize,
    pub iterations: usize,
    pub converged: bool,
    /// A step that raised the score survived no halving and was dropped.
    pub rejected: bool,
    pub lambda: f64,
    /// Coefficients of every accepted update.
    pub eps: Vec<Vec<f64>>,
    /// Max-column score before the first and after the last update.
    pub score_before: f64,
    pub score_after: f64,
}

#[derive(Debug, Clone)]
pub struct HorizonState {
    /// `n x K x 2` working hazards; only `k ≤ t` differ from the bundle.
    pub hazard: Array3<f64>,
    pub cells: Vec<CellTrace>,
    pub drift_before: f64,
    pub drift_after: f64,
    pub weights_capped: usize,
}

#[derive(Debug, Clone)]
pub struct FluctuationState {
    pub ids: Vec<String>,
    pub eval_grid: TimeGrid,
    pub eval_index: Vec<usize>,
    pub horizons: Vec<HorizonState>,
    pub config: TargetingConfig,
}

impl FluctuationState {
    pub fn converged(&self) -> bool {
        self.horizons.iter().all(|h| h.cells.iter().all(|c| c.converged))
    }

    pub fn drift(&self) -> Vec<f64> {
        self.horizons.iter().map(|h| h.drift_after).collect()
    }
}

/// Column scores `n⁻¹ Σ_i s_i φ_ij w_i (N_i − λ_i)` over the at-risk rows at `k`.
fn interval_scores(
    data: &TargetingData,
    hazard: &Array3<f64>,
    w: &[f64],
    k: usize,
    sign: f64,
    out: &mut [f64],
) {
    let n = data.n();
    for i in 0..n {
        if !data.at_risk[[i, k]] || w[i] == 0.0 {
            continue;
        }
        let a = data.arms[i] as usize;
        let s = sign * if a == 1 { 1.0 } else { -1.0 };
        let r = f64::from(u8::from(data.events[[i, k]])) - hazard[[i, k, a]];
        let f = s * w[i] * r / n as f64;
        for (o, p) in out.iter_mut().zip(data.phi.row(i)) {
            *o += f * p;
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn apply_update(
    hazard: &mut Array3<f64>,
    data: &TargetingData,
    k: usize,
    eps: &Array1<f64>,
    step: f64,
    sign: f64,
    family: FluctuationFamily,
    h_min: f64,
) {
    let shift = data.phi.dot(eps);
    for i in 0..data.n() {
        let d = sign * step * shift[i];
        for (a, s) in [(1usize, 1.0), (0usize, -1.0)] {
            let h = hazard[[i, k, a]];
            let new = family.inverse(family.link(h) + s * d);
            hazard[[i, k, a]] = if new.is_finite() {
                new.clamp(h_min, 1.0 - h_min)
            } else {
                h
            };
        }
    }
}

struct Problem<'a> {
    data: &'a TargetingData,
    cfg: &'a TargetingConfig,
    h_min: f64,
    sign: f64,
    cv_labels: &'a [usize],
}

impl Problem<'_> {
    fn solve(&self, hazard: &mut Array3<f64>, w: &[f64], k: usize) -> Result<CellTrace> {
        let data = self.data;
        let cfg = self.cfg;
        let d = data.phi.ncols();
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.at_risk[[i, k]] && w[i] > 0.0).collect();
        let mut scores = vec![0.0; d];
        interval_scores(data, hazard, w, k, self.sign, &mut scores);
        let mut trace = CellTrace {
            k,
            iterations: 0,
            converged: true,
            rejected: false,
            lambda: 0.0,
            eps: Vec::new(),
            score_before: max_abs(&scores),
            score_after: max_abs(&scores),
        };
        if rows.is_empty() {
            return Ok(trace);
        }
        let x = Array2::from_shape_fn((rows.len(), d), |(r, j)| {
            let i = rows[r];
            let s = self.sign * if data.arms[i] == 1 { 1.0 } else { -1.0 };
            s * data.phi[[i, j]]
        });
        let y: Vec<f64> = rows.iter().map(|&i| f64::from(u8::from(data.events[[i, k]]))).collect();
        let v: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
        let labels = self.fold_labels(&rows);
        let mut engine = Engine::new(x, y, v, cfg)?;
        let mut lambda = match cfg.penalty {
            TargetingPenalty::Fixed(l) => Some(l),
            TargetingPenalty::Unpenalized => Some(0.0),
            TargetingPenalty::CvLasso if d == 1 => Some(0.0),
            TargetingPenalty::CvLasso => None,
        };
        let mut current = trace.score_before;
        trace.converged = false;
        for _ in 0..cfg.max_iter {
            let offset: Vec<f64> = rows
                .iter()
                .map(|&i| cfg.family.link(hazard[[i, k, data.arms[i] as usize]]))
                .collect();
            engine.set_offset(&offset)?;
            let l = match (lambda, &labels) {
                (Some(l), _) => l,
                (None, None) => 0.0,
                (None, Some(labels)) => {
                    let l = engine.cv(labels, cfg)?;
                    lambda = Some(l);
                    l
                }
            };
            trace.lambda = l;
            let eps = engine.fit(l)?;
            trace.iterations += 1;
            let size = eps.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            if size == 0.0 || !eps.iter().all(|e| e.is_finite()) {
                trace.converged = size == 0.0;
                break;
            }
            // damped step: halve while the score grows
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let mut trial = hazard.clone();
                apply_update(&mut trial, data, k, &eps, step, self.sign, cfg.family, self.h_min);
                scores.iter_mut().for_each(|s| *s = 0.0);
                interval_scores(data, &trial, w, k, self.sign, &mut scores);
                let after = max_abs(&scores);
                if after <= current {
                    accepted = Some((trial, after));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((trial, after)) => {
                    *hazard = trial;
                    current = after;
                    trace.eps.push(eps.iter().map(|e| e * step).collect());
                }
                None => {
                    trace.rejected = true;
                    break;
                }
            }
            debug_assert!(monotone(hazard, k));
            if size * step < cfg.eps_tol {
                trace.converged = true;
                break;
            }
        }
        trace.score_after = current;
        Ok(trace)
    }

    /// Compact fold labels of the rows, or `None` when fewer than two
    /// folds are represented.
    fn fold_labels(&self, rows: &[usize]) -> Option<Vec<usize>> {
        let labels: Vec<usize> = rows.iter().map(|&i| self.cv_labels[i]).collect();
        let mut present = labels.clone();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return None;
        }
        Some(labels.iter().map(|l| present.binary_search(l).expect("present")).collect())
    }
}

/// Regression engine of one `(t, k)` problem. The linear family keeps the
/// weighted Gram matrix and only refreshes the response between iterations.
enum Engine {
    Moments {
        x: Array2<f64>,
        y: Vec<f64>,
        v: Vec<f64>,
        r: Vec<f64>,
        total: GaussianMoments,
        opts: PenaltyOptions,
    },
    Glm {
        design: DesignMatrix,
        y: Vec<f64>,
        spec: FitSpec,
    },
}

impl Engine {
    fn new(x: Array2<f64>, y: Vec<f64>, v: Vec<f64>, cfg: &TargetingConfig) -> Result<Self> {
        let d = x.ncols();
        let mut spec = FitSpec::new(cfg.family.solver_family(), cfg.alpha);
        spec.intercept = false;
        spec.unpenalized = vec![0];
        spec.tol = cfg.solver_tol;
        if cfg.family == FluctuationFamily::Linear {
            let opts = PenaltyOptions::from_spec(&spec, d);
            let r = y.clone();
            let total = GaussianMoments::from_data(x.view(), &r, &v);
            return Ok(Self::Moments { x, y, v, r, total, opts });
        }
        spec.weights = Some(v);
        Ok(Self::Glm {
            design: DesignMatrix::new(x, None)?,
            y,
            spec,
        })
    }

    fn set_offset(&mut self, offset: &[f64]) -> Result<()> {
        if offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("non-finite targeting offset".into()));
        }
        match self {
            Self::Moments { x, y, v, r, total, .. } => {
                for ((ri, yi), oi) in r.iter_mut().zip(y.iter()).zip(offset) {
                    *ri = yi - oi;
                }
                total.set_response(x.view(), r, v);
            }
            Self::Glm { spec, .. } => spec.offset = Some(offset.to_vec()),
        }
        Ok(())
    }

    fn cv(&self, labels: &[usize], cfg: &TargetingConfig) -> Result<f64> {
        let path = LambdaPath::Auto {
            n_lambda: cfg.n_lambda,
            min_ratio: cfg.lambda_min_ratio,
        };
        match self {
            Self::Moments { x, v, r, opts, .. } => {
                let k = labels.iter().max().map_or(0, |m| m + 1);
                let folds: Vec<GaussianMoments> = (0..k)
                    .map(|f| {
                        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == f).collect();
                        let xs = x.select(Axis(0), &idx);
                        let rs: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
                        let vs: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
                        GaussianMoments::from_data(xs.view(), &rs, &vs)
                    })
                    .collect();
                Ok(gaussian_cv(&folds, opts, &path, cfg.cv_rule, cfg.cv_patience)?.lambda)
            }
            Self::Glm { design, y, spec } => {
                let mut spec = spec.clone();
                spec.lambda = path;
                Ok(cross_validate_with_folds(design, y, &spec, labels, cfg.cv_rule)?.lambda)
            }
        }
    }

    fn fit(&self, lambda: f64) -> Result<Array1<f64>> {
        match self {
            Self::Moments { total, opts, .. } => {
                let mut path = gaussian_path(total, opts, &[lambda])?;
                Ok(path.pop().expect("one lambda").betas)
            }
            Self::Glm { design, y, spec } => {
                let mut spec = spec.clone();
                spec.lambda = LambdaPath::Values(vec![lambda]);
                Ok(fit(design, y, &spec)?.betas)
            }
        }
    }
}

fn monotone(hazard: &Array3<f64>, k: usize) -> bool {
    hazard
        .slice(ndarray::s![.., k, ..])
        .iter()
        .all(|h| (0.0..=1.0).contains(h))
}

/// Runs the fluctuation for every evaluation horizon.
pub fn fluctuate(bundle: &NuisanceBundle, data: &TargetingData, cfg: &TargetingConfig) -> Result<FluctuationState> {
    if data.n() != bundle.n() || data.at_risk.ncols() != bundle.n_intervals() {
        return Err(Error::DimensionMismatch("targeting data vs bundle".into()));
    }
    if !(cfg.eps_tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidInput("eps_tol and max_iter must be positive".into()));
    }
    let cap = weight_cap(bundle, cfg);
    let h_min = bundle.config.h_min;
    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let cv_labels = random_folds(bundle.n(), cfg.cv_folds.max(2), derive_seed(cfg.seed, &[0x7A]));
    let problem = Problem {
        data,
        cfg,
        h_min,
        sign,
        cv_labels: &cv_labels,
    };
    let horizons: Vec<Result<HorizonState>> = (0..bundle.eval_index.len())
        .into_par_iter()
        .map(|j| {
            let t = bundle.eval_index[j];
            let mut hazard = bundle.hazard.clone();
            let mut cells = Vec::with_capacity(t + 1);
            let mut capped = 0;
            for k in 0..=t {
                let w = weights_with(bundle, data, j, k, cap, cfg.observed_time_entry)?;
                capped += w.capped;
                cells.push(problem.solve(&mut hazard, &w.values, k)?);
            }
            let before = drift_of(bundle, data, &bundle.hazard, j, cfg)?;
            let after = drift_of(bundle, data, &hazard, j, cfg)?;
            Ok(HorizonState {
                hazard,
                cells,
                drift_before: before,
                drift_after: after,
                weights_capped: capped,
            })
        })
        .collect();
    let horizons = horizons.into_iter().collect::<Result<Vec<_>>>()?;
    for (j, h) in horizons.iter().enumerate() {
        let bad = h.cells.iter().filter(|c| !c.converged).count();
        if bad > 0 {
            log::warn!("targeting at horizon {j}: {bad} interval(s) did not converge, using the last iterate");
        }
    }
    Ok(FluctuationState {
        ids: bundle.ids.clone(),
        eval_grid: bundle.eval_grid.clone(),
        eval_index: bundle.eval_index.clone(),
        horizons,
        config: cfg.clone(),
    })
}

fn drift_of(
    bundle: &NuisanceBundle,
    data: &TargetingData,
    hazard: &Array3<f64>,
    j: usize,
    cfg: &TargetingConfig,
) -> Result<f64> {
    let cap = weight_cap(bundle, cfg);
    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let mut total = vec![0.0; data.phi.ncols()];
    for k in 0..=bundle.eval_index[j] {
        let w = weights_with(bundle, data, j, k, cap, cfg.observed_time_entry)?;
        interval_scores(data, hazard, &w.values, k, sign, &mut total);
    }
    Ok(max_abs(&total))
}

/// Largest absolute column score of the de-biasing term at horizon `t_index`,
/// summed over the intervals up to it, for the state's working hazards.
pub fn drift_diagnostic(state: &FluctuationState, bundle: &NuisanceBundle, data: &TargetingData, t_index: usize) -> Result<f64> {
    let h = state
        .horizons
        .get(t_index)
        .ok_or_else(|| Error::InvalidInput(format!("horizon {t_index} outside the grid")))?;
    drift_of(bundle, data, &h.hazard, t_index, &state.config)
}

/// Same quantity for the untargeted hazards of the bundle.
pub fn initial_drift(bundle: &NuisanceBundle, data: &TargetingData, t_index: usize, cfg: &TargetingConfig) -> Result<f64> {
    drift_of(bundle, data, &bundle.hazard, t_index, cfg)
}

/// Product-limit survival of an `n x K x 2` hazard surface.
pub fn hazards_to_survival(hazard: &Array3<f64>) -> Array3<f64> {
    survival_from_hazard(hazard)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcomeMatrix {
    pub ids: Vec<String>,
    pub grid: TimeGrid,
    /// `n x |grid|`.
    pub y: Array2<f64>,
    pub source: String,
}

impl PseudoOutcomeMatrix {
    pub fn new(ids: Vec<String>, grid: TimeGrid, y: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if y.dim() != (ids.len(), grid.len()) {
            return Err(Error::DimensionMismatch(format!(
                "pseudo-outcomes {:?} vs {} ids x {} times",
                y.dim(),
                ids.len(),
                grid.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pseudo-outcome".into()));
        }
        Ok(Self {
            ids,
            grid,
            y,
            source: source.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["id", "t", "y"])?;
        for (i, id) in self.ids.iter().enumerate() {
            for (j, t) in self.grid.points().iter().enumerate() {
                w.write_record([id.clone(), format!("{t}"), format!("{:e}", self.y[[i, j]])])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads the long `id,t,y` layout; ids keep first-appearance order.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut ids: Vec<String> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        let mut cells: Vec<(usize, f64, f64)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .ok_or_else(|| Error::Parse {
                        row: row + 1,
                        message: "short record".into(),
                    })?
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse {
                        row: row + 1,
                        message: format!("{e}"),
                    })
            };
            let id = rec.get(0).unwrap_or_default().to_string();
            let (t, y) = (parse(1)?, parse(2)?);
            let i = *index.entry(id.clone()).or_insert_with(|| {
                ids.push(id);
                ids.len() - 1
            });
            if !times.iter().any(|x| *x == t) {
                times.push(t);
            }
            cells.push((i, t, y));
        }
        let grid = TimeGrid::new(times.clone())?;
        let mut y = Array2::from_elem((ids.len(), grid.len()), f64::NAN);
        for (i, t, v) in cells {
            let j = grid.points().iter().position(|x| *x == t).expect("time collected above");
            y[[i, j]] = v;
        }
        if y.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("pseudo-outcome file is not a full id x t table".into()));
        }
        Self::new(ids, grid, y, format!("file:{}", path.display()))
    }
}

/// `Y(t) = Ŝ*(t|1) − Ŝ*(t|0)` from each horizon's targeted surface.
pub fn make_pseudo_outcomes(state: &FluctuationState) -> PseudoOutcomeMatrix {
    let n = state.ids.len();
    let m = state.eval_index.len();
    let mut y = Array2::zeros((n, m));
    for (j, h) in state.horizons.iter().enumerate() {
        let t = state.eval_index[j];
        for i in 0..n {
            let (mut s1, mut s0) = (1.0, 1.0);
            for k in 0..=t {
                s1 *= 1.0 - h.hazard[[i, k, 1]];
                s0 *= 1.0 - h.hazard[[i, k, 0]];
            }
            y[[i, j]] = (s1 - s0).clamp(-1.0, 1.0);
        }
    }
    PseudoOutcomeMatrix {
        ids: state.ids.clone(),
        grid: state.eval_grid.clone(),
        y,
        source: format!("targeted:{}", serde_json::to_string(&state.config).unwrap_or_default()),
    }
}

/// Untargeted plug-in contrast of a bundle, in the same layout.
pub fn plug_in_outcomes(bundle: &NuisanceBundle) -> PseudoOutcomeMatrix {
    let s = bundle.eval_survival();
    let y = Array2::from_shape_fn((bundle.n(), bundle.eval_index.len()), |(i, j)| s[[i, j, 1]] - s[[i, j, 0]]);
    PseudoOutcomeMatrix {
        ids: bundle.ids.clone(),
        grid: bundle.eval_grid.clone(),
        y,
        source: "plug_in".into(),
    }
}

/// Convenience: sieve, fluctuation and pseudo-outcomes in one call.
pub fn target(
    ds: &SurvivalDataset,
    bundle: &NuisanceBundle,
    basis: &SieveBasis,
    cfg: &TargetingConfig,
) -> Result<(FluctuationState, PseudoOutcomeMatrix)> {
    let data = TargetingData::new(ds, bundle, basis)?;
    let state = fluctuate(bundle, &data, cfg)?;
    let y = make_pseudo_outcomes(&state);
    Ok((state, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn product_limit_examples() {
        let h = Array3::from_shape_vec((1, 2, 1), vec![0.1, 0.2]).unwrap();
        let s = hazards_to_survival(&h);
        assert!((s[[0, 0, 0]] - 0.9).abs() < 1e-15);
        assert!((s[[0, 1, 0]] - 0.72).abs() < 1e-15);
        let s = hazards_to_survival(&Array3::zeros((2, 3, 2)));
        assert!(s.iter().all(|v| *v == 1.0));
        let h = Array3::from_shape_vec((1, 3, 1), vec![0.1, 1.0, 0.3]).unwrap();
        let s = hazards_to_survival(&h);
        assert_eq!(s[[0, 1, 0]], 0.0);
        assert_eq!(s[[0, 2, 0]], 0.0);
    }

    #[test]
    fn families_round_trip() {
        for f in [FluctuationFamily::Linear, FluctuationFamily::Logistic, FluctuationFamily::LogLinear] {
            for h in [0.01, 0.3, 0.9] {
                assert!((f.inverse(f.link(h)) - h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_csv_round_trip() {
        let grid = TimeGrid::new(vec![0.5, 1.0]).unwrap();
        let p = PseudoOutcomeMatrix::new(vec!["a".into(), "b".into()], grid, array![[0.1, -0.2], [0.0, 1.0]], "x").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        p.write_csv(&path).unwrap();
        let q = PseudoOutcomeMatrix::read_csv(&path).unwrap();
        assert_eq!(q.ids, p.ids);
        assert_eq!(q.y, p.y);
    }

    use crate::data::SurvivalRecord;
    use crate::nuisance::{survival_from_hazard, NuisanceConfig, NuisanceDiagnostics};
    use crate::sieve::SieveBasis;

    /// Bundle on grid (1, 2) with one shared hazard per arm and interval.
    fn toy(records: Vec<SurvivalRecord>, hazard: [[f64; 2]; 2], pi: f64) -> (SurvivalDataset, NuisanceBundle) {
        let n = records.len();
        let ds = SurvivalDataset::new(records, vec!["x".into()], None).unwrap();
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let h = Array3::from_shape_fn((n, 2, 2), |(_, k, a)| hazard[k][a]);
        let b = NuisanceBundle {
            ids: ds.records().iter().map(|r| r.id.clone()).collect(),
            grid: grid.clone(),
            eval_grid: grid,
            eval_index: vec![0, 1],
            survival: survival_from_hazard(&h),
            hazard: h,
            censoring: Array2::ones((n, 2)),
            entry_hazard: Array2::from_shape_fn((n, 2), |(_, k)| if k == 0 { 1.0 } else { 0.0 }),
            entry_cdf: Array2::ones((n, 2)),
            denominator: Array2::ones((n, 2)),
            iptw_entry: vec![1.0; n],
            propensity: vec![pi; n],
            folds: vec![0; n],
            config: NuisanceConfig::default(),
            diagnostics: NuisanceDiagnostics::default(),
        };
        (ds, b)
    }

    fn rec(id: usize, a: u8, time: f64, event: bool, entry: f64) -> SurvivalRecord {
        SurvivalRecord {
            id: format!("s{id}"),
            z: vec![id as f64 / 10.0],
            a,
            time_obs: time,
            event,
            entry,
        }
    }

    fn data_for(ds: &SurvivalDataset, b: &NuisanceBundle, degree: usize) -> TargetingData {
        let basis = SieveBasis::from_rows(ds.heterogeneity_covariates().view(), degree).unwrap();
        TargetingData::new(ds, b, &basis).unwrap()
    }

    #[test]
    fn weight_formula_examples() {
        // S(k) = 0.9 after the first interval, S(t) = 0.8 at the second point
        let h1 = 1.0 - 0.8 / 0.9;
        let (ds, b) = toy(
            vec![rec(0, 1, 2.0, false, 0.0), rec(1, 0, 2.0, false, 1.5), rec(2, 1, 3.0, false, 2.5)],
            [[0.1, 0.1], [h1, h1]],
            0.5,
        );
        let d = data_for(&ds, &b, 0);
        let w = compute_weights(&b, &d, 1, 0, 50.0).unwrap();
        assert!((w.values[0] - 2.0 * 0.8 / 0.9).abs() < 1e-12);
        assert!((w.values[0] - 1.7778).abs() < 1e-4);
        // entry after the horizon contributes nothing
        let w0 = compute_weights(&b, &d, 0, 0, 50.0).unwrap();
        assert_eq!(w0.values[1], 0.0);
        assert_eq!(w0.values[2], 0.0);
        // under the observed-time indicator late entrants keep a weight
        let wo = weights_with(&b, &d, 0, 0, 50.0, true).unwrap();
        assert!(wo.values.iter().all(|v| *v > 0.0));
        assert_eq!(wo.values[0], w0.values[0]);
        // the cap binds and is counted
        let c = compute_weights(&b, &d, 1, 0, 1.5).unwrap();
        assert_eq!(c.values[0], 1.5);
        assert!(c.capped >= 1);
        assert!(compute_weights(&b, &d, 0, 1, 50.0).is_err());
    }

    #[test]
    fn zero_denominator_is_positivity_error() {
        let (ds, mut b) = toy(vec![rec(0, 1, 2.0, false, 0.0), rec(1, 0, 2.0, true, 0.0)], [[0.1, 0.1], [0.1, 0.1]], 0.5);
        b.denominator[[0, 0]] = 0.0;
        let d = data_for(&ds, &b, 0);
        assert!(matches!(compute_weights(&b, &d, 0, 0, 50.0), Err(Error::Positivity(_))));
    }

    #[test]
    fn no_one_at_risk_leaves_hazards_unchanged() {
        let (ds, b) = toy(vec![rec(0, 1, 2.0, false, 1.5), rec(1, 0, 2.0, false, 1.5)], [[0.2, 0.3], [0.1, 0.4]], 0.5);
        let d = data_for(&ds, &b, 0);
        let st = fluctuate(&b, &d, &TargetingConfig::default()).unwrap();
        assert_eq!(st.horizons[0].hazard, b.hazard);
        let y = make_pseudo_outcomes(&st);
        assert_eq!(y.y, plug_in_outcomes(&b).y);
    }

    #[test]
    fn intercept_only_solves_score() {
        let records: Vec<SurvivalRecord> = (0..40)
            .map(|i| rec(i, (i % 2) as u8, 0.3 + (i % 7) as f64 * 0.3, i % 3 != 0, 0.0))
            .collect();
        let (ds, b) = toy(records, [[0.3, 0.2], [0.25, 0.35]], 0.4);
        let d = data_for(&ds, &b, 0);
        let cfg = TargetingConfig::default();
        let st = fluctuate(&b, &d, &cfg).unwrap();
        assert!(st.converged());
        for (j, h) in st.horizons.iter().enumerate() {
            assert!(h.drift_before > 1e-3, "horizon {j} already solved");
            assert!(drift_diagnostic(&st, &b, &d, j).unwrap() < 10.0 * cfg.eps_tol);
        }
    }
}
