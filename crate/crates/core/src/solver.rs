//! Weighted elastic-net regression by cyclic coordinate descent.
//!
//! The objective for the linear family is
//! `1/2 Σ v_i (y_i - o_i - b0 - x_i'β)^2 + λ Σ_j pf_j (α|β_j| + (1-α)/2 β_j^2)`
//! with weights normalized to sum to one. Logistic and log-linear families
//! replace the squared error by the mean negative log-likelihood and are
//! solved by IRLS around the same kernel.
//!
//! Penalties apply to standardized coefficients when `standardize` is set;
//! coefficients are always reported on the original scale.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Linear,
    Logistic,
    /// Log link with Poisson working variance; also used for fractional
    /// responses that are rates.
    LogLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPath {
    Auto { n_lambda: usize, min_ratio: f64 },
    Values(Vec<f64>),
}

impl Default for LambdaPath {
    fn default() -> Self {
        LambdaPath::Auto {
            n_lambda: 50,
            min_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: Array2<f64>,
    column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: Array2<f64>, column_names: Option<Vec<String>>) -> Result<Self> {
        let d = values.ncols();
        if d == 0 {
            return Err(Error::InvalidInput("design has no columns".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        let column_names = column_names.unwrap_or_else(|| (0..d).map(|j| format!("x{j}")).collect());
        if column_names.len() != d {
            return Err(Error::DimensionMismatch("column names vs columns".into()));
        }
        Ok(Self {
            values,
            column_names,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Weighted column means and scales. Without centering the scale is the
    /// weighted root mean square.
    pub fn standardization(&self, weights: &[f64], center: bool) -> Standardization {
        let total: f64 = weights.iter().sum();
        let d = self.ncols();
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let col = self.values.column(j);
            let m = if center {
                col.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / total
            } else {
                0.0
            };
            let var = col.iter().zip(weights).map(|(x, w)| w * (x - m) * (x - m)).sum::<f64>() / total;
            mean[j] = m;
            scale[j] = var.sqrt();
        }
        Standardization::new(mean, scale, center)
    }
}

/// Per-column affine map between original and standardized coordinates.
/// Columns with zero scale are excluded from fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub centered: bool,
}

impl Standardization {
    fn new(mean: Vec<f64>, mut scale: Vec<f64>, centered: bool) -> Self {
        for (s, m) in scale.iter_mut().zip(&mean) {
            if !(*s > 1e-10 * (1.0 + m.abs())) {
                *s = 0.0;
            }
        }
        Self {
            mean,
            scale,
            centered,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            centered: false,
        }
    }

    pub fn is_excluded(&self, j: usize) -> bool {
        self.scale[j] == 0.0
    }

    pub fn to_original(&self, intercept: f64, beta_std: &[f64]) -> (f64, Vec<f64>) {
        let mut b0 = intercept;
        let beta: Vec<f64> = beta_std
            .iter()
            .zip(&self.scale)
            .zip(&self.mean)
            .map(|((b, s), m)| {
                if *s == 0.0 {
                    0.0
                } else {
                    let v = b / s;
                    b0 -= v * m;
                    v
                }
            })
            .collect();
        (b0, beta)
    }

    pub fn to_standardized(&self, intercept: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let mut b0 = intercept;
        let beta_std = beta
            .iter()
            .zip(&self.scale)
            .zip(&self.mean)
            .map(|((b, s), m)| {
                b0 += b * m;
                b * s
            })
            .collect();
        (b0, beta_std)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSpec {
    pub family: Family,
    pub alpha: f64,
    pub lambda: LambdaPath,
    pub weights: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
    /// Columns excluded from the penalty.
    pub unpenalized: Vec<usize>,
    pub intercept: bool,
    pub standardize: bool,
    /// Maximum number of coordinate sweeps per path point.
    pub max_iter: usize,
    pub tol: f64,
    /// Record the objective after every sweep (linear) or IRLS step.
    pub trace: bool,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            family: Family::Linear,
            alpha: 1.0,
            lambda: LambdaPath::default(),
            weights: None,
            offset: None,
            unpenalized: Vec::new(),
            intercept: true,
            standardize: true,
            max_iter: 10_000,
            tol: 1e-8,
            trace: false,
        }
    }
}

impl FitSpec {
    pub fn new(family: Family, alpha: f64) -> Self {
        Self {
            family,
            alpha,
            ..Self::default()
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = LambdaPath::Values(vec![lambda]);
        self
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tol must be positive".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != n {
                return Err(Error::DimensionMismatch(format!("{} weights for {n} rows", w.len())));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
            }
            if !w.iter().any(|v| *v > 0.0) {
                return Err(Error::ZeroWeights);
            }
        }
        if let Some(o) = &self.offset {
            if o.len() != n {
                return Err(Error::DimensionMismatch(format!("{} offsets for {n} rows", o.len())));
            }
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite offset".into()));
            }
        }
        if let Some(&j) = self.unpenalized.iter().find(|&&j| j >= d) {
            return Err(Error::InvalidInput(format!("unpenalized column {j} out of range")));
        }
        if let LambdaPath::Values(v) = &self.lambda {
            if v.is_empty() || v.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(Error::InvalidInput("lambda values must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    fn penalty_factors(&self, d: usize) -> Vec<f64> {
        let mut pf = vec![1.0; d];
        for &j in &self.unpenalized {
            pf[j] = 0.0;
        }
        pf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefVector {
    pub intercept: f64,
    pub betas: Array1<f64>,
    pub lambda_used: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective values per sweep when tracing was requested.
    #[serde(default)]
    pub trace: Vec<f64>,
}

impl CoefVector {
    pub fn linear_predictor(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.betas) + self.intercept
    }

    pub fn predict(&self, family: Family, x: ArrayView2<f64>, offset: Option<&[f64]>) -> Array1<f64> {
        let mut eta = self.linear_predictor(x);
        if let Some(o) = offset {
            eta.iter_mut().zip(o).for_each(|(e, o)| *e += o);
        }
        eta.mapv_inplace(|e| inverse_link(family, e));
        eta
    }

    pub fn nonzero(&self) -> usize {
        self.betas.iter().filter(|b| **b != 0.0).count()
    }
}

pub fn inverse_link(family: Family, eta: f64) -> f64 {
    match family {
        Family::Linear => eta,
        Family::Logistic => 1.0 / (1.0 + (-eta).exp()),
        Family::LogLinear => eta.min(700.0).exp(),
    }
}

fn check_response(family: Family, y: &[f64]) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite response".into()));
    }
    match family {
        Family::Linear => Ok(()),
        Family::Logistic if y.iter().all(|v| (0.0..=1.0).contains(v)) => Ok(()),
        Family::LogLinear if y.iter().all(|v| *v >= 0.0) => Ok(()),
        _ => Err(Error::InvalidInput("response outside the family's support".into())),
    }
}

/// Penalty weight of a coordinate, treating unpenalized columns as free even
/// at an infinite lambda.
#[inline]
fn pen(lambda: f64, pf: f64) -> f64 {
    if pf == 0.0 {
        0.0
    } else {
        lambda * pf
    }
}

fn penalty_value(beta: &[f64], pf: &[f64], lambda: f64, alpha: f64) -> f64 {
    beta.iter()
        .zip(pf)
        .filter(|(b, _)| **b != 0.0)
        .map(|(b, p)| pen(lambda, *p) * (alpha * b.abs() + 0.5 * (1.0 - alpha) * b * b))
        .sum()
}

#[inline]
fn coordinate_update(grad: f64, curvature: f64, lambda: f64, pf: f64, alpha: f64) -> f64 {
    let l = pen(lambda, pf);
    if l.is_infinite() {
        return 0.0;
    }
    let denom = curvature + l * (1.0 - alpha);
    if denom <= 0.0 {
        return 0.0;
    }
    soft_threshold(grad, l * alpha) / denom
}

/// Options shared by both engines, derived from a [`FitSpec`].
#[derive(Debug, Clone)]
pub struct PenaltyOptions {
    pub alpha: f64,
    pub penalty_factor: Vec<f64>,
    pub intercept: bool,
    pub standardize: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub trace: bool,
}

impl PenaltyOptions {
    pub fn from_spec(spec: &FitSpec, d: usize) -> Self {
        Self {
            alpha: spec.alpha,
            penalty_factor: spec.penalty_factors(d),
            intercept: spec.intercept,
            standardize: spec.standardize,
            max_iter: spec.max_iter,
            tol: spec.tol,
            trace: spec.trace,
        }
    }
}

fn log_path(lambda_max: f64, n_lambda: usize, min_ratio: f64) -> Vec<f64> {
    if !(lambda_max > 0.0) || n_lambda == 0 {
        return vec![0.0];
    }
    if n_lambda == 1 {
        return vec![lambda_max];
    }
    let ratio = min_ratio.max(1e-12).ln() / (n_lambda - 1) as f64;
    (0..n_lambda).map(|i| lambda_max * (ratio * i as f64).exp()).collect()
}

fn resolve_path(path: &LambdaPath, lambda_max: f64) -> Vec<f64> {
    match path {
        LambdaPath::Auto { n_lambda, min_ratio } => log_path(lambda_max, *n_lambda, *min_ratio),
        LambdaPath::Values(v) => {
            let mut v = v.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        }
    }
}

// ---------------------------------------------------------------------------
// Linear family: covariance updates from sufficient statistics.

/// Weighted sufficient statistics of `(x, r)` with `r = y - offset`. Moments
/// of disjoint row sets add, so cross-validation folds subtract from the total.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub w: f64,
    pub sx: Array1<f64>,
    pub sxx: Array2<f64>,
    pub sxr: Array1<f64>,
    pub sr: f64,
    pub srr: f64,
}

impl GaussianMoments {
    pub fn from_data(x: ArrayView2<f64>, r: &[f64], v: &[f64]) -> Self {
        let mut vx = x.to_owned();
        for (mut row, &vi) in vx.axis_iter_mut(Axis(0)).zip(v) {
            row *= vi;
        }
        let sxx = x.t().dot(&vx);
        let mut out = Self {
            w: v.iter().sum(),
            sx: vx.sum_axis(Axis(0)),
            sxx,
            sxr: Array1::zeros(x.ncols()),
            sr: 0.0,
            srr: 0.0,
        };
        out.set_response(x, r, v);
        out
    }

    /// Replaces the response statistics, keeping the Gram matrix.
    pub fn set_response(&mut self, x: ArrayView2<f64>, r: &[f64], v: &[f64]) {
        let vr: Array1<f64> = r.iter().zip(v).map(|(r, v)| r * v).collect();
        self.sxr = x.t().dot(&vr);
        self.sr = vr.sum();
        self.srr = vr.iter().zip(r).map(|(a, b)| a * b).sum();
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self {
            w: self.w - other.w,
            sx: &self.sx - &other.sx,
            sxx: &self.sxx - &other.sxx,
            sxr: &self.sxr - &other.sxr,
            sr: self.sr - other.sr,
            srr: self.srr - other.srr,
        }
    }

    pub fn d(&self) -> usize {
        self.sx.len()
    }

    /// Weighted squared error of an original-scale fit on the rows these
    /// moments summarize.
    pub fn squared_error(&self, intercept: f64, beta: &Array1<f64>) -> f64 {
        let bxx = beta.dot(&self.sxx.dot(beta));
        let v = self.srr - 2.0 * intercept * self.sr - 2.0 * beta.dot(&self.sxr)
            + intercept * intercept * self.w
            + 2.0 * intercept * beta.dot(&self.sx)
            + bxx;
        v.max(0.0)
    }

    fn standardization(&self, opts: &PenaltyOptions) -> Standardization {
        let d = self.d();
        let w = self.w;
        let center = opts.intercept;
        let mean: Vec<f64> = (0..d).map(|j| if center { self.sx[j] / w } else { 0.0 }).collect();
        if !opts.standardize {
            let mut s = Standardization::identity(d);
            s.mean = mean.clone();
            s.centered = center;
            // still exclude columns that carry no variation
            for j in 0..d {
                let var = self.sxx[[j, j]] / w - mean[j] * mean[j];
                if !(var > 1e-20 * (1.0 + mean[j] * mean[j])) {
                    s.scale[j] = 0.0;
                }
            }
            return s;
        }
        let scale = (0..d)
            .map(|j| (self.sxx[[j, j]] / w - mean[j] * mean[j]).max(0.0).sqrt())
            .collect();
        Standardization::new(mean, scale, center)
    }
}

struct GaussianStd {
    stdz: Standardization,
    c: Array2<f64>,
    b: Array1<f64>,
    yy: f64,
    ybar: f64,
}

impl GaussianStd {
    fn new(m: &GaussianMoments, opts: &PenaltyOptions) -> Result<Self> {
        if !(m.w > 0.0) {
            return Err(Error::ZeroWeights);
        }
        let d = m.d();
        let stdz = m.standardization(opts);
        let w = m.w;
        let ybar = if opts.intercept { m.sr / w } else { 0.0 };
        let mut c = Array2::zeros((d, d));
        let mut b = Array1::zeros(d);
        for j in 0..d {
            let sj = stdz.scale[j];
            if sj == 0.0 {
                continue;
            }
            let mj = stdz.mean[j];
            b[j] = (m.sxr[j] / w - mj * ybar) / sj;
            for k in 0..d {
                let sk = stdz.scale[k];
                if sk == 0.0 {
                    continue;
                }
                c[[j, k]] = (m.sxx[[j, k]] / w - mj * stdz.mean[k]) / (sj * sk);
            }
        }
        let yy = m.srr / w - ybar * ybar;
        Ok(Self {
            stdz,
            c,
            b,
            yy,
            ybar,
        })
    }

    fn lambda_max(&self, opts: &PenaltyOptions) -> Result<f64> {
        // fit the unpenalized block first
        let d = self.b.len();
        let mut beta = vec![0.0; d];
        let mut g = self.b.to_vec();
        self.solve(&mut beta, &mut g, f64::INFINITY, opts, &mut Vec::new())?;
        let a = opts.alpha.max(1e-3);
        let lmax = (0..d)
            .filter(|&j| opts.penalty_factor[j] > 0.0 && !self.stdz.is_excluded(j))
            .map(|j| g[j].abs() / (a * opts.penalty_factor[j]))
            .fold(0.0, f64::max);
        Ok(lmax)
    }

    fn objective(&self, beta: &[f64], g: &[f64], lambda: f64, opts: &PenaltyOptions) -> f64 {
        // 1/2 (yy - 2β'b + β'Cβ) with Cβ = b - g
        let bb: f64 = beta.iter().zip(self.b.iter()).map(|(x, y)| x * y).sum();
        let bg: f64 = beta.iter().zip(g).map(|(x, y)| x * y).sum();
        0.5 * (self.yy - bb - bg) + penalty_value(beta, &opts.penalty_factor, lambda, opts.alpha)
    }

    /// Cyclic coordinate descent at one lambda; `g = b - Cβ` kept current.
    fn solve(
        &self,
        beta: &mut [f64],
        g: &mut [f64],
        lambda: f64,
        opts: &PenaltyOptions,
        trace: &mut Vec<f64>,
    ) -> Result<(bool, usize)> {
        let d = beta.len();
        let active: Vec<usize> = (0..d).filter(|&j| !self.stdz.is_excluded(j)).collect();
        if opts.alpha == 0.0 {
            if let Some(exact) = self.ridge_solve(&active, lambda, opts) {
                beta.copy_from_slice(&exact);
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = self.b[k] - self.c.row(k).iter().zip(beta.iter()).map(|(c, b)| c * b).sum::<f64>();
                }
                if opts.trace {
                    trace.push(self.objective(beta, g, lambda, opts));
                }
                return Ok((true, 1));
            }
        }
        let mut prev = if opts.trace || cfg!(debug_assertions) {
            self.objective(beta, g, lambda, opts)
        } else {
            0.0
        };
        for it in 1..=opts.max_iter {
            let mut max_delta: f64 = 0.0;
            for &j in &active {
                let cjj = self.c[[j, j]];
                let old = beta[j];
                let new = coordinate_update(g[j] + cjj * old, cjj, lambda, opts.penalty_factor[j], opts.alpha);
                let delta = new - old;
                if delta != 0.0 {
                    beta[j] = new;
                    let col = self.c.column(j);
                    for (gk, ck) in g.iter_mut().zip(col.iter()) {
                        *gk -= ck * delta;
                    }
                    max_delta = max_delta.max(delta.abs() * cjj.sqrt().max(1e-12));
                }
            }
            if opts.trace || cfg!(debug_assertions) {
                let obj = self.objective(beta, g, lambda, opts);
                debug_assert!(
                    obj <= prev + 1e-9 * (1.0 + prev.abs()),
                    "coordinate sweep increased the objective: {prev} -> {obj}"
                );
                if opts.trace {
                    trace.push(obj);
                }
                prev = obj;
            }
            if max_delta < opts.tol {
                return Ok((true, it));
            }
        }
        Ok((false, opts.max_iter))
    }

    /// Closed-form ridge solution `(C + λ diag(pf)) β = b` on the active
    /// columns; `None` when the system is numerically singular.
    fn ridge_solve(&self, active: &[usize], lambda: f64, opts: &PenaltyOptions) -> Option<Vec<f64>> {
        let cols: Vec<usize> = if lambda.is_finite() {
            active.to_vec()
        } else {
            active.iter().copied().filter(|&j| opts.penalty_factor[j] == 0.0).collect()
        };
        let m = cols.len();
        let mut a = vec![0.0; m * m];
        for (r, &j) in cols.iter().enumerate() {
            for (c, &k) in cols.iter().enumerate() {
                a[r * m + c] = self.c[[j, k]];
            }
            a[r * m + r] += pen(lambda, opts.penalty_factor[j]);
        }
        let rhs: Vec<f64> = cols.iter().map(|&j| self.b[j]).collect();
        let sol = cholesky_solve(&mut a, m, &rhs)?;
        let mut beta = vec![0.0; self.b.len()];
        for (r, &j) in cols.iter().enumerate() {
            beta[j] = sol[r];
        }
        Some(beta)
    }

    fn coef(&self, beta: &[f64], lambda: f64, converged: bool, iterations: usize, trace: Vec<f64>) -> CoefVector {
        let (b0, b) = self.stdz.to_original(self.ybar, beta);
        let intercept = if self.stdz.centered { b0 } else { 0.0 };
        CoefVector {
            intercept,
            betas: Array1::from(b),
            lambda_used: lambda,
            converged,
            iterations,
            trace,
        }
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, factored
/// in place).
fn cholesky_solve(a: &mut [f64], m: usize, b: &[f64]) -> Option<Vec<f64>> {
    let scale = (0..m).map(|i| a[i * m + i].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 1e-12 * scale) {
            return None;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in (j + 1)..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / d;
        }
    }
    let mut x = b.to_vec();
    for i in 0..m {
        for k in 0..i {
            x[i] -= a[i * m + k] * x[k];
        }
        x[i] /= a[i * m + i];
    }
    for i in (0..m).rev() {
        for k in (i + 1)..m {
            x[i] -= a[k * m + i] * x[k];
        }
        x[i] /= a[i * m + i];
    }
    Some(x)
}

/// Lambda path for the linear family computed from sufficient statistics.
pub fn gaussian_lambda_path(m: &GaussianMoments, opts: &PenaltyOptions, path: &LambdaPath) -> Result<Vec<f64>> {
    let prob = GaussianStd::new(m, opts)?;
    let lmax = match path {
        LambdaPath::Auto { .. } => prob.lambda_max(opts)?,
        LambdaPath::Values(_) => 0.0,
    };
    Ok(resolve_path(path, lmax))
}

/// Warm-started path fit for the linear family.
pub fn gaussian_path(m: &GaussianMoments, opts: &PenaltyOptions, lambdas: &[f64]) -> Result<Vec<CoefVector>> {
    let prob = GaussianStd::new(m, opts)?;
    let d = m.d();
    let mut beta = vec![0.0; d];
    let mut g = prob.b.to_vec();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut trace = Vec::new();
        let (conv, it) = prob.solve(&mut beta, &mut g, lambda, opts, &mut trace)?;
        out.push(prob.coef(&beta, lambda, conv, it, trace));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generalized linear families: IRLS with naive coordinate updates.

struct GlmProblem<'a> {
    family: Family,
    n: usize,
    /// Standardized columns, column-major; excluded columns left empty.
    cols: Vec<Vec<f64>>,
    stdz: Standardization,
    y: &'a [f64],
    v: Vec<f64>,
    offset: Vec<f64>,
}

fn loglik_term(family: Family, y: f64, eta: f64) -> f64 {
    match family {
        Family::Linear => -0.5 * (y - eta) * (y - eta),
        Family::Logistic => {
            // y*eta - log(1+e^eta), stable
            let l1p = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            y * eta - l1p
        }
        Family::LogLinear => {
            let e = eta.min(700.0);
            y * e - e.exp()
        }
    }
}

impl<'a> GlmProblem<'a> {
    fn new(x: ArrayView2<f64>, y: &'a [f64], spec: &FitSpec) -> Self {
        let n = x.nrows();
        let raw_w = spec.weights.clone().unwrap_or_else(|| vec![1.0; n]);
        let total: f64 = raw_w.iter().sum();
        let v: Vec<f64> = raw_w.iter().map(|w| w / total).collect();
        let offset = spec.offset.clone().unwrap_or_else(|| vec![0.0; n]);
        let d = x.ncols();
        let center = spec.intercept;
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for j in 0..d {
            let col = x.column(j);
            let m = if center {
                col.iter().zip(&v).map(|(x, w)| w * x).sum::<f64>()
            } else {
                0.0
            };
            let var = col.iter().zip(&v).map(|(x, w)| w * (x - m) * (x - m)).sum::<f64>();
            mean[j] = m;
            scale[j] = var.sqrt();
        }
        let mut stdz = Standardization::new(mean, scale, center);
        if !spec.standardize {
            for s in stdz.scale.iter_mut() {
                if *s > 0.0 {
                    *s = 1.0;
                }
            }
        }
        let cols = (0..d)
            .map(|j| {
                if stdz.is_excluded(j) {
                    Vec::new()
                } else {
                    let (m, s) = (stdz.mean[j], stdz.scale[j]);
                    x.column(j).iter().map(|xv| (xv - m) / s).collect()
                }
            })
            .collect();
        Self {
            family: spec.family,
            n,
            cols,
            stdz,
            y,
            v,
            offset,
        }
    }

    fn eta(&self, b0: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta: Vec<f64> = self.offset.iter().map(|o| o + b0).collect();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (e, x) in eta.iter_mut().zip(&self.cols[j]) {
                    *e += b * x;
                }
            }
        }
        eta
    }

    fn objective(&self, eta: &[f64], beta: &[f64], lambda: f64, opts: &PenaltyOptions) -> f64 {
        let nll: f64 = -(0..self.n)
            .filter(|&i| self.v[i] > 0.0)
            .map(|i| self.v[i] * loglik_term(self.family, self.y[i], eta[i]))
            .sum::<f64>();
        nll + penalty_value(beta, &opts.penalty_factor, lambda, opts.alpha)
    }

    /// Score `Σ v x_j (y - μ)` for every column at the current fit.
    fn gradient(&self, eta: &[f64]) -> Vec<f64> {
        let resid: Vec<f64> = (0..self.n)
            .map(|i| self.v[i] * (self.y[i] - inverse_link(self.family, eta[i])))
            .collect();
        self.cols
            .iter()
            .map(|c| c.iter().zip(&resid).map(|(x, r)| x * r).sum())
            .collect()
    }

    /// Working weights and residuals (on the linear-predictor scale).
    fn working(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut w = vec![0.0; self.n];
        let mut r = vec![0.0; self.n];
        for i in 0..self.n {
            if self.v[i] == 0.0 {
                continue;
            }
            let (mu, var) = match self.family {
                Family::Linear => (eta[i], 1.0),
                Family::Logistic => {
                    let mu = inverse_link(Family::Logistic, eta[i]);
                    (mu, (mu * (1.0 - mu)).max(1e-10))
                }
                Family::LogLinear => {
                    let mu = inverse_link(Family::LogLinear, eta[i]);
                    (mu, mu.max(1e-10))
                }
            };
            w[i] = self.v[i] * var;
            r[i] = (self.y[i] - mu) / var;
        }
        (w, r)
    }

    /// Minimizes the weighted quadratic surrogate over `set` (plus the
    /// intercept). `r` holds working residuals and is updated in place.
    #[allow(clippy::too_many_arguments)]
    fn inner_cd(
        &self,
        set: &[usize],
        w: &[f64],
        r: &mut [f64],
        b0: &mut f64,
        beta: &mut [f64],
        lambda: f64,
        opts: &PenaltyOptions,
        budget: &mut usize,
    ) -> bool {
        let wsum: f64 = w.iter().sum();
        let joint = opts.intercept && wsum > 0.0;
        // with an intercept each coordinate is updated jointly with it, i.e.
        // on the column centered under the working weights; this removes the
        // zig-zag between the intercept and columns whose working weights
        // differ from the prior weights
        let xbar: Vec<f64> = set
            .iter()
            .map(|&j| {
                if joint {
                    self.cols[j].iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / wsum
                } else {
                    0.0
                }
            })
            .collect();
        let curv: Vec<f64> = set
            .iter()
            .zip(&xbar)
            .map(|(&j, &m)| {
                let raw: f64 = self.cols[j].iter().zip(w).map(|(x, w)| w * x * x).sum();
                (raw - wsum * m * m).max(0.0)
            })
            .collect();
        let mut first = true;
        loop {
            if *budget == 0 {
                return false;
            }
            *budget -= 1;
            let mut max_delta: f64 = 0.0;
            if joint && first {
                let delta = r.iter().zip(w).map(|(r, w)| r * w).sum::<f64>() / wsum;
                if delta != 0.0 {
                    *b0 += delta;
                    r.iter_mut().for_each(|ri| *ri -= delta);
                    max_delta = max_delta.max(delta.abs() * wsum.sqrt());
                }
            }
            first = false;
            for (idx, &j) in set.iter().enumerate() {
                let c = curv[idx];
                if c <= 1e-14 * wsum.max(1e-300) {
                    continue;
                }
                let m = xbar[idx];
                let col = &self.cols[j];
                let grad: f64 = col.iter().zip(w).zip(r.iter()).map(|((x, w), r)| (x - m) * w * r).sum();
                let old = beta[j];
                let new = coordinate_update(grad + c * old, c, lambda, opts.penalty_factor[j], opts.alpha);
                let delta = new - old;
                if delta != 0.0 {
                    beta[j] = new;
                    if joint {
                        *b0 -= delta * m;
                        for (ri, x) in r.iter_mut().zip(col) {
                            *ri -= delta * (x - m);
                        }
                    } else {
                        for (ri, x) in r.iter_mut().zip(col) {
                            *ri -= delta * x;
                        }
                    }
                    max_delta = max_delta.max(delta.abs() * c.sqrt());
                }
            }
            if max_delta < opts.tol {
                return true;
            }
        }
    }

    /// One lambda: IRLS with step halving, active-set inner loops and a
    /// gradient check over the discarded columns.
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        b0: &mut f64,
        beta: &mut [f64],
        lambda: f64,
        strong: &[bool],
        opts: &PenaltyOptions,
        trace: &mut Vec<f64>,
    ) -> (bool, usize) {
        let d = beta.len();
        let usable: Vec<usize> = (0..d).filter(|&j| !self.stdz.is_excluded(j)).collect();
        let mut include: Vec<bool> = (0..d)
            .map(|j| !self.stdz.is_excluded(j) && (strong[j] || beta[j] != 0.0 || opts.penalty_factor[j] == 0.0))
            .collect();
        let mut eta = self.eta(*b0, beta);
        let mut obj = self.objective(&eta, beta, lambda, opts);
        let mut budget = opts.max_iter;
        let mut irls_steps = 0usize;
        let max_irls = 100usize;
        loop {
            let mut converged_outer = false;
            while irls_steps < max_irls {
                irls_steps += 1;
                let (w, mut r) = self.working(&eta);
                let (b0_old, beta_old) = (*b0, beta.to_vec());
                let set: Vec<usize> = usable.iter().copied().filter(|&j| include[j]).collect();
                // active-set cycling inside the quadratic surrogate
                let full_ok = self.inner_cd(&set, &w, &mut r, b0, beta, lambda, opts, &mut budget);
                let _ = full_ok;
                let mut new_eta = self.eta(*b0, beta);
                let mut new_obj = self.objective(&new_eta, beta, lambda, opts);
                let mut halvings = 0;
                while !(new_obj <= obj + 1e-12 * (1.0 + obj.abs())) && halvings < 30 {
                    halvings += 1;
                    *b0 = 0.5 * (*b0 + b0_old);
                    for (b, o) in beta.iter_mut().zip(&beta_old) {
                        *b = 0.5 * (*b + o);
                    }
                    new_eta = self.eta(*b0, beta);
                    new_obj = self.objective(&new_eta, beta, lambda, opts);
                }
                if !new_obj.is_finite() || new_obj > obj + 1e-12 * (1.0 + obj.abs()) {
                    *b0 = b0_old;
                    beta.copy_from_slice(&beta_old);
                    return (false, irls_steps);
                }
                let change = (*b0 - b0_old)
                    .abs()
                    .max(beta.iter().zip(&beta_old).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                let rel = (obj - new_obj).abs() / (1.0 + new_obj.abs());
                eta = new_eta;
                obj = new_obj;
                if opts.trace {
                    trace.push(obj);
                }
                if change < opts.tol.sqrt() * 1e-2 || rel < opts.tol * 1e-2 {
                    converged_outer = true;
                    break;
                }
                if budget == 0 {
                    break;
                }
            }
            // optimality check over excluded columns
            let grad = self.gradient(&eta);
            let mut violated = false;
            for &j in &usable {
                if include[j] {
                    continue;
                }
                let thr = pen(lambda, opts.penalty_factor[j]) * opts.alpha;
                if grad[j].abs() > thr * (1.0 + 1e-9) + 1e-14 {
                    include[j] = true;
                    violated = true;
                }
            }
            if !violated || budget == 0 || irls_steps >= max_irls {
                return (converged_outer && !violated, irls_steps);
            }
        }
    }
}

fn glm_path(
    x: ArrayView2<f64>,
    y: &[f64],
    spec: &FitSpec,
    monitor: &mut dyn FnMut(&CoefVector) -> bool,
) -> Result<Vec<CoefVector>> {
    let prob = GlmProblem::new(x, y, spec);
    let d = x.ncols();
    let opts = PenaltyOptions::from_spec(spec, d);
    let mut b0 = 0.0;
    if spec.intercept {
        let ybar: f64 = y.iter().zip(&prob.v).map(|(y, v)| y * v).sum();
        b0 = match spec.family {
            Family::Linear => ybar,
            Family::Logistic => {
                let p = ybar.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            }
            Family::LogLinear => ybar.max(1e-10).ln(),
        };
        let obar: f64 = prob.offset.iter().zip(&prob.v).map(|(o, v)| o * v).sum();
        b0 -= obar;
    }
    let mut beta = vec![0.0; d];
    // null model: unpenalized block only
    let none = vec![false; d];
    let mut trace0 = Vec::new();
    prob.solve(&mut b0, &mut beta, f64::INFINITY, &none, &opts, &mut trace0);
    let mut grad = prob.gradient(&prob.eta(b0, &beta));
    let lambdas = match &spec.lambda {
        LambdaPath::Auto { .. } => {
            let a = opts.alpha.max(1e-3);
            let lmax = (0..d)
                .filter(|&j| opts.penalty_factor[j] > 0.0 && !prob.stdz.is_excluded(j))
                .map(|j| grad[j].abs() / (a * opts.penalty_factor[j]))
                .fold(0.0, f64::max);
            resolve_path(&spec.lambda, lmax)
        }
        LambdaPath::Values(_) => resolve_path(&spec.lambda, 0.0),
    };
    let mut out = Vec::with_capacity(lambdas.len());
    let mut prev_lambda = lambdas.first().copied().unwrap_or(0.0);
    for &lambda in &lambdas {
        // sequential strong rule
        let strong: Vec<bool> = (0..d)
            .map(|j| {
                let thr = opts.alpha * (2.0 * lambda - prev_lambda) * opts.penalty_factor[j];
                grad[j].abs() >= thr
            })
            .collect();
        let mut trace = Vec::new();
        let (conv, it) = prob.solve(&mut b0, &mut beta, lambda, &strong, &opts, &mut trace);
        let (ib, bb) = prob.stdz.to_original(b0, &beta);
        let c = CoefVector {
            intercept: if spec.intercept { ib } else { 0.0 },
            betas: Array1::from(bb),
            lambda_used: lambda,
            converged: conv,
            iterations: it,
            trace,
        };
        let keep_going = monitor(&c);
        out.push(c);
        if !keep_going {
            break;
        }
        grad = prob.gradient(&prob.eta(b0, &beta));
        prev_lambda = lambda;
    }
    Ok(out)
}

fn normalized_weights(spec: &FitSpec, n: usize) -> Vec<f64> {
    spec.weights.clone().unwrap_or_else(|| vec![1.0; n])
}

fn residual_response(y: &[f64], offset: Option<&Vec<f64>>) -> Vec<f64> {
    match offset {
        Some(o) => y.iter().zip(o).map(|(y, o)| y - o).collect(),
        None => y.to_vec(),
    }
}

/// Fits the whole lambda path with warm starts, largest lambda first.
pub fn fit_path(design: &DesignMatrix, y: &[f64], spec: &FitSpec) -> Result<Vec<CoefVector>> {
    fit_path_monitored(design, y, spec, &mut |_| true)
}

/// As [`fit_path`], but `monitor` sees each solution in path order and can
/// end the path early by returning `false`.
pub fn fit_path_monitored(
    design: &DesignMatrix,
    y: &[f64],
    spec: &FitSpec,
    monitor: &mut dyn FnMut(&CoefVector) -> bool,
) -> Result<Vec<CoefVector>> {
    let n = design.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} responses for {n} rows", y.len())));
    }
    spec.validate(n, design.ncols())?;
    check_response(spec.family, y)?;
    match spec.family {
        Family::Linear => {
            let v = normalized_weights(spec, n);
            let r = residual_response(y, spec.offset.as_ref());
            let m = GaussianMoments::from_data(design.values().view(), &r, &v);
            let opts = PenaltyOptions::from_spec(spec, design.ncols());
            let lambdas = gaussian_lambda_path(&m, &opts, &spec.lambda)?;
            let mut path = gaussian_path(&m, &opts, &lambdas)?;
            if let Some(stop) = path.iter().position(|c| !monitor(c)) {
                path.truncate(stop + 1);
            }
            Ok(path)
        }
        _ => glm_path(design.values().view(), y, spec, monitor),
    }
}

/// Fits the path and returns the solution at its smallest lambda.
pub fn fit(design: &DesignMatrix, y: &[f64], spec: &FitSpec) -> Result<CoefVector> {
    let mut path = fit_path(design, y, spec)?;
    Ok(path.pop().expect("path is nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvRule {
    #[default]
    Min,
    OneStandardError,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub se_loss: Vec<f64>,
    pub index: usize,
    pub lambda: f64,
}

/// Random fold labels of near-equal size.
pub fn random_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % folds).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    labels
}

pub fn cross_validate_lambda(
    design: &DesignMatrix,
    y: &[f64],
    spec: &FitSpec,
    folds: usize,
    seed: u64,
    rule: CvRule,
) -> Result<CvResult> {
    let n = design.nrows();
    if folds < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    if n < folds {
        return Err(Error::InvalidInput(format!("{n} rows cannot fill {folds} folds")));
    }
    let labels = random_folds(n, folds, seed);
    cross_validate_with_folds(design, y, spec, &labels, rule)
}

fn fold_loss(family: Family, y: &[f64], mu_eta: &[f64], v: &[f64]) -> f64 {
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let s: f64 = y
        .iter()
        .zip(mu_eta)
        .zip(v)
        .map(|((y, eta), w)| match family {
            Family::Linear => w * (y - eta) * (y - eta),
            _ => -2.0 * w * loglik_term(family, *y, *eta),
        })
        .sum();
    s / total
}

/// Cross-validation over caller-supplied fold labels (e.g. grouped by subject).
pub fn cross_validate_with_folds(
    design: &DesignMatrix,
    y: &[f64],
    spec: &FitSpec,
    labels: &[usize],
    rule: CvRule,
) -> Result<CvResult> {
    let n = design.nrows();
    if labels.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch("fold labels or responses vs rows".into()));
    }
    spec.validate(n, design.ncols())?;
    check_response(spec.family, y)?;
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    let v = normalized_weights(spec, n);
    let x = design.values().view();
    let opts = PenaltyOptions::from_spec(spec, design.ncols());
    let mut losses: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut fold_w = Vec::with_capacity(k);
    let lambdas;
    match spec.family {
        Family::Linear => {
            let r = residual_response(y, spec.offset.as_ref());
            let per_fold: Vec<GaussianMoments> = (0..k)
                .map(|f| {
                    let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
                    let xs = x.select(Axis(0), &rows);
                    let rs: Vec<f64> = rows.iter().map(|&i| r[i]).collect();
                    let vs: Vec<f64> = rows.iter().map(|&i| v[i]).collect();
                    GaussianMoments::from_data(xs.view(), &rs, &vs)
                })
                .collect();
            let mut total = per_fold[0].clone();
            for m in &per_fold[1..] {
                total.w += m.w;
                total.sx += &m.sx;
                total.sxx += &m.sxx;
                total.sxr += &m.sxr;
                total.sr += m.sr;
                total.srr += m.srr;
            }
            lambdas = gaussian_lambda_path(&total, &opts, &spec.lambda)?;
            for held in &per_fold {
                fold_w.push(held.w);
                let train = total.minus(held);
                if !(train.w > 0.0) || !(held.w > 0.0) {
                    losses.push(vec![0.0; lambdas.len()]);
                    continue;
                }
                let path = gaussian_path(&train, &opts, &lambdas)?;
                losses.push(path.iter().map(|c| held.squared_error(c.intercept, &c.betas) / held.w).collect());
            }
        }
        _ => {
            let full = glm_path(x, y, spec, &mut |_| true)?;
            lambdas = full.iter().map(|c| c.lambda_used).collect();
            for f in 0..k {
                let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
                let held: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
                let hw: Vec<f64> = held.iter().map(|&i| v[i]).collect();
                fold_w.push(hw.iter().sum());
                let tw: f64 = train.iter().map(|&i| v[i]).sum();
                if held.is_empty() || !(tw > 0.0) {
                    losses.push(vec![0.0; lambdas.len()]);
                    continue;
                }
                let sub = |src: &Option<Vec<f64>>, rows: &[usize]| src.as_ref().map(|s| rows.iter().map(|&i| s[i]).collect::<Vec<_>>());
                let mut tspec = spec.clone();
                tspec.weights = Some(train.iter().map(|&i| v[i]).collect());
                tspec.offset = sub(&spec.offset, &train);
                tspec.lambda = LambdaPath::Values(lambdas.clone());
                tspec.trace = false;
                let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let path = glm_path(x.select(Axis(0), &train).view(), &ty, &tspec, &mut |_| true)?;
                let hx = x.select(Axis(0), &held);
                let hy: Vec<f64> = held.iter().map(|&i| y[i]).collect();
                let ho = sub(&spec.offset, &held);
                losses.push(
                    path.iter()
                        .map(|c| {
                            let mut eta = c.linear_predictor(hx.view());
                            if let Some(o) = &ho {
                                eta.iter_mut().zip(o).for_each(|(e, o)| *e += o);
                            }
                            fold_loss(spec.family, &hy, eta.as_slice().unwrap(), &hw)
                        })
                        .collect(),
                );
            }
        }
    }
    Ok(summarize_cv(lambdas, &losses, &fold_w, rule))
}

fn summarize_cv(lambdas: Vec<f64>, losses: &[Vec<f64>], fold_w: &[f64], rule: CvRule) -> CvResult {
    let k = losses.len();
    let total_w: f64 = fold_w.iter().sum();
    let m = lambdas.len();
    let mut mean_loss = vec![0.0f64; m];
    let mut se_loss = vec![0.0; m];
    for l in 0..m {
        let mean = losses.iter().zip(fold_w).map(|(f, w)| f[l] * w).sum::<f64>() / total_w;
        let var = losses
            .iter()
            .zip(fold_w)
            .map(|(f, w)| w * (f[l] - mean).powi(2))
            .sum::<f64>()
            / total_w;
        mean_loss[l] = mean;
        se_loss[l] = (var / (k as f64 - 1.0)).sqrt();
    }
    let best = (0..m)
        .min_by(|&a, &b| mean_loss[a].total_cmp(&mean_loss[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    let index = match rule {
        CvRule::Min => best,
        CvRule::OneStandardError => {
            let cap = mean_loss[best] + se_loss[best];
            (0..=best).find(|&l| mean_loss[l] <= cap).unwrap_or(best)
        }
    };
    CvResult {
        lambda: lambdas[index],
        lambdas,
        mean_loss,
        se_loss,
        index,
    }
}

/// Lambda by cross-validation over precomputed per-fold moments. All folds
/// walk the path together with warm starts; with `patience` set the walk
/// stops once the mean held-out loss has not improved for that many steps.
pub fn gaussian_cv(
    folds: &[GaussianMoments],
    opts: &PenaltyOptions,
    path: &LambdaPath,
    rule: CvRule,
    patience: Option<usize>,
) -> Result<CvResult> {
    if folds.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    let mut total = folds[0].clone();
    for m in &folds[1..] {
        total.w += m.w;
        total.sx += &m.sx;
        total.sxx += &m.sxx;
        total.sxr += &m.sxr;
        total.sr += m.sr;
        total.srr += m.srr;
    }
    let lambdas = gaussian_lambda_path(&total, opts, path)?;
    let mut probs = Vec::with_capacity(folds.len());
    for held in folds {
        let train = total.minus(held);
        probs.push(if train.w > 0.0 && held.w > 0.0 {
            Some(GaussianStd::new(&train, opts)?)
        } else {
            None
        });
    }
    let d = total.d();
    let mut state: Vec<(Vec<f64>, Vec<f64>)> = probs
        .iter()
        .map(|p| (vec![0.0; d], p.as_ref().map_or(vec![0.0; d], |p| p.b.to_vec())))
        .collect();
    let fold_w: Vec<f64> = folds.iter().map(|m| m.w).collect();
    let total_w: f64 = fold_w.iter().sum();
    let mut losses: Vec<Vec<f64>> = vec![Vec::new(); folds.len()];
    let mut used = Vec::new();
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    for &lambda in &lambdas {
        let mut mean = 0.0;
        for (f, prob) in probs.iter().enumerate() {
            let loss = match prob {
                Some(p) => {
                    let (beta, g) = &mut state[f];
                    p.solve(beta, g, lambda, opts, &mut Vec::new())?;
                    let c = p.coef(beta, lambda, true, 0, Vec::new());
                    folds[f].squared_error(c.intercept, &c.betas) / folds[f].w
                }
                None => 0.0,
            };
            mean += loss * fold_w[f] / total_w;
            losses[f].push(loss);
        }
        used.push(lambda);
        if mean < best - 1e-12 * best.abs().max(1e-300) {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
        }
        if patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(summarize_cv(used, &losses, &fold_w, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn design(x: Array2<f64>) -> DesignMatrix {
        DesignMatrix::new(x, None).unwrap()
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        for x in [-2.5, 0.0, 1e-9, 7.0] {
            assert_eq!(soft_threshold(x, 0.0), x);
        }
    }

    #[test]
    fn two_point_ols() {
        let d = design(array![[0.0], [1.0]]);
        let y = [0.0, 1.0];
        let c = fit(&d, &y, &FitSpec::new(Family::Linear, 1.0).with_lambda(0.0)).unwrap();
        assert_abs_diff_eq!(c.intercept, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(c.betas[0], 1.0, epsilon = 1e-10);

        let mut spec = FitSpec::new(Family::Linear, 1.0).with_lambda(0.0);
        spec.offset = Some(y.to_vec());
        let c = fit(&d, &y, &spec).unwrap();
        assert_abs_diff_eq!(c.intercept, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.betas[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_error() {
        let d = design(array![[0.0], [1.0]]);
        let mut spec = FitSpec::new(Family::Linear, 1.0);
        spec.weights = Some(vec![0.0, 0.0]);
        assert!(matches!(fit(&d, &[0.0, 1.0], &spec), Err(Error::ZeroWeights)));
    }

    #[test]
    fn logistic_constant_offset_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen::<f64>());
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let mut spec = FitSpec::new(Family::Logistic, 1.0).with_lambda(1e6);
        spec.offset = Some(vec![0.7; n]);
        spec.weights = Some(w.clone());
        let c = fit(&design(x), &y, &spec).unwrap();
        let ybar = y.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / w.iter().sum::<f64>();
        assert!(c.betas.iter().all(|b| *b == 0.0));
        assert_abs_diff_eq!(c.intercept, (ybar / (1.0 - ybar)).ln() - 0.7, epsilon = 1e-7);
    }

    #[test]
    fn standardization_round_trip() {
        let s = Standardization {
            mean: vec![0.3, -2.0, 5.0],
            scale: vec![2.0, 0.25, 4.0],
            centered: true,
        };
        let (b0, b) = s.to_standardized(1.5, &[0.5, -1.0, 2.0]);
        let (c0, c) = s.to_original(b0, &b);
        assert_eq!(c0, 1.5);
        assert_eq!(c, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn exact_line_picks_smallest_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 60;
        let x = Array2::from_shape_fn((n, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[[i, 0]] - x[[i, 2]]).collect();
        let cv = cross_validate_lambda(&design(x), &y, &FitSpec::new(Family::Linear, 1.0), 5, 1, CvRule::Min).unwrap();
        assert_eq!(cv.index, cv.lambdas.len() - 1);
    }

    #[test]
    fn leave_one_out_small() {
        let x = array![[0.1, 1.0], [0.4, -1.0], [0.9, 0.3], [1.5, 0.2], [2.0, -0.7]];
        let y = [0.2, 0.1, 1.1, 1.4, 2.3];
        let cv = cross_validate_lambda(&design(x), &y, &FitSpec::new(Family::Linear, 1.0), 5, 0, CvRule::Min).unwrap();
        assert!(cv.lambdas.contains(&cv.lambda));
    }

    #[test]
    fn glm_cv_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
        let y: Vec<f64> = (0..n).map(|i| f64::from(rng.gen_bool(if x[[i, 0]] > 0.5 { 0.8 } else { 0.2 }))).collect();
        let cv = cross_validate_lambda(&design(x), &y, &FitSpec::new(Family::Logistic, 1.0), 5, 2, CvRule::Min).unwrap();
        assert!(cv.index > 0);
        assert!(cv.mean_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn loglinear_recovers_rate() {
        let n = 300;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| (i % 2) as f64);
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { [1.0, 3.0][i % 4 / 2] } else { 1.0 }).collect();
        let c = fit(&design(x), &y, &FitSpec::new(Family::LogLinear, 1.0).with_lambda(0.0)).unwrap();
        assert_abs_diff_eq!(c.intercept, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(c.betas[0], 2.0f64.ln(), epsilon = 1e-6);
    }
}
