//! Cross-fitted nuisance estimation by local survival stacking.
//!
//! Every hazard-type model is a penalized logistic regression on stacked
//! person-period rows. Rows are grouped into cells (interval by arm); cell
//! indicators are unpenalized and covariate terms are penalized. A cell with
//! no events, or with nothing but events, is removed from the regression and
//! predicted exactly 0 or 1, which keeps the covariate-free case identical to
//! the product-limit estimator.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{expand_person_period, PersonPeriodTable, SurvivalDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::solver::{fit_path_monitored, CoefVector, DesignMatrix, Family, FitSpec, LambdaPath};

/// One member of the stacking library.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub alpha: f64,
    /// Adds pairwise products of the covariates.
    pub pairwise: bool,
}

pub fn default_library() -> Vec<Candidate> {
    let mut lib = Vec::new();
    for pairwise in [false, true] {
        for alpha in [0.0, 0.5, 1.0] {
            lib.push(Candidate { alpha, pairwise });
        }
    }
    lib
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub k_folds: usize,
    pub seed: u64,
    pub library: Vec<Candidate>,
    /// Subject fraction held out by the discrete selector.
    pub holdout_fraction: f64,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    /// Treatment-by-covariate products in the hazard models.
    pub arm_interactions: bool,
    pub h_min: f64,
    pub g_min: f64,
    pub pi_min: f64,
    pub weight_max: f64,
    /// Each evaluation interval is split into this many model intervals.
    pub refine: usize,
    /// Extra model points `t_1 / 2^j`, `j = 1..=lead_in`, below the first
    /// evaluation time.
    pub lead_in: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Path points without held-out improvement before a candidate's path
    /// is cut short.
    pub patience: usize,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            k_folds: 10,
            seed: 0,
            library: default_library(),
            holdout_fraction: 0.2,
            n_lambda: 30,
            lambda_min_ratio: 1e-3,
            arm_interactions: true,
            h_min: 1e-4,
            g_min: 0.05,
            pi_min: 0.01,
            weight_max: 50.0,
            refine: 1,
            lead_in: 3,
            tol: 1e-7,
            max_iter: 2_000,
            patience: 3,
        }
    }
}

impl NuisanceConfig {
    fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::InvalidInput("k_folds must be at least 2".into()));
        }
        if self.refine == 0 {
            return Err(Error::InvalidInput("refine must be at least 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidInput("holdout_fraction must lie in (0,1)".into()));
        }
        if !(self.h_min > 0.0 && self.h_min < 0.5 && self.g_min > 0.0 && self.g_min < 1.0) {
            return Err(Error::InvalidInput("clipping constants out of range".into()));
        }
        if !(self.pi_min > 0.0 && self.pi_min < 0.5 && self.weight_max >= 1.0) {
            return Err(Error::InvalidInput("clipping constants out of range".into()));
        }
        Ok(())
    }
}

/// Model grid used by the hazard models: the evaluation grid, optionally
/// refined. Returns the grid and the model index of every evaluation point.
pub fn refine_grid(eval: &TimeGrid, refine: usize, lead_in: usize) -> Result<(TimeGrid, Vec<usize>)> {
    let refine = refine.max(1);
    let first = eval.points()[0];
    let mut points: Vec<f64> = (1..=lead_in).rev().map(|j| first / 2f64.powi(j as i32)).collect();
    let lead_left = points.last().copied().unwrap_or(0.0);
    let mut index = Vec::with_capacity(eval.len());
    for k in 0..eval.len() {
        let left = if k == 0 { lead_left } else { eval.points()[k - 1] };
        let right = eval.points()[k];
        for m in 1..refine {
            points.push(left + (right - left) * m as f64 / refine as f64);
        }
        points.push(right);
        index.push(points.len() - 1);
    }
    Ok((TimeGrid::new(points)?, index))
}

/// Assigns `n` subjects to `k` folds of near-equal size.
pub fn assign_folds(n: usize, k_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if k_folds < 2 {
        return Err(Error::InvalidInput("k_folds must be at least 2".into()));
    }
    if n < k_folds {
        return Err(Error::InvalidInput(format!("{n} subjects cannot fill {k_folds} folds")));
    }
    let mut folds: Vec<usize> = (0..n).map(|i| i % k_folds).collect();
    folds.shuffle(&mut stream(seed, &[0xF01D]));
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellStatus {
    Empty,
    Zero,
    One,
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub arm_interactions: bool,
    pub pairwise: bool,
}

impl FeatureSet {
    fn width(&self, p: usize) -> usize {
        p + if self.arm_interactions { p } else { 0 } + if self.pairwise { p * (p.saturating_sub(1)) / 2 } else { 0 }
    }

    fn write(&self, z: ArrayView1<f64>, a: u8, out: &mut Vec<f64>) {
        out.clear();
        out.extend(z.iter());
        if self.arm_interactions {
            let af = f64::from(a);
            out.extend(z.iter().map(|v| v * af));
        }
        if self.pairwise {
            let p = z.len();
            for j in 0..p {
                for l in j + 1..p {
                    out.push(z[j] * z[l]);
                }
            }
        }
    }
}

/// A stacked binary-outcome row.
#[derive(Debug, Clone, Copy)]
struct StackRow {
    subject: usize,
    cell: usize,
    arm: u8,
    y: f64,
    w: f64,
}

/// Fitted cell-structured logistic model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellModel {
    pub status: Vec<CellStatus>,
    pub intercept: f64,
    pub cell_effect: Vec<f64>,
    pub beta: Vec<f64>,
    pub features: FeatureSet,
    pub candidate: Option<Candidate>,
    pub lambda: f64,
}

impl CellModel {
    fn exact(status: Vec<CellStatus>, features: FeatureSet, p: usize) -> Self {
        let n = status.len();
        Self {
            status,
            intercept: 0.0,
            cell_effect: vec![0.0; n],
            beta: vec![0.0; features.width(p)],
            features,
            candidate: None,
            lambda: 0.0,
        }
    }

    /// Covariate part of the linear predictor.
    pub fn score(&self, z: ArrayView1<f64>, a: u8, buf: &mut Vec<f64>) -> f64 {
        if self.beta.iter().all(|b| *b == 0.0) {
            return 0.0;
        }
        self.features.write(z, a, buf);
        buf.iter().zip(&self.beta).map(|(x, b)| x * b).sum()
    }

    /// Raw (unclipped) probability for a cell given the covariate score.
    pub fn prob(&self, cell: usize, score: f64) -> f64 {
        match self.status[cell] {
            CellStatus::Empty | CellStatus::Zero => 0.0,
            CellStatus::One => 1.0,
            CellStatus::Fitted => {
                let eta = self.intercept + self.cell_effect[cell] + score;
                1.0 / (1.0 + (-eta).exp())
            }
        }
    }

    pub fn empty_cells(&self) -> usize {
        self.status.iter().filter(|s| **s == CellStatus::Empty).count()
    }
}

fn cell_status(rows: &[StackRow], n_cells: usize) -> Vec<CellStatus> {
    let mut w = vec![0.0; n_cells];
    let mut wy = vec![0.0; n_cells];
    let mut w1my = vec![0.0; n_cells];
    for r in rows.iter().filter(|r| r.w > 0.0) {
        w[r.cell] += r.w;
        wy[r.cell] += r.w * r.y;
        w1my[r.cell] += r.w * (1.0 - r.y);
    }
    (0..n_cells)
        .map(|c| {
            if w[c] == 0.0 {
                CellStatus::Empty
            } else if wy[c] == 0.0 {
                CellStatus::Zero
            } else if w1my[c] == 0.0 {
                CellStatus::One
            } else {
                CellStatus::Fitted
            }
        })
        .collect()
}

struct Stacker<'a> {
    base: &'a Array2<f64>,
    n_cells: usize,
    arm_interactions: bool,
    cfg: &'a NuisanceConfig,
}

impl Stacker<'_> {
    fn features(&self, pairwise: bool) -> FeatureSet {
        FeatureSet {
            arm_interactions: self.arm_interactions,
            pairwise,
        }
    }

    /// Path of models for one candidate on the given rows.
    fn fit_path(
        &self,
        rows: &[StackRow],
        cand: Option<Candidate>,
        lambda: LambdaPath,
        monitor: &mut dyn FnMut(&CellModel) -> bool,
    ) -> Result<Vec<CellModel>> {
        let p = self.base.ncols();
        let fs = self.features(cand.map_or(false, |c| c.pairwise));
        let status = cell_status(rows, self.n_cells);
        let fitted: Vec<usize> = (0..self.n_cells).filter(|&c| status[c] == CellStatus::Fitted).collect();
        if fitted.is_empty() {
            let m = CellModel::exact(status, fs, p);
            monitor(&m);
            return Ok(vec![m]);
        }
        // the reference is the cell carrying most IRLS weight `w·p(1-p)`, so
        // that the intercept is well determined and coordinate descent does
        // not zig-zag between collinear indicators
        let mut cell_n = vec![0.0; self.n_cells];
        let mut cell_y = vec![0.0; self.n_cells];
        for r in rows.iter().filter(|r| r.w > 0.0) {
            cell_n[r.cell] += r.w;
            cell_y[r.cell] += r.w * r.y;
        }
        let cell_w: Vec<f64> = (0..self.n_cells)
            .map(|c| {
                let p = if cell_n[c] > 0.0 { cell_y[c] / cell_n[c] } else { 0.0 };
                cell_n[c] * p * (1.0 - p)
            })
            .collect();
        let reference = *fitted
            .iter()
            .max_by(|&&a, &&b| cell_w[a].total_cmp(&cell_w[b]).then(b.cmp(&a)))
            .expect("nonempty");
        let mut col_of = vec![None; self.n_cells];
        for (j, &c) in fitted.iter().filter(|&&c| c != reference).enumerate() {
            col_of[c] = Some(j);
        }
        let n_cell_cols = fitted.len() - 1;
        let width = if cand.is_some() { fs.width(p) } else { 0 };
        let kept: Vec<&StackRow> = rows
            .iter()
            .filter(|r| r.w > 0.0 && status[r.cell] == CellStatus::Fitted)
            .collect();
        let d = n_cell_cols + width;
        let mut x = Array2::zeros((kept.len(), d.max(1)));
        let mut buf = Vec::with_capacity(width);
        for (i, r) in kept.iter().enumerate() {
            if let Some(j) = col_of[r.cell] {
                x[[i, j]] = 1.0;
            }
            if width > 0 {
                fs.write(self.base.row(r.subject), r.arm, &mut buf);
                for (j, v) in buf.iter().enumerate() {
                    x[[i, n_cell_cols + j]] = *v;
                }
            }
        }
        let y: Vec<f64> = kept.iter().map(|r| r.y).collect();
        let w: Vec<f64> = kept.iter().map(|r| r.w).collect();
        let mut spec = FitSpec::new(Family::Logistic, cand.map_or(1.0, |c| c.alpha));
        spec.weights = Some(w);
        spec.unpenalized = (0..n_cell_cols).collect();
        spec.lambda = if width == 0 { LambdaPath::Values(vec![0.0]) } else { lambda };
        spec.tol = self.cfg.tol;
        spec.max_iter = self.cfg.max_iter;
        let design = DesignMatrix::new(x, None)?;
        let mut models = Vec::new();
        fit_path_monitored(&design, &y, &spec, &mut |c| {
            let m = self.unpack(c, &status, &col_of, n_cell_cols, width, fs, cand);
            let go = monitor(&m);
            models.push(m);
            go
        })?;
        Ok(models)
    }

    #[allow(clippy::too_many_arguments)]
    fn unpack(
        &self,
        c: &CoefVector,
        status: &[CellStatus],
        col_of: &[Option<usize>],
        n_cell_cols: usize,
        width: usize,
        fs: FeatureSet,
        cand: Option<Candidate>,
    ) -> CellModel {
        let p = self.base.ncols();
        let cell_effect = col_of.iter().map(|j| j.map_or(0.0, |j| c.betas[j])).collect();
        let mut beta = vec![0.0; fs.width(p)];
        for j in 0..width {
            beta[j] = c.betas[n_cell_cols + j];
        }
        CellModel {
            status: status.to_vec(),
            intercept: c.intercept,
            cell_effect,
            beta,
            features: fs,
            candidate: cand,
            lambda: c.lambda_used,
        }
    }

    fn predict_row(model: &CellModel, base: &Array2<f64>, r: &StackRow, buf: &mut Vec<f64>) -> f64 {
        let s = model.score(base.row(r.subject), r.arm, buf);
        model.prob(r.cell, s)
    }

    /// Discrete selection over the library by held-out log-loss, then a refit
    /// on all rows down to the selected lambda.
    fn fit_selected(&self, rows: &[StackRow], seed: u64) -> Result<CellModel> {
        let p = self.base.ncols();
        if p == 0 || self.cfg.library.is_empty() {
            let mut path = self.fit_path(rows, None, LambdaPath::Values(vec![0.0]), &mut |_| true)?;
            return Ok(path.pop().expect("nonempty path"));
        }
        let auto = LambdaPath::Auto {
            n_lambda: self.cfg.n_lambda,
            min_ratio: self.cfg.lambda_min_ratio,
        };
        let mut subjects: Vec<usize> = rows.iter().map(|r| r.subject).collect();
        subjects.sort_unstable();
        subjects.dedup();
        subjects.shuffle(&mut stream(seed, &[0x5E1]));
        let n_hold = ((subjects.len() as f64) * self.cfg.holdout_fraction).ceil() as usize;
        let mut held = vec![false; self.base.nrows()];
        for &s in &subjects[..n_hold.min(subjects.len().saturating_sub(1))] {
            held[s] = true;
        }
        let train: Vec<StackRow> = rows.iter().filter(|r| !held[r.subject]).copied().collect();
        let test: Vec<StackRow> = rows.iter().filter(|r| held[r.subject] && r.w > 0.0).copied().collect();
        let mut buf = Vec::new();
        let mut best: Option<(f64, Candidate, Vec<f64>)> = None;
        for &cand in &self.cfg.library {
            let mut lambdas = Vec::new();
            let mut cand_best = f64::INFINITY;
            let mut stale = 0;
            self.fit_path(&train, Some(cand), auto.clone(), &mut |model| {
                lambdas.push(model.lambda);
                let mut loss = 0.0;
                let mut tw = 0.0;
                for r in &test {
                    let pr = Self::predict_row(model, self.base, r, &mut buf).clamp(1e-6, 1.0 - 1e-6);
                    loss -= r.w * (r.y * pr.ln() + (1.0 - r.y) * (1.0 - pr).ln());
                    tw += r.w;
                }
                let loss = if tw > 0.0 { loss / tw } else { 0.0 };
                if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
                    best = Some((loss, cand, lambdas.clone()));
                }
                // held-out loss along a path is close to unimodal; stop once
                // it has not improved for a few steps
                if loss < cand_best - 1e-9 {
                    cand_best = loss;
                    stale = 0;
                } else {
                    stale += 1;
                }
                stale < self.cfg.patience
            })?;
        }
        let (_, cand, lambdas) = best.expect("library is nonempty");
        let mut path = self.fit_path(rows, Some(cand), LambdaPath::Values(lambdas), &mut |_| true)?;
        Ok(path.pop().expect("nonempty path"))
    }
}

/// Event-hazard predictor over model intervals and arms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HazardPredictor {
    pub model: CellModel,
    pub n_intervals: usize,
}

impl HazardPredictor {
    /// Raw hazards for every interval under arm `a`.
    pub fn hazards(&self, z: ArrayView1<f64>, a: u8) -> Vec<f64> {
        let mut buf = Vec::new();
        let s = self.model.score(z, a, &mut buf);
        (0..self.n_intervals).map(|k| self.model.prob(2 * k + usize::from(a), s)).collect()
    }
}

fn event_rows(table: &PersonPeriodTable, ds: &SurvivalDataset, censoring: bool) -> Vec<StackRow> {
    table
        .at_risk_rows()
        .map(|r| {
            let a = ds.records()[r.subject].a;
            StackRow {
                subject: r.subject,
                cell: 2 * r.k + usize::from(a),
                arm: a,
                y: f64::from(u8::from(if censoring { r.censored_here } else { r.event_here })),
                w: 1.0,
            }
        })
        .collect()
}

fn fit_hazard(
    ds: &SurvivalDataset,
    table: &PersonPeriodTable,
    base: &Array2<f64>,
    cfg: &NuisanceConfig,
    seed: u64,
    censoring: bool,
) -> Result<HazardPredictor> {
    let k = table.num_intervals();
    let stacker = Stacker {
        base,
        n_cells: 2 * k,
        arm_interactions: cfg.arm_interactions,
        cfg,
    };
    let rows = event_rows(table, ds, censoring);
    let model = stacker.fit_selected(&rows, seed)?;
    let empty = model.empty_cells();
    if empty > 0 {
        log::warn!(
            "{} model: {empty} interval-arm cells have no subjects at risk; hazard set to 0",
            if censoring { "censoring" } else { "event" }
        );
    }
    Ok(HazardPredictor { model, n_intervals: k })
}

/// Fits the event-hazard model on a dataset's at-risk person-periods.
pub fn fit_event_model(ds: &SurvivalDataset, grid: &TimeGrid, cfg: &NuisanceConfig) -> Result<HazardPredictor> {
    let table = expand_person_period(ds, grid);
    fit_hazard(ds, &table, &ds.covariates(), cfg, derive_seed(cfg.seed, &[1]), false)
}

/// Censoring-hazard model; entry time enters as an extra covariate.
pub fn fit_censoring_model(ds: &SurvivalDataset, grid: &TimeGrid, cfg: &NuisanceConfig) -> Result<HazardPredictor> {
    let table = expand_person_period(ds, grid);
    fit_hazard(ds, &table, &censoring_covariates(ds), cfg, derive_seed(cfg.seed, &[2]), true)
}

fn censoring_covariates(ds: &SurvivalDataset) -> Array2<f64> {
    let p = ds.p();
    Array2::from_shape_fn((ds.n(), p + 1), |(i, j)| {
        let r = &ds.records()[i];
        if j < p {
            r.z[j]
        } else {
            r.entry
        }
    })
}

fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Survival at the entry time by step interpolation on the model grid.
fn survival_at(hazards: &[f64], grid: &TimeGrid, t: f64, h_min: f64) -> f64 {
    match grid.last_point_at_or_before(t) {
        None => 1.0,
        Some(j) => hazards[..=j].iter().map(|h| 1.0 - clip(*h, h_min, 1.0 - h_min)).product(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IpwReport {
    pub weights: Vec<f64>,
    pub clipped: usize,
}

/// `1 / Ŝ(Q_i | A_i, Z_i)` capped at `weight_max`.
pub fn fit_truncation_ipw(
    ds: &SurvivalDataset,
    grid: &TimeGrid,
    event: &HazardPredictor,
    cfg: &NuisanceConfig,
) -> IpwReport {
    let z = ds.covariates();
    let mut clipped = 0;
    let weights = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.entry == 0.0 {
                return 1.0;
            }
            let s = survival_at(&event.hazards(z.row(i), r.a), grid, r.entry, cfg.h_min);
            let w = 1.0 / s;
            if w > cfg.weight_max {
                clipped += 1;
                cfg.weight_max
            } else {
                w
            }
        })
        .collect();
    if clipped > 0 {
        log::warn!("{clipped} truncation weights capped at {}", cfg.weight_max);
    }
    IpwReport { weights, clipped }
}

/// Discrete entry-time model over grid intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryModel {
    pub model: CellModel,
    pub n_intervals: usize,
}

impl EntryModel {
    pub fn hazards(&self, z: ArrayView1<f64>, a: u8) -> Vec<f64> {
        let mut buf = Vec::new();
        let s = self.model.score(z, a, &mut buf);
        (0..self.n_intervals).map(|q| self.model.prob(2 * q + usize::from(a), s)).collect()
    }
}

/// Weighted entry-hazard regression: the response is entering the risk set
/// at interval `q`; subjects stay in the risk set until they enter.
pub fn fit_entry_model(ds: &SurvivalDataset, grid: &TimeGrid, ipw: &[f64], cfg: &NuisanceConfig) -> Result<EntryModel> {
    let base = ds.covariates();
    let k = grid.len();
    let mut rows = Vec::new();
    for (i, r) in ds.records().iter().enumerate() {
        let e = grid.entry_interval(r.entry);
        for q in 0..=e.min(k - 1) {
            rows.push(StackRow {
                subject: i,
                cell: 2 * q + usize::from(r.a),
                arm: r.a,
                y: f64::from(u8::from(q == e)),
                w: ipw[i],
            });
        }
    }
    let stacker = Stacker {
        base: &base,
        n_cells: 2 * k,
        arm_interactions: cfg.arm_interactions,
        cfg,
    };
    let model = stacker.fit_selected(&rows, derive_seed(cfg.seed, &[3]))?;
    Ok(EntryModel { model, n_intervals: k })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    pub model: CellModel,
    pub pi_min: f64,
}

impl PropensityModel {
    pub fn predict(&self, z: ArrayView1<f64>) -> f64 {
        let mut buf = Vec::new();
        let s = self.model.score(z, 0, &mut buf);
        clip(self.model.prob(0, s), self.pi_min, 1.0 - self.pi_min)
    }
}

/// Weighted penalized logistic regression of treatment on covariates.
pub fn fit_propensity(ds: &SurvivalDataset, ipw: &[f64], cfg: &NuisanceConfig) -> Result<PropensityModel> {
    let treated = ds.records().iter().filter(|r| r.a == 1).count();
    if treated == 0 || treated == ds.n() {
        return Err(Error::Positivity("only one treatment arm is present".into()));
    }
    let base = ds.covariates();
    let rows: Vec<StackRow> = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| StackRow {
            subject: i,
            cell: 0,
            arm: 0,
            y: f64::from(r.a),
            w: ipw[i],
        })
        .collect();
    let stacker = Stacker {
        base: &base,
        n_cells: 1,
        arm_interactions: false,
        cfg,
    };
    let model = stacker.fit_selected(&rows, derive_seed(cfg.seed, &[4]))?;
    Ok(PropensityModel {
        model,
        pi_min: cfg.pi_min,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisanceDiagnostics {
    pub k_folds_used: usize,
    pub selected: Vec<String>,
    pub ipw_clipped: usize,
    pub empty_event_cells: usize,
    pub propensity_clipped: usize,
}

/// Cross-fitted nuisance predictions for every subject on the model grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBundle {
    pub ids: Vec<String>,
    /// Grid the hazards live on.
    pub grid: TimeGrid,
    pub eval_grid: TimeGrid,
    /// Model-grid index of each evaluation point.
    pub eval_index: Vec<usize>,
    /// `n x K x 2` clipped event hazards.
    pub hazard: Array3<f64>,
    /// `n x K x 2` survival from the clipped hazards.
    pub survival: Array3<f64>,
    /// `n x K` censoring survival `Ĝ(t_k- | A_i, Q_i, Z_i)`.
    pub censoring: Array2<f64>,
    /// `n x K` entry hazards `λ_H(q | A_i, Z_i)`.
    pub entry_hazard: Array2<f64>,
    /// `n x K` entry distribution `H(q | A_i, Z_i)`.
    pub entry_cdf: Array2<f64>,
    /// `n x K` sums `Σ_{q≤k} Ĝ(k- | A_i, q, Z_i) dĤ(q | A_i, Z_i)`.
    pub denominator: Array2<f64>,
    pub iptw_entry: Vec<f64>,
    pub propensity: Vec<f64>,
    pub folds: Vec<usize>,
    pub config: NuisanceConfig,
    pub diagnostics: NuisanceDiagnostics,
}

impl NuisanceBundle {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.grid.len()
    }

    /// Survival at the evaluation points, `n x |eval| x 2`.
    pub fn eval_survival(&self) -> Array3<f64> {
        let (n, m) = (self.n(), self.eval_index.len());
        Array3::from_shape_fn((n, m, 2), |(i, j, a)| self.survival[[i, self.eval_index[j], a]])
    }
}

/// Product-limit survival from hazards; each row of the output is `∏_{j≤k}(1-h_j)`.
pub fn cumulative_survival(hazards: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect()
}

struct FoldModels {
    event: HazardPredictor,
    censoring: HazardPredictor,
    entry: Option<EntryModel>,
    propensity: PropensityModel,
}

fn fit_fold(train: &SurvivalDataset, grid: &TimeGrid, cfg: &NuisanceConfig, truncation: bool, seed: u64) -> Result<(FoldModels, usize)> {
    let table = expand_person_period(train, grid);
    let event = fit_hazard(train, &table, &train.covariates(), cfg, derive_seed(seed, &[1]), false)?;
    let censoring = fit_hazard(train, &table, &censoring_covariates(train), cfg, derive_seed(seed, &[2]), true)?;
    let (entry, ipw, clipped) = if truncation {
        let rep = fit_truncation_ipw(train, grid, &event, cfg);
        let mut sub_cfg = cfg.clone();
        sub_cfg.seed = seed;
        let entry = fit_entry_model(train, grid, &rep.weights, &sub_cfg)?;
        (Some(entry), rep.weights, rep.clipped)
    } else {
        (None, vec![1.0; train.n()], 0)
    };
    let mut sub_cfg = cfg.clone();
    sub_cfg.seed = seed;
    let propensity = fit_propensity(train, &ipw, &sub_cfg)?;
    Ok((
        FoldModels {
            event,
            censoring,
            entry,
            propensity,
        },
        clipped,
    ))
}

fn describe(m: &CellModel) -> String {
    match m.candidate {
        Some(c) => format!("alpha={},pairwise={},lambda={:.3e}", c.alpha, c.pairwise, m.lambda),
        None => "cells_only".to_string(),
    }
}

struct SubjectPrediction {
    hazard: Vec<[f64; 2]>,
    censoring: Vec<f64>,
    entry_hazard: Vec<f64>,
    entry_cdf: Vec<f64>,
    denominator: Vec<f64>,
    ipw: f64,
    pi: f64,
}

fn predict_subject(
    models: &FoldModels,
    grid: &TimeGrid,
    z: ArrayView1<f64>,
    a: u8,
    entry: f64,
    cfg: &NuisanceConfig,
) -> SubjectPrediction {
    let k = grid.len();
    let h0 = models.event.hazards(z, 0);
    let h1 = models.event.hazards(z, 1);
    let hazard: Vec<[f64; 2]> = (0..k)
        .map(|j| {
            [
                clip(h0[j], cfg.h_min, 1.0 - cfg.h_min),
                clip(h1[j], cfg.h_min, 1.0 - cfg.h_min),
            ]
        })
        .collect();
    let own = if a == 1 { &h1 } else { &h0 };
    let ipw = if entry == 0.0 {
        1.0
    } else {
        (1.0 / survival_at(own, grid, entry, cfg.h_min)).min(cfg.weight_max)
    };

    // censoring survival from the interval after entry
    let mut zc: Vec<f64> = z.to_vec();
    zc.push(entry);
    let cens_for = |q_value: f64, zc: &mut Vec<f64>| {
        *zc.last_mut().unwrap() = q_value;
        models.censoring.hazards(ArrayView1::from(&zc[..]), a)
    };
    let g_from = |hc: &[f64], start: usize| -> Vec<f64> {
        let mut out = vec![1.0; k];
        let mut s = 1.0;
        for kk in 0..k {
            if kk > start {
                s *= 1.0 - hc[kk - 1];
            }
            out[kk] = if kk >= start { s.max(cfg.g_min) } else { 1.0 };
        }
        out
    };
    let e_obs = grid.entry_interval(entry);
    let hc_obs = cens_for(entry, &mut zc);
    let censoring = g_from(&hc_obs, e_obs);

    let (entry_hazard, entry_cdf, denominator) = match &models.entry {
        None => {
            let mut eh = vec![0.0; k];
            eh[0] = 1.0;
            (eh, vec![1.0; k], censoring.clone())
        }
        Some(em) => {
            let lh: Vec<f64> = em.hazards(z, a).into_iter().map(|h| clip(h, cfg.h_min, 1.0)).collect();
            let mut surv = 1.0;
            let mut mass = vec![0.0; k];
            let mut cdf = vec![0.0; k];
            for q in 0..k {
                mass[q] = lh[q] * surv;
                surv *= 1.0 - lh[q];
                cdf[q] = 1.0 - surv;
            }
            let mut denom = vec![0.0; k];
            for q in 0..k {
                if mass[q] == 0.0 {
                    continue;
                }
                let hc = cens_for(grid.left(q), &mut zc);
                let g = g_from(&hc, q);
                for kk in q..k {
                    denom[kk] += g[kk] * mass[q];
                }
            }
            (lh, cdf, denom)
        }
    };
    SubjectPrediction {
        hazard,
        censoring,
        entry_hazard,
        entry_cdf,
        denominator,
        ipw,
        pi: models.propensity.predict(z),
    }
}

fn choose_folds(ds: &SurvivalDataset, k_start: usize, seed: u64) -> Result<Vec<usize>> {
    let mut k = k_start;
    loop {
        let folds = assign_folds(ds.n(), k, seed)?;
        let ok = (0..k).all(|f| {
            let train = ds.records().iter().zip(&folds).filter(|(_, g)| **g != f);
            let mut events = 0;
            let mut arms = [0usize; 2];
            for (r, _) in train {
                events += usize::from(r.event);
                arms[usize::from(r.a)] += 1;
            }
            events > 0 && arms[0] > 0 && arms[1] > 0
        });
        if ok {
            return Ok(folds);
        }
        if k == 2 {
            return Err(Error::InvalidInput("no fold split leaves events and both arms in every training set".into()));
        }
        log::warn!("a training fold lost all events or an arm; retrying with {} folds", k - 1);
        k -= 1;
    }
}

fn cross_fit_impl(ds: &SurvivalDataset, eval_grid: &TimeGrid, cfg: &NuisanceConfig, truncation: bool) -> Result<NuisanceBundle> {
    cfg.validate()?;
    let (grid, eval_index) = refine_grid(eval_grid, cfg.refine, cfg.lead_in)?;
    let folds = choose_folds(ds, cfg.k_folds, cfg.seed)?;
    let k_folds = folds.iter().max().map_or(0, |m| m + 1);
    let n = ds.n();
    let k = grid.len();
    let z = ds.covariates();

    let per_fold: Vec<Result<(Vec<usize>, Vec<SubjectPrediction>, Vec<String>, usize, usize)>> = (0..k_folds)
        .map(|f| {
            let train_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let test_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let train = ds.subset(&train_idx)?;
            let (models, clipped) = fit_fold(&train, &grid, cfg, truncation, derive_seed(cfg.seed, &[0xC0, f as u64]))?;
            let preds = test_idx
                .iter()
                .map(|&i| {
                    let r = &ds.records()[i];
                    predict_subject(&models, &grid, z.row(i), r.a, r.entry, cfg)
                })
                .collect();
            let mut sel = vec![
                format!("fold{f}:event:{}", describe(&models.event.model)),
                format!("fold{f}:censoring:{}", describe(&models.censoring.model)),
                format!("fold{f}:propensity:{}", describe(&models.propensity.model)),
            ];
            if let Some(e) = &models.entry {
                sel.push(format!("fold{f}:entry:{}", describe(&e.model)));
            }
            Ok((test_idx, preds, sel, clipped, models.event.model.empty_cells()))
        })
        .collect();

    let mut hazard = Array3::zeros((n, k, 2));
    let mut censoring = Array2::zeros((n, k));
    let mut entry_hazard = Array2::zeros((n, k));
    let mut entry_cdf = Array2::zeros((n, k));
    let mut denominator = Array2::zeros((n, k));
    let mut iptw_entry = vec![1.0; n];
    let mut propensity = vec![0.5; n];
    let mut diagnostics = NuisanceDiagnostics {
        k_folds_used: k_folds,
        ..Default::default()
    };
    for res in per_fold {
        let (idx, preds, sel, clipped, empty) = res?;
        diagnostics.selected.extend(sel);
        diagnostics.ipw_clipped += clipped;
        diagnostics.empty_event_cells += empty;
        for (&i, p) in idx.iter().zip(preds) {
            for kk in 0..k {
                hazard[[i, kk, 0]] = p.hazard[kk][0];
                hazard[[i, kk, 1]] = p.hazard[kk][1];
                censoring[[i, kk]] = p.censoring[kk];
                entry_hazard[[i, kk]] = p.entry_hazard[kk];
                entry_cdf[[i, kk]] = p.entry_cdf[kk];
                denominator[[i, kk]] = p.denominator[kk];
            }
            iptw_entry[i] = p.ipw;
            propensity[i] = p.pi;
        }
    }
    diagnostics.propensity_clipped = propensity
        .iter()
        .filter(|p| **p <= cfg.pi_min || **p >= 1.0 - cfg.pi_min)
        .count();
    let survival = survival_from_hazard(&hazard);
    Ok(NuisanceBundle {
        ids: ds.records().iter().map(|r| r.id.clone()).collect(),
        grid,
        eval_grid: eval_grid.clone(),
        eval_index,
        hazard,
        survival,
        censoring,
        entry_hazard,
        entry_cdf,
        denominator,
        iptw_entry,
        propensity,
        folds,
        config: cfg.clone(),
        diagnostics,
    })
}

pub fn survival_from_hazard(hazard: &Array3<f64>) -> Array3<f64> {
    let (n, k, arms) = hazard.dim();
    let mut s = Array3::zeros((n, k, arms));
    for i in 0..n {
        for a in 0..arms {
            let mut acc = 1.0;
            for kk in 0..k {
                acc *= 1.0 - hazard[[i, kk, a]];
                s[[i, kk, a]] = acc;
            }
        }
    }
    s
}

/// Full left-truncation pipeline: event, censoring, truncation weights,
/// entry distribution and propensity, all cross-fitted.
pub fn cross_fit(ds: &SurvivalDataset, eval_grid: &TimeGrid, cfg: &NuisanceConfig) -> Result<NuisanceBundle> {
    cross_fit_impl(ds, eval_grid, cfg, true)
}

/// Right-censoring shortcut: no truncation weights and no entry model; an
/// error if any subject has delayed entry.
pub fn cross_fit_rc(ds: &SurvivalDataset, eval_grid: &TimeGrid, cfg: &NuisanceConfig) -> Result<NuisanceBundle> {
    if !ds.is_right_censored_only() {
        return Err(Error::InvalidInput("right-censoring path requires entry = 0 for every subject".into()));
    }
    cross_fit_impl(ds, eval_grid, cfg, false)
}

// ---------------------------------------------------------------------------
// Bundle export/import.

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    ids: Vec<String>,
    grid: TimeGrid,
    eval_grid: TimeGrid,
    eval_index: Vec<usize>,
    config: NuisanceConfig,
    diagnostics: NuisanceDiagnostics,
}

fn write_matrix(path: &Path, ids: &[String], m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "k", "value"])?;
    for (i, id) in ids.iter().enumerate() {
        for k in 0..m.ncols() {
            w.write_record([id.as_str(), &k.to_string(), &m[[i, k]].to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_cube(path: &Path, ids: &[String], m: &Array3<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "k", "a", "value"])?;
    for (i, id) in ids.iter().enumerate() {
        for k in 0..m.dim().1 {
            for a in 0..2 {
                w.write_record([id.as_str(), &k.to_string(), &a.to_string(), &m[[i, k, a]].to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|x| x.map_err(Error::from)).collect()
}

fn parse_f(s: &str, line: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse {
        row: line,
        message: format!("`{s}` is not numeric"),
    })
}

fn parse_u(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        row: line,
        message: format!("`{s}` is not an index"),
    })
}

fn read_matrix(path: &Path, index: &BTreeMap<&str, usize>, n: usize, k: usize) -> Result<Array2<f64>> {
    let mut m = Array2::from_elem((n, k), f64::NAN);
    for (line, row) in read_rows(path)?.iter().enumerate() {
        let i = *index
            .get(&row[0])
            .ok_or_else(|| Error::Misaligned(vec![row[0].to_string()]))?;
        let kk = parse_u(&row[1], line + 2)?;
        if kk >= k {
            return Err(Error::GridMismatch(format!("interval {kk} in {}", path.display())));
        }
        m[[i, kk]] = parse_f(&row[2], line + 2)?;
    }
    if m.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!("{} is incomplete", path.display())));
    }
    Ok(m)
}

fn read_cube(path: &Path, index: &BTreeMap<&str, usize>, n: usize, k: usize) -> Result<Array3<f64>> {
    let mut m = Array3::from_elem((n, k, 2), f64::NAN);
    for (line, row) in read_rows(path)?.iter().enumerate() {
        let i = *index
            .get(&row[0])
            .ok_or_else(|| Error::Misaligned(vec![row[0].to_string()]))?;
        let kk = parse_u(&row[1], line + 2)?;
        let a = parse_u(&row[2], line + 2)?;
        if kk >= k || a > 1 {
            return Err(Error::GridMismatch(format!("cell ({kk},{a}) in {}", path.display())));
        }
        m[[i, kk, a]] = parse_f(&row[3], line + 2)?;
    }
    if m.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!("{} is incomplete", path.display())));
    }
    Ok(m)
}

impl NuisanceBundle {
    /// Writes one CSV per surface plus `manifest.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BundleManifest {
            ids: self.ids.clone(),
            grid: self.grid.clone(),
            eval_grid: self.eval_grid.clone(),
            eval_index: self.eval_index.clone(),
            config: self.config.clone(),
            diagnostics: self.diagnostics.clone(),
        };
        let mpath = dir.join("manifest.json");
        let f = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        serde_json::to_writer_pretty(f, &manifest)?;
        write_cube(&dir.join("hazard.csv"), &self.ids, &self.hazard)?;
        write_matrix(&dir.join("censoring.csv"), &self.ids, &self.censoring)?;
        write_matrix(&dir.join("entry_hazard.csv"), &self.ids, &self.entry_hazard)?;
        write_matrix(&dir.join("entry_cdf.csv"), &self.ids, &self.entry_cdf)?;
        write_matrix(&dir.join("denominator.csv"), &self.ids, &self.denominator)?;
        let ppath = dir.join("subjects.csv");
        let mut w = csv::Writer::from_path(&ppath)?;
        w.write_record(["id", "propensity", "iptw_entry", "fold"])?;
        for i in 0..self.n() {
            w.write_record([
                self.ids[i].as_str(),
                &self.propensity[i].to_string(),
                &self.iptw_entry[i].to_string(),
                &self.folds[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&ppath, e))
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let f = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: BundleManifest = serde_json::from_reader(f)?;
        let n = m.ids.len();
        let k = m.grid.len();
        let index: BTreeMap<&str, usize> = m.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let hazard = read_cube(&dir.join("hazard.csv"), &index, n, k)?;
        let censoring = read_matrix(&dir.join("censoring.csv"), &index, n, k)?;
        let entry_hazard = read_matrix(&dir.join("entry_hazard.csv"), &index, n, k)?;
        let entry_cdf = read_matrix(&dir.join("entry_cdf.csv"), &index, n, k)?;
        let denominator = read_matrix(&dir.join("denominator.csv"), &index, n, k)?;
        let mut propensity = vec![f64::NAN; n];
        let mut iptw_entry = vec![f64::NAN; n];
        let mut folds = vec![0; n];
        for (line, row) in read_rows(&dir.join("subjects.csv"))?.iter().enumerate() {
            let i = *index
                .get(&row[0])
                .ok_or_else(|| Error::Misaligned(vec![row[0].to_string()]))?;
            propensity[i] = parse_f(&row[1], line + 2)?;
            iptw_entry[i] = parse_f(&row[2], line + 2)?;
            folds[i] = parse_u(&row[3], line + 2)?;
        }
        if propensity.iter().chain(&iptw_entry).any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("subjects.csv is incomplete".into()));
        }
        let survival = survival_from_hazard(&hazard);
        Ok(Self {
            ids: m.ids,
            grid: m.grid,
            eval_grid: m.eval_grid,
            eval_index: m.eval_index,
            hazard,
            survival,
            censoring,
            entry_hazard,
            entry_cdf,
            denominator,
            iptw_entry,
            propensity,
            folds,
            config: m.config,
            diagnostics: m.diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalRecord;
    use approx::assert_abs_diff_eq;

    fn rec(id: usize, a: u8, time: f64, event: bool, entry: f64, z: Vec<f64>) -> SurvivalRecord {
        SurvivalRecord {
            id: id.to_string(),
            z,
            a,
            time_obs: time,
            event,
            entry,
        }
    }

    #[test]
    fn fold_sizes() {
        let f = assign_folds(10, 5, 3).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 2);
        }
        let f = assign_folds(11, 5, 3).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_eq!(assign_folds(11, 5, 3).unwrap(), f);
        assert!(assign_folds(3, 5, 0).is_err());
    }

    #[test]
    fn km_hand_example() {
        let ds = SurvivalDataset::new(
            vec![
                rec(0, 0, 1.0, true, 0.0, vec![]),
                rec(1, 0, 2.0, false, 0.0, vec![]),
                rec(2, 0, 3.0, true, 0.0, vec![]),
            ],
            vec![],
            Some(vec![]),
        );
        // no covariates means an empty heterogeneity index, which is rejected;
        // build with a dummy constant covariate instead
        assert!(ds.is_err());
        let ds = SurvivalDataset::new(
            vec![
                rec(0, 0, 1.0, true, 0.0, vec![0.0]),
                rec(1, 0, 2.0, false, 0.0, vec![0.0]),
                rec(2, 0, 3.0, true, 0.0, vec![0.0]),
            ],
            vec!["c".into()],
            None,
        )
        .unwrap();
        let grid = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let m = fit_event_model(&ds, &grid, &NuisanceConfig::default()).unwrap();
        let h = m.hazards(ds.covariates().row(0), 0);
        assert_abs_diff_eq!(h[0], 1.0 / 3.0, epsilon = 1e-9);
        assert_eq!(h[1], 0.0);
        assert_eq!(h[2], 1.0);
        let s = cumulative_survival(&h);
        assert_abs_diff_eq!(s[0], 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s[1], 2.0 / 3.0, epsilon = 1e-9);
        assert_eq!(s[2], 0.0);
        // counterfactual arm has no data: empty cells, finite hazard
        assert!(m.hazards(ds.covariates().row(0), 1).iter().all(|h| h.is_finite()));
    }

    #[test]
    fn uniform_entry_two_intervals() {
        let grid = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        // entry 0 enters interval 1, entry 1.0 enters interval 2
        let records = (0..200)
            .map(|i| rec(i, (i % 2) as u8, 2.5, false, if i % 4 < 2 { 0.0 } else { 1.0 }, vec![0.3]))
            .collect();
        let ds = SurvivalDataset::new(records, vec!["c".into()], None).unwrap();
        let em = fit_entry_model(&ds, &grid, &vec![1.0; 200], &NuisanceConfig::default()).unwrap();
        let h = em.hazards(ds.covariates().row(0), 0);
        assert_abs_diff_eq!(h[0], 0.5, epsilon = 1e-9);
        assert_eq!(h[1], 1.0);
    }

    #[test]
    fn ipw_examples() {
        let grid = TimeGrid::new(vec![1.0, 2.0]).unwrap();
        let ds = SurvivalDataset::new(
            vec![
                rec(0, 0, 1.5, true, 0.0, vec![0.0]),
                rec(1, 0, 1.7, true, 1.2, vec![0.0]),
                rec(2, 0, 0.5, true, 0.0, vec![0.0]),
                rec(3, 0, 2.0, false, 0.0, vec![0.0]),
            ],
            vec!["c".into()],
            None,
        )
        .unwrap();
        let ev = fit_event_model(&ds, &grid, &NuisanceConfig::default()).unwrap();
        let rep = fit_truncation_ipw(&ds, &grid, &ev, &NuisanceConfig::default());
        // the late entrant is not at risk in (0,1]: three at risk, one event
        assert_eq!(rep.weights[0], 1.0);
        assert_abs_diff_eq!(rep.weights[1], 1.5, epsilon = 1e-8);
    }

    #[test]
    fn single_arm_is_positivity_error() {
        let ds = SurvivalDataset::new(
            (0..10).map(|i| rec(i, 1, 1.0, true, 0.0, vec![i as f64])).collect(),
            vec!["c".into()],
            None,
        )
        .unwrap();
        assert!(matches!(fit_propensity(&ds, &[1.0; 10], &NuisanceConfig::default()), Err(Error::Positivity(_))));
    }

    #[test]
    fn refined_grid_keeps_eval_points() {
        let g = TimeGrid::new(vec![0.1, 0.5, 1.0]).unwrap();
        let (m, idx) = refine_grid(&g, 2, 2).unwrap();
        assert_eq!(idx.len(), 3);
        for (j, &i) in idx.iter().enumerate() {
            assert_eq!(m.points()[i], g.points()[j]);
        }
        assert_abs_diff_eq!(m.points()[0], 0.025, epsilon = 1e-15);
        let (same, idx) = refine_grid(&g, 1, 0).unwrap();
        assert_eq!(same, g);
        assert_eq!(idx, vec![0, 1, 2]);
    }
}
