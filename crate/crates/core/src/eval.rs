//! RMSE scoring against Monte-Carlo truth and the replicated simulation
//! study driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cate::{self, mean_total_variation, CateEstimate, LearnerConfig};
use crate::data::{SurvivalDataset, TimeGrid};
use crate::error::{Error, Result};
use crate::nuisance::{cross_fit, cross_fit_rc, NuisanceBundle, NuisanceConfig};
use crate::rng::derive_seed;
use crate::sieve::{build_basis, DegreeRule};
use crate::simulation::{draw_test_set, simulate, true_cate, Dgp, DgpSpec, Truncation, TruthCurves};
use crate::targeting::{target, FluctuationState, PseudoOutcomeMatrix, TargetingConfig};

/// Per grid time `sqrt(mean_i (θ̂ - θ)²)`.
pub fn rmse_by_time(est: &CateEstimate, truth: &TruthCurves) -> Result<Vec<f64>> {
    if est.grid != truth.grid {
        return Err(Error::GridMismatch(format!(
            "estimate grid {:?} vs truth grid {:?}",
            est.grid.points(),
            truth.grid.points()
        )));
    }
    if est.theta.dim() != truth.theta.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} estimates vs {:?} truth values",
            est.theta.dim(),
            truth.theta.dim()
        )));
    }
    let m = est.theta.nrows() as f64;
    Ok((0..est.grid.len())
        .map(|j| {
            let ss: f64 = est.theta.column(j).iter().zip(truth.theta.column(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            (ss / m).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_time: Vec<f64>,
    pub overall: f64,
    pub replications: usize,
}

/// Mean over replications per time, then the mean of those over time.
pub fn aggregate(per_rep: &[Vec<f64>]) -> Result<Aggregate> {
    let first = per_rep.first().ok_or(Error::InvalidInput("nothing to aggregate".into()))?;
    let k = first.len();
    if k == 0 || per_rep.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch("replications disagree in grid length".into()));
    }
    let r = per_rep.len() as f64;
    let per_time: Vec<f64> = (0..k).map(|j| per_rep.iter().map(|v| v[j]).sum::<f64>() / r).collect();
    let overall = per_time.iter().sum::<f64>() / k as f64;
    Ok(Aggregate {
        per_time,
        overall,
        replications: per_rep.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    SurvItmle,
    TLearner,
    Naive,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Self::SurvItmle => "surv_itmle",
            Self::TLearner => "t_learner",
            Self::Naive => "naive",
        }
    }
}

/// Everything between a dataset and its curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub nuisance: NuisanceConfig,
    pub targeting: TargetingConfig,
    pub sieve: DegreeRule,
    pub cate: LearnerConfig,
}

pub struct PipelineFit {
    pub bundle: NuisanceBundle,
    pub state: FluctuationState,
    pub pseudo: PseudoOutcomeMatrix,
}

/// Cross-fitting and targeting; data without delayed entry take the
/// right-censoring path.
pub fn run_pipeline(ds: &SurvivalDataset, grid: &TimeGrid, cfg: &PipelineConfig) -> Result<PipelineFit> {
    let bundle = if ds.is_right_censored_only() {
        cross_fit_rc(ds, grid, &cfg.nuisance)?
    } else {
        cross_fit(ds, grid, &cfg.nuisance)?
    };
    let basis = build_basis(ds, cfg.sieve)?;
    let (state, pseudo) = target(ds, &bundle, &basis, &cfg.targeting)?;
    Ok(PipelineFit { bundle, state, pseudo })
}

/// Curves of the requested estimators at query rows. `z` holds all
/// covariates; the second-stage learners use the heterogeneity subset.
pub fn estimate_curves(
    ds: &SurvivalDataset,
    fit: &PipelineFit,
    cfg: &PipelineConfig,
    estimators: &[Estimator],
    z: ArrayView2<f64>,
) -> Result<Vec<CateEstimate>> {
    let x = z.select(ndarray::Axis(1), ds.heterogeneity_index());
    estimators
        .iter()
        .map(|e| match e {
            Estimator::SurvItmle => cate::surv_itmle_curves(&fit.pseudo, ds, &cfg.cate, x.view()),
            Estimator::Naive => cate::naive_per_time(&fit.pseudo, ds, &cfg.cate, x.view()),
            Estimator::TLearner => cate::t_learner_predict(ds, &fit.bundle.eval_grid, &cfg.nuisance, z),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub dgp: Dgp,
    pub truncation: Truncation,
    pub n: usize,
}

impl CellSpec {
    pub fn label(&self) -> String {
        format!("dgp{}_{}_n{}", self.dgp.id(), self.truncation.label(), self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub cells: Vec<CellSpec>,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    /// Overrides every design's own evaluation grid when set.
    pub grid: Option<Vec<f64>>,
    pub test_size: usize,
    pub mc_reps: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// 0 uses every available core.
    pub workers: usize,
    /// Write per-replication pseudo-outcomes and curves.
    pub persist_artifacts: bool,
    /// Example test curves per estimator in curves.csv.
    pub example_curves: usize,
    pub pipeline: PipelineConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            cells: vec![CellSpec {
                dgp: Dgp::One,
                truncation: Truncation::Low,
                n: 800,
            }],
            replications: 20,
            estimators: vec![Estimator::SurvItmle, Estimator::TLearner, Estimator::Naive],
            grid: None,
            test_size: 1000,
            mc_reps: 100_000,
            seed: 2024,
            output_dir: None,
            workers: 0,
            persist_artifacts: false,
            example_curves: 5,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("estimator list is empty".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::InvalidInput("no study cells".into()));
        }
        if self.test_size == 0 {
            return Err(Error::InvalidInput("test set is empty".into()));
        }
        if let Some(g) = &self.grid {
            TimeGrid::new(g.clone())?;
        }
        Ok(())
    }

    pub fn grid_for(&self, dgp: Dgp) -> Result<TimeGrid> {
        match &self.grid {
            Some(g) => TimeGrid::new(g.clone()),
            None => Ok(dgp.eval_grid()),
        }
    }

    /// Hash of the fields that determine results (not where or how fast
    /// they are written).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = 0;
        c.persist_artifacts = false;
        c.example_curves = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn replication_seed(&self, cell: &CellSpec, rep: usize) -> u64 {
        derive_seed(
            self.seed,
            &[u64::from(cell.dgp.id()), cell.truncation as u64, cell.n as u64, rep as u64],
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn matrix_hash(m: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 8 + 16);
    bytes.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Scores of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorScore {
    pub rmse: Vec<f64>,
    /// Mean over test rows of `θ̂(t)`.
    pub mean_theta: Vec<f64>,
    pub total_variation: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub cell: CellSpec,
    pub replication: usize,
    pub seed: u64,
    pub config_hash: String,
    pub test_hash: String,
    /// `None` when the replication failed.
    pub scores: Option<BTreeMap<Estimator, EstimatorScore>>,
    pub error: Option<String>,
    pub drift: Vec<f64>,
    pub drop_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: CellSpec,
    pub estimator: Estimator,
    pub grid: Vec<f64>,
    pub aggregate: Aggregate,
    pub mean_theta: Vec<f64>,
    pub mean_total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config_hash: String,
    pub records: Vec<ReplicationRecord>,
    pub summaries: Vec<CellSummary>,
    pub failures: usize,
    pub seconds: f64,
}

impl StudyResult {
    pub fn summary(&self, cell: &CellSpec, est: Estimator) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| &s.cell == cell && s.estimator == est)
    }

    /// Successful replication scores of one estimator, in replication order.
    pub fn scores(&self, cell: &CellSpec, est: Estimator) -> Vec<&EstimatorScore> {
        self.records
            .iter()
            .filter(|r| &r.cell == cell)
            .filter_map(|r| r.scores.as_ref().and_then(|s| s.get(&est)))
            .collect()
    }

    pub fn has_failures(&self) -> bool {
        self.failures > 0
    }
}

fn score(est: &CateEstimate, truth: &TruthCurves) -> Result<EstimatorScore> {
    let m = est.theta.nrows() as f64;
    Ok(EstimatorScore {
        rmse: rmse_by_time(est, truth)?,
        mean_theta: (0..est.grid.len()).map(|j| est.theta.column(j).sum() / m).collect(),
        total_variation: mean_total_variation(est),
        clamped: est.clamped,
    })
}

struct CellContext<'a> {
    cfg: &'a StudyConfig,
    cell: CellSpec,
    grid: TimeGrid,
    test: &'a Array2<f64>,
    truth: &'a TruthCurves,
    test_hash: &'a str,
    config_hash: &'a str,
}

fn run_replication(ctx: &CellContext, rep: usize, artifacts: Option<&Path>) -> ReplicationRecord {
    let start = Instant::now();
    let seed = ctx.cfg.replication_seed(&ctx.cell, rep);
    let mut record = ReplicationRecord {
        cell: ctx.cell,
        replication: rep,
        seed,
        config_hash: ctx.config_hash.to_string(),
        test_hash: ctx.test_hash.to_string(),
        scores: None,
        error: None,
        drift: Vec::new(),
        drop_rate: 0.0,
        seconds: 0.0,
    };
    let outcome = (|| -> Result<(BTreeMap<Estimator, EstimatorScore>, Vec<CateEstimate>)> {
        let sim = simulate(&DgpSpec {
            dgp: ctx.cell.dgp,
            truncation: ctx.cell.truncation,
            n: ctx.cell.n,
            seed,
        })?;
        record.drop_rate = sim.report.drop_rate;
        let fit = run_pipeline(&sim.dataset, &ctx.grid, &ctx.cfg.pipeline)?;
        record.drift = fit.state.drift();
        let curves = estimate_curves(&sim.dataset, &fit, &ctx.cfg.pipeline, &ctx.cfg.estimators, ctx.test.view())?;
        if let Some(dir) = artifacts {
            fit.pseudo.write_csv(&dir.join(format!("pseudo_rep{rep}.csv")))?;
            cate::write_curves(&dir.join(format!("curves_rep{rep}.csv")), &curves)?;
        }
        let mut scores = BTreeMap::new();
        for (e, c) in ctx.cfg.estimators.iter().zip(&curves) {
            scores.insert(*e, score(c, ctx.truth)?);
        }
        Ok((scores, curves))
    })();
    match outcome {
        Ok((s, _)) => record.scores = Some(s),
        Err(e) => {
            log::error!("{} replication {rep} failed: {e}", ctx.cell.label());
            record.error = Some(e.to_string());
        }
    }
    record.seconds = start.elapsed().as_secs_f64();
    record
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_record(path: &Path) -> Option<ReplicationRecord> {
    let s = fs::read_to_string(path).ok()?;
    serde_json::from_str(&s).ok()
}

fn load_or_compute_truth(cfg: &StudyConfig, dgp: Dgp, test: &Array2<f64>, dir: Option<&Path>) -> Result<TruthCurves> {
    let grid = cfg.grid_for(dgp)?;
    let key = sha256_hex(
        format!("{}:{}:{:?}:{}:{}", dgp.id(), matrix_hash(test), grid.points(), cfg.mc_reps, cfg.seed).as_bytes(),
    );
    let cache = dir.map(|d| d.join("truth").join(format!("dgp{}_{}.json", dgp.id(), &key[..16])));
    if let Some(p) = &cache {
        if let Ok(s) = fs::read_to_string(p) {
            if let Ok(t) = serde_json::from_str::<TruthCurves>(&s) {
                return Ok(t);
            }
        }
    }
    log::info!("computing truth for design {} ({} rows, {} draws)", dgp.id(), test.nrows(), cfg.mc_reps);
    let truth = true_cate(dgp, test, &grid, cfg.mc_reps, derive_seed(cfg.seed, &[0x7E57, u64::from(dgp.id())]))?;
    if let Some(p) = &cache {
        let parent = p.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        write_json(p, &truth)?;
        truth.write_csv(&parent.join(format!("dgp{}.csv", dgp.id())), None)?;
    }
    Ok(truth)
}

fn summarize(cfg: &StudyConfig, records: &[ReplicationRecord]) -> Result<Vec<CellSummary>> {
    let mut out = Vec::new();
    for cell in &cfg.cells {
        let grid = cfg.grid_for(cell.dgp)?;
        for &est in &cfg.estimators {
            let scores: Vec<&EstimatorScore> = records
                .iter()
                .filter(|r| &r.cell == cell)
                .filter_map(|r| r.scores.as_ref().and_then(|s| s.get(&est)))
                .collect();
            if scores.is_empty() {
                continue;
            }
            let rmse: Vec<Vec<f64>> = scores.iter().map(|s| s.rmse.clone()).collect();
            let means: Vec<Vec<f64>> = scores.iter().map(|s| s.mean_theta.clone()).collect();
            let r = scores.len() as f64;
            out.push(CellSummary {
                cell: *cell,
                estimator: est,
                grid: grid.points().to_vec(),
                aggregate: aggregate(&rmse)?,
                mean_theta: aggregate(&means)?.per_time,
                mean_total_variation: scores.iter().map(|s| s.total_variation).sum::<f64>() / r,
            });
        }
    }
    Ok(out)
}

/// Runs every cell and replication, reusing per-replication files already
/// present in the output directory for the same configuration.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let start = Instant::now();
    let config_hash = cfg.hash();
    let out = cfg.output_dir.as_deref();
    if let Some(d) = out {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let test = draw_test_set(cfg.test_size, derive_seed(cfg.seed, &[0x7E57]));
    let test_hash = matrix_hash(&test);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;

    let mut records = Vec::new();
    let mut examples: Vec<(CellSpec, CateEstimate)> = Vec::new();
    for cell in &cfg.cells {
        let truth = load_or_compute_truth(cfg, cell.dgp, &test, out)?;
        let ctx = CellContext {
            cfg,
            cell: *cell,
            grid: cfg.grid_for(cell.dgp)?,
            test: &test,
            truth: &truth,
            test_hash: &test_hash,
            config_hash: &config_hash,
        };
        let cell_dir = out.map(|d| d.join("replications").join(cell.label()));
        if let Some(d) = &cell_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let cell_records: Vec<ReplicationRecord> = pool.install(|| {
            (0..cfg.replications)
                .into_par_iter()
                .map(|rep| {
                    let path = cell_dir.as_ref().map(|d| d.join(format!("rep{rep}.json")));
                    if let Some(prev) = path.as_deref().and_then(read_record) {
                        if prev.config_hash == config_hash && prev.scores.is_some() {
                            assert_eq!(prev.test_hash, test_hash, "fixed test set changed between runs");
                            return prev;
                        }
                    }
                    let artifacts = if cfg.persist_artifacts { cell_dir.as_deref() } else { None };
                    let rec = run_replication(&ctx, rep, artifacts);
                    if let Some(p) = &path {
                        if let Err(e) = write_json(p, &rec) {
                            log::error!("could not persist {}: {e}", p.display());
                        }
                    }
                    log::info!("{} replication {rep} done in {:.1}s", cell.label(), rec.seconds);
                    rec
                })
                .collect()
        });
        if cfg.example_curves > 0 && out.is_some() {
            examples.extend(example_curves(cfg, cell, &ctx)?);
        }
        records.extend(cell_records);
    }
    let failures = records.iter().filter(|r| r.scores.is_none()).count();
    let result = StudyResult {
        config_hash,
        summaries: summarize(cfg, &records)?,
        records,
        failures,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = out {
        write_outputs(d, cfg, &result, &examples, &test_hash)?;
    }
    Ok(result)
}

/// Curves for the first few test rows from replication 0, refit on demand
/// so resumed studies emit them too; the truth rides along as its own
/// estimator label.
fn example_curves(cfg: &StudyConfig, cell: &CellSpec, ctx: &CellContext) -> Result<Vec<(CellSpec, CateEstimate)>> {
    let m = cfg.example_curves.min(ctx.test.nrows());
    let rows: Vec<usize> = (0..m).collect();
    let z = ctx.test.select(ndarray::Axis(0), &rows);
    let ids: Vec<String> = (1..=m).map(|i| format!("q{i}")).collect();
    let mut out = vec![(
        *cell,
        CateEstimate {
            query_ids: ids.clone(),
            grid: ctx.grid.clone(),
            theta: ctx.truth.theta.select(ndarray::Axis(0), &rows),
            estimator: "truth".into(),
            clamped: 0,
            config: String::new(),
        },
    )];
    let run = || -> Result<Vec<CateEstimate>> {
        let sim = simulate(&DgpSpec {
            dgp: cell.dgp,
            truncation: cell.truncation,
            n: cell.n,
            seed: cfg.replication_seed(cell, 0),
        })?;
        let fit = run_pipeline(&sim.dataset, &ctx.grid, &cfg.pipeline)?;
        estimate_curves(&sim.dataset, &fit, &cfg.pipeline, &cfg.estimators, z.view())
    };
    match run() {
        Ok(curves) => {
            for c in curves {
                out.push((*cell, c.with_ids(ids.clone())?));
            }
        }
        Err(e) => log::warn!("example curves for {} skipped: {e}", cell.label()),
    }
    Ok(out)
}

fn write_outputs(
    dir: &Path,
    cfg: &StudyConfig,
    result: &StudyResult,
    examples: &[(CellSpec, CateEstimate)],
    test_hash: &str,
) -> Result<()> {
    let path = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["estimator", "dgp", "n", "truncation", "t", "mean_rmse"])?;
    for s in &result.summaries {
        for (t, r) in s.grid.iter().zip(&s.aggregate.per_time) {
            w.write_record([
                s.estimator.label().to_string(),
                s.cell.dgp.id().to_string(),
                s.cell.n.to_string(),
                s.cell.truncation.label().to_string(),
                t.to_string(),
                r.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("overall.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "estimator",
        "dgp",
        "n",
        "truncation",
        "overall_mean_rmse",
        "mean_total_variation",
        "replications",
        "failures",
    ])?;
    for s in &result.summaries {
        let failed = result.records.iter().filter(|r| r.cell == s.cell && r.scores.is_none()).count();
        w.write_record([
            s.estimator.label().to_string(),
            s.cell.dgp.id().to_string(),
            s.cell.n.to_string(),
            s.cell.truncation.label().to_string(),
            s.aggregate.overall.to_string(),
            s.mean_total_variation.to_string(),
            s.aggregate.replications.to_string(),
            failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("replications.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["estimator", "dgp", "n", "truncation", "replication", "t", "rmse"])?;
    for r in &result.records {
        let Some(scores) = &r.scores else { continue };
        let grid = cfg.grid_for(r.cell.dgp)?;
        for (e, s) in scores {
            for (t, v) in grid.points().iter().zip(&s.rmse) {
                w.write_record([
                    e.label().to_string(),
                    r.cell.dgp.id().to_string(),
                    r.cell.n.to_string(),
                    r.cell.truncation.label().to_string(),
                    r.replication.to_string(),
                    t.to_string(),
                    v.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["dgp", "n", "truncation", "query_id", "t", "theta_hat", "estimator"])?;
    for (cell, e) in examples {
        for (i, id) in e.query_ids.iter().enumerate() {
            for (j, t) in e.grid.points().iter().enumerate() {
                w.write_record([
                    cell.dgp.id().to_string(),
                    cell.n.to_string(),
                    cell.truncation.label().to_string(),
                    id.clone(),
                    t.to_string(),
                    e.theta[[i, j]].to_string(),
                    e.estimator.clone(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for cell in &cfg.cells {
        let series: Vec<(String, Vec<f64>)> = result
            .summaries
            .iter()
            .filter(|s| &s.cell == cell)
            .map(|s| (s.estimator.label().to_string(), s.aggregate.per_time.clone()))
            .collect();
        if series.is_empty() {
            continue;
        }
        let grid = cfg.grid_for(cell.dgp)?;
        let svg = line_chart(&format!("Mean RMSE by time, {}", cell.label()), "t", grid.points(), &series);
        let p = dir.join(format!("rmse_{}.svg", cell.label()));
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;

        let ex: Vec<&CateEstimate> = examples.iter().filter(|(c, _)| c == cell).map(|(_, e)| e).collect();
        if let Some(first) = ex.first() {
            let series: Vec<(String, Vec<f64>)> = ex
                .iter()
                .map(|e| (format!("{} {}", e.estimator, first.query_ids[0]), e.theta.row(0).to_vec()))
                .collect();
            let svg = line_chart(&format!("Example curves, {}", cell.label()), "t", grid.points(), &series);
            let p = dir.join(format!("curves_{}.svg", cell.label()));
            fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        }
    }

    #[derive(Serialize)]
    struct Manifest<'a> {
        config: &'a StudyConfig,
        config_hash: &'a str,
        test_set_hash: &'a str,
        replications: usize,
        failures: usize,
        seconds: f64,
        version: &'a str,
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            config: cfg,
            config_hash: &result.config_hash,
            test_set_hash: test_hash,
            replications: result.records.len(),
            failures: result.failures,
            seconds: result.seconds,
            version: env!("CARGO_PKG_VERSION"),
        },
    )
}

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#444444"];

/// Minimal static SVG line chart.
pub fn line_chart(title: &str, x_label: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 150.0, 40.0, 50.0);
    let xmin = x.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let xmax = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (mut ymin, mut ymax) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !ymin.is_finite() {
        (ymin, ymax) = (0.0, 1.0);
    }
    ymin = ymin.min(0.0);
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |v: f64| left + (v - xmin) / xspan * (w - left - right);
    let py = |v: f64| h - bottom - (v - ymin) / (ymax - ymin) * (h - top - bottom);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="22" font-size="14">{}</text>"#, left, xml_escape(title));
    let (x0, x1, y0, y1) = (px(xmin), px(xmax), py(ymin), py(ymax));
    let _ = write!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = write!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = ymin + (ymax - ymin) * f64::from(i) / 4.0;
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            py(v) + 4.0,
            v
        );
    }
    for &t in x {
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(t),
            h - bottom + 16.0,
            t
        );
    }
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    for (i, (name, v)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(v)
            .filter(|(_, y)| y.is_finite())
            .map(|(t, y)| format!("{:.2},{:.2}", px(*t), py(*y)))
            .collect();
        let _ = write!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 18.0 * i as f64;
        let _ = write!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 35.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads long curves `query_id, t, theta_hat, estimator`, one estimate per
/// estimator label in order of first appearance.
pub fn read_curves(path: &Path) -> Result<Vec<CateEstimate>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut data: BTreeMap<String, (Vec<String>, Vec<f64>, BTreeMap<(String, u64), f64>)> = BTreeMap::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).ok_or(Error::Parse { row, message: "short row".into() });
        let id = get(0)?.to_string();
        let t: f64 = get(1)?.parse().map_err(|_| Error::Parse { row, message: "bad t".into() })?;
        let v: f64 = get(2)?.parse().map_err(|_| Error::Parse { row, message: "bad theta_hat".into() })?;
        let est = get(3)?.to_string();
        if !data.contains_key(&est) {
            order.push(est.clone());
        }
        let e = data.entry(est).or_default();
        if !e.0.contains(&id) {
            e.0.push(id.clone());
        }
        if !e.1.contains(&t) {
            e.1.push(t);
        }
        e.2.insert((id, t.to_bits()), v);
    }
    order
        .into_iter()
        .map(|est| {
            let (ids, times, vals) = data.remove(&est).expect("label recorded");
            let grid = TimeGrid::new(times.clone())?;
            let mut theta = Array2::zeros((ids.len(), times.len()));
            for (i, id) in ids.iter().enumerate() {
                for (j, t) in times.iter().enumerate() {
                    theta[[i, j]] = *vals
                        .get(&(id.clone(), t.to_bits()))
                        .ok_or_else(|| Error::InvalidInput(format!("{est}: missing value for {id} at t={t}")))?;
                }
            }
            Ok(CateEstimate {
                query_ids: ids,
                grid,
                theta,
                estimator: est,
                clamped: 0,
                config: String::new(),
            })
        })
        .collect()
}

/// Reads truth curves `query_id, t, theta_true, mc_se` with their row ids.
pub fn read_truth(path: &Path) -> Result<(Vec<String>, TruthCurves)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut ids: Vec<String> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    let mut vals: BTreeMap<(String, u64), (f64, f64)> = BTreeMap::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { row, message: format!("bad column {i}") })
        };
        let id = rec.get(0).ok_or(Error::Parse { row, message: "short row".into() })?.to_string();
        let t = num(1)?;
        if !ids.contains(&id) {
            ids.push(id.clone());
        }
        if !times.contains(&t) {
            times.push(t);
        }
        vals.insert((id, t.to_bits()), (num(2)?, num(3)?));
    }
    let grid = TimeGrid::new(times.clone())?;
    let mut theta = Array2::zeros((ids.len(), times.len()));
    let mut se = Array2::zeros((ids.len(), times.len()));
    for (i, id) in ids.iter().enumerate() {
        for (j, t) in times.iter().enumerate() {
            let (v, s) = vals
                .get(&(id.clone(), t.to_bits()))
                .ok_or_else(|| Error::InvalidInput(format!("truth missing {id} at t={t}")))?;
            theta[[i, j]] = *v;
            se[[i, j]] = *s;
        }
    }
    Ok((
        ids,
        TruthCurves {
            grid,
            theta,
            mc_se: se,
            mc_reps: 0,
        },
    ))
}

/// Reorders an estimate's rows to a given id order.
pub fn align_rows(est: &CateEstimate, ids: &[String]) -> Result<CateEstimate> {
    let pos: BTreeMap<&str, usize> = est.query_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let missing: Vec<String> = ids.iter().filter(|id| !pos.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() || ids.len() != est.query_ids.len() {
        let mut bad = missing;
        bad.extend(est.query_ids.iter().filter(|q| !ids.contains(q)).cloned());
        return Err(Error::Misaligned(bad));
    }
    let rows: Vec<usize> = ids.iter().map(|id| pos[id.as_str()]).collect();
    Ok(CateEstimate {
        query_ids: ids.to_vec(),
        theta: est.theta.select(ndarray::Axis(0), &rows),
        ..est.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(theta: Array2<f64>, grid: &TimeGrid) -> TruthCurves {
        TruthCurves {
            grid: grid.clone(),
            mc_se: Array2::zeros(theta.dim()),
            theta,
            mc_reps: 1,
        }
    }

    fn est(theta: Array2<f64>, grid: &TimeGrid) -> CateEstimate {
        CateEstimate {
            query_ids: (0..theta.nrows()).map(|i| i.to_string()).collect(),
            grid: grid.clone(),
            theta,
            estimator: "x".into(),
            clamped: 0,
            config: String::new(),
        }
    }

    #[test]
    fn rmse_examples() {
        let g = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let th = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.1 + j as f64 * 0.05);
        let t = truth(th.clone(), &g);
        assert!(rmse_by_time(&est(th.clone(), &g), &t).unwrap().iter().all(|v| *v == 0.0));
        for v in rmse_by_time(&est(&th + 0.1, &g), &t).unwrap() {
            assert!((v - 0.1).abs() < 1e-12);
        }
        let g2 = TimeGrid::new(vec![1.0, 2.0, 4.0]).unwrap();
        assert!(matches!(rmse_by_time(&est(th, &g2), &t), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = vec![0.1, 0.3];
        let a = aggregate(&[r.clone()]).unwrap();
        assert_eq!(a.per_time, r);
        assert!((a.overall - 0.2).abs() < 1e-15);
        let b = aggregate(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(b.per_time, r);
        let c = aggregate(&[vec![0.0, 0.2], vec![0.2, 0.4]]).unwrap();
        assert!((c.overall - c.per_time.iter().sum::<f64>() / 2.0).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn config_hash_ignores_output_location() {
        let a = StudyConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        b.workers = 3;
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn chart_is_well_formed() {
        let svg = line_chart("a<b", "t", &[1.0, 2.0], &[("s".into(), vec![0.1, f64::NAN])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
    }
}
