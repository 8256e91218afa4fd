//! The three simulation designs, their truncation levels, and a
//! Monte-Carlo ground-truth oracle.

use ndarray::{Array2, Array3, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{SurvivalDataset, SurvivalRecord, TimeGrid};
use crate::error::{Error, Result};
use crate::nuisance::{refine_grid, survival_from_hazard, NuisanceBundle, NuisanceConfig, NuisanceDiagnostics};
use crate::rng::stream;

pub const NUM_COVARIATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dgp {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Dgp {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            3 => Ok(Self::Three),
            _ => Err(Error::InvalidInput(format!("unknown design {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
            Self::Three => 3,
        }
    }

    pub fn tau(self) -> f64 {
        match self {
            Self::One | Self::Three => 2.0,
            Self::Two => 1.0,
        }
    }

    /// Evaluation grid used by the study tables.
    pub fn eval_grid(self) -> TimeGrid {
        let points = match self {
            Self::One => vec![0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            Self::Two => (1..=10).map(|j| j as f64 / 10.0).collect(),
            Self::Three => (1..=10).map(|j| j as f64 / 5.0).collect(),
        };
        TimeGrid::new(points).expect("static grid is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    None,
    Low,
    High,
}

impl Truncation {
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Low => "low",
            Self::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "rc" => Ok(Self::None),
            "low" | "25" => Ok(Self::Low),
            "high" | "50" => Ok(Self::High),
            _ => Err(Error::InvalidInput(format!("unknown truncation level `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub dgp: Dgp,
    pub truncation: Truncation,
    /// Number of retained (observed) subjects.
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn tau(&self) -> f64 {
        self.dgp.tau()
    }

    /// Maximum truncation time; `None` for right-censored data.
    pub fn q_max(&self) -> Option<f64> {
        let (low, high) = match self.dgp {
            Dgp::One => (0.8, 2.0),
            Dgp::Two => (0.1, 0.6),
            Dgp::Three => (4.0, 7.0),
        };
        match self.truncation {
            Truncation::None => None,
            Truncation::Low => Some(low),
            Truncation::High => Some(high),
        }
    }
}

/// `(1 + f(z1)) / 4` with `f` the Beta(2,4) density.
pub fn dgp_propensity(z1: f64) -> f64 {
    (1.0 + 20.0 * z1 * (1.0 - z1).powi(3)) / 4.0
}

/// Cumulative baseline hazards of the proportional-hazards designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// `Λ0(t) = √t`.
    Sqrt,
    /// `Λ0(t) = t²`.
    Square,
}

impl Baseline {
    pub fn cumulative(self, t: f64) -> f64 {
        match self {
            Self::Sqrt => t.sqrt(),
            Self::Square => t * t,
        }
    }
}

/// Solves `Λ0(T)·exp(lp) = -log(u)` for `T`.
pub fn invert_cox(baseline: Baseline, lp: f64, u: f64) -> f64 {
    invert_cox_exp(baseline, lp, -u.ln())
}

fn invert_cox_exp(baseline: Baseline, lp: f64, e: f64) -> f64 {
    let target = e * (-lp).exp();
    match baseline {
        Baseline::Sqrt => target * target,
        Baseline::Square => target.sqrt(),
    }
}

fn lt(x: f64) -> f64 {
    f64::from(u8::from(x < 0.5))
}

/// Location (log-time mean) of the event model for design 1.
fn aft_event_mean(z: ArrayView1<f64>, a: u8) -> f64 {
    let a = f64::from(a);
    -1.85 - 0.8 * lt(z[0]) + 0.7 * z[1].sqrt() + 0.2 * z[2] + (0.7 - 0.4 * lt(z[0]) - 0.4 * z[1].sqrt()) * a
}

/// Linear predictor of the proportional-hazards event model (designs 2, 3).
fn cox_event_lp(dgp: Dgp, z: ArrayView1<f64>, a: u8) -> f64 {
    let a = f64::from(a);
    match dgp {
        Dgp::Two => 0.25 + 0.5 * z[0].cbrt() - (1.5 * (0.5 - z[1]).powi(3) - 0.4 * z[2].sqrt()) * a,
        Dgp::Three => -0.75 - (0.75 - z[0]).powi(3) + 0.3 * z[1].sqrt() + 0.2 * z[2],
        Dgp::One => unreachable!("design 1 is an AFT model"),
    }
}

fn event_baseline(dgp: Dgp) -> Baseline {
    match dgp {
        Dgp::Two => Baseline::Sqrt,
        _ => Baseline::Square,
    }
}

/// Event time given a shared noise draw: the standard-normal error for the
/// AFT design, the unit-exponential variate for the Cox designs.
fn event_time(dgp: Dgp, z: ArrayView1<f64>, a: u8, noise: f64) -> f64 {
    match dgp {
        Dgp::One => (aft_event_mean(z, a) + noise).exp(),
        _ => invert_cox_exp(event_baseline(dgp), cox_event_lp(dgp, z, a), noise),
    }
}

fn event_noise(dgp: Dgp, rng: &mut ChaCha8Rng) -> f64 {
    match dgp {
        Dgp::One => rng.sample(StandardNormal),
        _ => rng.sample(Exp1),
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// Closed-form `P(T > t | A = a, Z = z)`.
pub fn true_survival(dgp: Dgp, z: ArrayView1<f64>, a: u8, t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    match dgp {
        Dgp::One => 1.0 - std_normal().cdf(t.ln() - aft_event_mean(z, a)),
        _ => (-event_baseline(dgp).cumulative(t) * cox_event_lp(dgp, z, a).exp()).exp(),
    }
}

/// Censoring-time model `D`: a Cox model for design 1, lognormal AFT
/// models for designs 2 and 3.
fn censoring_time(dgp: Dgp, z: ArrayView1<f64>, a: u8, rng: &mut ChaCha8Rng) -> f64 {
    match dgp {
        Dgp::One => invert_cox_exp(Baseline::Square, cens_cox_lp(z, a), rng.sample(Exp1)),
        _ => {
            let e: f64 = rng.sample(StandardNormal);
            (cens_aft_mean(dgp, z, a) + e).exp()
        }
    }
}

fn cens_cox_lp(z: ArrayView1<f64>, a: u8) -> f64 {
    let a = f64::from(a);
    -1.75 - 0.5 * z[1].sqrt() + 0.2 * z[2] + (1.15 + 0.5 * lt(z[0]) - 0.3 * z[1].sqrt()) * a
}

fn cens_aft_mean(dgp: Dgp, z: ArrayView1<f64>, a: u8) -> f64 {
    let a = f64::from(a);
    let c = (0.5 - z[0]).powi(3);
    match dgp {
        Dgp::Two => -0.75 - 1.5 * c + 0.5 * z[1].sqrt() + 0.3 * z[2] + (0.2 - c - 0.4 * z[1].sqrt()) * a,
        // the third covariate term is read as 0.6·Z3
        _ => 0.25 + (0.2 - c - 0.8 * z[1].sqrt() + 0.6 * z[2]) * a,
    }
}

/// Closed-form `P(D > d | A = a, Z = z)` for the censoring increment.
pub fn censoring_increment_survival(dgp: Dgp, z: ArrayView1<f64>, a: u8, d: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    match dgp {
        Dgp::One => (-d * d * cens_cox_lp(z, a).exp()).exp(),
        _ => 1.0 - std_normal().cdf(d.ln() - cens_aft_mean(dgp, z, a)),
    }
}

/// Beta shape parameters for `U`; the `Z²` of the first shape is read as
/// `Z2²` and both shapes are floored at 0.1.
fn truncation_u(z: ArrayView1<f64>, a: u8, rng: &mut ChaCha8Rng) -> f64 {
    let ea: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
    let eb: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
    let shape_a = (2.0 + (2.0 * z[0] * z[0] + z[1] * z[1]) * f64::from(a) + ea).max(0.1);
    let shape_b = (15.0 + z[1].powi(3) + 0.5 * f64::from(u8::from(z[2] > 0.5)) + eb).max(0.1);
    Beta::new(shape_a, shape_b).expect("positive shapes").sample(rng)
}

pub fn draw_covariates(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..NUM_COVARIATES).map(|_| rng.gen::<f64>()).collect()
}

/// Fixed test covariates.
pub fn draw_test_set(m: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[0x7E57]);
    let mut x = Array2::zeros((m, NUM_COVARIATES));
    for i in 0..m {
        for j in 0..NUM_COVARIATES {
            x[[i, j]] = rng.gen::<f64>();
        }
    }
    x
}

pub fn covariate_names() -> Vec<String> {
    (1..=NUM_COVARIATES).map(|j| format!("z{j}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub spec: DgpSpec,
    pub generated: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub censored_fraction: f64,
    pub treated_fraction: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: SurvivalDataset,
    pub report: SimulationReport,
}

fn manifest_notes() -> Vec<String> {
    vec![
        "truncation shape a uses Z2^2 for the unsubscripted squared term".into(),
        "design 3 censoring uses 0.6*Z3 for the X3 term".into(),
        "shape noise terms use standard deviations 0.1 and 0.5; shapes floored at 0.1".into(),
    ]
}

/// One candidate subject before the truncation filter.
#[derive(Debug, Clone, Copy)]
struct Draw {
    a: u8,
    t: f64,
    q: f64,
    d: f64,
}

fn draw_subject(spec: &DgpSpec, z: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> Draw {
    let a = u8::from(rng.gen::<f64>() < dgp_propensity(z[0]));
    let t = event_time(spec.dgp, z, a, event_noise(spec.dgp, rng));
    let q = match spec.q_max() {
        None => 0.0,
        Some(qm) => truncation_u(z, a, rng) * qm,
    };
    let d = censoring_time(spec.dgp, z, a, rng);
    Draw { a, t, q, d }
}

/// Draws candidates until `n` satisfy `T ≥ Q`.
pub fn simulate(spec: &DgpSpec) -> Result<SimulatedData> {
    if spec.n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let tau = spec.tau();
    let mut records = Vec::with_capacity(spec.n);
    let mut generated = 0usize;
    while records.len() < spec.n {
        if generated > 1000 * spec.n + 1000 {
            return Err(Error::InvalidInput("truncation drops nearly every subject".into()));
        }
        let mut rng = stream(spec.seed, &[u64::from(spec.dgp.id()), spec.truncation as u64, generated as u64]);
        generated += 1;
        let z = draw_covariates(&mut rng);
        let d = draw_subject(spec, ArrayView1::from(&z[..]), &mut rng);
        if d.t < d.q {
            continue;
        }
        // entrants after the horizon are censored on arrival
        let c = (d.q + d.d).min(tau.max(d.q));
        let event = d.t <= c;
        records.push(SurvivalRecord {
            id: format!("s{}", records.len() + 1),
            z,
            a: d.a,
            time_obs: d.t.min(c),
            event,
            entry: d.q,
        });
    }
    let n = records.len() as f64;
    let censored_fraction = records.iter().filter(|r| !r.event).count() as f64 / n;
    let treated_fraction = records.iter().filter(|r| r.a == 1).count() as f64 / n;
    let dropped = generated - records.len();
    let dataset = SurvivalDataset::new(records, covariate_names(), None)?;
    Ok(SimulatedData {
        dataset,
        report: SimulationReport {
            spec: *spec,
            generated,
            dropped,
            drop_rate: dropped as f64 / generated as f64,
            censored_fraction,
            treated_fraction,
            notes: manifest_notes(),
        },
    })
}

/// Fraction of candidates with `T < Q` in a fixed-size draw (no filtering).
pub fn truncation_drop_rate(dgp: Dgp, truncation: Truncation, draws: usize, seed: u64) -> f64 {
    let spec = DgpSpec {
        dgp,
        truncation,
        n: draws,
        seed,
    };
    let dropped = (0..draws)
        .filter(|&i| {
            let mut rng = stream(seed, &[0xD5, u64::from(dgp.id()), truncation as u64, i as u64]);
            let z = draw_covariates(&mut rng);
            let d = draw_subject(&spec, ArrayView1::from(&z[..]), &mut rng);
            d.t < d.q
        })
        .count();
    dropped as f64 / draws as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCurves {
    pub grid: TimeGrid,
    /// `m x |grid|`.
    pub theta: Array2<f64>,
    pub mc_se: Array2<f64>,
    pub mc_reps: usize,
}

/// Monte-Carlo `S(t|1,z) - S(t|0,z)` per test row. Both arms share the same
/// noise draws, so the difference is exactly zero when treatment does not
/// enter the event model.
pub fn true_cate(dgp: Dgp, test_x: &Array2<f64>, grid: &TimeGrid, mc_reps: usize, seed: u64) -> Result<TruthCurves> {
    if test_x.ncols() != NUM_COVARIATES {
        return Err(Error::DimensionMismatch(format!(
            "test rows have {} covariates, expected {NUM_COVARIATES}",
            test_x.ncols()
        )));
    }
    if mc_reps < 2 {
        return Err(Error::InvalidInput("mc_reps must be at least 2".into()));
    }
    let k = grid.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..test_x.nrows())
        .into_par_iter()
        .map(|i| {
            let z = test_x.row(i);
            let mut rng = stream(seed, &[0x7207, u64::from(dgp.id()), i as u64]);
            let mut sum = vec![0.0f64; k];
            let mut sum_sq = vec![0.0f64; k];
            for _ in 0..mc_reps {
                let e = event_noise(dgp, &mut rng);
                let t1 = event_time(dgp, z, 1, e);
                let t0 = event_time(dgp, z, 0, e);
                for (j, &t) in grid.points().iter().enumerate() {
                    let diff = f64::from(u8::from(t1 > t)) - f64::from(u8::from(t0 > t));
                    sum[j] += diff;
                    sum_sq[j] += diff * diff;
                }
            }
            let m = mc_reps as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
            let se = (0..k)
                .map(|j| {
                    let var = (sum_sq[j] / m - mean[j] * mean[j]).max(0.0) * m / (m - 1.0);
                    (var / m).sqrt()
                })
                .collect();
            (mean, se)
        })
        .collect();
    let mut theta = Array2::zeros((test_x.nrows(), k));
    let mut mc_se = Array2::zeros((test_x.nrows(), k));
    for (i, (m, s)) in rows.into_iter().enumerate() {
        for j in 0..k {
            theta[[i, j]] = m[j];
            mc_se[[i, j]] = s[j];
        }
    }
    Ok(TruthCurves {
        grid: grid.clone(),
        theta,
        mc_se,
        mc_reps,
    })
}

/// Closed-form counterpart of [`true_cate`].
pub fn analytic_cate(dgp: Dgp, test_x: &Array2<f64>, grid: &TimeGrid) -> Array2<f64> {
    Array2::from_shape_fn((test_x.nrows(), grid.len()), |(i, j)| {
        let t = grid.points()[j];
        true_survival(dgp, test_x.row(i), 1, t) - true_survival(dgp, test_x.row(i), 0, t)
    })
}

impl TruthCurves {
    pub fn write_csv(&self, path: &std::path::Path, ids: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["query_id", "t", "theta_true", "mc_se"])?;
        for i in 0..self.theta.nrows() {
            let id = ids.map_or_else(|| format!("q{}", i + 1), |v| v[i].clone());
            for (j, t) in self.grid.points().iter().enumerate() {
                w.write_record([
                    id.as_str(),
                    &t.to_string(),
                    &self.theta[[i, j]].to_string(),
                    &self.mc_se[[i, j]].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Nuisance bundle built from the true design quantities instead of fitted
/// models: true propensity, interval hazards `1 - S(t_k)/S(t_{k-1})`, and
/// for the censoring and entry surfaces the design's own distributions. The
/// entry distribution is integrated with `entry_draws` Monte-Carlo draws of
/// `Q` per subject.
pub fn oracle_bundle(
    spec: &DgpSpec,
    ds: &SurvivalDataset,
    eval_grid: &TimeGrid,
    cfg: &NuisanceConfig,
    entry_draws: usize,
) -> Result<NuisanceBundle> {
    let dgp = spec.dgp;
    if spec.q_max().is_none() && !ds.is_right_censored_only() {
        return Err(Error::InvalidInput("right-censored design but the data carry entry times".into()));
    }
    let (grid, eval_index) = refine_grid(eval_grid, cfg.refine, cfg.lead_in)?;
    let n = ds.n();
    let kk = grid.len();
    let z = ds.covariates();
    let mut hazard = Array3::zeros((n, kk, 2));
    let mut censoring = Array2::zeros((n, kk));
    let mut entry_hazard = Array2::zeros((n, kk));
    let mut entry_cdf = Array2::ones((n, kk));
    let mut denominator = Array2::zeros((n, kk));
    for i in 0..n {
        let zi = z.row(i);
        let rec = &ds.records()[i];
        for a in 0..2u8 {
            let mut prev = 1.0;
            for k in 0..kk {
                let s = true_survival(dgp, zi, a, grid.points()[k]);
                let h = if prev > 0.0 { 1.0 - s / prev } else { 1.0 };
                hazard[[i, k, a as usize]] = h.clamp(cfg.h_min, 1.0 - cfg.h_min);
                prev = s;
            }
        }
        for k in 0..kk {
            censoring[[i, k]] = censoring_increment_survival(dgp, zi, rec.a, grid.left(k) - rec.entry).max(cfg.g_min);
        }
        let Some(q_max) = spec.q_max() else {
            entry_hazard[[i, 0]] = 1.0;
            denominator.row_mut(i).assign(&censoring.row(i));
            continue;
        };
        let mut rng = stream(spec.seed, &[0x0EAC, i as u64]);
        let draws: Vec<f64> = (0..entry_draws.max(1)).map(|_| truncation_u(zi, rec.a, &mut rng) * q_max).collect();
        let m = draws.len() as f64;
        let mut mass = vec![0.0; kk];
        for &q in &draws {
            let e = grid.entry_interval(q);
            if e < kk {
                mass[e] += 1.0 / m;
            }
        }
        let mut cum = 0.0;
        for k in 0..kk {
            let left = 1.0 - cum;
            entry_hazard[[i, k]] = if left > 0.0 { (mass[k] / left).clamp(cfg.h_min, 1.0) } else { 1.0 };
            cum += mass[k];
            entry_cdf[[i, k]] = cum.min(1.0);
            let l = grid.left(k);
            let p: f64 = draws
                .iter()
                .filter(|&&q| q <= l)
                .map(|&q| censoring_increment_survival(dgp, zi, rec.a, l - q))
                .sum::<f64>()
                / m;
            denominator[[i, k]] = p.max(1e-12);
        }
    }
    let survival = survival_from_hazard(&hazard);
    let propensity = (0..n)
        .map(|i| dgp_propensity(z[[i, 0]]).clamp(cfg.pi_min, 1.0 - cfg.pi_min))
        .collect();
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
        iptw_entry: vec![1.0; n],
        propensity,
        folds: vec![0; n],
        config: cfg.clone(),
        diagnostics: NuisanceDiagnostics::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    #[test]
    fn cox_inversion_examples() {
        assert_abs_diff_eq!(invert_cox(Baseline::Sqrt, 0.0, (-1.0f64).exp()), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(invert_cox(Baseline::Square, 0.0, (-4.0f64).exp()), 2.0, epsilon = 1e-12);
        for b in [Baseline::Sqrt, Baseline::Square] {
            let t: Vec<f64> = [0.0, 1.0, 2.0].iter().map(|lp| invert_cox(b, *lp, 0.3)).collect();
            assert!(t[0] > t[1] && t[1] > t[2]);
        }
    }

    #[test]
    fn propensity_examples() {
        assert_eq!(dgp_propensity(0.0), 0.25);
        assert_abs_diff_eq!(dgp_propensity(0.5), 0.5625, epsilon = 1e-15);
        assert_abs_diff_eq!(dgp_propensity(0.25), (1.0 + 2.109375) / 4.0, epsilon = 1e-15);
        let max = (0..=10_000).map(|i| dgp_propensity(i as f64 / 10_000.0)).fold(0.0, f64::max);
        assert_abs_diff_eq!(max, dgp_propensity(0.25), epsilon = 1e-12);
    }

    #[test]
    fn rc_mode_has_no_entry() {
        for dgp in [Dgp::One, Dgp::Two, Dgp::Three] {
            let sim = simulate(&DgpSpec {
                dgp,
                truncation: Truncation::None,
                n: 200,
                seed: 5,
            })
            .unwrap();
            assert!(sim.dataset.is_right_censored_only());
            assert_eq!(sim.report.dropped, 0);
            assert!(sim.dataset.records().iter().all(|r| r.time_obs <= dgp.tau()));
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = DgpSpec {
            dgp: Dgp::One,
            truncation: Truncation::Low,
            n: 50,
            seed: 9,
        };
        assert_eq!(simulate(&spec).unwrap().dataset, simulate(&spec).unwrap().dataset);
    }

    #[test]
    fn null_design_truth_is_exactly_zero() {
        let x = draw_test_set(5, 1);
        let truth = true_cate(Dgp::Three, &x, &Dgp::Three.eval_grid(), 1_000, 2).unwrap();
        assert!(truth.theta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn beneficial_row_has_nonnegative_truth() {
        let mut z = Array1::from_elem(NUM_COVARIATES, 0.5);
        z[0] = 0.9;
        z[1] = 0.9;
        let x = z.insert_axis(ndarray::Axis(0)).to_owned();
        let grid = Dgp::One.eval_grid();
        let truth = true_cate(Dgp::One, &x, &grid, 20_000, 3).unwrap();
        let exact = analytic_cate(Dgp::One, &x, &grid);
        for j in 0..grid.len() {
            assert!(exact[[0, j]] >= 0.0);
            assert!((truth.theta[[0, j]] - exact[[0, j]]).abs() < 4.0 * truth.mc_se[[0, j]] + 1e-12);
        }
    }
}
