//! Domain types shared by every estimator: subject records, the evaluation
//! time grid and the person-period expansion that backs discrete-time
//! hazard models.
//!
//! Intervals are left-open, `(t_{k-1}, t_k]` with `t_0 = 0`. A subject is in
//! the risk set of interval `k` when it entered no later than `t_{k-1}` and
//! was still under follow-up just after `t_{k-1}`.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub id: String,
    pub z: Vec<f64>,
    /// Treatment arm, 0 or 1.
    pub a: u8,
    /// Observed time `min(T, C)`.
    pub time_obs: f64,
    pub event: bool,
    /// Study entry time; 0 for right-censored-only data.
    pub entry: f64,
}

impl SurvivalRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidRecord {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.a > 1 {
            return fail("treatment must be 0 or 1");
        }
        if !(self.time_obs.is_finite() && self.time_obs >= 0.0) {
            return fail("observed time must be finite and nonnegative");
        }
        if !(self.entry.is_finite() && self.entry >= 0.0) {
            return fail("entry time must be finite and nonnegative");
        }
        if self.time_obs < self.entry {
            return fail("observed time precedes entry time");
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return fail("non-finite covariate");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    records: Vec<SurvivalRecord>,
    covariate_names: Vec<String>,
    heterogeneity_index: Vec<usize>,
}

impl SurvivalDataset {
    /// Builds a dataset; `heterogeneity_index = None` uses every covariate.
    pub fn new(
        records: Vec<SurvivalRecord>,
        covariate_names: Vec<String>,
        heterogeneity_index: Option<Vec<usize>>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = covariate_names.len();
        for r in &records {
            if r.z.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "record {} has {} covariates, expected {p}",
                    r.id,
                    r.z.len()
                )));
            }
            r.validate()?;
        }
        let heterogeneity_index = heterogeneity_index.unwrap_or_else(|| (0..p).collect());
        if heterogeneity_index.is_empty() {
            return Err(Error::InvalidInput("heterogeneity index is empty".into()));
        }
        if let Some(&bad) = heterogeneity_index.iter().find(|&&j| j >= p) {
            return Err(Error::InvalidInput(format!(
                "heterogeneity index {bad} out of bounds for {p} covariates"
            )));
        }
        Ok(Self {
            records,
            covariate_names,
            heterogeneity_index,
        })
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn heterogeneity_index(&self) -> &[usize] {
        &self.heterogeneity_index
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    /// True when nobody has delayed entry.
    pub fn is_right_censored_only(&self) -> bool {
        self.records.iter().all(|r| r.entry == 0.0)
    }

    /// `n x p` covariate matrix.
    pub fn covariates(&self) -> Array2<f64> {
        let p = self.p();
        Array2::from_shape_fn((self.n(), p), |(i, j)| self.records[i].z[j])
    }

    /// `n x |X|` matrix of the heterogeneity covariates.
    pub fn heterogeneity_covariates(&self) -> Array2<f64> {
        let idx = &self.heterogeneity_index;
        Array2::from_shape_fn((self.n(), idx.len()), |(i, j)| self.records[i].z[idx[j]])
    }

    /// Subset of records, preserving order and metadata.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let records = rows.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(
            records,
            self.covariate_names.clone(),
            Some(self.heterogeneity_index.clone()),
        )
    }

    pub fn with_heterogeneity_index(mut self, index: Vec<usize>) -> Result<Self> {
        let p = self.p();
        if index.is_empty() || index.iter().any(|&j| j >= p) {
            return Err(Error::InvalidInput("bad heterogeneity index".into()));
        }
        self.heterogeneity_index = index;
        Ok(self)
    }

    /// Copy of the dataset with every entry time set to zero.
    pub fn without_truncation(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.entry = 0.0;
        }
        out
    }

    /// Writes the dataset in the input CSV layout (`id,a,time,event,entry,<covariates>`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec![
            "id".to_string(),
            "a".into(),
            "time".into(),
            "event".into(),
            "entry".into(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                r.a.to_string(),
                r.time_obs.to_string(),
                u8::from(r.event).to_string(),
                r.entry.to_string(),
            ];
            row.extend(r.z.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Column-name mapping for [`load_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub id: String,
    pub treatment: String,
    pub time: String,
    pub event: String,
    /// Optional; a missing entry column means right-censored-only data.
    pub entry: String,
    /// Explicit covariate columns; `None` takes every remaining column.
    pub covariates: Option<Vec<String>>,
    /// Covariates defining the heterogeneity subset; `None` means all.
    pub heterogeneity: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            treatment: "a".into(),
            time: "time".into(),
            event: "event".into(),
            entry: "entry".into(),
            covariates: None,
            heterogeneity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: SurvivalDataset,
    pub rejected: Vec<RejectedRow>,
}

fn parse_num(cell: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row: line,
        message: format!("column `{column}`: `{cell}` is not numeric"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row: line,
            message: format!("column `{column}`: non-finite value"),
        });
    }
    Ok(v)
}

fn parse_indicator(cell: &str, line: usize, column: &str) -> Result<u8> {
    let v = parse_num(cell, line, column)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Parse {
            row: line,
            message: format!("column `{column}`: {v} is not a 0/1 indicator"),
        })
    }
}

/// Reads a comma-separated file with a header row.
///
/// Rows whose observed time precedes the entry time are dropped and listed in
/// [`LoadedDataset::rejected`]; every other malformed cell is a hard error.
pub fn load_dataset(path: &Path, schema: &ColumnSchema) -> Result<LoadedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let col = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let id_col = col(&schema.id)?;
    let a_col = col(&schema.treatment)?;
    let time_col = col(&schema.time)?;
    let event_col = col(&schema.event)?;
    let entry_col = find(&schema.entry);

    let reserved: BTreeSet<usize> = [Some(id_col), Some(a_col), Some(time_col), Some(event_col), entry_col]
        .into_iter()
        .flatten()
        .collect();
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|j| !reserved.contains(j)).collect(),
    };
    let covariate_names: Vec<String> = cov_cols.iter().map(|&j| headers[j].clone()).collect();
    let heterogeneity = match &schema.heterogeneity {
        Some(names) => Some(
            names
                .iter()
                .map(|n| {
                    covariate_names
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| Error::MissingColumn(n.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let cell = |j: usize| row.get(j).unwrap_or("");
        let id = cell(id_col).trim().to_string();
        let a = parse_indicator(cell(a_col), line, &schema.treatment)?;
        let time_obs = parse_num(cell(time_col), line, &schema.time)?;
        let event = parse_indicator(cell(event_col), line, &schema.event)? == 1;
        let entry = match entry_col {
            Some(j) => parse_num(cell(j), line, &schema.entry)?,
            None => 0.0,
        };
        if time_obs < 0.0 || entry < 0.0 {
            return Err(Error::Parse {
                row: line,
                message: "negative time".into(),
            });
        }
        let z = cov_cols
            .iter()
            .map(|&j| parse_num(cell(j), line, &headers[j]))
            .collect::<Result<Vec<_>>>()?;
        if time_obs < entry {
            rejected.push(RejectedRow {
                line,
                id,
                reason: format!("observed time {time_obs} precedes entry {entry}"),
            });
            continue;
        }
        records.push(SurvivalRecord {
            id,
            z,
            a,
            time_obs,
            event,
            entry,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !rejected.is_empty() {
        log::warn!("{} rows rejected: observed time before entry", rejected.len());
    }
    let dataset = SurvivalDataset::new(records, covariate_names, heterogeneity)?;
    Ok(LoadedDataset { dataset, rejected })
}

/// Strictly increasing positive evaluation times; the last point is `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateGrid("no grid points".into()));
        }
        if points.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::DegenerateGrid("grid points must be positive".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateGrid("grid points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tau(&self) -> f64 {
        *self.points.last().expect("grid is nonempty")
    }

    /// Left endpoint of interval `k` (0-based), i.e. `t_{k-1}` with `t_0 = 0`.
    pub fn left(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.points[k - 1]
        }
    }

    /// 0-based interval `k` with `t_{k-1} < time <= t_k`; `None` past `tau`
    /// and for `time <= 0`.
    pub fn interval_of(&self, time: f64) -> Option<usize> {
        if time <= 0.0 || time > self.tau() {
            return None;
        }
        Some(self.points.partition_point(|&t| t < time))
    }

    /// First 0-based interval whose left endpoint is at least `entry`.
    /// Equals `len()` when the subject can never be at risk on the grid.
    pub fn entry_interval(&self, entry: f64) -> usize {
        if entry <= 0.0 {
            return 0;
        }
        // smallest k >= 1 with t_{k-1} >= entry, i.e. 1 + #{points < entry}
        1 + self.points.partition_point(|&t| t < entry)
    }

    /// Largest grid index with `t_j <= time`, or `None` when `time < t_1`.
    pub fn last_point_at_or_before(&self, time: f64) -> Option<usize> {
        let c = self.points.partition_point(|&t| t <= time);
        c.checked_sub(1)
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Places `num_points - 1` points at evenly spaced quantiles of the observed
/// event times no later than `tau`, then appends `tau`. Coincident quantiles
/// collapse, so the grid may be shorter than requested.
pub fn build_time_grid(dataset: &SurvivalDataset, num_points: usize, tau: f64) -> Result<TimeGrid> {
    if num_points < 2 {
        return Err(Error::InvalidInput("num_points must be at least 2".into()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidInput("tau must be positive".into()));
    }
    let mut events: Vec<f64> = dataset
        .records()
        .iter()
        .filter(|r| r.event && r.time_obs > 0.0)
        .map(|r| r.time_obs)
        .collect();
    events.sort_by(f64::total_cmp);
    match events.first() {
        None => return Err(Error::DegenerateGrid("no observed event times".into())),
        Some(&first) if first > tau => {
            return Err(Error::DegenerateGrid(format!(
                "tau {tau} precedes the first event time {first}"
            )))
        }
        _ => {}
    }
    events.retain(|&t| t <= tau);
    let mut points: Vec<f64> = (1..num_points)
        .map(|j| quantile_sorted(&events, j as f64 / num_points as f64))
        .filter(|&t| t < tau)
        .collect();
    points.dedup();
    points.push(tau);
    TimeGrid::new(points)
}

/// Risk-set convention used to build a [`PersonPeriodTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskSetRule {
    /// At risk in `(t_{k-1}, t_k]` iff `entry <= t_{k-1} < time_obs`.
    DelayedEntryLeftOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersonPeriodRow {
    pub subject: usize,
    /// 0-based interval index.
    pub k: usize,
    pub at_risk: bool,
    pub event_here: bool,
    pub censored_here: bool,
    /// `entry <= t_k`.
    pub entered: bool,
}

#[derive(Debug, Clone)]
pub struct PersonPeriodTable {
    rows: Vec<PersonPeriodRow>,
    rule: RiskSetRule,
    num_intervals: usize,
    num_subjects: usize,
}

impl PersonPeriodTable {
    pub fn rows(&self) -> &[PersonPeriodRow] {
        &self.rows
    }

    pub fn rule(&self) -> RiskSetRule {
        self.rule
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn num_subjects(&self) -> usize {
        self.num_subjects
    }

    pub fn at_risk_rows(&self) -> impl Iterator<Item = &PersonPeriodRow> {
        self.rows.iter().filter(|r| r.at_risk)
    }

    /// `n x K` at-risk indicator matrix.
    pub fn at_risk_matrix(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.num_subjects, self.num_intervals), false);
        for r in self.at_risk_rows() {
            m[[r.subject, r.k]] = true;
        }
        m
    }

    /// `n x K` event indicator matrix (nonzero only on at-risk cells).
    pub fn event_matrix(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.num_subjects, self.num_intervals), false);
        for r in self.rows.iter().filter(|r| r.event_here) {
            m[[r.subject, r.k]] = true;
        }
        m
    }

    /// Per subject: last at-risk interval and whether an event was recorded.
    pub fn aggregate(&self) -> Vec<Option<(usize, bool)>> {
        let mut out = vec![None; self.num_subjects];
        for r in self.at_risk_rows() {
            let slot = &mut out[r.subject];
            let ev = slot.map(|(_, e)| e).unwrap_or(false) || r.event_here;
            *slot = Some((r.k, ev));
        }
        out
    }
}

pub fn expand_person_period(dataset: &SurvivalDataset, grid: &TimeGrid) -> PersonPeriodTable {
    let num_intervals = grid.len();
    let mut rows = Vec::with_capacity(dataset.n() * num_intervals);
    for (i, rec) in dataset.records().iter().enumerate() {
        let last = grid.interval_of(rec.time_obs).unwrap_or(num_intervals - 1);
        if rec.time_obs <= 0.0 {
            continue;
        }
        for k in 0..=last {
            let left = grid.left(k);
            let at_risk = rec.entry <= left && rec.time_obs > left;
            let here = at_risk && rec.time_obs <= grid.points()[k];
            rows.push(PersonPeriodRow {
                subject: i,
                k,
                at_risk,
                event_here: here && rec.event,
                censored_here: here && !rec.event,
                entered: rec.entry <= grid.points()[k],
            });
        }
    }
    PersonPeriodTable {
        rows,
        rule: RiskSetRule::DelayedEntryLeftOpen,
        num_intervals,
        num_subjects: dataset.n(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn rec(id: &str, a: u8, time: f64, event: bool, entry: f64) -> SurvivalRecord {
        SurvivalRecord {
            id: id.into(),
            z: vec![0.5],
            a,
            time_obs: time,
            event,
            entry,
        }
    }

    fn ds(records: Vec<SurvivalRecord>) -> SurvivalDataset {
        SurvivalDataset::new(records, vec!["z1".into()], None).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn missing_entry_column_defaults_to_zero() {
        let f = write_tmp("id,a,time,event,z_1\n1,0,1.5,1,0.2\n2,1,2.0,0,0.4\n3,1,0.7,1,0.9\n");
        let loaded = load_dataset(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(loaded.dataset.n(), 3);
        assert!(loaded.dataset.records().iter().all(|r| r.entry == 0.0));
        assert_eq!(loaded.dataset.covariate_names(), &["z_1".to_string()]);
        assert!(loaded.dataset.is_right_censored_only());
    }

    #[test]
    fn entry_after_time_is_rejected() {
        let f = write_tmp("id,a,time,event,entry,z_1\n1,0,0.4,1,0.9,0.1\n2,1,2.0,0,0.1,0.4\n");
        let loaded = load_dataset(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].id, "1");
        assert_eq!(loaded.dataset.n(), 1);
    }

    #[test]
    fn event_value_two_is_a_parse_error() {
        let f = write_tmp("id,a,time,event,z_1\n1,0,0.4,1,0.1\n2,1,2.0,2,0.4\n");
        match load_dataset(f.path(), &ColumnSchema::default()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_tmp("id,a,event,z_1\n1,0,1,0.1\n");
        match load_dataset(f.path(), &ColumnSchema::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "time"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_empty() {
        let f = write_tmp("id,a,time,event,z_1\n1,0,abc,1,0.1\n");
        assert!(matches!(
            load_dataset(f.path(), &ColumnSchema::default()),
            Err(Error::Parse { row: 2, .. })
        ));
        let f = write_tmp("id,a,time,event,z_1\n");
        assert!(matches!(
            load_dataset(f.path(), &ColumnSchema::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let d = ds(vec![rec("a", 1, 1.25, true, 0.5), rec("b", 0, 3.0, false, 0.0)]);
        let f = tempfile::NamedTempFile::new().unwrap();
        d.write_csv(f.path()).unwrap();
        let back = load_dataset(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(back.dataset, d);
    }

    #[test]
    fn explicit_grid_is_kept() {
        let pts = vec![0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
        let g = TimeGrid::new(pts.clone()).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.tau(), 2.0);
        assert_eq!(g.points(), &pts[..]);
        assert!(TimeGrid::new(vec![1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn quantile_grid_median() {
        let d = ds(vec![rec("1", 0, 1.0, true, 0.0), rec("2", 0, 2.0, true, 0.0), rec("3", 1, 3.0, true, 0.0)]);
        let g = build_time_grid(&d, 2, 3.0).unwrap();
        assert_eq!(g.points(), &[2.0, 3.0]);
    }

    #[test]
    fn quantile_grid_collapses_ties() {
        let d = ds((0..5).map(|i| rec(&i.to_string(), 0, 0.7, true, 0.0)).collect());
        let g = build_time_grid(&d, 5, 2.0).unwrap();
        assert_eq!(g.points(), &[0.7, 2.0]);
        assert!(matches!(build_time_grid(&d, 3, 0.5), Err(Error::DegenerateGrid(_))));
    }

    #[test]
    fn expansion_examples() {
        let g = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        let d = ds(vec![
            rec("e", 0, 1.3, true, 0.0),
            rec("late", 0, 2.8, false, 2.5),
            rec("full", 1, 3.0, false, 0.0),
            rec("at_two", 1, 2.8, false, 2.0),
        ]);
        let t = expand_person_period(&d, &g);
        let rows_of = |s: usize| t.rows().iter().filter(|r| r.subject == s).copied().collect::<Vec<_>>();

        let r0 = rows_of(0);
        assert_eq!(r0.len(), 2);
        assert!(r0[0].at_risk && !r0[0].event_here);
        assert!(r0[1].at_risk && r0[1].event_here);

        // entry inside (t_2, t_3] leaves no fully observable interval
        let r1 = rows_of(1);
        assert!(r1.iter().all(|r| !r.at_risk));
        assert!(r1[2].entered);

        let r2 = rows_of(2);
        assert_eq!(r2.len(), 3);
        assert!(r2.iter().all(|r| r.at_risk && !r.event_here));
        assert!(r2[2].censored_here);

        let r3 = rows_of(3);
        let risk: Vec<usize> = r3.iter().filter(|r| r.at_risk).map(|r| r.k).collect();
        assert_eq!(risk, vec![2]);
        assert!(r3[2].censored_here);
    }

    #[test]
    fn entry_interval_rule() {
        let g = TimeGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.entry_interval(0.0), 0);
        assert_eq!(g.entry_interval(0.5), 1);
        assert_eq!(g.entry_interval(1.0), 1);
        assert_eq!(g.entry_interval(2.5), 3);
        assert_eq!(g.interval_of(1.0), Some(0));
        assert_eq!(g.interval_of(1.0001), Some(1));
        assert_eq!(g.interval_of(3.5), None);
    }

    fn arb_dataset() -> impl Strategy<Value = SurvivalDataset> {
        prop::collection::vec((0u8..2, 0.01f64..4.0, any::<bool>(), 0.0f64..1.0, prop::bool::weighted(0.3)), 1..40)
            .prop_map(|v| {
                let records = v
                    .into_iter()
                    .enumerate()
                    .map(|(i, (a, t, e, frac, trunc))| {
                        rec(&i.to_string(), a, t, e, if trunc { t * frac } else { 0.0 })
                    })
                    .collect();
                ds(records)
            })
    }

    proptest! {
        #[test]
        fn expansion_invariants(d in arb_dataset()) {
            let g = TimeGrid::new(vec![0.5, 1.0, 2.0, 3.0]).unwrap();
            let t = expand_person_period(&d, &g);
            let tau = g.tau();
            let events: usize = t.rows().iter().filter(|r| r.event_here).count();
            let expected = d.records().iter().filter(|r| r.event && r.time_obs <= tau
                && g.interval_of(r.time_obs).map(|k| r.entry <= g.left(k)).unwrap_or(false)).count();
            prop_assert_eq!(events, expected);
            for r in t.rows() {
                if r.event_here { prop_assert!(r.at_risk && r.entered); }
            }
            let agg = t.aggregate();
            for (i, rec) in d.records().iter().enumerate() {
                let per_subject = t.rows().iter().filter(|r| r.subject == i && r.event_here).count();
                prop_assert!(per_subject <= 1);
                if let Some((k, ev)) = agg[i] {
                    let last = g.interval_of(rec.time_obs).unwrap_or(g.len() - 1);
                    prop_assert_eq!(k, last);
                    prop_assert_eq!(ev, rec.event && rec.time_obs <= tau);
                }
            }
            // entry == 0 gives the right-censored expansion
            let rc = expand_person_period(&d.without_truncation(), &g);
            for r in rc.rows() { prop_assert!(r.at_risk); }
        }
    }
}
