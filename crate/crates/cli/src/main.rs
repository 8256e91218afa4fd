use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use survitmle::cate::{self, CateModel};
use survitmle::data::{load_dataset, ColumnSchema, SurvivalDataset, TimeGrid};
use survitmle::eval::{self, PipelineConfig, StudyConfig};
use survitmle::simulation::{covariate_names, draw_test_set, simulate, true_cate, Dgp, DgpSpec, Truncation};

#[derive(Parser)]
#[command(name = "survitmle", version, about = "Targeted estimation of conditional survival-probability differences")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from one of the simulation designs.
    Simulate {
        #[arg(long, default_value_t = 1)]
        dgp: u8,
        #[arg(long, default_value = "low")]
        truncation: String,
        #[arg(long, default_value_t = 800)]
        n: usize,
    },
    /// Monte-Carlo true curves on a freshly drawn test set.
    Truth {
        #[arg(long, default_value_t = 1)]
        dgp: u8,
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long, default_value_t = 100_000)]
        mc_reps: usize,
    },
    /// Nuisances, targeting and second stage on a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated evaluation times.
        #[arg(long, conflicts_with = "dgp")]
        grid: Option<String>,
        /// Use a simulation design's evaluation grid.
        #[arg(long)]
        dgp: Option<u8>,
        /// Restrict the second stage to these covariate columns.
        #[arg(long, value_delimiter = ',')]
        heterogeneity: Option<Vec<String>>,
    },
    /// Curves from a fitted second-stage model at new covariate rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with an id column followed by the training covariates.
        #[arg(long)]
        x: PathBuf,
    },
    /// Per-time RMSE of curves against truth.
    Evaluate {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Replicated simulation study.
    Study,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&s).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn out_path(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_matrix(path: &Path, ids: &[String], names: &[String], x: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `id, c1, c2, ...` of a covariate file.
fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() + 1 {
            bail!("line {}: expected {} fields, found {}", line + 2, names.len() + 1, rec.len());
        }
        ids.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            vals.push(v.trim().parse::<f64>().with_context(|| format!("line {}: `{v}`", line + 2))?);
        }
    }
    let x = Array2::from_shape_vec((ids.len(), names.len()), vals)?;
    Ok((ids, names, x))
}

fn parse_grid(grid: Option<&str>, dgp: Option<u8>) -> Result<TimeGrid> {
    if let Some(g) = grid {
        let pts = g
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("grid value `{s}`")))
            .collect::<Result<Vec<_>>>()?;
        return Ok(TimeGrid::new(pts)?);
    }
    Ok(Dgp::from_id(dgp.unwrap_or(1))?.eval_grid())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SavedModel {
    model: CateModel,
    covariate_names: Vec<String>,
}

fn fit(g: &Global, data: &Path, grid: TimeGrid, heterogeneity: Option<Vec<String>>) -> Result<()> {
    let mut cfg: PipelineConfig = read_json(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.nuisance.seed = s;
        cfg.targeting.seed = s;
        cfg.cate.seed = s;
    }
    let schema = ColumnSchema {
        heterogeneity,
        ..ColumnSchema::default()
    };
    let loaded = load_dataset(data, &schema)?;
    for r in &loaded.rejected {
        log::warn!("line {} ({}) excluded: {}", r.line, r.id, r.reason);
    }
    let ds: SurvivalDataset = loaded.dataset;
    let dir = out_path(g, "fit_out");
    ensure_dir(&dir)?;
    let fit = eval::run_pipeline(&ds, &grid, &cfg)?;
    fit.pseudo.write_csv(&dir.join("pseudo.csv"))?;
    fit.bundle.export(&dir.join("bundle"))?;

    let mut model = cate::fit_cate(&cate::build_long_increments(&fit.pseudo, &ds)?, &cfg.cate)?;
    model.heterogeneity_index = ds.heterogeneity_index().to_vec();
    let x = ds.heterogeneity_covariates();
    let ids: Vec<String> = ds.records().iter().map(|r| r.id.clone()).collect();
    let itmle = cate::predict_cate(&model, x.view(), &fit.pseudo.grid)?.with_ids(ids.clone())?;
    let naive = cate::naive_per_time(&fit.pseudo, &ds, &cfg.cate, x.view())?.with_ids(ids)?;
    let tl = cate::t_learner(&fit.bundle);
    cate::write_curves(&dir.join("curves.csv"), &[itmle, tl, naive])?;
    let saved = SavedModel {
        model,
        covariate_names: ds.covariate_names().to_vec(),
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&saved)?)?;

    let diag = serde_json::json!({
        "n": ds.n(),
        "rejected": loaded.rejected.len(),
        "grid": grid.points(),
        "drift": fit.state.drift(),
        "converged": fit.state.converged(),
        "nuisance": fit.bundle.diagnostics,
    });
    fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&diag)?)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn predict(g: &Global, model: &Path, x: &Path) -> Result<()> {
    let saved: SavedModel = serde_json::from_str(&fs::read_to_string(model)?)?;
    let (ids, names, z) = read_matrix(x)?;
    let cols: Vec<usize> = saved
        .model
        .heterogeneity_index
        .iter()
        .map(|&j| {
            let name = &saved.covariate_names[j];
            names.iter().position(|c| c == name).with_context(|| format!("covariate `{name}` missing from {}", x.display()))
        })
        .collect::<Result<_>>()?;
    let xh = z.select(ndarray::Axis(1), &cols);
    let est = cate::predict_cate(&saved.model, xh.view(), &saved.model.grid)?.with_ids(ids)?;
    let out = out_path(g, "curves.csv");
    est.write_csv(&out)?;
    println!("wrote {} ({} rows, {} clamped)", out.display(), est.theta.nrows(), est.clamped);
    Ok(())
}

fn evaluate(g: &Global, curves: &Path, truth: &Path) -> Result<()> {
    let (ids, truth) = eval::read_truth(truth)?;
    let out = out_path(g, "rmse.csv");
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["estimator", "t", "rmse"])?;
    for est in eval::read_curves(curves)? {
        let est = eval::align_rows(&est, &ids)?;
        let r = eval::rmse_by_time(&est, &truth)?;
        for (t, v) in truth.grid.points().iter().zip(&r) {
            w.write_record([est.estimator.clone(), t.to_string(), v.to_string()])?;
        }
        println!("{}: overall mean RMSE {:.4}", est.estimator, r.iter().sum::<f64>() / r.len() as f64);
    }
    w.flush()?;
    Ok(())
}

fn study(g: &Global) -> Result<ExitCode> {
    let mut cfg: StudyConfig = read_json(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if g.out.is_some() || cfg.output_dir.is_none() {
        cfg.output_dir = Some(out_path(g, "study_out"));
    }
    let res = eval::run_study(&cfg)?;
    for s in &res.summaries {
        println!(
            "{:<10} {:<22} overall mean RMSE {:.4} over {} replications",
            s.estimator.label(),
            s.cell.label(),
            s.aggregate.overall,
            s.aggregate.replications
        );
    }
    if let Some(d) = &cfg.output_dir {
        println!("wrote {}", d.display());
    }
    if res.has_failures() {
        eprintln!("{} replication(s) failed; see the replication records", res.failures);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    if let Some(w) = g.workers {
        if !matches!(cli.command, Command::Study) {
            rayon::ThreadPoolBuilder::new().num_threads(w).build_global().ok();
        }
    }
    match &cli.command {
        Command::Simulate { dgp, truncation, n } => {
            let spec = DgpSpec {
                dgp: Dgp::from_id(*dgp)?,
                truncation: Truncation::parse(truncation)?,
                n: *n,
                seed: g.seed.unwrap_or(0),
            };
            let sim = simulate(&spec)?;
            let out = out_path(g, "simulated.csv");
            sim.dataset.write_csv(&out)?;
            let mut side = out.clone().into_os_string();
            side.push(".manifest.json");
            fs::write(&side, serde_json::to_string_pretty(&sim.report)?)?;
            println!("wrote {} (drop rate {:.3})", out.display(), sim.report.drop_rate);
        }
        Command::Truth { dgp, m, mc_reps } => {
            let dgp = Dgp::from_id(*dgp)?;
            let seed = g.seed.unwrap_or(0);
            let dir = out_path(g, "truth_out");
            ensure_dir(&dir)?;
            let x = draw_test_set(*m, seed);
            let ids: Vec<String> = (1..=*m).map(|i| format!("q{i}")).collect();
            write_matrix(&dir.join("test_x.csv"), &ids, &covariate_names(), &x)?;
            let truth = true_cate(dgp, &x, &dgp.eval_grid(), *mc_reps, seed)?;
            truth.write_csv(&dir.join("truth.csv"), Some(&ids))?;
            println!("wrote {}", dir.display());
        }
        Command::Fit {
            data,
            grid,
            dgp,
            heterogeneity,
        } => fit(g, data, parse_grid(grid.as_deref(), *dgp)?, heterogeneity.clone())?,
        Command::Predict { model, x } => predict(g, model, x)?,
        Command::Evaluate { curves, truth } => evaluate(g, curves, truth)?,
        Command::Study => return study(g),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

