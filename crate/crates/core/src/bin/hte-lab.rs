use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hte_lab::boosting::cross_validate_boost;
use hte_lab::data::EffectModel;
use hte_lab::error::{HteError, Result};
use hte_lab::estimators::{Method, MethodKind};
use hte_lab::io::{
    has_column, load_csv, load_features, read_column, write_dataset_csv, write_effects_csv, write_truth_csv, CsvSchema,
};
use hte_lab::persist::{load_model, save_model, RunConfig};
use hte_lab::propensity::{assign_strata, fit_propensity, StrataAssignment};
use hte_lab::rng::stream;
use hte_lab::simbench::{
    binned_effect_report, generate, parse_scenario_ids, run_benchmark, scenario, summarize, summarize_with_tree,
    write_results_csv, BenchConfig,
};

/// Heterogeneous treatment effect estimation.
#[derive(Parser)]
#[command(name = "hte-lab", version)]
struct Cli {
    /// Worker threads (falls back to HTE_LAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Columns {
    #[arg(long, default_value = "T")]
    treatment_col: String,
    #[arg(long, default_value = "Y")]
    response_col: String,
}

impl Columns {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            treatment_col: self.treatment_col.clone(),
            response_col: self.response_col.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a built-in scenario.
    Simulate {
        #[arg(long)]
        scenario: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-unit true effect, propensity and mean.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a model and save it as JSON.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cols: Columns,
    },
    /// Cross-validate the number of causal boosting stages.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cols: Columns,
    },
    /// Predict effects for new rows with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cols: Columns,
    },
    /// Run the simulation benchmark.
    Benchmark {
        /// e.g. `1-16` or `2,5,9-11`.
        #[arg(long)]
        scenarios: String,
        /// Comma-separated method tags.
        #[arg(long)]
        methods: String,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-scenario, per-method median and IQR as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Benchmark settings as JSON; desk-scale defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        held_out: bool,
    },
    /// Binned effect table or a summary tree of effect estimates.
    Report {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long, default_value = "tau_hat")]
        column: String,
        /// Features, when they are not in the estimates file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        feature: Option<String>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        summarize_tree: bool,
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
        #[arg(long, default_value_t = 5)]
        min_leaf: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cols: Columns,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HteError::MalformedDocument(e.to_string()))?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => writeln!(io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("HTE_LAB_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HteError::InvalidParameter(format!("HTE_LAB_THREADS={v:?} is not a count"))),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = threads(cli.threads)? {
        if n < 1 {
            return Err(HteError::InvalidParameter("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HteError::Unsupported(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            scenario: id,
            seed,
            out,
            truth,
        } => {
            let draw = generate(&scenario(id)?, seed)?;
            write_dataset_csv(&draw.dataset, create(&out)?)?;
            if let Some(t) = truth {
                write_truth_csv(&draw, create(&t)?)?;
            }
            if draw.t_redraws > 0 {
                eprintln!("{}", json!({"note": "treatment redrawn", "redraws": draw.t_redraws}));
            }
        }
        Command::Fit {
            config,
            data,
            out,
            seed,
            cols,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let d = load_csv(&data, &cols.schema())?.dataset;
            let (doc, fit) = cfg.fit(&d)?;
            save_model(&doc, &out)?;
            if let Some(cv) = fit.cv {
                eprintln!("{}", json!({"k_star": cv.k_star}));
            }
        }
        Command::Cv {
            config,
            data,
            folds,
            out,
            cols,
        } => {
            let cfg = RunConfig::load(&config)?;
            if cfg.method != MethodKind::CausalBoost {
                return Err(HteError::Unsupported("cv selects the number of causal boosting stages".into()));
            }
            let d = load_csv(&data, &cols.schema())?.dataset;
            let mut rng = stream(cfg.seed);
            let sa = if cfg.method().needs_propensity() {
                let p = fit_propensity(&d, &cfg.params.propensity, cfg.params.clip, &mut rng)?;
                assign_strata(&p.scores, cfg.params.n_strata)?
            } else {
                StrataAssignment::uniform(d.n())
            };
            let cv = cross_validate_boost(&d, &sa, folds, &cfg.params.boost, &mut rng)?;
            emit(out.as_deref(), &serde_json::to_value(&cv.report).expect("serializable"))?;
        }
        Command::Predict { model, data, out, cols } => {
            let doc = load_model(&model)?;
            let exclude = [cols.treatment_col.as_str(), cols.response_col.as_str()];
            let (x, _) = load_features(&data, &exclude, doc.feature_names.as_deref())?;
            if x.ncols() != doc.n_features {
                return Err(HteError::DimensionMismatch(format!(
                    "model expects {} features, data has {}",
                    doc.n_features,
                    x.ncols()
                )));
            }
            let est = doc.model.estimate(&x);
            let means = est.mu1_hat.as_deref().zip(est.mu0_hat.as_deref());
            write_effects_csv(&est.tau_hat, means, create(&out)?)?;
        }
        Command::Benchmark {
            scenarios,
            methods,
            reps,
            seed,
            out,
            summary,
            config,
            held_out,
        } => {
            let ids = parse_scenario_ids(&scenarios)?;
            let methods: Vec<Method> = methods
                .split(',')
                .filter(|m| !m.trim().is_empty())
                .map(Method::parse)
                .collect::<Result<_>>()?;
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .map_err(|e| HteError::MalformedDocument(format!("benchmark config: {e}")))?,
                None => BenchConfig::default(),
            };
            cfg.held_out |= held_out;
            let rows = run_benchmark(&ids, &methods, reps, seed, &cfg)?;
            write_results_csv(&rows, create(&out)?)?;
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "{}",
                    json!({"failed_cell": {"scenario": r.scenario, "method": r.method, "rep": r.rep, "error": r.error}})
                );
            }
            if let Some(s) = summary {
                emit(Some(&s), &serde_json::to_value(summarize(&rows)).expect("serializable"))?;
            }
        }
        Command::Report {
            estimates,
            column,
            data,
            feature,
            bins,
            summarize_tree,
            max_depth,
            min_leaf,
            out,
            cols,
        } => {
            let tau = read_column(&estimates, &column)?;
            if summarize_tree {
                let data = data.ok_or_else(|| HteError::InvalidParameter("--summarize-tree needs --data".into()))?;
                let exclude = [cols.treatment_col.as_str(), cols.response_col.as_str()];
                let (x, names) = load_features(&data, &exclude, None)?;
                let tree = summarize_with_tree(&x, &tau, max_depth, min_leaf)?;
                emit(out.as_deref(), &json!({"features": names, "tree": tree}))?;
            } else {
                let name = feature.ok_or_else(|| HteError::InvalidParameter("--feature is required".into()))?;
                let source = if has_column(&estimates, &name)? {
                    estimates.clone()
                } else {
                    data.ok_or_else(|| HteError::MissingColumn(name.clone()))?
                };
                let f = read_column(&source, &name)?;
                let table = binned_effect_report(&tau, &f, bins)?;
                match out {
                    Some(p) => {
                        let mut w = csv::Writer::from_writer(create(&p)?);
                        for row in &table {
                            w.serialize(row).map_err(|e| HteError::Io(io::Error::other(e)))?;
                        }
                        w.flush()?;
                    }
                    None => emit(None, &serde_json::to_value(&table).expect("serializable"))?,
                }
            }
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
