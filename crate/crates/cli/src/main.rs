//! `sarpu`: generate SAR PU benchmark instances, train and evaluate PU
//! classifiers, run the benchmark, and run the verification suites.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence, 4 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sarpu_core::bench::{self, BenchConfig, Method, MethodConfig, Metric, PropensityEstimate};
use sarpu_core::dataio::{self, ModelFile, Schema, TestSet};
use sarpu_core::glm;
use sarpu_core::metrics;
use sarpu_core::risk;
use sarpu_core::sar_em;
use sarpu_core::simulate::{self, BlobConfig, SimulationConfig};
use sarpu_core::types::{LabeledDataset, LinearModel, EVAL_CLIP};
use sarpu_core::verify;

#[derive(Parser, Debug)]
#[command(name = "sarpu", version, about = "Learning from positive and unlabeled data under selection bias")]
struct Cli {
    /// Directory searched for relative dataset paths that do not exist in
    /// the working directory.
    #[arg(long, global = true, env = "SARPU_DATA_DIR")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write simulated train/test instance pairs and a run manifest.
    Generate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on a PU instance file.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for model files and diagnostics.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a classifier (and optionally a propensity model) on a test file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        propensity: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "mse_f,roc_auc_f,mse_e")]
        metrics: Vec<Metric>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate instances and compare methods.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "naive,scar-en,sar-strat,sar-em,sar-true-e,supervised")]
        methods: Vec<Method>,
        /// Cap on concurrently running (instance, method) units.
        #[arg(long)]
        jobs: Option<usize>,
        /// Compute propensity MSE on train positives instead of test positives.
        #[arg(long)]
        propensity_on_train: bool,
        /// Directory for summary.tsv, instances.tsv and manifest.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte-Carlo labelings for the bounds suite.
        #[arg(long, default_value_t = 10_000)]
        labelings: usize,
        /// Flip the sign of the estimator under test.
        #[arg(long, hide = true)]
        corrupt_estimator: bool,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// A CSV path, or `synthetic-blobs`.
    #[arg(long, default_value = "synthetic-blobs")]
    dataset: String,
    /// Schema file; defaults to the CSV path with a `.schema` extension.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    blob_n: usize,
    #[arg(long, default_value_t = 4)]
    blob_dim: usize,
    #[arg(long, default_value_t = 4.0)]
    blob_separation: f64,
    #[arg(long, default_value_t = 0)]
    blob_seed: u64,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    k_clusters: usize,
    #[arg(long, default_value_t = 2)]
    k_prop_attrs: usize,
    #[arg(long, default_value_t = 0.2)]
    p_low: f64,
    #[arg(long, default_value_t = 0.8)]
    p_high: f64,
    #[arg(long, default_value_t = 5)]
    n_splits: usize,
    #[arg(long, default_value_t = 5)]
    n_labelings: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

impl SimArgs {
    fn config(&self) -> SimulationConfig {
        SimulationConfig {
            k_clusters: self.k_clusters,
            k_prop_attrs: self.k_prop_attrs,
            p_low: self.p_low,
            p_high: self.p_high,
            n_splits: self.n_splits,
            n_labelings: self.n_labelings,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// L2 strength; defaults to 1 / (number of positively weighted examples).
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    e_floor: f64,
    #[arg(long, default_value_t = 500)]
    max_em_iters: usize,
}

impl TrainArgs {
    fn config(&self) -> MethodConfig {
        let mut c = MethodConfig::default();
        c.train.l2_strength = self.l2;
        c.em.retrain.l2_strength = self.l2;
        c.e_floor = self.e_floor;
        c.em.e_floor = self.e_floor;
        c.stratify.e_floor = self.e_floor;
        c.stratify.train.l2_strength = self.l2;
        c.em.max_iters = self.max_em_iters;
        c
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    Props,
    Em,
    Bounds,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<sarpu_core::Error>() {
            Some(e) if e.is_numeric() => 3,
            Some(sarpu_core::Error::InvalidArgument(_)) => 1,
            Some(_) => 2,
            None if error.downcast_ref::<std::io::Error>().is_some() => 2,
            None => 1,
        };
        Failure { code, error }
    }
}

impl From<sarpu_core::Error> for Failure {
    fn from(error: sarpu_core::Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn data_error(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn resolve(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn load_dataset(args: &DataArgs, data_dir: Option<&Path>) -> CliResult<(String, LabeledDataset)> {
    if args.dataset == "synthetic-blobs" {
        let config = BlobConfig {
            n: args.blob_n,
            dim: args.blob_dim,
            positive_fraction: 0.5,
            separation: args.blob_separation,
        };
        return Ok(("synthetic-blobs".into(), simulate::synthetic_blobs(&config, args.blob_seed)?));
    }
    let csv = resolve(Path::new(&args.dataset), data_dir);
    let schema_path = match &args.schema {
        Some(p) => resolve(p, data_dir),
        None => csv.with_extension("schema"),
    };
    let schema = Schema::load(&schema_path)
        .with_context(|| format!("reading schema {}", schema_path.display()))
        .map_err(data_error)?;
    let loaded = dataio::load_csv(&csv, &schema)
        .with_context(|| format!("loading {}", csv.display()))
        .map_err(data_error)?;
    let name = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.dataset.clone());
    Ok((name, loaded.data))
}

fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_error)
}

fn instance_stem(split: usize, labeling: usize) -> String {
    format!("split{split}_labeling{labeling}")
}

fn generate(data: &DataArgs, sim: &SimArgs, out: &Path, data_dir: Option<&Path>) -> CliResult {
    let config = sim.config();
    config.validate()?;
    let (_, dataset) = load_dataset(data, data_dir)?;
    let experiment = simulate::make_experiment_instances(&dataset, &config)?;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data_error)?;
    for inst in &experiment.instances {
        let stem = instance_stem(inst.split, inst.labeling);
        write(&out.join(format!("{stem}.train.pu")), &dataio::pu_to_text(&inst.train))?;
        let test = TestSet {
            data: inst.test.clone(),
            propensity: Some(inst.test_propensity.clone()),
            propensity_attrs: inst.train.propensity_attr_indices().to_vec(),
        };
        write(&out.join(format!("{stem}.test.pu")), &dataio::test_to_text(&test))?;
    }
    write(&out.join("manifest.txt"), &experiment.manifest.to_text())?;
    println!(
        "wrote {} instance pairs and manifest.txt to {}",
        experiment.instances.len(),
        out.display()
    );
    Ok(())
}

fn constant_propensity_model(c: f64) -> ModelFile {
    let mut model = LinearModel::zeros(0);
    model.intercept = glm::logit(c);
    ModelFile {
        model,
        columns: Some(Vec::new()),
    }
}

fn train(method: Method, input: &Path, out: &Path, args: &TrainArgs) -> CliResult {
    let pu = dataio::load_pu(input)
        .with_context(|| format!("reading {}", input.display()))
        .map_err(data_error)?;
    let config = args.config();
    let trained = bench::train_method(method, &pu, &config)
        .map_err(|e| Failure::from(anyhow::Error::from(e).context(format!("training {method}"))))?;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(data_error)?;
    let classifier = ModelFile {
        model: trained.classifier.clone(),
        columns: None,
    };
    write(&out.join("classifier.model"), &classifier.to_text())?;
    let mut written = vec!["classifier.model"];
    match &trained.propensity {
        Some(PropensityEstimate::Model(m)) => {
            let file = ModelFile {
                model: m.clone(),
                columns: Some(pu.propensity_attr_indices().to_vec()),
            };
            write(&out.join("propensity.model"), &file.to_text())?;
            written.push("propensity.model");
        }
        Some(PropensityEstimate::Constant(c)) => {
            write(&out.join("propensity.model"), &constant_propensity_model(*c).to_text())?;
            written.push("propensity.model");
        }
        Some(PropensityEstimate::Strata(strata)) => {
            write(&out.join("strata.tsv"), &strata.to_table())?;
            written.push("strata.tsv");
        }
        None => {}
    }
    if let Some(trace) = &trained.trace {
        write(&out.join("em_trace.tsv"), &sar_em::trace_to_text(trace))?;
        written.push("em_trace.tsv");
    }
    println!("{method}: wrote {} to {}", written.join(", "), out.display());
    Ok(())
}

fn evaluate(
    model: &Path,
    propensity: Option<&Path>,
    test: &Path,
    wanted: &[Metric],
    out: Option<&Path>,
) -> CliResult {
    let test = dataio::load_test(test)
        .with_context(|| format!("reading {}", test.display()))
        .map_err(data_error)?;
    let classifier = ModelFile::load(model)
        .with_context(|| format!("reading {}", model.display()))
        .map_err(data_error)?;
    let x = classifier.select(test.data.features()).map_err(|e| data_error(e.into()))?;
    let probs = glm::predict_proba(&classifier.model, x.view(), EVAL_CLIP).map_err(|e| data_error(e.into()))?;
    let probs = probs.to_vec();
    let y = test.data.classes();
    let mut lines = String::from("metric\tvalue\n");
    for &metric in wanted {
        let value = match metric {
            Metric::MseF => metrics::mse_prob(&probs, y)?,
            Metric::RocAucF => metrics::roc_auc(&probs, y).map_err(|e| data_error(e.into()))?,
            Metric::MseE => {
                let (Some(path), Some(e_true)) = (propensity, &test.propensity) else {
                    log::info!("skipping mse_e: needs --propensity and a test file with true propensities");
                    continue;
                };
                let pm = ModelFile::load(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(data_error)?;
                let xe = pm.select(test.data.features()).map_err(|e| data_error(e.into()))?;
                let e_hat = glm::predict_proba(&pm.model, xe.view(), EVAL_CLIP).map_err(|e| data_error(e.into()))?;
                metrics::mse_propensity(&e_hat.to_vec(), e_true, y).map_err(|e| data_error(e.into()))?
            }
        };
        lines.push_str(&format!("{}\t{value}\n", metric.name()));
    }
    print!("{lines}");
    if let Some(out) = out {
        write(out, &lines)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    data: &DataArgs,
    sim: &SimArgs,
    train: &TrainArgs,
    methods: &[Method],
    jobs: Option<usize>,
    propensity_on_train: bool,
    out: Option<&Path>,
    data_dir: Option<&Path>,
) -> CliResult {
    let config = BenchConfig {
        simulation: sim.config(),
        methods: train.config(),
        propensity_on_train,
        jobs,
    };
    config.simulation.validate()?;
    if jobs == Some(0) {
        return Err(anyhow!(sarpu_core::Error::InvalidArgument("--jobs must be positive".into())).into());
    }
    let (name, dataset) = load_dataset(data, data_dir)?;
    let report = bench::run_benchmark(&name, &dataset, methods, &config)?;
    let summary = report.summary_table();
    print!("{summary}");
    if let Some(out) = out {
        fs::create_dir_all(out)
            .with_context(|| format!("creating {}", out.display()))
            .map_err(data_error)?;
        write(&out.join("summary.tsv"), &summary)?;
        write(&out.join("instances.tsv"), &report.long_table())?;
        write(&out.join("manifest.txt"), &report.manifest.to_text())?;
    }
    Ok(())
}

fn flipped_pw_risk(
    yhat: &[f64],
    s: &[u8],
    e: &[f64],
    cost: &sarpu_core::CostSpec,
) -> sarpu_core::Result<risk::RiskReport> {
    let mut r = risk::pw_risk(yhat, s, e, cost)?;
    r.value = -r.value;
    Ok(r)
}

fn run_verify(suite: Suite, seed: u64, labelings: usize, corrupt: bool) -> CliResult {
    let estimator: verify::RiskFn = if corrupt { flipped_pw_risk } else { risk::pw_risk };
    if labelings == 0 {
        return Err(anyhow!(sarpu_core::Error::InvalidArgument("--labelings must be positive".into())).into());
    }
    let report = match suite {
        Suite::Props => verify::props_suite(seed, estimator)?,
        Suite::Bounds => verify::bounds_suite(seed, labelings, estimator)?,
        Suite::Em => verify::em_suite(seed)?,
    };
    print!("{report}");
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure {
            code: 4,
            error: anyhow!("{} suite failed: {}", report.suite, failed.join(", ")),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let data_dir = cli.data_dir.as_deref();
    match &cli.command {
        Command::Generate { data, sim, out } => generate(data, sim, out, data_dir),
        Command::Train {
            method,
            input,
            out,
            train: args,
        } => train(*method, input, out, args),
        Command::Evaluate {
            model,
            propensity,
            test,
            metrics,
            out,
        } => evaluate(model, propensity.as_deref(), test, metrics, out.as_deref()),
        Command::Bench {
            data,
            sim,
            train,
            methods,
            jobs,
            propensity_on_train,
            out,
        } => run_bench(data, sim, train, methods, *jobs, *propensity_on_train, out.as_deref(), data_dir),
        Command::Verify {
            suite,
            seed,
            labelings,
            corrupt_estimator,
        } => run_verify(*suite, *seed, *labelings, *corrupt_estimator),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        let f = Failure::from(sarpu_core::Error::Diverged { loss: -1.0, guard: -0.5 });
        assert_eq!(f.code, 3);
        let f = Failure::from(sarpu_core::Error::InvalidArgument("x".into()));
        assert_eq!(f.code, 1);
        let f = Failure::from(sarpu_core::Error::MissingData("x".into()));
        assert_eq!(f.code, 2);
    }

    #[test]
    fn relative_paths_fall_back_to_data_dir() {
        let dir = Path::new("/some/data");
        assert_eq!(resolve(Path::new("nope.csv"), Some(dir)), dir.join("nope.csv"));
        assert_eq!(resolve(Path::new("/abs.csv"), Some(dir)), PathBuf::from("/abs.csv"));
    }
}
