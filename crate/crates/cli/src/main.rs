use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dpquant::accounting::{guarantee_for, multi_quantile_cost, NeighborModel, QueryClass};
use dpquant::aggregates::{dp_mean, dp_sum, ClipMethod, ClipThreshold, SumConfig};
use dpquant::bench::data::read_csv_column;
use dpquant::bench::experiment::{
    normalized_error_csv, run_quantile_experiment, run_sum_experiment, DatasetPreset, ExperimentSpec, Method,
};
use dpquant::bench::figures::{figure_csv, illustration_data, range_contrast, emit_pdf_figures};
use dpquant::bench::verify::{run_suite, Suite, VerifyOptions};
use dpquant::emq::BoundedRange;
use dpquant::noise::{NoiseKind, RandomSource};
use dpquant::quantile::{
    estimate_multiple_quantiles, estimate_quantile, estimate_quantile_unbounded, unbounded_guarantee, Dataset,
    QuantileRequest, DEFAULT_BETA,
};

#[derive(Parser)]
#[command(name = "dpquant", version, about = "Differentially private quantiles without an upper bound")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate one quantile of a CSV column.
    Quantile(QuantileArgs),
    /// Estimate several quantiles by recursive splitting.
    Quantiles(QuantilesArgs),
    /// Clipped sum (or mean) with a private clipping bound.
    Sum(SumArgs),
    /// Print the privacy guarantee of one AboveThreshold call.
    Account(AccountArgs),
    /// Run a resampling experiment and write JSON records.
    Bench(BenchArgs),
    /// Run statistical self-checks.
    Verify(VerifyArgs),
    /// Write EMQ and UQE density curves.
    Pdf(PdfArgs),
}

#[derive(Args)]
struct InputArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Column name (or zero-based index).
    #[arg(long)]
    column: String,
}

#[derive(Args)]
struct MechanismArgs {
    /// Total budget, split evenly unless --eps1/--eps2 are given.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, requires = "eps2")]
    eps1: Option<f64>,
    #[arg(long, requires = "eps1")]
    eps2: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, value_parser = parse_noise, default_value = "expo")]
    noise: NoiseKind,
    #[arg(long, value_parser = parse_neighbor, default_value = "swap")]
    neighbor: NeighborModel,
    #[arg(long)]
    max_queries: Option<usize>,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long, env = "DPQUANT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct QuantileArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    q: f64,
    /// Lower bound of the data; without it the two-sided search is used.
    #[arg(long)]
    lower: Option<f64>,
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantilesArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Comma-separated, increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    qs: Vec<f64>,
    #[arg(long)]
    lower: f64,
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipKind {
    Uqe,
    Emq,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdKind {
    Quantile,
    N,
    NPlusInvEps,
}

#[derive(Args)]
struct SumArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Budget of each of the two stages.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.99)]
    q: f64,
    #[arg(long, value_enum, default_value = "uqe")]
    method: ClipKind,
    #[arg(long, default_value_t = dpquant::quantile::CLIPPING_BETA)]
    beta: f64,
    #[arg(long, value_parser = parse_noise, default_value = "expo")]
    noise: NoiseKind,
    /// EMQ range as `a,b`.
    #[arg(long, value_delimiter = ',')]
    range: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "quantile")]
    threshold: ThresholdKind,
    /// Report the mean instead of the sum.
    #[arg(long)]
    mean: bool,
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long, value_parser = parse_class, default_value = "monotonic")]
    class: QueryClass,
    #[arg(long)]
    eps1: f64,
    #[arg(long)]
    eps2: f64,
    #[arg(long, value_parser = parse_noise, default_value = "expo")]
    noise: NoiseKind,
    #[arg(long, value_parser = parse_neighbor, default_value = "swap")]
    neighbor: NeighborModel,
    #[arg(long)]
    q: Option<f64>,
    /// Also report the cost of estimating this many quantiles.
    #[arg(long)]
    quantiles: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Quantile,
    Sum,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "quantile")]
    experiment: ExperimentKind,
    /// uniform, gaussian, ratings, pages, hours or ages.
    #[arg(long, value_parser = parse_preset)]
    dataset: DatasetPreset,
    #[arg(long, requires = "column")]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    column: Option<String>,
    /// Outer resampling trials.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 100)]
    inner_trials: usize,
    #[arg(long, default_value_t = 1000)]
    sample_size: usize,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    qs: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, value_parser = parse_noise, default_value = "expo")]
    noise: NoiseKind,
    #[command(flatten)]
    seed: SeedArgs,
    /// Record wall-clock time (output is then not reproducible).
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the normalized error table for the first budget.
    #[arg(long)]
    normalized_csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name, or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 200_000)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, env = "DPQUANT_SEED", default_value_t = 2023)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PdfArgs {
    /// Data in [0, 10]; ten uniform draws when omitted.
    #[arg(long, requires = "column")]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    column: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    q: f64,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Single range `a,b`; default is the [0,10] and [0,20] pair.
    #[arg(long, value_delimiter = ',')]
    range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 401)]
    points: usize,
    #[command(flatten)]
    seed: SeedArgs,
    /// Directory for the CSV curves.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn parse_noise(s: &str) -> Result<NoiseKind, String> {
    s.parse().map_err(|e: dpquant::DpError| e.to_string())
}

fn parse_neighbor(s: &str) -> Result<NeighborModel, String> {
    s.parse().map_err(|e: dpquant::DpError| e.to_string())
}

fn parse_class(s: &str) -> Result<QueryClass, String> {
    s.parse().map_err(|e: dpquant::DpError| e.to_string())
}

fn parse_preset(s: &str) -> Result<DatasetPreset, String> {
    s.parse().map_err(|e: dpquant::DpError| e.to_string())
}

fn request(q: f64, m: &MechanismArgs) -> Result<QuantileRequest> {
    let mut req = QuantileRequest::new(q, m.epsilon)?
        .with_beta(m.beta)
        .with_noise(m.noise)
        .with_neighbor(m.neighbor);
    if let (Some(e1), Some(e2)) = (m.eps1, m.eps2) {
        req = req.with_budgets(e1, e2);
    }
    if let Some(cap) = m.max_queries {
        req = req.with_max_queries(cap);
    }
    req.validate()?;
    Ok(req)
}

fn range_of(v: &[f64]) -> Result<BoundedRange> {
    match v {
        [a, b] => Ok(BoundedRange::new(*a, *b)?),
        _ => bail!("range needs exactly two values"),
    }
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn quantile(args: QuantileArgs) -> Result<()> {
    let values = read_csv_column(&args.input.input, &args.input.column)?;
    let req = request(args.q, &args.mechanism)?;
    let mut rng = RandomSource::new(args.seed.seed, 0);
    let out = match args.lower {
        Some(lower) => {
            let data = Dataset::with_lower_bound(values, lower)?;
            let est = estimate_quantile(&data, &req, &mut rng)?;
            json!({
                "value": est.value,
                "index": est.index,
                "exhausted": est.exhausted,
                "queries": est.queries,
                "guarantee": req.guarantee()?,
            })
        }
        None => {
            let data = Dataset::new(values)?;
            let est = estimate_quantile_unbounded(&data, &req, &mut rng)?;
            json!({
                "value": est.value,
                "exhausted": est.exhausted,
                "guarantee": unbounded_guarantee(&req)?,
            })
        }
    };
    emit(&out, args.out.as_deref())
}

fn quantiles(args: QuantilesArgs) -> Result<()> {
    let values = read_csv_column(&args.input.input, &args.input.column)?;
    let data = Dataset::with_lower_bound(values, args.lower)?;
    let req = request(0.5, &args.mechanism)?;
    let mut rng = RandomSource::new(args.seed.seed, 0);
    let est = estimate_multiple_quantiles(&data, &args.qs, &req, &mut rng)?;
    emit(&serde_json::to_value(&est)?, args.out.as_deref())
}

fn sum(args: SumArgs) -> Result<()> {
    let values = read_csv_column(&args.input.input, &args.input.column)?;
    let method = match args.method {
        ClipKind::Uqe => ClipMethod::Uqe {
            beta: args.beta,
            noise: args.noise,
        },
        ClipKind::Emq => {
            let range = args.range.as_deref().context("--method emq needs --range a,b")?;
            ClipMethod::Emq { range: range_of(range)? }
        }
    };
    let threshold = match args.threshold {
        ThresholdKind::Quantile => ClipThreshold::Quantile,
        ThresholdKind::N => ClipThreshold::N,
        ThresholdKind::NPlusInvEps => ClipThreshold::NPlusInvEps,
    };
    let cfg = SumConfig::new(args.epsilon)
        .with_q(args.q)
        .with_method(method)
        .with_threshold(threshold);
    let mut rng = RandomSource::new(args.seed.seed, 0);
    let est = if args.mean {
        dp_mean(&values, &cfg, &mut rng)?
    } else {
        dp_sum(&values, &cfg, &mut rng)?
    };
    emit(&serde_json::to_value(est)?, args.out.as_deref())
}

fn account(args: AccountArgs) -> Result<()> {
    let g = guarantee_for(args.class, args.neighbor, args.noise, args.eps1, args.eps2, args.q)?;
    let mut out = json!({ "guarantee": g });
    if let Some(m) = args.quantiles {
        out["multi_quantile"] = serde_json::to_value(multi_quantile_cost(m, g))?;
    }
    emit(&out, None)
}

fn bench(args: BenchArgs) -> Result<()> {
    let csv = args.input.zip(args.column);
    let mut spec = ExperimentSpec::from_preset(args.dataset, csv)?;
    spec.outer_trials = args.trials;
    spec.inner_trials = args.inner_trials;
    spec.sample_size = args.sample_size;
    spec.seed = args.seed.seed;
    spec.beta = args.beta;
    spec.noise = args.noise;
    spec.timings = args.timings;
    if let Some(eps) = args.epsilon {
        spec.eps_grid = eps;
    } else if let ExperimentKind::Sum = args.experiment {
        spec.eps_grid = vec![0.1, 0.5, 1.0];
    }
    if let Some(methods) = args.methods {
        spec.methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
    }
    if let Some(qs) = args.qs {
        spec.quantiles = qs;
    }
    let records = match args.experiment {
        ExperimentKind::Quantile => run_quantile_experiment(&spec)?,
        ExperimentKind::Sum => run_sum_experiment(&spec)?,
    };
    if let Some(path) = &args.normalized_csv {
        fs::write(path, normalized_error_csv(&records, spec.eps_grid[0]))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&json!({ "spec": spec, "records": records }), args.out.as_deref())
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![args.suite.parse()?]
    };
    let opts = VerifyOptions {
        trials: args.trials,
        seed: args.seed,
        instances: args.instances,
    };
    let reports = suites
        .into_iter()
        .map(|s| run_suite(s, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        eprintln!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.suite);
    }
    emit(&json!({ "passed": passed, "reports": reports }), args.out.as_deref())?;
    Ok(passed)
}

fn pdf(args: PdfArgs) -> Result<()> {
    let data = match (&args.input, &args.column) {
        (Some(path), Some(column)) => read_csv_column(path, column)?,
        _ => illustration_data(10, &mut RandomSource::new(args.seed.seed, 0)),
    };
    let figures = match &args.range {
        Some(r) => vec![emit_pdf_figures(&data, &range_of(r)?, args.q, args.epsilon, args.beta)?],
        None => range_contrast(&data, args.q, args.epsilon, args.beta)?.to_vec(),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut summary = Vec::new();
    for fig in &figures {
        let name = format!("pdf_{}_{}.csv", fig.range.lo(), fig.range.hi());
        let path = args.out.join(&name);
        fs::write(&path, figure_csv(fig, args.points)).with_context(|| format!("writing {}", path.display()))?;
        summary.push(json!({
            "file": name,
            "range": [fig.range.lo(), fig.range.hi()],
            "emq_top_mass": fig.emq_top_mass,
            "uqe_residual": fig.uqe_residual,
        }));
    }
    emit(&json!({ "data": data, "figures": summary }), None)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantile(a) => quantile(a).map(|_| true),
        Command::Quantiles(a) => quantiles(a).map(|_| true),
        Command::Sum(a) => sum(a).map(|_| true),
        Command::Account(a) => account(a).map(|_| true),
        Command::Bench(a) => bench(a).map(|_| true),
        Command::Verify(a) => verify(a),
        Command::Pdf(a) => pdf(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
