use std::fs;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use corrpath::bounds::{self, known_start_bound, monte_carlo_bound, unknown_start_bound};
use corrpath::detect::{self, run_scans, test_threshold, Scanner};
use corrpath::graph::read_paths;
use corrpath::harness::{self, ClassConfig, ExperimentConfig, OutputConfig};
use corrpath::model::{read_sample, simulate_alternative, simulate_null, write_sample};
use corrpath::paths::{estimate_eit, EitFit, PriorKind, PriorSampler};
use corrpath::rng::{CounterRng, Domain};
use corrpath::{CorrelationModel, Error, NodeId, Result, ScanEngine, SignMode, TorusLattice};

#[derive(Parser)]
#[command(
    name = "corrpath",
    version,
    about = "Correlated path detection on torus lattices"
)]
struct Cli {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `class.k=64`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a sample under the null or with a planted path.
    Simulate(SimulateArgs),
    /// Calibrated threshold for a class or an explicit log|C|.
    Calibrate(CalibrateArgs),
    /// Run the pair-count scan on a stored sample.
    Scan(ScanArgs),
    /// Monte Carlo type-I/type-II risk across a ψ grid.
    RiskCurve,
    /// Minimax risk lower bound from an EIT fit or a sampler.
    LowerBound(LowerBoundArgs),
    /// Fit the exponential-intersection-tail envelope of a prior.
    EitFit(EitArgs),
    /// Mean and variance of the pair count on a planted path.
    MomentCheck,
}

#[derive(Args)]
struct LatticeArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 32)]
    m: usize,
}

impl LatticeArgs {
    fn build(&self) -> Result<TorusLattice> {
        TorusLattice::new(self.d, self.m)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    lattice: LatticeArgs,
    /// Correlation of the planted path; omit for a null sample.
    #[arg(long, allow_hyphen_values = true)]
    psi: Option<f64>,
    /// Planted path as comma-separated node indices.
    #[arg(long)]
    path: Option<String>,
    /// Class to draw the planted path from when --path is absent.
    #[arg(long)]
    class: Option<ClassConfig>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long)]
    class: Option<ClassConfig>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    log_card: Option<f64>,
    #[arg(long, default_value = "plus")]
    sign: SignMode,
}

#[derive(Args)]
struct ScanArgs {
    /// Sample file written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    class: ClassConfig,
    /// Threshold, or `auto` to calibrate from the class.
    #[arg(long, default_value = "auto")]
    t: String,
    #[arg(long, default_value = "plus")]
    sign: SignMode,
    #[arg(long, default_value = "exhaustive")]
    engine: ScanEngine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Oriented,
    Mixture,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Route {
    Xi,
    MonteCarlo,
    Both,
}

#[derive(Args)]
struct SamplerArgs {
    #[command(flatten)]
    lattice: LatticeArgs,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, value_enum, default_value = "oriented")]
    prior: Prior,
    /// Start node of the oriented prior.
    #[arg(long, default_value_t = 0)]
    start: u32,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
}

impl SamplerArgs {
    fn build(&self, seed: u64) -> Result<PriorSampler> {
        let lattice = self.lattice.build()?;
        match self.prior {
            Prior::Oriented => {
                PriorSampler::oriented_uniform(lattice, NodeId(self.start), self.k, seed)
            }
            Prior::Mixture => PriorSampler::hypercube_mixture(lattice, self.k, seed),
        }
    }
}

/// The within-block prior of a mixture, whose envelope feeds the mixture bound.
fn block_prior(sampler: &PriorSampler) -> Result<PriorSampler> {
    match sampler.kind() {
        PriorKind::HypercubeMixture { centers } => PriorSampler::oriented_uniform(
            sampler.lattice().clone(),
            centers[0],
            sampler.k(),
            sampler.seed(),
        ),
        _ => Ok(sampler.clone()),
    }
}

#[derive(Args)]
struct LowerBoundArgs {
    /// ψ values (|ψ| < 1/9), comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    psi: Vec<f64>,
    /// EIT fit JSON written by `eit-fit`; otherwise one is measured from the sampler.
    #[arg(long)]
    eit: Option<PathBuf>,
    /// Mixture block count to use with --eit.
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, value_enum, default_value = "xi")]
    route: Route,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct EitArgs {
    #[command(flatten)]
    sampler: SamplerArgs,
}

// A closed pipe (`corrpath ... | head`) is not an error worth reporting.
fn write_stdout(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(v: &Value) {
    write_stdout(&(serde_json::to_string_pretty(v).expect("serializable") + "\n"));
}

fn write_json(path: &FsPath, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<Value> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::Validation("simulate needs --out <file>".into()))?;
    let lattice = a.lattice.build()?;
    let seed = cli.seed.unwrap_or(0);
    let sample = match a.psi {
        None => simulate_null(&lattice, seed),
        Some(psi) => {
            let model = CorrelationModel::new(psi)?;
            let path = match (&a.path, &a.class) {
                (Some(text), _) => read_paths(&lattice, text)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Validation("--path is empty".into()))?,
                (None, Some(class)) => {
                    let class = class.build(lattice.clone())?;
                    let mut rng = CounterRng::new(seed, Domain::Aux, 1);
                    class.random_path(&mut rng, 1_000_000)?
                }
                (None, None) => {
                    return Err(Error::Validation(
                        "a planted sample needs --path or --class".into(),
                    ))
                }
            };
            simulate_alternative(&lattice, &path, model, seed)?
        }
    };
    write_sample(out, &lattice, &sample)?;
    Ok(json!({ "out": out, "seed": seed, "provenance": sample.provenance }))
}

fn calibrate(a: &CalibrateArgs) -> Result<Value> {
    let (k, log_card) = match (&a.class, a.k, a.log_card) {
        (Some(c), _, _) => {
            let class = c.build(a.lattice.build()?)?;
            let extra = if a.sign == SignMode::Both {
                2f64.ln()
            } else {
                0.0
            };
            (class.k(), class.log_cardinality() + extra)
        }
        (None, Some(k), Some(l)) => (k, l),
        _ => {
            return Err(Error::Validation(
                "calibrate needs --class, or both --k and --log-card".into(),
            ))
        }
    };
    let t = detect::calibrate(k, log_card)?;
    Ok(json!({
        "k": k,
        "log_cardinality": log_card,
        "target": detect::calibration_target(k, log_card),
        "t": t,
        "p_t": detect::pt(t),
        "psi_min": detect::psi_min(t),
    }))
}

fn scan(a: &ScanArgs) -> Result<Value> {
    let (lattice, sample) = read_sample(&a.input)?;
    let class = a.class.build(lattice)?;
    let t = if a.t == "auto" {
        test_threshold(&class, a.sign)?
    } else {
        a.t.parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0)
            .ok_or_else(|| {
                Error::Validation(format!("--t must be positive or auto, got {}", a.t))
            })?
    };
    let scanner = Scanner::new(&class, a.engine)?;
    let result = run_scans(&scanner, &sample.values, a.sign, t);
    Ok(match a.sign {
        SignMode::Both => serde_json::to_value(result),
        _ => serde_json::to_value(&result.outcomes[0]),
    }
    .expect("serializable"))
}

fn risk_curve(cli: &Cli) -> Result<Value> {
    let mut config = experiment(cli)?;
    if let Some(dir) = &cli.out {
        let o = &mut config.output;
        o.csv.get_or_insert_with(|| dir.join("risk.csv"));
        o.json.get_or_insert_with(|| dir.join("risk.json"));
        o.svg.get_or_insert_with(|| dir.join("risk.svg"));
    }
    let report = harness::run_risk_curve(&config)?;
    let written = harness::write_outputs(&report, &config.output)?;
    if config.output == OutputConfig::default() {
        write_stdout(&report.to_csv());
        return Ok(Value::Null);
    }
    Ok(json!({ "written": written, "t": report.t, "rows": report.rows.len() }))
}

fn load_eit(path: &FsPath) -> Result<EitFit> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn lower_bound(cli: &Cli, a: &LowerBoundArgs) -> Result<Value> {
    let seed = cli.seed.unwrap_or(0);
    for &psi in &a.psi {
        bounds::lambda(psi)?;
    }
    let sampler = if a.eit.is_none() || a.route != Route::Xi {
        Some(a.sampler.build(seed)?)
    } else {
        None
    };
    let (eit, blocks) = match (&a.eit, &sampler) {
        (Some(p), _) => (Some(load_eit(p)?), a.blocks),
        (None, Some(s)) if a.route != Route::MonteCarlo => (
            Some(estimate_eit(&block_prior(s)?, a.sampler.trials)?),
            s.block_count(),
        ),
        _ => (None, 1),
    };
    let mut reports = Vec::new();
    for &psi in &a.psi {
        if let Some(eit) = &eit {
            reports.push(if blocks > 1 {
                unknown_start_bound(psi, eit, blocks)?
            } else {
                known_start_bound(psi, eit)?
            });
        }
        if a.route != Route::Xi {
            reports.push(monte_carlo_bound(
                psi,
                sampler.as_ref().unwrap(),
                a.sampler.trials,
            )?);
        }
    }
    let critical = eit
        .as_ref()
        .map(|e| bounds::critical_psi(e, 2.0))
        .transpose()?;
    Ok(json!({ "reports": reports, "critical_psi": critical }))
}

fn eit_fit(cli: &Cli, a: &EitArgs) -> Result<Value> {
    let sampler = a.sampler.build(cli.seed.unwrap_or(0))?;
    let fit = estimate_eit(&block_prior(&sampler)?, a.sampler.trials)?;
    let v = serde_json::to_value(fit).expect("serializable");
    if let Some(out) = &cli.out {
        write_json(out, &v)?;
    }
    Ok(v)
}

fn moment_check(cli: &Cli) -> Result<Value> {
    let config = experiment(cli)?;
    let report = harness::run_moment_check(&config)?;
    let mut v = serde_json::to_value(&report).expect("serializable");
    v["passed"] = json!(report.passed());
    if let Some(out) = &cli.out {
        write_json(out, &v)?;
    }
    Ok(v)
}

fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Calibrate(a) => calibrate(a),
        Command::Scan(a) => scan(a),
        Command::RiskCurve => risk_curve(cli),
        Command::LowerBound(a) => lower_bound(cli, a),
        Command::EitFit(a) => eit_fit(cli, a),
        Command::MomentCheck => moment_check(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            print_json(&v);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
