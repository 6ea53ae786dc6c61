use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use lorasim_core::domain::{validate_plan, FunctionId};
use lorasim_core::experiment::{
    self, default_profiles, desk_cluster, cluster_to_toml, load_cluster, load_functions, plan_rows, read_rates,
    ExperimentConfig, ExperimentError, TraceSource, Variant,
};
use lorasim_core::metrics::{compare_runs, read_request_ttfts, ttft_cdf, write_cdf_csv, SloRule};
use lorasim_core::preload::{compute_benefits, exact_preload, greedy_preload, DEFAULT_EXACT_LIMIT};
use lorasim_core::workload::{classify_cov, generate_workload, CovClass, TokenProfile, Trace};

#[derive(Parser)]
#[command(name = "lorasim", version, about = "Serverless LoRA inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a pre-loading plan for given arrival rates.
    Plan(PlanArgs),
    /// Generate or classify request traces.
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Run one simulation.
    Simulate(RunArgs),
    /// Run several variants of one experiment and compare them.
    Sweep(SweepArgs),
    /// Compare finished runs from their summary files.
    Report(ReportArgs),
    /// Print the bundled functions file, or the desk cluster.
    Profiles {
        #[arg(long)]
        cluster: bool,
        #[arg(long, default_value_t = 2)]
        gpus: usize,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[arg(long)]
    functions: Option<PathBuf>,
    /// CSV with `function,rate_per_s` columns.
    #[arg(long)]
    rates: PathBuf,
    /// Use exhaustive search instead of the greedy planner.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Write a synthetic trace as CSV.
    Gen {
        #[arg(long)]
        class: CovClass,
        #[arg(long)]
        duration: f64,
        /// Mean requests per second for each function.
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target functions; defaults to the adapters of the functions file.
        #[arg(long = "function")]
        function: Vec<String>,
        #[arg(long)]
        functions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report inter-arrival CoV and class per function.
    Classify { file: PathBuf },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    nab_size: Option<usize>,
    #[arg(long)]
    nab_delay_ms: Option<f64>,
    /// `gen:<class>` or a trace CSV path.
    #[arg(long)]
    trace: Option<TraceSource>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[arg(long)]
    functions: Option<PathBuf>,
    #[arg(long)]
    pricing: Option<PathBuf>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    keep_alive_s: Option<f64>,
    #[arg(long)]
    slo_rule: Option<SloRule>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write events.log.
    #[arg(long)]
    events: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "full,nbs,npl,ndo,nab-1")]
    variants: Vec<Variant>,
    #[arg(long, default_value = "full")]
    baseline: String,
}

#[derive(Args)]
struct ReportArgs {
    /// `summary.json` files, or the run directories holding them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "full")]
    baseline: String,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn config(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => plan(a),
        Command::Trace(t) => trace(t),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
        Command::Profiles { cluster, gpus } => {
            let text = if cluster { cluster_to_toml(&desk_cluster(gpus)) } else { default_profiles() };
            print!("{text}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display())).map_err(runtime)?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let cluster = load_cluster(a.cluster.as_deref())?;
    let catalog = load_functions(a.functions.as_deref())?;
    let file = File::open(&a.rates)
        .with_context(|| format!("opening {}", a.rates.display()))
        .map_err(config)?;
    let rates = read_rates(file)
        .with_context(|| format!("reading {}", a.rates.display()))
        .map_err(config)?;
    let benefits = compute_benefits(&catalog, &rates);
    let plan = if a.exact {
        exact_preload(&benefits, &cluster, &catalog, DEFAULT_EXACT_LIMIT).map_err(config)?
    } else {
        greedy_preload(&benefits, &cluster, &catalog)
    };
    let mut w = csv_writer(a.out.as_deref())?;
    for row in plan_rows(&plan, &benefits) {
        w.serialize(row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let violations = validate_plan(&plan, &cluster, &catalog).map_err(runtime)?;
    eprintln!(
        "placements={} value={:.3} feasible={}",
        plan.len(),
        benefits.plan_value(&plan),
        violations.is_empty()
    );
    for v in &violations {
        eprintln!("violation: {v}");
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(runtime(anyhow!("plan violates {} constraint(s)", violations.len())))
    }
}

fn csv_writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>, Failure> {
    Ok(csv::Writer::from_writer(output(path)?))
}

fn trace(t: TraceCommand) -> Result<(), Failure> {
    match t {
        TraceCommand::Gen {
            class,
            duration,
            rate,
            seed,
            function,
            functions,
            out,
        } => {
            if !(duration > 0.0) || !(rate >= 0.0) {
                return Err(config(anyhow!("--duration must be positive and --rate non-negative")));
            }
            let targets: Vec<FunctionId> = if function.is_empty() {
                experiment::invoked_functions(&load_functions(functions.as_deref())?)
            } else {
                function.into_iter().map(FunctionId::from).collect()
            };
            let spec: Vec<_> = targets.into_iter().map(|f| (f, class, rate)).collect();
            let trace = generate_workload(&spec, duration, seed, &TokenProfile::default()).map_err(runtime)?;
            trace.write_csv(output(out.as_deref())?).map_err(runtime)?;
            Ok(())
        }
        TraceCommand::Classify { file } => {
            let f = File::open(&file)
                .with_context(|| format!("opening {}", file.display()))
                .map_err(config)?;
            let trace = Trace::read_csv(f)
                .with_context(|| format!("reading {}", file.display()))
                .map_err(config)?;
            let mut w = csv_writer(None)?;
            w.write_record(["function", "requests", "cov", "class"]).map_err(runtime)?;
            for f in trace.functions() {
                let n = trace.arrivals_of(&f).len().to_string();
                let (cov, class) = match classify_cov(&trace, &f) {
                    Ok((cov, class)) => (format!("{cov:.4}"), class.to_string()),
                    Err(_) => ("".into(), "".into()),
                };
                w.write_record([f.as_str(), &n, &cov, &class]).map_err(runtime)?;
            }
            w.flush().map_err(runtime)?;
            Ok(())
        }
    }
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_toml_file(p)?,
        None => {
            let trace = a
                .trace
                .clone()
                .ok_or_else(|| config(anyhow!("--trace or --config is required")))?;
            ExperimentConfig::new(trace, a.variant.unwrap_or(Variant::Full))
        }
    };
    if let Some(t) = &a.trace {
        cfg.trace = t.clone();
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if a.nab_size.is_some() || a.nab_delay_ms.is_some() {
        let (size, delay_ms) = match cfg.variant {
            Variant::Nab { size, delay_ms } => (size, delay_ms),
            _ => (1, 0.0),
        };
        let size = a.nab_size.unwrap_or(size);
        if size == 0 {
            return Err(config(anyhow!("--nab-size must be at least 1")));
        }
        cfg.variant = Variant::Nab {
            size,
            delay_ms: a.nab_delay_ms.unwrap_or(delay_ms),
        };
    }
    macro_rules! set {
        ($($flag:ident => $field:expr),*) => {$(
            if let Some(v) = a.$flag.clone() {
                $field = v.into();
            }
        )*};
    }
    set!(seed => cfg.seed, duration => cfg.duration_s, rate => cfg.rate_per_s, slo_rule => cfg.slo_rule);
    if let Some(p) = &a.cluster {
        cfg.cluster = Some(p.clone());
    }
    if let Some(p) = &a.functions {
        cfg.functions = Some(p.clone());
    }
    if let Some(p) = &a.pricing {
        cfg.pricing = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.output_dir = p.clone();
    }
    if let Some(k) = a.keep_alive_s {
        cfg.sim.keep_alive_s = Some(k);
    }
    cfg.record_events |= a.events;
    Ok(cfg)
}

fn simulate(a: RunArgs) -> Result<(), Failure> {
    let cfg = experiment_config(&a)?;
    let r = experiment::run_experiment(&cfg)?;
    let o = &r.report.overall;
    println!(
        "{}: requests={} served={} mean_ttft_ms={} mean_e2e_ms={} cost={:.4} -> {}",
        r.report.name,
        o.requests,
        o.completed,
        o.ttft_ms.mean.map_or("-".into(), |v| format!("{v:.1}")),
        o.mean_e2e_ms.map_or("-".into(), |v| format!("{v:.1}")),
        r.report.cost.total,
        cfg.output_dir.display()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let cfg = experiment_config(&a.run)?;
    if !a.variants.iter().any(|v| v.to_string() == a.baseline) {
        return Err(config(anyhow!("baseline {} is not among the variants", a.baseline)));
    }
    let (_, table) = experiment::sweep(&cfg, &a.variants, &a.baseline)?;
    print!("{}", table.to_text());
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut reports = Vec::new();
    let mut dirs = Vec::new();
    for p in &a.runs {
        let summary = if p.is_dir() { p.join("summary.json") } else { p.clone() };
        reports.push(experiment::read_summary(&summary)?);
        dirs.push(summary.parent().map(Path::to_path_buf).unwrap_or_default());
    }
    let table = compare_runs(&reports, &a.baseline).map_err(config)?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(runtime)?;
    table
        .write_csv(output(Some(&a.out.join("comparison.csv")))?)
        .map_err(runtime)?;
    for (r, dir) in reports.iter().zip(&dirs) {
        let requests = dir.join("requests.csv");
        let Ok(file) = File::open(&requests) else { continue };
        let ttfts = read_request_ttfts(file)
            .with_context(|| format!("reading {}", requests.display()))
            .map_err(runtime)?;
        let path = a.out.join(format!("{}_ttft_cdf.csv", r.name));
        write_cdf_csv(&ttft_cdf(ttfts), output(Some(&path))?).map_err(runtime)?;
    }
    print!("{}", table.to_text());
    Ok(())
}
