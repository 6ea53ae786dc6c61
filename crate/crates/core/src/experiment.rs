//! Experiment configuration, bundled profiles and the run/sweep drivers.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{BatchingPolicy, Guard, DEFAULT_TICK_MS};
use crate::domain::{
    ArrivalStats, ArtifactKind, ArtifactSpec, ClusterSpec, ContainerSpec, FunctionCatalog, FunctionId, FunctionSpec, GpuSpec,
    SpecError,
};
use crate::engine::{simulate, Pricing, SimConfig, SimError, SimOutput};
use crate::metrics::{compare_runs, write_requests_csv, Comparison, MetricsError, MetricsReport, SloRule};
use crate::preload::BenefitTable;
use crate::domain::{PreloadPlan, Tier};
use crate::workload::{generate_workload, CovClass, TokenProfile, Trace, WorkloadError};

pub const GB: u64 = 1_000_000_000;
pub const MB: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Configuration problems as opposed to failures while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Read { .. }
                | ExperimentError::Parse { .. }
                | ExperimentError::Config(_)
                | ExperimentError::Spec(_)
        )
    }
}

/// Policy combination under test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Full,
    /// Every adapter function loads a private backbone copy.
    Nbs,
    /// Nothing is pre-loaded and no replanning runs.
    Npl,
    /// No offloading; dispatches short on memory wait.
    Ndo,
    /// Fixed-size batching with a fixed delay.
    Nab { size: usize, delay_ms: f64 },
}

impl Variant {
    pub fn apply(&self, base: &SimConfig) -> SimConfig {
        let mut cfg = base.clone();
        match *self {
            Variant::Full | Variant::Nbs => {}
            Variant::Npl => cfg.preload = false,
            Variant::Ndo => cfg.offload = false,
            Variant::Nab { size, delay_ms } => {
                cfg.batching = BatchingPolicy::Fixed {
                    size,
                    delay_ms,
                    tick_ms: base.batching.tick_ms(),
                }
            }
        }
        cfg
    }

    pub fn catalog(&self, base: &FunctionCatalog) -> FunctionCatalog {
        match self {
            Variant::Nbs => base.unshared(),
            _ => base.clone(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::Nbs => f.write_str("nbs"),
            Variant::Npl => f.write_str("npl"),
            Variant::Ndo => f.write_str("ndo"),
            Variant::Nab { size, delay_ms } if *delay_ms == 0.0 => write!(f, "nab-{size}"),
            Variant::Nab { size, delay_ms } => write!(f, "nab-{size}-{delay_ms}"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "full" => return Ok(Variant::Full),
            "nbs" => return Ok(Variant::Nbs),
            "npl" => return Ok(Variant::Npl),
            "ndo" => return Ok(Variant::Ndo),
            "nab" => return Ok(Variant::Nab { size: 1, delay_ms: 0.0 }),
            _ => {}
        }
        let rest = lower
            .strip_prefix("nab-")
            .ok_or_else(|| format!("unknown variant '{s}'"))?;
        let (size, delay) = rest.split_once('-').unwrap_or((rest, "0"));
        let size: usize = size.parse().map_err(|_| format!("bad batch size in '{s}'"))?;
        let delay_ms: f64 = delay.parse().map_err(|_| format!("bad delay in '{s}'"))?;
        if size == 0 || !(delay_ms >= 0.0) {
            return Err(format!("variant '{s}' needs size >= 1 and delay >= 0"));
        }
        Ok(Variant::Nab { size, delay_ms })
    }
}

impl TryFrom<String> for Variant {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// `gen:<class>` or a path to a trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TraceSource {
    Generated(CovClass),
    File(PathBuf),
}

impl FromStr for TraceSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_prefix("gen:") {
            Some(class) => Ok(TraceSource::Generated(class.parse()?)),
            None if s.is_empty() => Err("empty trace source".into()),
            None => Ok(TraceSource::File(s.into())),
        }
    }
}

impl TryFrom<String> for TraceSource {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TraceSource> for String {
    fn from(t: TraceSource) -> String {
        match t {
            TraceSource::Generated(c) => format!("gen:{c}"),
            TraceSource::File(p) => p.display().to_string(),
        }
    }
}

/// Engine knobs; unset fields keep the engine defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOverrides {
    pub keep_alive_s: Option<f64>,
    pub replan_interval_s: Option<f64>,
    pub rate_window_s: Option<f64>,
    pub rate_half_life_s: Option<f64>,
    pub demotion_gbps: Option<f64>,
    pub tick_ms: Option<f64>,
    pub guard_ms: Option<f64>,
}

impl SimOverrides {
    pub fn apply(&self, cfg: &mut SimConfig) {
        if let Some(v) = self.keep_alive_s {
            cfg.keep_alive_ms = v * 1000.0;
        }
        if let Some(v) = self.replan_interval_s {
            cfg.replan_interval_ms = v * 1000.0;
        }
        if let Some(v) = self.rate_window_s {
            cfg.rate_window_s = v;
        }
        if let Some(v) = self.rate_half_life_s {
            cfg.rate_half_life_s = v;
        }
        if let Some(v) = self.demotion_gbps {
            cfg.demotion_gbps = v;
        }
        if self.tick_ms.is_some() || self.guard_ms.is_some() {
            cfg.batching = BatchingPolicy::Adaptive {
                tick_ms: self.tick_ms.unwrap_or(DEFAULT_TICK_MS),
                guard: self.guard_ms.map_or(Guard::Alpha, Guard::FixedMs),
            };
        }
    }
}

fn default_duration() -> f64 {
    900.0
}

fn default_rate() -> f64 {
    0.1
}

fn default_output() -> PathBuf {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Cluster TOML; the bundled desk cluster when absent.
    #[serde(default)]
    pub cluster: Option<PathBuf>,
    /// Functions TOML; the bundled profiles when absent.
    #[serde(default)]
    pub functions: Option<PathBuf>,
    pub trace: TraceSource,
    pub variant: Variant,
    #[serde(default)]
    pub pricing: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub slo_rule: SloRule,
    /// Length of a generated trace.
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    /// Mean request rate per invoked function in a generated trace.
    #[serde(default = "default_rate")]
    pub rate_per_s: f64,
    /// Zipf exponent spreading the generated rate across functions; 0 is uniform.
    #[serde(default)]
    pub rate_skew: f64,
    #[serde(default)]
    pub tokens: Option<TokenProfile>,
    #[serde(default)]
    pub sim: SimOverrides,
    #[serde(default)]
    pub record_events: bool,
}

impl ExperimentConfig {
    pub fn new(trace: TraceSource, variant: Variant) -> Self {
        Self {
            name: None,
            cluster: None,
            functions: None,
            trace,
            variant,
            pricing: None,
            seed: 0,
            output_dir: default_output(),
            slo_rule: SloRule::default(),
            duration_s: default_duration(),
            rate_per_s: default_rate(),
            rate_skew: 0.0,
            tokens: None,
            sim: SimOverrides::default(),
            record_events: false,
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = read(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| parse_err(path, e))?;
        // relative paths inside the config resolve against its directory
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.cluster, &mut cfg.functions, &mut cfg.pricing].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let TraceSource::File(p) = &mut cfg.trace {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.variant.to_string())
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.duration_s > 0.0) || !(self.rate_per_s >= 0.0) || !(self.rate_skew >= 0.0) {
            return Err(ExperimentError::Config(
                "duration_s must be positive, rate_per_s and rate_skew non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Read {
        path: path.to_owned(),
        source,
    })
}

fn parse_err(path: &Path, e: impl fmt::Display) -> ExperimentError {
    ExperimentError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FunctionsFile {
    functions: Vec<FunctionSpec>,
}

pub fn parse_functions(text: &str) -> Result<FunctionCatalog, String> {
    let file: FunctionsFile = toml::from_str(text).map_err(|e| e.to_string())?;
    FunctionCatalog::new(file.functions).map_err(|e| e.to_string())
}

pub fn functions_to_toml(catalog: &FunctionCatalog) -> String {
    let file = FunctionsFile {
        functions: catalog.iter().cloned().collect(),
    };
    toml::to_string(&file).expect("function specs serialize")
}

pub fn parse_cluster(text: &str) -> Result<ClusterSpec, String> {
    let c: ClusterSpec = toml::from_str(text).map_err(|e| e.to_string())?;
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

pub fn load_functions(path: Option<&Path>) -> Result<FunctionCatalog, ExperimentError> {
    match path {
        None => Ok(default_catalog()),
        Some(p) => parse_functions(&read(p)?).map_err(|e| parse_err(p, e)),
    }
}

pub fn load_cluster(path: Option<&Path>) -> Result<ClusterSpec, ExperimentError> {
    match path {
        None => Ok(desk_cluster(2)),
        Some(p) => parse_cluster(&read(p)?).map_err(|e| parse_err(p, e)),
    }
}

pub fn load_pricing(path: Option<&Path>) -> Result<Pricing, ExperimentError> {
    match path {
        None => Ok(Pricing::default()),
        Some(p) => toml::from_str(&read(p)?).map_err(|e| parse_err(p, e)),
    }
}

/// Seconds to move `bytes` at `gb_per_s`, in milliseconds.
fn at_rate(bytes: u64, gb_per_s: f64) -> f64 {
    bytes as f64 / (gb_per_s * GB as f64) * 1000.0
}

const COLD_GBPS: f64 = 10.0;
const PCIE_GBPS: f64 = 25.0;

struct ModelProfile {
    name: &'static str,
    params_b: u64,
    prefill_base_ms: f64,
    prefill_marginal_ms: f64,
    decode_ms_per_token: f64,
    kv_bytes_per_request: u64,
    slo_ttft_ms: f64,
}

const PROFILES: [ModelProfile; 2] = [
    ModelProfile {
        name: "llama2-7b",
        params_b: 7,
        prefill_base_ms: 500.0,
        prefill_marginal_ms: 100.0,
        decode_ms_per_token: 20.0,
        kv_bytes_per_request: 1000 * MB,
        slo_ttft_ms: 2500.0,
    },
    ModelProfile {
        name: "llama2-13b",
        params_b: 13,
        prefill_base_ms: 800.0,
        prefill_marginal_ms: 160.0,
        decode_ms_per_token: 32.0,
        kv_bytes_per_request: 1600 * MB,
        slo_ttft_ms: 4000.0,
    },
];

const ADAPTERS: [&str; 4] = ["sql", "chat", "code", "math"];
const ADAPTER_BYTES: u64 = 200 * MB;
const LIBRARY_BYTES: u64 = 2 * GB;
const KERNEL_BYTES: u64 = 500 * MB;
const KERNEL_COMPILE_MS: f64 = 4000.0;
const CONTAINER_INIT_MS: f64 = 2000.0;
const LIBRARY_IMPORT_MS: f64 = 3000.0;

fn model(kind: ArtifactKind, bytes: u64) -> ArtifactSpec {
    ArtifactSpec {
        kind,
        size_bytes: bytes,
        load_cold_ms: at_rate(bytes, COLD_GBPS),
        load_from_container_ms: at_rate(bytes, PCIE_GBPS),
    }
}

/// Two backbones with four adapters each. Backbone bytes are parameters times
/// two (fp16); model loads run at 10 GB/s from storage and 25 GB/s from
/// container memory.
pub fn default_catalog() -> FunctionCatalog {
    let mut fs = Vec::new();
    for p in &PROFILES {
        let library = ArtifactSpec {
            kind: ArtifactKind::Library,
            size_bytes: LIBRARY_BYTES,
            load_cold_ms: LIBRARY_IMPORT_MS,
            load_from_container_ms: 0.0,
        };
        let holder = FunctionSpec {
            id: p.name.into(),
            backbone: p.name.into(),
            artifacts: vec![library.clone(), model(ArtifactKind::BackboneModel, p.params_b * 2 * GB)],
            slo_ttft_ms: p.slo_ttft_ms,
            prefill_base_ms: p.prefill_base_ms,
            prefill_marginal_ms: p.prefill_marginal_ms,
            decode_ms_per_token: p.decode_ms_per_token,
            kv_bytes_per_request: p.kv_bytes_per_request,
            container_init_ms: CONTAINER_INIT_MS,
        };
        for a in ADAPTERS {
            fs.push(FunctionSpec {
                id: format!("{}-{a}", p.name).into(),
                artifacts: vec![
                    library.clone(),
                    model(ArtifactKind::AdapterModel, ADAPTER_BYTES),
                    ArtifactSpec {
                        kind: ArtifactKind::Kernel,
                        size_bytes: KERNEL_BYTES,
                        load_cold_ms: KERNEL_COMPILE_MS,
                        load_from_container_ms: 0.0,
                    },
                ],
                ..holder.clone()
            });
        }
        fs.push(holder);
    }
    FunctionCatalog::new(fs).expect("bundled profiles are valid")
}

/// The bundled functions file.
pub fn default_profiles() -> String {
    functions_to_toml(&default_catalog())
}

/// `gpus` GPUs of 48 GB, each with two 48 GB containers.
pub fn desk_cluster(gpus: usize) -> ClusterSpec {
    let mut cluster = ClusterSpec {
        containers: Vec::new(),
        gpus: Vec::new(),
        context_overhead_bytes: 473 * MB,
    };
    for g in 0..gpus {
        let gpu = format!("gpu{g}");
        cluster.gpus.push(GpuSpec {
            id: gpu.clone().into(),
            mem_bytes: 48 * GB,
        });
        for c in 0..2 {
            cluster.containers.push(ContainerSpec {
                id: format!("{gpu}-c{c}").into(),
                mem_bytes: 48 * GB,
                gpu: gpu.clone().into(),
            });
        }
    }
    cluster
}

pub fn cluster_to_toml(cluster: &ClusterSpec) -> String {
    toml::to_string(cluster).expect("cluster serializes")
}

/// Functions that receive traffic: adapters when any exist, otherwise all.
pub fn invoked_functions(catalog: &FunctionCatalog) -> Vec<FunctionId> {
    let adapters: Vec<_> = catalog.iter().filter(|f| f.is_adapter()).map(|f| f.id.clone()).collect();
    if adapters.is_empty() {
        catalog.ids().cloned().collect()
    } else {
        adapters
    }
}

/// Per-function rates with Zipf weights `1/(i+1)^skew`, scaled so their mean is
/// `mean_rate`. Functions are ranked in catalog order.
pub fn skewed_rates(functions: &[FunctionId], mean_rate: f64, skew: f64) -> Vec<(FunctionId, f64)> {
    let weights: Vec<f64> = (0..functions.len()).map(|i| ((i + 1) as f64).powf(-skew)).collect();
    let total: f64 = weights.iter().sum();
    let n = functions.len() as f64;
    functions
        .iter()
        .zip(weights)
        .map(|(f, w)| (f.clone(), mean_rate * n * w / total))
        .collect()
}

pub fn build_trace(cfg: &ExperimentConfig, catalog: &FunctionCatalog) -> Result<Trace, ExperimentError> {
    match &cfg.trace {
        TraceSource::File(p) => {
            let file = File::open(p).map_err(|source| ExperimentError::Read {
                path: p.clone(),
                source,
            })?;
            Ok(Trace::read_csv(file)?)
        }
        TraceSource::Generated(class) => {
            let fs = invoked_functions(catalog);
            let spec: Vec<_> = skewed_rates(&fs, cfg.rate_per_s, cfg.rate_skew)
                .into_iter()
                .filter(|(_, r)| (r * cfg.duration_s).round() >= 1.0)
                .map(|(f, r)| (f, *class, r))
                .collect();
            let tokens = cfg.tokens.unwrap_or_default();
            Ok(generate_workload(&spec, cfg.duration_s, cfg.seed, &tokens)?)
        }
    }
}

/// Everything a run needs, loaded and resolved.
pub struct Prepared {
    pub cluster: ClusterSpec,
    pub catalog: FunctionCatalog,
    pub trace: Trace,
    pub sim: SimConfig,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let cluster = load_cluster(cfg.cluster.as_deref())?;
    let base = load_functions(cfg.functions.as_deref())?;
    let mut sim = SimConfig {
        pricing: load_pricing(cfg.pricing.as_deref())?,
        record_events: cfg.record_events,
        ..Default::default()
    };
    cfg.sim.apply(&mut sim);
    let trace = build_trace(cfg, &base)?;
    Ok(Prepared {
        cluster,
        catalog: cfg.variant.catalog(&base),
        trace,
        sim: cfg.variant.apply(&sim),
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: MetricsReport,
    pub output: SimOutput,
}

/// Simulates one configuration without touching the filesystem beyond inputs.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    let p = prepare(cfg)?;
    let output = simulate(&p.sim, &p.cluster, &p.catalog, &p.trace)?;
    let report = MetricsReport::from_output(cfg.run_name(), &output, &p.catalog, &p.sim.pricing, cfg.slo_rule);
    Ok(RunResult { report, output })
}

fn write_file(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<(), ExperimentError>) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(|source| ExperimentError::Write {
        path: path.to_owned(),
        source,
    })?;
    f(BufWriter::new(file))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Write {
        path: path.to_owned(),
        source,
    }
}

/// Runs one experiment and writes `requests.csv`, `summary.json` and, when
/// events are recorded, `events.log` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, ExperimentError> {
    let result = execute(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("requests.csv");
    write_file(&path, |w| Ok(write_requests_csv(&result.output.requests, w)?))?;
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&result.report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    if cfg.record_events {
        let path = dir.join("events.log");
        let mut text = result.output.events.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(result)
}

pub fn read_summary(path: &Path) -> Result<MetricsReport, ExperimentError> {
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e))
}

/// Runs every variant of `base` in parallel, each in `<output_dir>/<variant>`,
/// then writes `comparison.csv` and `comparison.txt` against `baseline`.
pub fn sweep(
    base: &ExperimentConfig,
    variants: &[Variant],
    baseline: &str,
) -> Result<(Vec<MetricsReport>, Comparison), ExperimentError> {
    let configs: Vec<ExperimentConfig> = variants
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.variant = *v;
            c.name = Some(v.to_string());
            c.output_dir = base.output_dir.join(v.to_string());
            c
        })
        .collect();
    let results: Vec<Result<RunResult, ExperimentError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_experiment(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect()
    });
    let reports = results
        .into_iter()
        .map(|r| r.map(|r| r.report))
        .collect::<Result<Vec<_>, _>>()?;
    let table = compare_runs(&reports, baseline)?;
    let path = base.output_dir.join("comparison.csv");
    write_file(&path, |w| Ok(table.write_csv(w)?))?;
    let path = base.output_dir.join("comparison.txt");
    fs::write(&path, table.to_text()).map_err(io_err(&path))?;
    Ok((reports, table))
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    function: String,
    rate_per_s: f64,
}

/// Reads a `function,rate_per_s` table.
pub fn read_rates<R: Read>(r: R) -> Result<ArrivalStats, csv::Error> {
    let mut stats = ArrivalStats::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: RateRow = row?;
        stats.set(row.function.into(), row.rate_per_s);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRow {
    pub function: String,
    pub artifact: &'static str,
    pub tier: String,
    pub value: f64,
    pub weight: u64,
    pub density: f64,
}

pub fn plan_rows(plan: &PreloadPlan, benefits: &BenefitTable) -> Vec<PlanRow> {
    plan.iter()
        .map(|p| {
            let b = benefits.get(&p.function, p.kind, p.tier.class()).unwrap_or_default();
            PlanRow {
                function: p.function.to_string(),
                artifact: p.kind.as_str(),
                tier: match &p.tier {
                    Tier::Gpu(g) => format!("gpu:{g}"),
                    Tier::Container(c) => format!("container:{c}"),
                },
                value: b.value,
                weight: b.weight,
                density: b.density(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for s in ["full", "nbs", "npl", "ndo", "nab-1", "nab-10-500", "nab-20-1000"] {
            let v: Variant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert_eq!(
            "nab-10-500".parse::<Variant>().unwrap(),
            Variant::Nab {
                size: 10,
                delay_ms: 500.0
            }
        );
        assert_eq!("nab".parse::<Variant>().unwrap().to_string(), "nab-1");
        assert!("nab-0".parse::<Variant>().is_err());
        assert!("fast".parse::<Variant>().is_err());
    }

    #[test]
    fn bundled_profile_shape() {
        let cat = default_catalog();
        assert_eq!(cat.iter().filter(|f| f.is_adapter()).count(), 8);
        assert_eq!(cat.iter().filter(|f| !f.is_adapter()).count(), 2);
        let b7 = cat.get(&"llama2-7b".into()).unwrap();
        assert_eq!(b7.artifact(ArtifactKind::BackboneModel).unwrap().size_bytes, 14 * GB);
        assert_eq!(b7.slo_ttft_ms, 2500.0);
        let b13 = cat.get(&"llama2-13b".into()).unwrap();
        assert_eq!(b13.artifact(ArtifactKind::BackboneModel).unwrap().size_bytes, 26 * GB);
        assert_eq!(b13.slo_ttft_ms, 4000.0);
        assert_eq!(parse_functions(&default_profiles()).unwrap(), cat);
        assert_eq!(parse_cluster(&cluster_to_toml(&desk_cluster(2))).unwrap(), desk_cluster(2));
    }

    #[test]
    fn config_from_toml() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            trace = "gen:normal"
            variant = "nab-10-500"
            seed = 7
            [sim]
            keep_alive_s = 60
            "#,
        )
        .unwrap();
        assert_eq!(cfg.trace, TraceSource::Generated(CovClass::Normal));
        assert_eq!(cfg.sim.keep_alive_s, Some(60.0));
        assert!(toml::from_str::<ExperimentConfig>("trace = \"gen:normal\"\nvariant = \"nope\"").is_err());
    }

    #[test]
    fn skewed_rates_keep_the_mean() {
        let fs: Vec<FunctionId> = (0..4).map(|i| format!("f{i}").into()).collect();
        let r = skewed_rates(&fs, 0.5, 1.0);
        let mean: f64 = r.iter().map(|(_, x)| x).sum::<f64>() / 4.0;
        assert!((mean - 0.5).abs() < 1e-12);
        assert!(r[0].1 > r[3].1);
        assert!(skewed_rates(&fs, 0.5, 0.0).iter().all(|(_, x)| (*x - 0.5).abs() < 1e-12));
    }
}
