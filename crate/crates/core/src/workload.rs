//! Request traces: CSV I/O, synthetic generation by burstiness class and
//! arrival-rate estimation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ArrivalStats, FunctionId};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub function_id: FunctionId,
    pub arrival_ms: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("function {function} has {count} arrivals, at least 3 are needed")]
    TooFewArrivals { function: FunctionId, count: usize },
    #[error("could not generate a {0} trace after retries (last CoV {1:.3})")]
    ClassUnreachable(CovClass, f64),
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Arrival records ordered by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(mut records: Vec<TraceRecord>) -> Result<Self, WorkloadError> {
        for r in &records {
            if !r.arrival_ms.is_finite() || r.arrival_ms < 0.0 {
                return Err(WorkloadError::Invalid(format!("bad arrival time {}", r.arrival_ms)));
            }
            if r.prompt_tokens == 0 || r.output_tokens == 0 {
                return Err(WorkloadError::Invalid(format!(
                    "{} at {} ms has a zero token count",
                    r.function_id, r.arrival_ms
                )));
            }
        }
        records.sort_by(|a, b| {
            a.arrival_ms
                .total_cmp(&b.arrival_ms)
                .then_with(|| a.function_id.cmp(&b.function_id))
        });
        Ok(Self { records })
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn functions(&self) -> Vec<FunctionId> {
        let mut ids: Vec<_> = self.records.iter().map(|r| r.function_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn arrivals_of(&self, function: &FunctionId) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| &r.function_id == function)
            .map(|r| r.arrival_ms)
            .collect()
    }

    pub fn span_ms(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.arrival_ms)
    }

    pub fn merge(traces: impl IntoIterator<Item = Trace>) -> Trace {
        let records = traces.into_iter().flat_map(|t| t.records).collect();
        Trace::new(records).expect("inputs already validated")
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, WorkloadError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let records = rdr.deserialize().collect::<Result<Vec<TraceRecord>, _>>()?;
        Trace::new(records)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), WorkloadError> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Burstiness class from the coefficient of variation of inter-arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovClass {
    Predictable,
    Normal,
    Bursty,
}

impl CovClass {
    pub const ALL: [CovClass; 3] = [CovClass::Predictable, CovClass::Normal, CovClass::Bursty];

    pub fn of(cov: f64) -> Self {
        if cov <= 1.0 {
            CovClass::Predictable
        } else if cov <= 4.0 {
            CovClass::Normal
        } else {
            CovClass::Bursty
        }
    }
}

impl fmt::Display for CovClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovClass::Predictable => "predictable",
            CovClass::Normal => "normal",
            CovClass::Bursty => "bursty",
        })
    }
}

impl FromStr for CovClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "predictable" => Ok(CovClass::Predictable),
            "normal" => Ok(CovClass::Normal),
            "bursty" => Ok(CovClass::Bursty),
            other => Err(format!("unknown class '{other}'")),
        }
    }
}

/// Population CoV of the gaps between consecutive arrivals. `None` with fewer
/// than three arrivals.
pub fn interarrival_cov(arrivals: &[f64]) -> Option<f64> {
    if arrivals.len() < 3 {
        return None;
    }
    let gaps: Vec<f64> = arrivals.windows(2).map(|w| w[1] - w[0]).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Some(0.0);
    }
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

pub fn classify_cov(trace: &Trace, function: &FunctionId) -> Result<(f64, CovClass), WorkloadError> {
    let arrivals = trace.arrivals_of(function);
    let cov = interarrival_cov(&arrivals).ok_or_else(|| WorkloadError::TooFewArrivals {
        function: function.clone(),
        count: arrivals.len(),
    })?;
    Ok((cov, CovClass::of(cov)))
}

/// Log-normal token length profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProfile {
    pub prompt_median: f64,
    pub prompt_sigma: f64,
    pub output_median: f64,
    pub output_sigma: f64,
    pub max_tokens: u32,
}

impl Default for TokenProfile {
    fn default() -> Self {
        Self {
            prompt_median: 60.0,
            prompt_sigma: 0.5,
            output_median: 24.0,
            output_sigma: 0.5,
            max_tokens: 1024,
        }
    }
}

impl TokenProfile {
    fn sample(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        let draw = |rng: &mut ChaCha8Rng, median: f64, sigma: f64| {
            let d = LogNormal::new(median.max(1.0).ln(), sigma.max(0.0)).expect("finite parameters");
            (d.sample(rng).round() as u32).clamp(1, self.max_tokens.max(1))
        };
        let p = draw(rng, self.prompt_median, self.prompt_sigma);
        let o = draw(rng, self.output_median, self.output_sigma);
        (p, o)
    }
}

/// Two-state modulated Poisson process in units of the mean gap.
#[derive(Debug, Clone, Copy)]
struct Modulated {
    /// Arrival rate in the busy state relative to the quiet state.
    ratio: f64,
    /// Share of time spent in the busy state.
    busy_share: f64,
    /// Expected arrivals per busy period.
    per_burst: f64,
}

impl Modulated {
    fn gaps(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let quiet_rate = 1.0 / (self.busy_share * self.ratio + (1.0 - self.busy_share));
        let busy_rate = quiet_rate * self.ratio;
        let busy_mean = self.per_burst / busy_rate;
        let quiet_mean = busy_mean * (1.0 - self.busy_share) / self.busy_share;
        let mut busy = rng.gen_bool(self.busy_share.clamp(0.0, 1.0));
        let mut state_left = Exp::new(1.0 / if busy { busy_mean } else { quiet_mean })
            .expect("positive")
            .sample(rng);
        let mut out = Vec::with_capacity(n);
        let mut gap = 0.0;
        while out.len() < n {
            let rate = if busy { busy_rate } else { quiet_rate };
            let next = Exp::new(rate).expect("positive").sample(rng);
            if next < state_left {
                state_left -= next;
                gap += next;
                out.push(gap);
                gap = 0.0;
            } else {
                // memoryless: discard the partial draw and switch state
                gap += state_left;
                busy = !busy;
                state_left = Exp::new(1.0 / if busy { busy_mean } else { quiet_mean })
                    .expect("positive")
                    .sample(rng);
            }
        }
        out
    }
}

fn class_gaps(class: CovClass, attempt: u32, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match class {
        CovClass::Predictable => {
            let shape = 4.0 * (attempt + 1) as f64;
            let d = Gamma::new(shape, 1.0 / shape).expect("positive");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        CovClass::Normal => Modulated {
            ratio: 10.0,
            busy_share: 0.1,
            per_burst: 20.0 + 10.0 * attempt as f64,
        }
        .gaps(n, rng),
        CovClass::Bursty => Modulated {
            ratio: 1000.0,
            busy_share: 1.0 / 30.0,
            per_burst: 20.0 * (attempt + 1) as f64,
        }
        .gaps(n, rng),
    }
}

pub const GENERATION_ATTEMPTS: u32 = 5;

/// Synthetic arrivals for one function. The request count is exactly
/// `round(duration_s * mean_rate)` and arrivals span the whole duration.
pub fn generate_trace(
    function: &FunctionId,
    class: CovClass,
    duration_s: f64,
    mean_rate: f64,
    seed: u64,
    tokens: &TokenProfile,
) -> Result<Trace, WorkloadError> {
    if !(mean_rate > 0.0) || !(duration_s > 0.0) {
        return Err(WorkloadError::Invalid("rate and duration must be positive".into()));
    }
    let n = (duration_s * mean_rate).round() as usize;
    let duration_ms = duration_s * 1000.0;
    let mut last_cov = f64::NAN;
    for attempt in 0..GENERATION_ATTEMPTS {
        let mut rng = rng::stream(seed, &format!("trace/{function}/{attempt}"));
        let gaps = class_gaps(class, attempt, n + 1, &mut rng);
        let total: f64 = gaps.iter().sum();
        let scale = duration_ms / total;
        let mut t = 0.0;
        let arrivals: Vec<f64> = gaps[..n]
            .iter()
            .map(|g| {
                t += g * scale;
                (t * 1000.0).round() / 1000.0
            })
            .collect();
        if n >= 3 {
            last_cov = interarrival_cov(&arrivals).unwrap_or(f64::NAN);
            if CovClass::of(last_cov) != class {
                continue;
            }
        }
        let mut tok_rng = rng::stream(seed, &format!("tokens/{function}"));
        let records = arrivals
            .into_iter()
            .map(|arrival_ms| {
                let (prompt_tokens, output_tokens) = tokens.sample(&mut tok_rng);
                TraceRecord {
                    function_id: function.clone(),
                    arrival_ms,
                    prompt_tokens,
                    output_tokens,
                }
            })
            .collect();
        return Trace::new(records);
    }
    Err(WorkloadError::ClassUnreachable(class, last_cov))
}

/// One trace over many functions, each with its own rate and class.
pub fn generate_workload(
    functions: &[(FunctionId, CovClass, f64)],
    duration_s: f64,
    seed: u64,
    tokens: &TokenProfile,
) -> Result<Trace, WorkloadError> {
    let parts = functions
        .iter()
        .map(|(f, class, rate)| generate_trace(f, *class, duration_s, *rate, seed, tokens))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trace::merge(parts))
}

/// Converts per-minute invocation counts (one row per function, minute columns
/// named `1`, `2`, ...) to arrivals spread evenly within each minute. Rows map
/// onto `functions` round-robin.
pub fn from_minute_counts<R: Read>(
    reader: R,
    functions: &[FunctionId],
    seed: u64,
    tokens: &TokenProfile,
) -> Result<Trace, WorkloadError> {
    if functions.is_empty() {
        return Err(WorkloadError::Invalid("no target functions".into()));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let minute_cols: Vec<(usize, u64)> = rdr
        .headers()?
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.trim().parse::<u64>().ok().filter(|m| *m >= 1).map(|m| (i, m)))
        .collect();
    if minute_cols.is_empty() {
        return Err(WorkloadError::Invalid("no minute columns".into()));
    }
    let mut records = Vec::new();
    let mut tok_rng = rng::stream(seed, "tokens/minute-counts");
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let function = &functions[row % functions.len()];
        for &(col, minute) in &minute_cols {
            let count: u64 = rec
                .get(col)
                .unwrap_or("0")
                .trim()
                .parse()
                .map_err(|_| WorkloadError::Invalid(format!("row {row}: bad count in minute {minute}")))?;
            let start = (minute - 1) as f64 * 60_000.0;
            for k in 0..count {
                let (prompt_tokens, output_tokens) = tokens.sample(&mut tok_rng);
                records.push(TraceRecord {
                    function_id: function.clone(),
                    arrival_ms: start + (k as f64 + 0.5) * 60_000.0 / count as f64,
                    prompt_tokens,
                    output_tokens,
                });
            }
        }
    }
    Trace::new(records)
}

/// Exponentially weighted arrival rate per function, in requests per second,
/// from the arrivals in `(now - window, now]`. The weights are normalised so a
/// steady stream converges to its true rate.
pub fn estimate_rates(trace: &Trace, window_s: f64, half_life_s: f64, now_ms: f64) -> ArrivalStats {
    let mut stats = ewma_rates(
        trace.records().iter().map(|r| (r.arrival_ms, &r.function_id)),
        window_s,
        half_life_s,
        now_ms,
    );
    for f in trace.functions() {
        let rate = stats.rate(&f);
        stats.set(f, rate);
    }
    stats
}

/// Same estimate over any stream of `(arrival_ms, function)` pairs.
pub fn ewma_rates<'a>(
    arrivals: impl IntoIterator<Item = (f64, &'a FunctionId)>,
    window_s: f64,
    half_life_s: f64,
    now_ms: f64,
) -> ArrivalStats {
    let window_ms = window_s * 1000.0;
    let mut sums: BTreeMap<&FunctionId, f64> = BTreeMap::new();
    for (t, f) in arrivals {
        let age = now_ms - t;
        if age < 0.0 || age >= window_ms {
            continue;
        }
        *sums.entry(f).or_default() += 0.5f64.powf(age / 1000.0 / half_life_s);
    }
    let norm = std::f64::consts::LN_2 / half_life_s / (1.0 - 0.5f64.powf(window_s / half_life_s));
    sums.into_iter().map(|(f, s)| (f.clone(), s * norm)).collect()
}

/// Average rate per function over `duration_s`.
pub fn mean_rates(trace: &Trace, duration_s: f64) -> ArrivalStats {
    let mut counts: BTreeMap<FunctionId, usize> = BTreeMap::new();
    for r in trace.records() {
        *counts.entry(r.function_id.clone()).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(f, c)| (f, if duration_s > 0.0 { c as f64 / duration_s } else { 0.0 }))
        .collect()
}
