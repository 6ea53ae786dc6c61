//! Post-run aggregation: latency percentiles, SLO violations, cost and
//! cost-effectiveness, plus comparison tables across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FunctionCatalog, FunctionId};
use crate::engine::{cost_effectiveness, monetary_cost, ColdBreakdown, CostBreakdown, Pricing, RequestRecord, SimOutput};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("baseline run {0:?} not present")]
    MissingBaseline(String),
    #[error("duplicate run name {0:?}")]
    DuplicateRun(String),
    #[error("unknown SLO rule {0:?}")]
    UnknownRule(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a request's TTFT is judged against its function's SLO.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SloRule {
    /// Five times the warm single-request TTFT.
    #[default]
    Paper5x,
    /// The function's configured `slo_ttft_ms`.
    Absolute,
}

impl FromStr for SloRule {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper5x" => Ok(SloRule::Paper5x),
            "absolute" => Ok(SloRule::Absolute),
            _ => Err(MetricsError::UnknownRule(s.to_owned())),
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
}

impl LatencyStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().collect();
        v.sort_by(f64::total_cmp);
        Self {
            mean: mean(v.iter().copied()),
            p50: percentile(&v, 50.0),
            p90: percentile(&v, 90.0),
            p99: percentile(&v, 99.0),
        }
    }
}

/// TTFT threshold for `f` under `rule`.
pub fn slo_threshold(spec: &crate::domain::FunctionSpec, rule: SloRule) -> f64 {
    match rule {
        SloRule::Paper5x => 5.0 * spec.prefill_base_ms,
        SloRule::Absolute => spec.slo_ttft_ms,
    }
}

fn violates(r: &RequestRecord, threshold: f64) -> bool {
    r.ttft_ms().map_or(true, |t| t > threshold)
}

/// Fraction of requests per function whose TTFT exceeds the threshold.
/// Requests that never produced a token count as violations.
pub fn slo_violation_rate(
    records: &[RequestRecord],
    catalog: &FunctionCatalog,
    rule: SloRule,
) -> BTreeMap<FunctionId, f64> {
    let mut counts: BTreeMap<&FunctionId, (usize, usize)> = BTreeMap::new();
    for r in records {
        let threshold = catalog.get(&r.function).map_or(f64::INFINITY, |s| slo_threshold(s, rule));
        let e = counts.entry(&r.function).or_default();
        e.0 += violates(r, threshold) as usize;
        e.1 += 1;
    }
    counts
        .into_iter()
        .map(|(f, (bad, n))| (f.clone(), bad as f64 / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionMetrics {
    pub function: String,
    pub requests: usize,
    pub completed: usize,
    pub ttft_ms: LatencyStats,
    pub mean_tpot_ms: Option<f64>,
    pub mean_e2e_ms: Option<f64>,
    pub slo_violation_rate: f64,
    pub cold_start: ColdBreakdown,
}

impl FunctionMetrics {
    fn of(name: String, records: &[&RequestRecord], catalog: &FunctionCatalog, rule: SloRule) -> Self {
        let mut cold = ColdBreakdown::default();
        let mut bad = 0;
        for r in records {
            cold.add(&r.breakdown);
            let threshold = catalog.get(&r.function).map_or(f64::INFINITY, |s| slo_threshold(s, rule));
            bad += violates(r, threshold) as usize;
        }
        Self {
            function: name,
            requests: records.len(),
            completed: records.iter().filter(|r| r.is_complete()).count(),
            ttft_ms: LatencyStats::of(records.iter().filter_map(|r| r.ttft_ms())),
            mean_tpot_ms: mean(records.iter().filter_map(|r| r.tpot_ms())),
            mean_e2e_ms: mean(records.iter().filter_map(|r| r.e2e_ms())),
            slo_violation_rate: if records.is_empty() {
                0.0
            } else {
                bad as f64 / records.len() as f64
            },
            cold_start: cold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub overall: FunctionMetrics,
    pub per_function: Vec<FunctionMetrics>,
    pub throughput_rps: f64,
    pub throughput_tokens_per_s: f64,
    pub cost: CostBreakdown,
    pub cost_effectiveness: Option<f64>,
    pub peak_batch: usize,
    pub peak_gpu_bytes: u64,
    pub cold_starts: usize,
    pub evictions: usize,
    pub unserved: usize,
}

impl MetricsReport {
    pub fn from_output(
        name: impl Into<String>,
        out: &SimOutput,
        catalog: &FunctionCatalog,
        pricing: &Pricing,
        rule: SloRule,
    ) -> Self {
        let all: Vec<&RequestRecord> = out.requests.iter().collect();
        let mut by_fn: BTreeMap<&FunctionId, Vec<&RequestRecord>> = BTreeMap::new();
        for r in &out.requests {
            by_fn.entry(&r.function).or_default().push(r);
        }
        let first = out.requests.iter().map(|r| r.arrival_ms).min_by(f64::total_cmp);
        let last = out.requests.iter().filter_map(|r| r.completion_ms).max_by(f64::total_cmp);
        let span_s = match (first, last) {
            (Some(a), Some(b)) if b > a => (b - a) / 1000.0,
            _ => 0.0,
        };
        let completed: Vec<&RequestRecord> = out.requests.iter().filter(|r| r.is_complete()).collect();
        let tokens: u64 = completed.iter().map(|r| r.output_tokens as u64).sum();
        let (rps, tps) = if span_s > 0.0 {
            (completed.len() as f64 / span_s, tokens as f64 / span_s)
        } else {
            (0.0, 0.0)
        };
        let overall = FunctionMetrics::of("all".into(), &all, catalog, rule);
        let cost = monetary_cost(&out.billing, pricing);
        let ce = overall
            .mean_e2e_ms
            .and_then(|e2e| cost_effectiveness(e2e, cost.total).ok());
        Self {
            name: name.into(),
            per_function: by_fn
                .into_iter()
                .map(|(f, rs)| FunctionMetrics::of(f.to_string(), &rs, catalog, rule))
                .collect(),
            overall,
            throughput_rps: rps,
            throughput_tokens_per_s: tps,
            cost,
            cost_effectiveness: ce,
            peak_batch: out.peak_batch(),
            peak_gpu_bytes: out.peak_gpu_bytes.values().copied().max().unwrap_or(0),
            cold_starts: out.cold_starts,
            evictions: out.evictions,
            unserved: out.unserved(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_ttft_ms: Option<f64>,
    pub p99_ttft_ms: Option<f64>,
    pub mean_e2e_ms: Option<f64>,
    pub cost: f64,
    pub cost_effectiveness: Option<f64>,
    pub relative_ce: Option<f64>,
    pub slo_violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

/// Table of runs keyed by name, with cost-effectiveness relative to `baseline`.
pub fn compare_runs(reports: &[MetricsReport], baseline: &str) -> Result<Comparison, MetricsError> {
    let mut by_name: BTreeMap<&str, &MetricsReport> = BTreeMap::new();
    for r in reports {
        if by_name.insert(&r.name, r).is_some() {
            return Err(MetricsError::DuplicateRun(r.name.clone()));
        }
    }
    let base = by_name
        .get(baseline)
        .ok_or_else(|| MetricsError::MissingBaseline(baseline.to_owned()))?;
    let base_ce = base.cost_effectiveness;
    let rows = by_name
        .values()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            mean_ttft_ms: r.overall.ttft_ms.mean,
            p99_ttft_ms: r.overall.ttft_ms.p99,
            mean_e2e_ms: r.overall.mean_e2e_ms,
            cost: r.cost.total,
            cost_effectiveness: r.cost_effectiveness,
            relative_ce: match (r.cost_effectiveness, base_ce) {
                (Some(ce), Some(b)) if b > 0.0 => Some(ce / b),
                _ => None,
            },
            slo_violation_rate: r.overall.slo_violation_rate,
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_owned(),
        rows,
    })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

impl Comparison {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let header = ["run", "ttft_ms", "p99_ttft_ms", "e2e_ms", "cost", "ce", "ce_rel", "slo_viol"];
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    cell(r.mean_ttft_ms, 1),
                    cell(r.p99_ttft_ms, 1),
                    cell(r.mean_e2e_ms, 1),
                    format!("{:.4}", r.cost),
                    cell(r.cost_effectiveness, 4),
                    cell(r.relative_ce, 3),
                    format!("{:.3}", r.slo_violation_rate),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: &[&str]| {
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "  {c:>w$}");
                }
            }
            s.push('\n');
        };
        line(&mut s, &header);
        for row in &body {
            line(&mut s, &row.each_ref().map(String::as_str));
        }
        s
    }
}

/// Empirical CDF of TTFT values.
pub fn ttft_cdf(ttfts: impl IntoIterator<Item = f64>) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = ttfts.into_iter().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, t)| (*t, (i + 1) as f64 / n)).collect()
}

pub fn write_cdf_csv<W: Write>(cdf: &[(f64, f64)], w: W) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["ttft_ms", "cum_fraction"])?;
    for (t, p) in cdf {
        out.write_record([t.to_string(), p.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RequestRow {
    id: usize,
    function: String,
    arrival_ms: f64,
    dispatch_ms: Option<f64>,
    first_token_ms: Option<f64>,
    completion_ms: Option<f64>,
    ttft_ms: Option<f64>,
    tpot_ms: Option<f64>,
    e2e_ms: Option<f64>,
    prompt_tokens: u32,
    output_tokens: u32,
    cold_start_ms: f64,
}

pub fn write_requests_csv<W: Write>(records: &[RequestRecord], w: W) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(RequestRow {
            id: r.id,
            function: r.function.to_string(),
            arrival_ms: r.arrival_ms,
            dispatch_ms: r.dispatch_ms,
            first_token_ms: r.first_token_ms,
            completion_ms: r.completion_ms,
            ttft_ms: r.ttft_ms(),
            tpot_ms: r.tpot_ms(),
            e2e_ms: r.e2e_ms(),
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
            cold_start_ms: r.breakdown.total(),
        })?;
    }
    out.flush()?;
    Ok(())
}

/// TTFTs of served requests from a file written by [`write_requests_csv`].
pub fn read_request_ttfts<R: Read>(r: R) -> Result<Vec<f64>, MetricsError> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: RequestRow = row?;
        out.extend(row.ttft_ms);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::*;
    use crate::engine::Billing;
    use proptest::prelude::*;

    fn rec(id: usize, f: &str, ttft: f64) -> RequestRecord {
        RequestRecord {
            id,
            function: f.into(),
            arrival_ms: 0.0,
            dispatch_ms: Some(0.0),
            first_token_ms: Some(ttft),
            completion_ms: Some(ttft + 100.0),
            prompt_tokens: 10,
            output_tokens: 6,
            breakdown: ColdBreakdown {
                container_init: id as f64,
                ..Default::default()
            },
        }
    }

    fn cat() -> FunctionCatalog {
        catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama")])
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), Some(5.0));
        assert_eq!(percentile(&v, 90.0), Some(9.0));
        assert_eq!(percentile(&v, 99.0), Some(10.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn violation_examples() {
        let c = cat();
        let warm: Vec<_> = (0..4).map(|i| rec(i, "a1", 500.0)).collect();
        assert_eq!(slo_violation_rate(&warm, &c, SloRule::Paper5x)[&FunctionId::from("a1")], 0.0);
        let one = [rec(0, "a1", 2600.0)];
        assert_eq!(slo_violation_rate(&one, &c, SloRule::Paper5x)[&FunctionId::from("a1")], 1.0);
        let mixed: Vec<_> = (0..10).map(|i| rec(i, "a1", if i < 3 { 3000.0 } else { 900.0 })).collect();
        assert_eq!(slo_violation_rate(&mixed, &c, SloRule::Paper5x)[&FunctionId::from("a1")], 0.3);
        assert_eq!(slo_violation_rate(&one, &c, SloRule::Absolute)[&FunctionId::from("a1")], 1.0);
    }

    fn output(records: Vec<RequestRecord>, gpu_s: f64) -> SimOutput {
        SimOutput {
            requests: records,
            billing: Billing {
                gpu_s,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn report_totals() {
        let c = cat();
        let recs = vec![rec(1, "a1", 500.0), rec(2, "llama", 700.0), rec(3, "a1", 900.0)];
        let r = MetricsReport::from_output("x", &output(recs, 10.0), &c, &Pricing::default(), SloRule::Paper5x);
        assert_eq!(r.per_function.iter().map(|f| f.requests).sum::<usize>(), 3);
        assert_eq!(r.overall.cold_start.container_init, 6.0);
        assert_eq!(r.overall.ttft_ms.mean, Some(700.0));
        assert_eq!(r.overall.mean_tpot_ms, Some(20.0));
        assert_eq!(r.throughput_rps, 3.0);
    }

    #[test]
    fn relative_cost_effectiveness() {
        let c = cat();
        let p = Pricing::default();
        let a = MetricsReport::from_output("a", &output(vec![rec(0, "a1", 500.0)], 10.0), &c, &p, SloRule::Paper5x);
        let b = MetricsReport::from_output("b", &output(vec![rec(0, "a1", 500.0)], 5.0), &c, &p, SloRule::Paper5x);
        let t = compare_runs(&[a.clone()], "a").unwrap();
        assert_eq!(t.rows[0].relative_ce, Some(1.0));
        let t = compare_runs(&[b, a.clone()], "a").unwrap();
        assert!((t.row("b").unwrap().relative_ce.unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(compare_runs(&[a], "zzz"), Err(MetricsError::MissingBaseline(_))));
        assert!(t.to_text().lines().count() == 3);
    }

    #[test]
    fn cdf_ends_at_one() {
        let recs: Vec<_> = (0..4).map(|i| rec(i, "a1", 100.0 * i as f64)).collect();
        let cdf = ttft_cdf(recs.iter().filter_map(|r| r.ttft_ms()));
        assert_eq!(cdf.last(), Some(&(300.0, 1.0)));
        let mut buf = Vec::new();
        write_cdf_csv(&cdf, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("ttft_ms,cum_fraction\n0,0.25\n"));
        let mut buf = Vec::new();
        write_requests_csv(&recs, &mut buf).unwrap();
        assert_eq!(read_request_ttfts(&buf[..]).unwrap(), [0.0, 100.0, 200.0, 300.0]);
    }

    proptest! {
        #[test]
        fn percentiles_are_monotone(mut v in prop::collection::vec(0.0f64..1e6, 1..200)) {
            v.sort_by(f64::total_cmp);
            let s = LatencyStats::of(v.iter().copied());
            prop_assert!(s.p50 <= s.p90 && s.p90 <= s.p99);
            prop_assert!(v[0] <= s.p50.unwrap() && s.p99.unwrap() <= *v.last().unwrap());
        }

        #[test]
        fn violation_rate_in_unit_interval(ttfts in prop::collection::vec(0.0f64..10_000.0, 1..50)) {
            let recs: Vec<_> = ttfts.iter().enumerate().map(|(i, t)| rec(i, "a1", *t)).collect();
            for rate in slo_violation_rate(&recs, &cat(), SloRule::Paper5x).values() {
                prop_assert!((0.0..=1.0).contains(rate));
            }
        }

        #[test]
        fn comparison_ignores_run_order(costs in prop::collection::vec(1.0f64..100.0, 2..6), rot in 0usize..6) {
            let c = cat();
            let p = Pricing::default();
            let mut reports: Vec<_> = costs
                .iter()
                .enumerate()
                .map(|(i, g)| MetricsReport::from_output(format!("r{i}"), &output(vec![rec(0, "a1", 500.0 + i as f64)], *g), &c, &p, SloRule::Paper5x))
                .collect();
            let a = compare_runs(&reports, "r0").unwrap();
            let k = rot % reports.len();
            reports.rotate_left(k);
            prop_assert_eq!(a, compare_runs(&reports, "r0").unwrap());
        }
    }
}
