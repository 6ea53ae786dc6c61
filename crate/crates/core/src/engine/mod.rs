//! Deterministic discrete-event simulation of a serverless LoRA cluster.
//!
//! Requests are routed to one instance per function, batched per function,
//! and executed on GPUs under processor sharing. Artifact residency lives in a
//! [`ResidencyLedger`]; pre-loading, offloading and keep-alive all act on it.

pub mod cost;
pub mod event;
pub mod exec;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{schedule_round, BatchQueue, BatchingPolicy, ContentionView, Pending, QueueSlot};
use crate::domain::{
    ArrivalStats, ArtifactKind, ClusterSpec, ContainerId, FunctionCatalog, FunctionId, FunctionSpec, GpuId,
    SpecError, Tier,
};
use crate::ledger::{LedgerError, Origin, ResidencyLedger};
use crate::offload::{
    apply_evictions, evictable_bytes, select_evictions, DemotionTargets, EvictionCandidate, OffloadRequest,
};
use crate::preload::{compute_benefits, greedy_extend, greedy_preload, BenefitTable};
use crate::workload::{ewma_rates, mean_rates, Trace};

pub use cost::{cost_effectiveness, monetary_cost, Billing, CostBreakdown, CostError, Pricing};
use event::{EventKind, EventQueue, Payload};
use exec::{BatchJob, GpuExecutor, Milestone};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub batching: BatchingPolicy,
    pub preload: bool,
    pub offload: bool,
    pub keep_alive_ms: f64,
    pub replan_interval_ms: f64,
    pub rate_window_s: f64,
    pub rate_half_life_s: f64,
    /// GPU to container copy bandwidth for demoted models, GB/s.
    pub demotion_gbps: f64,
    pub pricing: Pricing,
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            batching: BatchingPolicy::default(),
            preload: true,
            offload: true,
            keep_alive_ms: 600_000.0,
            replan_interval_ms: 10_000.0,
            rate_window_s: 300.0,
            rate_half_life_s: 60.0,
            demotion_gbps: 16.0,
            pricing: Pricing::default(),
            record_events: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace references unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("initial plan does not fit: {0}")]
    InitialPlan(#[from] LedgerError),
}

/// Cold-start time per stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ColdBreakdown {
    pub container_init: f64,
    pub library_load: f64,
    pub backbone_load: f64,
    pub adapter_load: f64,
    pub kernel_compile: f64,
}

impl ColdBreakdown {
    pub fn total(&self) -> f64 {
        self.container_init + self.library_load + self.backbone_load + self.adapter_load + self.kernel_compile
    }

    pub fn add(&mut self, other: &ColdBreakdown) {
        self.container_init += other.container_init;
        self.library_load += other.library_load;
        self.backbone_load += other.backbone_load;
        self.adapter_load += other.adapter_load;
        self.kernel_compile += other.kernel_compile;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: usize,
    pub function: FunctionId,
    pub arrival_ms: f64,
    pub dispatch_ms: Option<f64>,
    pub first_token_ms: Option<f64>,
    pub completion_ms: Option<f64>,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub breakdown: ColdBreakdown,
}

impl RequestRecord {
    pub fn is_complete(&self) -> bool {
        self.completion_ms.is_some()
    }

    pub fn ttft_ms(&self) -> Option<f64> {
        self.first_token_ms.map(|t| t - self.arrival_ms)
    }

    pub fn e2e_ms(&self) -> Option<f64> {
        self.completion_ms.map(|t| t - self.arrival_ms)
    }

    /// Mean time between output tokens after the first.
    pub fn tpot_ms(&self) -> Option<f64> {
        let (first, done) = (self.first_token_ms?, self.completion_ms?);
        if self.output_tokens <= 1 {
            return Some(0.0);
        }
        Some((done - first) / (self.output_tokens - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchRecord {
    pub batch: u64,
    pub function: FunctionId,
    pub gpu: GpuId,
    pub time_ms: f64,
    pub size: usize,
    /// Batches executing on the GPU once this one started.
    pub contention: usize,
    pub predicted_ttft_ms: f64,
    pub slo_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    pub requests: Vec<RequestRecord>,
    pub dispatches: Vec<DispatchRecord>,
    pub events: Vec<String>,
    /// Usage from time zero until the last request completes.
    pub billing: Billing,
    pub peak_gpu_bytes: BTreeMap<GpuId, u64>,
    pub cold_starts: usize,
    pub evictions: usize,
    pub end_ms: f64,
}

impl SimOutput {
    pub fn unserved(&self) -> usize {
        self.requests.iter().filter(|r| !r.is_complete()).count()
    }

    pub fn peak_batch(&self) -> usize {
        self.dispatches.iter().map(|d| d.size).max().unwrap_or(0)
    }
}

fn remaining(ledger: &ResidencyLedger, tier: &Tier, f: &FunctionId, kind: ArtifactKind, now: f64) -> Option<f64> {
    ledger.resident(tier, f, kind).map(|r| (r.ready_at_ms - now).max(0.0))
}

/// Predicted cold start of `f` on `gpu` with its library in `container`.
/// Stages run back to back; an artifact already resident costs nothing, one
/// still loading costs its remaining time, and a model held in container
/// memory of the same group loads at container speed.
pub fn cold_start_latency(
    f: &FunctionSpec,
    catalog: &FunctionCatalog,
    cluster: &ClusterSpec,
    ledger: &ResidencyLedger,
    gpu: &GpuId,
    container: Option<&ContainerId>,
    now: f64,
) -> (f64, ColdBreakdown) {
    let gpu_tier = Tier::Gpu(gpu.clone());
    let mut bd = ColdBreakdown::default();
    let library = container.and_then(|c| remaining(ledger, &Tier::Container(c.clone()), &f.id, ArtifactKind::Library, now));
    if library.is_none() {
        bd.container_init = f.container_init_ms;
    }
    if let Some(a) = f.artifact(ArtifactKind::Library) {
        bd.library_load = library.unwrap_or(a.load_cold_ms);
    }
    let model = |owner: &FunctionSpec, kind: ArtifactKind| -> f64 {
        let Some(a) = owner.artifact(kind) else { return 0.0 };
        if let Some(r) = remaining(ledger, &gpu_tier, &owner.id, kind, now) {
            return r;
        }
        cluster
            .containers_of(gpu)
            .filter_map(|c| remaining(ledger, &Tier::Container(c.id.clone()), &owner.id, kind, now))
            .min_by(f64::total_cmp)
            .map_or(a.load_cold_ms, |r| r + a.load_from_container_ms)
    };
    if let Some(bb) = catalog.get(&f.backbone) {
        bd.backbone_load = model(bb, ArtifactKind::BackboneModel);
    }
    if f.is_adapter() {
        bd.adapter_load = model(f, ArtifactKind::AdapterModel);
    }
    if let Some(a) = f.artifact(ArtifactKind::Kernel) {
        bd.kernel_compile = remaining(ledger, &gpu_tier, &f.id, ArtifactKind::Kernel, now).unwrap_or(a.load_cold_ms);
    }
    (bd.total(), bd)
}

struct Instance {
    gpu: GpuId,
    container: Option<ContainerId>,
    ready_at: f64,
    generation: u64,
}

struct Batch {
    function: FunctionId,
    gpu: GpuId,
    requests: Vec<usize>,
    kv_bytes: u64,
    kv_reserved: bool,
    started: bool,
}

pub struct Simulator<'a> {
    cfg: &'a SimConfig,
    cluster: &'a ClusterSpec,
    catalog: &'a FunctionCatalog,
    trace: &'a Trace,
    ledger: ResidencyLedger,
    events: EventQueue,
    now: f64,
    queues: BTreeMap<FunctionId, BatchQueue>,
    instances: BTreeMap<FunctionId, Instance>,
    waiting_acquire: BTreeMap<FunctionId, Vec<usize>>,
    waiting_batches: VecDeque<u64>,
    batches: BTreeMap<u64, Batch>,
    execs: BTreeMap<GpuId, GpuExecutor>,
    benefits: BenefitTable,
    seen: Vec<(f64, FunctionId)>,
    next_batch: u64,
    next_tick: Option<f64>,
    freed: bool,
    last_bill_ms: f64,
    bill_rate: Billing,
    outstanding: usize,
    out: SimOutput,
}

impl<'a> Simulator<'a> {
    pub fn new(
        cfg: &'a SimConfig,
        cluster: &'a ClusterSpec,
        catalog: &'a FunctionCatalog,
        trace: &'a Trace,
    ) -> Result<Self, SimError> {
        cluster.validate()?;
        for f in trace.functions() {
            if catalog.get(&f).is_none() {
                return Err(SimError::UnknownFunction(f));
            }
        }
        Ok(Self {
            cfg,
            cluster,
            catalog,
            trace,
            ledger: ResidencyLedger::new(cluster),
            events: EventQueue::new(),
            now: 0.0,
            queues: BTreeMap::new(),
            instances: BTreeMap::new(),
            waiting_acquire: BTreeMap::new(),
            waiting_batches: VecDeque::new(),
            batches: BTreeMap::new(),
            execs: cluster.gpus.iter().map(|g| (g.id.clone(), GpuExecutor::new())).collect(),
            benefits: BenefitTable::default(),
            seen: Vec::new(),
            next_batch: 0,
            next_tick: None,
            freed: false,
            last_bill_ms: 0.0,
            bill_rate: Billing::default(),
            outstanding: trace.len(),
            out: SimOutput::default(),
        })
    }

    pub fn run(mut self) -> Result<SimOutput, SimError> {
        // Offline profiling: the whole-trace mean rate drives the first plan.
        let span_s = (self.trace.span_ms() / 1000.0).max(1.0);
        let rates = mean_rates(self.trace, span_s);
        self.benefits = compute_benefits(self.catalog, &rates);
        if self.cfg.preload {
            let plan = greedy_preload(&self.benefits, self.cluster, self.catalog);
            self.ledger.materialize(&plan, self.catalog, 0.0)?;
            self.log(format_args!("initial_plan placements={}", plan.len()));
            if !self.trace.is_empty() {
                self.events
                    .push(self.cfg.replan_interval_ms, EventKind::ReplanTimer, Payload::Replan);
            }
        }
        self.out.requests = self
            .trace
            .records()
            .iter()
            .enumerate()
            .map(|(id, r)| RequestRecord {
                id,
                function: r.function_id.clone(),
                arrival_ms: r.arrival_ms,
                dispatch_ms: None,
                first_token_ms: None,
                completion_ms: None,
                prompt_tokens: r.prompt_tokens,
                output_tokens: r.output_tokens,
                breakdown: ColdBreakdown::default(),
            })
            .collect();
        for (i, r) in self.trace.records().iter().enumerate() {
            self.events.push(r.arrival_ms, EventKind::RequestArrival, Payload::Request(i));
        }
        self.track_peaks();

        while let Some(ev) = self.events.pop() {
            self.advance_billing(ev.time_ms);
            self.now = ev.time_ms;
            match ev.payload {
                Payload::Request(r) => self.on_arrival(r),
                Payload::Tick => self.on_tick(),
                Payload::Batch(id) => self.on_dispatch(id),
                Payload::Exec { gpu, epoch } => self.on_exec(&gpu, epoch),
                Payload::Load { function, gpu } => self.on_load(&function, &gpu),
                Payload::Eviction { gpu, bytes } => self.log(format_args!("eviction_done gpu={gpu} bytes={bytes}")),
                Payload::KeepAlive { function, generation } => self.on_keep_alive(&function, generation),
                Payload::Replan => self.on_replan(),
            }
            if self.freed {
                self.freed = false;
                self.retry_waiting();
            }
            debug_assert!(self.ledger.check_capacity().is_ok());
            self.track_peaks();
            self.refresh_billing();
        }
        self.out.end_ms = self.now;
        Ok(self.out)
    }

    fn log(&mut self, args: std::fmt::Arguments<'_>) {
        if self.cfg.record_events {
            let mut line = String::new();
            let _ = write!(line, "{:.3} {}", self.now, args);
            self.out.events.push(line);
        }
    }

    fn spec(&self, f: &FunctionId) -> &'a FunctionSpec {
        self.catalog.get(f).expect("validated at construction")
    }

    fn track_peaks(&mut self) {
        for (g, s) in self.ledger.gpus() {
            let peak = self.out.peak_gpu_bytes.entry(g.clone()).or_default();
            *peak = (*peak).max(s.used());
        }
    }

    // ---- billing ----

    fn advance_billing(&mut self, to: f64) {
        let dt = (to - self.last_bill_ms).max(0.0) / 1000.0;
        if dt > 0.0 && self.outstanding > 0 {
            self.out.billing.gpu_s += self.bill_rate.gpu_s * dt;
            self.out.billing.host_gb_s += self.bill_rate.host_gb_s * dt;
            self.out.billing.core_s += self.bill_rate.core_s * dt;
        }
        self.last_bill_ms = to;
    }

    /// Billable usage per second: every acquired instance pays for its own GPU
    /// artifacts, context, KV cache and library; a backbone is paid once per
    /// GPU while any instance on that GPU relies on it.
    fn refresh_billing(&mut self) {
        let mut kv: BTreeMap<&FunctionId, u64> = BTreeMap::new();
        for b in self.batches.values().filter(|b| b.kv_reserved) {
            *kv.entry(&b.function).or_default() += b.kv_bytes;
        }
        let mut gpu_bytes: BTreeMap<&GpuId, u64> = BTreeMap::new();
        let mut backbones: BTreeSet<(&GpuId, &FunctionId)> = BTreeSet::new();
        let mut host_bytes = 0u64;
        for (f, inst) in &self.instances {
            let spec = self.spec(f);
            let tier = Tier::Gpu(inst.gpu.clone());
            let Some(state) = self.ledger.gpu(&inst.gpu) else { continue };
            let mut bytes = state.contexts.get(f).copied().unwrap_or(0) + kv.get(f).copied().unwrap_or(0);
            for kind in [ArtifactKind::AdapterModel, ArtifactKind::Kernel] {
                bytes += self.ledger.resident(&tier, f, kind).map_or(0, |r| r.bytes);
            }
            *gpu_bytes.entry(&inst.gpu).or_default() += bytes;
            backbones.insert((&inst.gpu, &spec.backbone));
            if let Some(c) = &inst.container {
                host_bytes += self
                    .ledger
                    .resident(&Tier::Container(c.clone()), f, ArtifactKind::Library)
                    .map_or(0, |r| r.bytes);
            }
        }
        for (g, bb) in backbones {
            let bytes = self
                .ledger
                .resident(&Tier::Gpu(g.clone()), bb, ArtifactKind::BackboneModel)
                .map_or(0, |r| r.bytes);
            *gpu_bytes.entry(g).or_default() += bytes;
        }
        let gpu_share = gpu_bytes
            .iter()
            .map(|(g, b)| {
                let cap = self.ledger.gpu(g).map_or(1, |s| s.capacity.max(1));
                *b as f64 / cap as f64
            })
            .sum();
        self.bill_rate = Billing {
            gpu_s: gpu_share,
            host_gb_s: host_bytes as f64 / 1e9,
            core_s: self.instances.len() as f64 * self.cfg.pricing.cores_per_instance,
        };
    }

    // ---- busy state and offloading ----

    fn busy_functions(&self) -> BTreeSet<FunctionId> {
        let mut out: BTreeSet<&FunctionId> = self
            .queues
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(f, _)| f)
            .collect();
        out.extend(self.waiting_acquire.keys());
        out.extend(self.batches.values().map(|b| &b.function));
        out.extend(
            self.instances
                .iter()
                .filter(|(_, i)| i.ready_at > self.now)
                .map(|(f, _)| f),
        );
        out.into_iter().cloned().collect()
    }

    fn eviction_candidates(&self, gpu: &GpuId) -> Vec<EvictionCandidate> {
        let Some(state) = self.ledger.gpu(gpu) else { return Vec::new() };
        state
            .resident
            .iter()
            .map(|((f, kind), r)| {
                let spec = self.spec(f);
                let requires = match kind {
                    ArtifactKind::Kernel => Some((f.clone(), spec.model_kind())),
                    ArtifactKind::AdapterModel => Some((spec.backbone.clone(), ArtifactKind::BackboneModel)),
                    _ => None,
                };
                // the model is the last of a function's artifacts to leave, and
                // takes the context with it
                let context = if *kind == spec.model_kind() {
                    state.contexts.get(f).copied().unwrap_or(0)
                } else {
                    0
                };
                EvictionCandidate {
                    function: f.clone(),
                    kind: *kind,
                    value: self
                        .benefits
                        .get(f, *kind, crate::domain::TierClass::Gpu)
                        .map_or(0.0, |b| b.value),
                    weight: r.bytes + context,
                    requires,
                }
            })
            .collect()
    }

    fn kv_room(&self, gpu: &GpuId, protected: &BTreeSet<FunctionId>) -> u64 {
        let free = self.ledger.free(&Tier::Gpu(gpu.clone()));
        if self.cfg.offload {
            free + evictable_bytes(protected, &self.eviction_candidates(gpu))
        } else {
            free
        }
    }

    /// Frees memory on `gpu` until `required` bytes fit. Returns the demotion
    /// latency, or `None` if not enough is evictable.
    fn offload(&mut self, gpu: &GpuId, required: u64, protected: BTreeSet<FunctionId>) -> Option<f64> {
        let free = self.ledger.free(&Tier::Gpu(gpu.clone()));
        if required <= free {
            return Some(0.0);
        }
        let candidates = self.eviction_candidates(gpu);
        let mut targets = DemotionTargets::default();
        let group: Vec<&ContainerId> = self.cluster.containers_of(gpu).map(|c| &c.id).collect();
        for c in &group {
            targets
                .room
                .insert((*c).clone(), self.ledger.free(&Tier::Container((*c).clone())));
        }
        for cand in &candidates {
            if let Some(home) = self.home_container(&cand.function, gpu) {
                targets.home.insert(cand.function.clone(), home);
            }
        }
        let req = OffloadRequest {
            gpu: gpu.clone(),
            required_bytes: required,
            protected,
        };
        let evictions = select_evictions(&req, &candidates, free, &targets).ok()?;
        let version = self.ledger.version(gpu);
        let latency = apply_evictions(
            &evictions,
            &mut self.ledger,
            self.catalog,
            gpu,
            version,
            self.cfg.demotion_gbps,
        )
        .expect("version read just above");
        self.out.evictions += evictions.len();
        let mut touched = BTreeSet::new();
        let mut bytes = 0;
        for e in &evictions {
            bytes += e.bytes;
            touched.insert(e.function.clone());
            self.log(format_args!(
                "evict gpu={gpu} function={} kind={} bytes={} to={:?}",
                e.function, e.kind, e.bytes, e.destination
            ));
        }
        for f in touched {
            if self.instances.get(&f).is_some_and(|i| &i.gpu == gpu) {
                self.release_instance(&f);
            }
        }
        self.events.push(
            self.now + latency,
            EventKind::EvictionComplete,
            Payload::Eviction {
                gpu: gpu.clone(),
                bytes,
            },
        );
        Some(latency)
    }

    fn home_container(&self, f: &FunctionId, gpu: &GpuId) -> Option<ContainerId> {
        let group: Vec<_> = self.cluster.containers_of(gpu).collect();
        group
            .iter()
            .find(|c| {
                self.ledger
                    .resident(&Tier::Container(c.id.clone()), f, ArtifactKind::Library)
                    .is_some()
            })
            .or_else(|| {
                group.iter().max_by_key(|c| {
                    (
                        self.ledger.free(&Tier::Container(c.id.clone())),
                        Reverse(c.id.clone()),
                    )
                })
            })
            .map(|c| c.id.clone())
    }

    // ---- instances ----

    /// GPU bytes an instance of `f` on `gpu` still needs, context included.
    fn gpu_need(&self, spec: &FunctionSpec, gpu: &GpuId) -> u64 {
        let tier = Tier::Gpu(gpu.clone());
        let mut need = 0;
        let mut own_missing = false;
        if let Some(bb) = self.catalog.get(&spec.backbone) {
            if self.ledger.resident(&tier, &bb.id, ArtifactKind::BackboneModel).is_none() {
                need += bb.artifact(ArtifactKind::BackboneModel).map_or(0, |a| a.size_bytes);
            }
        }
        for kind in [ArtifactKind::AdapterModel, ArtifactKind::Kernel] {
            if let Some(a) = spec.artifact(kind) {
                if self.ledger.resident(&tier, &spec.id, kind).is_none() {
                    need += a.size_bytes;
                    own_missing = true;
                }
            }
        }
        let charged = self.ledger.gpu(gpu).is_some_and(|s| s.contexts.contains_key(&spec.id));
        if spec.charges_context() && own_missing && !charged {
            need += self.cluster.context_overhead_bytes;
        }
        need
    }

    fn pick_container(&self, spec: &FunctionSpec, gpu: &GpuId) -> Option<ContainerId> {
        self.home_container(&spec.id, gpu)
    }

    fn try_acquire(&mut self, f: &FunctionId) -> bool {
        let spec = self.spec(f);
        let mut protected = self.busy_functions();
        protected.insert(f.clone());
        protected.insert(spec.backbone.clone());

        struct Choice {
            gpu: GpuId,
            container: Option<ContainerId>,
            fits: bool,
            need: u64,
        }
        let mut best: Option<((f64, bool, bool, usize, Reverse<u64>, GpuId), Choice)> = None;
        for g in &self.cluster.gpus {
            let container = self.pick_container(spec, &g.id);
            let (latency, _) = cold_start_latency(
                spec,
                self.catalog,
                self.cluster,
                &self.ledger,
                &g.id,
                container.as_ref(),
                self.now,
            );
            // leave room for one request of any function on this GPU
            let headroom = self
                .instances
                .iter()
                .filter(|(_, i)| i.gpu == g.id)
                .map(|(f, _)| self.spec(f).kv_bytes_per_request)
                .fold(spec.kv_bytes_per_request, u64::max);
            let need = self.gpu_need(spec, &g.id) + headroom;
            let free = self.ledger.free(&Tier::Gpu(g.id.clone()));
            let fits = need <= free;
            if !fits && !(self.cfg.offload && need <= self.kv_room(&g.id, &protected)) {
                continue;
            }
            let hosts = self
                .ledger
                .resident(&Tier::Gpu(g.id.clone()), &spec.backbone, ArtifactKind::BackboneModel)
                .is_some();
            let load = self.instances.values().filter(|i| i.gpu == g.id).count();
            let key = (latency, !fits, !hosts, load, Reverse(free), g.id.clone());
            let better = best.as_ref().map_or(true, |(k, _)| {
                key.0
                    .total_cmp(&k.0)
                    .then_with(|| (key.1, key.2, key.3, key.4, &key.5).cmp(&(k.1, k.2, k.3, k.4, &k.5)))
                    .is_lt()
            });
            if better {
                best = Some((
                    key,
                    Choice {
                        gpu: g.id.clone(),
                        container,
                        fits,
                        need,
                    },
                ));
            }
        }
        let Some((_, choice)) = best else { return false };
        let mut delay = 0.0;
        if !choice.fits {
            match self.offload(&choice.gpu, choice.need, protected) {
                Some(ms) => delay = ms,
                None => return false,
            }
        }

        let (latency, bd) = cold_start_latency(
            spec,
            self.catalog,
            self.cluster,
            &self.ledger,
            &choice.gpu,
            choice.container.as_ref(),
            self.now,
        );
        let gpu_tier = Tier::Gpu(choice.gpu.clone());
        let mut t = self.now + delay + bd.container_init;
        let load = |sim: &mut Self, t: &mut f64, tier: &Tier, owner: &FunctionId, kind: ArtifactKind, stage: f64| {
            *t += stage;
            if sim.ledger.resident(tier, owner, kind).is_none() {
                let _ = sim.ledger.load(tier, sim.catalog, owner, kind, *t, Origin::OnDemand);
            }
        };
        if let Some(c) = &choice.container {
            if spec.artifact(ArtifactKind::Library).is_some() {
                load(self, &mut t, &Tier::Container(c.clone()), f, ArtifactKind::Library, bd.library_load);
            }
        } else {
            t += bd.library_load;
        }
        load(self, &mut t, &gpu_tier, &spec.backbone, ArtifactKind::BackboneModel, bd.backbone_load);
        if spec.is_adapter() {
            load(self, &mut t, &gpu_tier, f, ArtifactKind::AdapterModel, bd.adapter_load);
        }
        if spec.artifact(ArtifactKind::Kernel).is_some() {
            load(self, &mut t, &gpu_tier, f, ArtifactKind::Kernel, bd.kernel_compile);
        }
        let ready_at = t;
        if latency > 0.0 {
            self.out.cold_starts += 1;
        }
        self.log(format_args!(
            "acquire function={f} gpu={} cold_ms={latency:.3} ready_at={ready_at:.3}",
            choice.gpu
        ));
        self.instances.insert(
            f.clone(),
            Instance {
                gpu: choice.gpu.clone(),
                container: choice.container,
                ready_at,
                generation: 0,
            },
        );
        self.events.push(
            ready_at,
            EventKind::PreloadComplete,
            Payload::Load {
                function: f.clone(),
                gpu: choice.gpu,
            },
        );
        if let Some(first) = self.waiting_acquire.get(f).and_then(|rs| rs.first()) {
            self.out.requests[*first].breakdown = bd;
        }
        true
    }

    /// Moves requests waiting for `f`'s instance into its queue once acquired.
    fn acquire_waiting(&mut self, f: &FunctionId) -> bool {
        if !self.try_acquire(f) {
            return false;
        }
        let spec = self.spec(f);
        for r in self.waiting_acquire.remove(f).unwrap_or_default() {
            let arrival = self.out.requests[r].arrival_ms;
            let cfg = self.cfg;
            self.queue_mut(f).push(r as u64, arrival, spec, &cfg.batching);
        }
        true
    }

    fn queue_mut(&mut self, f: &FunctionId) -> &mut BatchQueue {
        self.queues
            .entry(f.clone())
            .or_insert_with(|| BatchQueue::new(f.clone(), 1))
    }

    fn release_instance(&mut self, f: &FunctionId) {
        let Some(inst) = self.instances.remove(f) else { return };
        let spec = self.spec(f);
        let tier = Tier::Gpu(inst.gpu.clone());
        for kind in ArtifactKind::ALL {
            if self.ledger.resident(&tier, f, kind).is_some_and(|r| r.origin == Origin::OnDemand) {
                self.ledger.remove(&tier, f, kind);
            }
        }
        let bb = &spec.backbone;
        if bb != f
            && !self.instances.contains_key(bb)
            && self
                .ledger
                .resident(&tier, bb, ArtifactKind::BackboneModel)
                .is_some_and(|r| r.origin == Origin::OnDemand)
        {
            let still_used = self.ledger.gpu(&inst.gpu).is_some_and(|s| {
                s.resident
                    .keys()
                    .any(|(other, kind)| *kind == ArtifactKind::AdapterModel && &self.spec(other).backbone == bb)
            });
            if !still_used {
                self.ledger.remove(&tier, bb, ArtifactKind::BackboneModel);
            }
        }
        if let Some(c) = &inst.container {
            let ct = Tier::Container(c.clone());
            if self
                .ledger
                .resident(&ct, f, ArtifactKind::Library)
                .is_some_and(|r| r.origin == Origin::OnDemand)
            {
                self.ledger.remove(&ct, f, ArtifactKind::Library);
            }
        }
        self.freed = true;
        self.log(format_args!("release function={f} gpu={}", inst.gpu));
    }

    fn is_idle(&self, f: &FunctionId) -> bool {
        self.queues.get(f).map_or(true, |q| q.is_empty())
            && !self.waiting_acquire.contains_key(f)
            && !self.batches.values().any(|b| &b.function == f)
    }

    fn maybe_keep_alive(&mut self, f: &FunctionId) {
        if !self.is_idle(f) {
            return;
        }
        let at = self.now + self.cfg.keep_alive_ms;
        if let Some(inst) = self.instances.get_mut(f) {
            inst.generation += 1;
            let generation = inst.generation;
            self.events.push(
                at,
                EventKind::KeepAliveExpire,
                Payload::KeepAlive {
                    function: f.clone(),
                    generation,
                },
            );
        }
    }

    // ---- event handlers ----

    fn on_arrival(&mut self, r: usize) {
        let f = self.trace.records()[r].function_id.clone();
        self.seen.push((self.now, f.clone()));
        self.log(format_args!("arrival request={r} function={f}"));
        if let Some(inst) = self.instances.get_mut(&f) {
            inst.generation += 1;
            let spec = self.spec(&f);
            let (now, cfg) = (self.now, self.cfg);
            self.queue_mut(&f).push(r as u64, now, spec, &cfg.batching);
        } else if let Some(w) = self.waiting_acquire.get_mut(&f) {
            w.push(r);
        } else {
            self.waiting_acquire.insert(f.clone(), vec![r]);
            self.acquire_waiting(&f);
        }
        self.run_round();
    }

    fn on_tick(&mut self) {
        if self.next_tick.is_some_and(|t| t <= self.now) {
            self.next_tick = None;
        }
        self.run_round();
    }

    /// Queues whose instance is loaded and has no batch in flight.
    fn ready_queues(&self) -> Vec<FunctionId> {
        let in_flight: BTreeSet<&FunctionId> = self.batches.values().map(|b| &b.function).collect();
        self.queues
            .iter()
            .filter(|(f, q)| {
                !q.is_empty()
                    && !in_flight.contains(f)
                    && self.instances.get(*f).is_some_and(|i| i.ready_at <= self.now)
            })
            .map(|(f, _)| f.clone())
            .collect()
    }

    fn run_round(&mut self) {
        loop {
            let ready = self.ready_queues();
            if ready.is_empty() {
                break;
            }
            let mut protected: Option<BTreeSet<FunctionId>> = None;
            let mut rooms: BTreeMap<GpuId, u64> = BTreeMap::new();
            let mut view = ContentionView::new();
            for (g, e) in &self.execs {
                let pending = self
                    .batches
                    .values()
                    .filter(|b| &b.gpu == g && !b.started)
                    .count();
                view.set(g.clone(), e.active() + pending);
            }
            let mut taken = Vec::with_capacity(ready.len());
            for f in &ready {
                let gpu = self.instances[f].gpu.clone();
                let spec = self.spec(f);
                let policy = &self.cfg.batching;
                let mut cap = policy.size_cap(spec, Some(self.ledger.free(&Tier::Gpu(gpu.clone()))));
                // evictable memory only matters when free memory is the binding limit
                if self.cfg.offload && cap < policy.size_cap(spec, None) {
                    let room = match rooms.get(&gpu) {
                        Some(r) => *r,
                        None => {
                            let busy = protected.get_or_insert_with(|| self.busy_functions());
                            let r = self.kv_room(&gpu, busy);
                            rooms.insert(gpu.clone(), r);
                            r
                        }
                    };
                    cap = policy.size_cap(spec, Some(room));
                }
                let mut q = self.queues.remove(f).expect("ready queue exists");
                q.set_max_batch(cap);
                taken.push((q, spec, gpu));
            }
            let mut slots: Vec<QueueSlot<'_>> = taken
                .iter_mut()
                .map(|(q, spec, gpu)| QueueSlot {
                    queue: q,
                    spec,
                    gpu: Some(gpu.clone()),
                })
                .collect();
            let decisions = schedule_round(&mut slots, &mut view, self.now, &self.cfg.batching);
            drop(slots);
            for (q, _, _) in taken {
                self.queues.insert(q.function.clone(), q);
            }
            if decisions.is_empty() {
                break;
            }
            for d in decisions {
                let id = self.next_batch;
                self.next_batch += 1;
                let spec = self.spec(&d.function);
                let requests: Vec<usize> = d.requests.iter().map(|p| p.request as usize).collect();
                let gpu = d.gpu.expect("ready queues have an instance");
                self.log(format_args!(
                    "flush batch={id} function={} size={} reason={:?} margin={:.3}",
                    d.function,
                    requests.len(),
                    d.reason,
                    d.margin_ms
                ));
                self.batches.insert(
                    id,
                    Batch {
                        function: d.function.clone(),
                        gpu,
                        kv_bytes: spec.kv_bytes_per_request * requests.len() as u64,
                        requests,
                        kv_reserved: false,
                        started: false,
                    },
                );
                self.events.push(self.now, EventKind::BatchDispatch, Payload::Batch(id));
            }
        }
        self.schedule_tick();
    }

    fn schedule_tick(&mut self) {
        if self.ready_queues().is_empty() {
            return;
        }
        let tick = self.cfg.batching.tick_ms().max(1e-3);
        let t = ((self.now / tick).floor() + 1.0) * tick;
        if self.next_tick.map_or(true, |n| n > t) {
            self.next_tick = Some(t);
            self.events.push(t, EventKind::SchedulerTick, Payload::Tick);
        }
    }

    fn on_dispatch(&mut self, id: u64) {
        let Some(b) = self.batches.get(&id) else { return };
        if b.started {
            return;
        }
        let (gpu, function) = (b.gpu.clone(), b.function.clone());
        if !b.kv_reserved {
            // memory waiters on a GPU are served first come, first served
            let queued = self
                .waiting_batches
                .iter()
                .any(|w| self.batches.get(w).is_some_and(|o| o.gpu == gpu));
            match if queued { None } else { self.try_reserve(id) } {
                None => {
                    self.waiting_batches.push_back(id);
                    self.log(format_args!("wait_memory batch={id} gpu={gpu}"));
                    return;
                }
                Some(delay) if delay > 0.0 => {
                    self.events
                        .push(self.now + delay, EventKind::BatchDispatch, Payload::Batch(id));
                    return;
                }
                Some(_) => {}
            }
        }
        let spec = self.spec(&function);
        let b = self.batches.get_mut(&id).expect("present");
        b.started = true;
        let size = b.requests.len();
        let predicted = spec.prefill_base_ms + spec.prefill_marginal_ms * (size.max(1) - 1) as f64;
        let outputs: Vec<(usize, u32)> = b
            .requests
            .iter()
            .map(|&r| (r, self.trace.records()[r].output_tokens))
            .collect();
        for &(r, _) in &outputs {
            self.out.requests[r].dispatch_ms = Some(self.now);
        }
        let exec = self.execs.get_mut(&gpu).expect("known gpu");
        exec.add(
            self.now,
            BatchJob::new(id, function.clone(), predicted, spec.decode_ms_per_token, &outputs),
        );
        let contention = exec.active();
        self.out.dispatches.push(DispatchRecord {
            batch: id,
            function: function.clone(),
            gpu: gpu.clone(),
            time_ms: self.now,
            size,
            contention,
            predicted_ttft_ms: predicted,
            slo_ms: spec.slo_ttft_ms,
        });
        self.log(format_args!(
            "dispatch batch={id} function={function} gpu={gpu} size={size} m={contention}"
        ));
        self.schedule_exec(&gpu);
    }

    /// Reserves the batch's KV cache, offloading if allowed. Returns the
    /// demotion delay before the batch may start, or `None` if it must wait.
    fn try_reserve(&mut self, id: u64) -> Option<f64> {
        let b = &self.batches[&id];
        let (gpu, kv) = (b.gpu.clone(), b.kv_bytes);
        let mut delay = 0.0;
        if self.ledger.reserve_kv(&gpu, id, kv).is_err() {
            if !self.cfg.offload {
                self.trim_to_fit(id)?;
                self.ledger.reserve_kv(&gpu, id, self.batches[&id].kv_bytes).ok()?;
                self.batches.get_mut(&id).expect("present").kv_reserved = true;
                return Some(0.0);
            }
            delay = self.offload(&gpu, kv, self.busy_functions())?;
            self.ledger.reserve_kv(&gpu, id, kv).ok()?;
        }
        self.batches.get_mut(&id).expect("present").kv_reserved = true;
        Some(delay)
    }

    /// Shrinks an unreserved batch to the requests whose KV cache fits now and
    /// returns the newest ones to the front of the function's queue.
    fn trim_to_fit(&mut self, id: u64) -> Option<()> {
        let b = &self.batches[&id];
        let spec = self.spec(&b.function);
        let per = spec.kv_bytes_per_request.max(1);
        let fit = (self.ledger.free(&Tier::Gpu(b.gpu.clone())) / per) as usize;
        if fit == 0 || fit >= b.requests.len() {
            return None;
        }
        let b = self.batches.get_mut(&id).expect("present");
        let rest = b.requests.split_off(fit);
        b.kv_bytes = spec.kv_bytes_per_request * fit as u64;
        let function = b.function.clone();
        let back = rest
            .iter()
            .map(|&r| Pending {
                request: r as u64,
                enqueued_ms: self.trace.records()[r].arrival_ms,
            })
            .collect();
        let policy = &self.cfg.batching;
        self.queues
            .entry(function.clone())
            .or_insert_with(|| BatchQueue::new(function.clone(), 1))
            .requeue(back, spec, policy);
        self.log(format_args!("trim batch={id} function={function} kept={fit}"));
        Some(())
    }

    fn schedule_exec(&mut self, gpu: &GpuId) {
        let exec = &self.execs[gpu];
        if let Some((t, prefill)) = exec.next_event() {
            let kind = if prefill {
                EventKind::PrefillComplete
            } else {
                EventKind::RequestComplete
            };
            self.events.push(
                t,
                kind,
                Payload::Exec {
                    gpu: gpu.clone(),
                    epoch: exec.epoch(),
                },
            );
        }
    }

    fn on_exec(&mut self, gpu: &GpuId, epoch: u64) {
        let exec = self.execs.get_mut(gpu).expect("known gpu");
        if exec.epoch() != epoch {
            return;
        }
        let milestones = exec.collect(self.now);
        for m in milestones {
            match m {
                Milestone::Prefill { batch, function } => {
                    let requests = self.batches.get(&batch).map(|b| b.requests.clone()).unwrap_or_default();
                    for r in requests {
                        self.out.requests[r].first_token_ms = Some(self.now);
                    }
                    self.log(format_args!("prefill_done batch={batch} function={function}"));
                }
                Milestone::RequestDone { request, .. } => {
                    self.out.requests[request].completion_ms = Some(self.now);
                    self.outstanding -= 1;
                }
                Milestone::BatchDone { batch, function } => {
                    self.ledger.release_kv(gpu, batch);
                    self.batches.remove(&batch);
                    self.freed = true;
                    self.log(format_args!("batch_done batch={batch} function={function}"));
                    self.maybe_keep_alive(&function);
                }
            }
        }
        self.schedule_exec(gpu);
        self.run_round();
    }

    fn on_load(&mut self, f: &FunctionId, gpu: &GpuId) {
        self.log(format_args!("load_done function={f} gpu={gpu}"));
        // a finished load may let a stuck GPU evict again
        self.freed = true;
        if self
            .instances
            .get(f)
            .is_some_and(|i| &i.gpu == gpu && i.ready_at <= self.now)
        {
            self.run_round();
        }
    }

    fn on_keep_alive(&mut self, f: &FunctionId, generation: u64) {
        let live = self.instances.get(f).is_some_and(|i| i.generation == generation);
        if live && self.is_idle(f) {
            self.release_instance(f);
        }
    }

    /// A GPU with nothing executing or loading frees no memory on its own. If
    /// its head waiter cannot reserve, evict everything that waiter does not
    /// need and send displaced work back through acquisition.
    fn unstick(&mut self, gpu: &GpuId) {
        if !self.cfg.offload || self.execs.get(gpu).is_some_and(|e| e.active() > 0) {
            return;
        }
        if self.instances.values().any(|i| &i.gpu == gpu && i.ready_at > self.now) {
            return;
        }
        let Some(&head) = self.waiting_batches.iter().find(|id| &self.batches[*id].gpu == gpu) else { return };
        let f = self.batches[&head].function.clone();
        let mut protected = BTreeSet::from([f.clone(), self.spec(&f).backbone.clone()]);
        protected.extend(self.batches.values().filter(|b| b.started).map(|b| b.function.clone()));
        let kv = self.batches[&head].kv_bytes;
        if self.offload(gpu, kv, protected).is_none() {
            return;
        }
        self.displace_orphans();
        if let Some(delay) = self.try_reserve(head) {
            self.waiting_batches.retain(|id| *id != head);
            self.events.push(self.now + delay, EventKind::BatchDispatch, Payload::Batch(head));
        }
    }

    /// Returns queued and unstarted work of functions that lost their instance
    /// to the acquisition path.
    fn displace_orphans(&mut self) {
        let orphans: Vec<u64> = self
            .batches
            .iter()
            .filter(|(_, b)| !b.started && self.instances.get(&b.function).map_or(true, |i| i.gpu != b.gpu))
            .map(|(id, _)| *id)
            .collect();
        let mut displaced: BTreeMap<FunctionId, Vec<usize>> = BTreeMap::new();
        for id in orphans {
            let b = self.batches.remove(&id).expect("listed above");
            if b.kv_reserved {
                self.ledger.release_kv(&b.gpu, id);
            }
            self.waiting_batches.retain(|w| *w != id);
            displaced.entry(b.function).or_default().extend(b.requests);
        }
        let stranded: Vec<FunctionId> = self
            .queues
            .keys()
            .filter(|f| !self.instances.contains_key(*f))
            .cloned()
            .collect();
        for f in stranded {
            let q = self.queues.remove(&f).expect("listed above");
            displaced
                .entry(f)
                .or_default()
                .extend(q.pending().map(|p| p.request as usize));
        }
        for (f, mut rs) in displaced {
            if rs.is_empty() {
                continue;
            }
            let w = self.waiting_acquire.entry(f).or_default();
            w.append(&mut rs);
            w.sort_unstable();
            w.dedup();
        }
    }

    fn retry_waiting(&mut self) {
        let mut blocked: BTreeSet<GpuId> = BTreeSet::new();
        let mut keep = VecDeque::new();
        for id in std::mem::take(&mut self.waiting_batches) {
            let Some(gpu) = self.batches.get(&id).map(|b| b.gpu.clone()) else { continue };
            if blocked.contains(&gpu) {
                keep.push_back(id);
                continue;
            }
            match self.try_reserve(id) {
                Some(delay) => {
                    self.events
                        .push(self.now + delay, EventKind::BatchDispatch, Payload::Batch(id))
                }
                None => {
                    blocked.insert(gpu);
                    keep.push_back(id);
                }
            }
        }
        self.waiting_batches = keep;
        for gpu in blocked {
            self.unstick(&gpu);
        }
        let mut order: Vec<(usize, FunctionId)> = self
            .waiting_acquire
            .iter()
            .map(|(f, rs)| (rs.first().copied().unwrap_or(usize::MAX), f.clone()))
            .collect();
        order.sort();
        let mut any = false;
        for (_, f) in order {
            any |= self.acquire_waiting(&f);
        }
        if any {
            self.run_round();
        }
    }

    fn on_replan(&mut self) {
        let last_arrival = self.trace.span_ms();
        let rates: ArrivalStats = ewma_rates(
            self.seen.iter().map(|(t, f)| (*t, f)),
            self.cfg.rate_window_s,
            self.cfg.rate_half_life_s,
            self.now,
        );
        self.benefits = compute_benefits(self.catalog, &rates);
        let base = self.ledger.as_plan();
        let cluster = self.ledger.cluster_without_kv(self.cluster);
        let plan = greedy_extend(base.clone(), &self.benefits, &cluster, self.catalog);
        let mut added = 0;
        for p in plan.iter().filter(|p| !base.contains(p)) {
            let spec = self.spec(&p.function);
            let Some(a) = spec.artifact(p.kind) else { continue };
            let from_container = match &p.tier {
                Tier::Gpu(g) if p.kind.is_model() => self.cluster.containers_of(g).any(|c| {
                    self.ledger
                        .resident(&Tier::Container(c.id.clone()), &p.function, p.kind)
                        .is_some_and(|r| r.is_ready(self.now))
                }),
                _ => false,
            };
            let ms = if from_container { a.load_from_container_ms } else { a.load_cold_ms };
            let ready = self.now + ms;
            if self
                .ledger
                .load(&p.tier, self.catalog, &p.function, p.kind, ready, Origin::Preloaded)
                .is_ok()
            {
                added += 1;
                if let Tier::Gpu(g) = &p.tier {
                    self.events.push(
                        ready,
                        EventKind::PreloadComplete,
                        Payload::Load {
                            function: p.function.clone(),
                            gpu: g.clone(),
                        },
                    );
                }
            }
        }
        self.log(format_args!("replan added={added}"));
        let next = self.now + self.cfg.replan_interval_ms;
        if next <= last_arrival {
            self.events.push(next, EventKind::ReplanTimer, Payload::Replan);
        }
    }
}

/// Runs one simulation to completion.
pub fn simulate(
    cfg: &SimConfig,
    cluster: &ClusterSpec,
    catalog: &FunctionCatalog,
    trace: &Trace,
) -> Result<SimOutput, SimError> {
    Simulator::new(cfg, cluster, catalog, trace)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::*;
    use crate::domain::{Placement, PreloadPlan};
    use crate::workload::TraceRecord;

    fn setup() -> (ClusterSpec, FunctionCatalog) {
        let cluster = cluster(&[("c1", 40 * GB, "g1")], &[("g1", 48 * GB)], 473 * MB);
        let cat = catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama"), adapter("a2", "llama")]);
        (cluster, cat)
    }

    fn trace(reqs: &[(&str, f64, u32)]) -> Trace {
        Trace::new(
            reqs.iter()
                .map(|&(f, t, o)| TraceRecord {
                    function_id: f.into(),
                    arrival_ms: t,
                    prompt_tokens: 10,
                    output_tokens: o,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cold_start_examples() {
        let (cluster, cat) = setup();
        let a1 = cat.get(&"a1".into()).unwrap();
        let mut ledger = ResidencyLedger::new(&cluster);
        let c1: ContainerId = "c1".into();
        let (ms, _) = cold_start_latency(a1, &cat, &cluster, &ledger, &"g1".into(), Some(&c1), 0.0);
        assert_eq!(ms, 15000.0);
        ledger
            .load(&gpu("g1"), &cat, &"llama".into(), ArtifactKind::BackboneModel, 0.0, Origin::Preloaded)
            .unwrap();
        let (ms, bd) = cold_start_latency(a1, &cat, &cluster, &ledger, &"g1".into(), Some(&c1), 0.0);
        assert_eq!(ms, 7000.0);
        assert_eq!(bd.backbone_load, 0.0);
        let plan: PreloadPlan = [
            Placement::new("a1", ArtifactKind::Library, ctr("c1")),
            Placement::new("a1", ArtifactKind::AdapterModel, gpu("g1")),
            Placement::new("a1", ArtifactKind::Kernel, gpu("g1")),
        ]
        .into_iter()
        .collect();
        ledger.materialize(&plan, &cat, 0.0).unwrap();
        let (ms, bd) = cold_start_latency(a1, &cat, &cluster, &ledger, &"g1".into(), Some(&c1), 0.0);
        assert_eq!(ms, 0.0);
        assert_eq!(bd, ColdBreakdown::default());
    }

    #[test]
    fn empty_trace_costs_nothing() {
        let (cluster, cat) = setup();
        let out = simulate(&SimConfig::default(), &cluster, &cat, &Trace::default()).unwrap();
        assert!(out.requests.is_empty());
        assert_eq!(out.billing, Billing::default());
    }

    #[test]
    fn single_preloaded_request_gets_base_ttft() {
        let (cluster, cat) = setup();
        let cfg = SimConfig {
            batching: BatchingPolicy::Fixed {
                size: 1,
                delay_ms: 0.0,
                tick_ms: 10.0,
            },
            ..Default::default()
        };
        let out = simulate(&cfg, &cluster, &cat, &trace(&[("a1", 0.0, 5)])).unwrap();
        let r = &out.requests[0];
        assert_eq!(r.ttft_ms(), Some(500.0));
        assert_eq!(r.e2e_ms(), Some(500.0 + 4.0 * 20.0));
        assert_eq!(r.tpot_ms(), Some(20.0));
        assert_eq!(out.cold_starts, 0);
    }

    #[test]
    fn adaptive_waits_until_expiry_when_alone() {
        let (cluster, cat) = setup();
        let out = simulate(&SimConfig::default(), &cluster, &cat, &trace(&[("a1", 0.0, 1)])).unwrap();
        assert_eq!(out.requests[0].dispatch_ms, Some(2000.0));
        assert_eq!(out.requests[0].ttft_ms(), Some(2500.0));
    }

    #[test]
    fn equal_batches_share_the_gpu() {
        let (cluster, cat) = setup();
        let cfg = SimConfig {
            batching: BatchingPolicy::Fixed {
                size: 5,
                delay_ms: 100.0,
                tick_ms: 10.0,
            },
            ..Default::default()
        };
        let reqs: Vec<(&str, f64, u32)> = (0..5)
            .map(|_| ("a1", 0.0, 1))
            .chain((0..5).map(|_| ("a2", 0.0, 1)))
            .collect();
        let out = simulate(&cfg, &cluster, &cat, &trace(&reqs)).unwrap();
        for r in &out.requests {
            assert_eq!(r.first_token_ms, Some(1800.0));
        }
    }

    #[test]
    fn no_preload_pays_full_cold_start() {
        let (cluster, cat) = setup();
        let cfg = SimConfig {
            preload: false,
            batching: BatchingPolicy::Fixed {
                size: 1,
                delay_ms: 0.0,
                tick_ms: 10.0,
            },
            ..Default::default()
        };
        let out = simulate(&cfg, &cluster, &cat, &trace(&[("a1", 0.0, 1), ("a1", 20_000.0, 1)])).unwrap();
        assert_eq!(out.requests[0].ttft_ms(), Some(15000.0 + 500.0));
        assert_eq!(out.requests[0].breakdown.total(), 15000.0);
        assert_eq!(out.requests[1].ttft_ms(), Some(500.0));
        assert_eq!(out.cold_starts, 1);
        // instance released after keep-alive, nothing left resident
        assert_eq!(out.end_ms, 20_500.0 + 600_000.0);
        assert!(out.billing.gpu_s > 0.0);
    }

    #[test]
    fn deterministic_event_log() {
        let (cluster, cat) = setup();
        let cfg = SimConfig {
            record_events: true,
            ..Default::default()
        };
        let reqs: Vec<(&str, f64, u32)> = (0..40)
            .map(|i| (if i % 3 == 0 { "a2" } else { "a1" }, i as f64 * 137.0, 1 + (i % 7) as u32))
            .collect();
        let t = trace(&reqs);
        let a = simulate(&cfg, &cluster, &cat, &t).unwrap();
        let b = simulate(&cfg, &cluster, &cat, &t).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.unserved(), 0);
        for r in &a.requests {
            assert!(r.arrival_ms <= r.dispatch_ms.unwrap());
            assert!(r.dispatch_ms.unwrap() <= r.first_token_ms.unwrap());
            assert!(r.first_token_ms.unwrap() <= r.completion_ms.unwrap());
            assert!(r.ttft_ms().unwrap() >= 500.0);
        }
    }
}
