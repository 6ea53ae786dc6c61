//! Domain types shared by the planners, the batching scheduler and the simulator.
//!
//! Everything here is an immutable value once constructed. Memory is counted in
//! bytes (`u64`) so capacity arithmetic is exact; latencies are milliseconds (`f64`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Identifier of a serverless function (adapter function or backbone holder).
    FunctionId
);
id_type!(ContainerId);
id_type!(GpuId);

/// The four artifact families a LoRA function needs before it can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Library,
    BackboneModel,
    AdapterModel,
    /// JIT-compiled kernels; only meaningful on a GPU.
    Kernel,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [
        ArtifactKind::Library,
        ArtifactKind::BackboneModel,
        ArtifactKind::AdapterModel,
        ArtifactKind::Kernel,
    ];

    pub fn is_model(self) -> bool {
        matches!(self, ArtifactKind::BackboneModel | ArtifactKind::AdapterModel)
    }

    pub fn allows(self, tier: TierClass) -> bool {
        match self {
            ArtifactKind::Library => tier == TierClass::Container,
            ArtifactKind::Kernel => tier == TierClass::Gpu,
            ArtifactKind::BackboneModel | ArtifactKind::AdapterModel => true,
        }
    }

    pub fn legal_tiers(self) -> &'static [TierClass] {
        match self {
            ArtifactKind::Library => &[TierClass::Container],
            ArtifactKind::Kernel => &[TierClass::Gpu],
            _ => &[TierClass::Gpu, TierClass::Container],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Library => "library",
            ArtifactKind::BackboneModel => "backbone_model",
            ArtifactKind::AdapterModel => "adapter_model",
            ArtifactKind::Kernel => "kernel",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Memory tier without the concrete instance. `Gpu` sorts first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierClass {
    Gpu,
    Container,
}

impl fmt::Display for TierClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TierClass::Gpu => "gpu",
            TierClass::Container => "container",
        })
    }
}

/// A concrete placement target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "tier", content = "id", rename_all = "snake_case")]
pub enum Tier {
    Container(ContainerId),
    Gpu(GpuId),
}

impl Tier {
    pub fn class(&self) -> TierClass {
        match self {
            Tier::Container(_) => TierClass::Container,
            Tier::Gpu(_) => TierClass::Gpu,
        }
    }

    pub fn instance(&self) -> &str {
        match self {
            Tier::Container(c) => c.as_str(),
            Tier::Gpu(g) => g.as_str(),
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.class(), self.instance())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub size_bytes: u64,
    /// Persistent store to the tier where the artifact is needed.
    pub load_cold_ms: f64,
    /// Container RAM to GPU; models only.
    #[serde(default)]
    pub load_from_container_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("function {function}: {reason}")]
    Function { function: FunctionId, reason: String },
    #[error("cluster: {0}")]
    Cluster(String),
}

fn function_err(function: &FunctionId, reason: impl Into<String>) -> SpecError {
    SpecError::Function {
        function: function.clone(),
        reason: reason.into(),
    }
}

/// A serverless function. Adapter functions carry an `AdapterModel` and name the
/// backbone holder they run on; backbone holders carry the `BackboneModel` and
/// name themselves as backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub id: FunctionId,
    pub backbone: FunctionId,
    pub artifacts: Vec<ArtifactSpec>,
    pub slo_ttft_ms: f64,
    pub prefill_base_ms: f64,
    pub prefill_marginal_ms: f64,
    pub decode_ms_per_token: f64,
    pub kv_bytes_per_request: u64,
    pub container_init_ms: f64,
}

impl FunctionSpec {
    pub fn artifact(&self, kind: ArtifactKind) -> Option<&ArtifactSpec> {
        self.artifacts.iter().find(|a| a.kind == kind)
    }

    pub fn is_adapter(&self) -> bool {
        self.artifact(ArtifactKind::AdapterModel).is_some()
    }

    /// The model artifact this function itself owns.
    pub fn model_kind(&self) -> ArtifactKind {
        if self.is_adapter() {
            ArtifactKind::AdapterModel
        } else {
            ArtifactKind::BackboneModel
        }
    }

    /// Backbone holder this function depends on, `None` for holders themselves.
    pub fn backbone_dependency(&self) -> Option<&FunctionId> {
        self.is_adapter().then_some(&self.backbone)
    }

    /// Whether a GPU-resident instance of this function keeps its own CUDA
    /// context. Backbone holders only export tensors and are not charged.
    pub fn charges_context(&self) -> bool {
        self.is_adapter()
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let count = |k| self.artifacts.iter().filter(|a| a.kind == k).count();
        for kind in ArtifactKind::ALL {
            if count(kind) > 1 {
                return Err(function_err(&self.id, format!("duplicate {kind} artifact")));
            }
        }
        match (
            count(ArtifactKind::BackboneModel),
            count(ArtifactKind::AdapterModel),
        ) {
            (1, 0) => {
                if self.backbone != self.id {
                    return Err(function_err(
                        &self.id,
                        "a backbone holder must name itself as backbone",
                    ));
                }
            }
            (0, 1) => {
                if self.backbone == self.id {
                    return Err(function_err(&self.id, "an adapter cannot be its own backbone"));
                }
            }
            _ => {
                return Err(function_err(
                    &self.id,
                    "exactly one of backbone_model or adapter_model is required",
                ))
            }
        }
        for a in &self.artifacts {
            if a.size_bytes == 0 {
                return Err(function_err(&self.id, format!("{} has zero size", a.kind)));
            }
            if !(a.load_from_container_ms >= 0.0 && a.load_cold_ms >= a.load_from_container_ms) {
                return Err(function_err(
                    &self.id,
                    format!("{} needs load_cold_ms >= load_from_container_ms >= 0", a.kind),
                ));
            }
        }
        if !(self.prefill_base_ms > 0.0) {
            return Err(function_err(&self.id, "prefill_base_ms must be positive"));
        }
        if !(self.prefill_marginal_ms >= 0.0) {
            return Err(function_err(&self.id, "prefill_marginal_ms must be non-negative"));
        }
        if !(self.slo_ttft_ms > self.prefill_base_ms) {
            return Err(function_err(&self.id, "slo_ttft_ms must exceed prefill_base_ms"));
        }
        if !(self.decode_ms_per_token >= 0.0 && self.container_init_ms >= 0.0) {
            return Err(function_err(&self.id, "negative latency"));
        }
        Ok(())
    }
}

/// Validated set of functions keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FunctionCatalog {
    functions: BTreeMap<FunctionId, FunctionSpec>,
}

impl FunctionCatalog {
    pub fn new(functions: Vec<FunctionSpec>) -> Result<Self, SpecError> {
        let mut map = BTreeMap::new();
        for f in functions {
            f.validate()?;
            let id = f.id.clone();
            if map.insert(id.clone(), f).is_some() {
                return Err(function_err(&id, "duplicate function id"));
            }
        }
        for f in map.values() {
            if let Some(b) = f.backbone_dependency() {
                match map.get(b) {
                    Some(holder) if !holder.is_adapter() => {}
                    Some(_) => return Err(function_err(&f.id, format!("backbone {b} is an adapter"))),
                    None => return Err(function_err(&f.id, format!("unknown backbone {b}"))),
                }
            }
        }
        Ok(Self { functions: map })
    }

    pub fn get(&self, id: &FunctionId) -> Option<&FunctionSpec> {
        self.functions.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FunctionSpec> {
        self.functions.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &FunctionId> {
        self.functions.keys()
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Adapter functions running on `backbone`.
    pub fn dependents<'a>(&'a self, backbone: &'a FunctionId) -> impl Iterator<Item = &'a FunctionSpec> {
        self.functions
            .values()
            .filter(move |f| f.backbone_dependency() == Some(backbone))
    }

    /// Catalog in which every adapter owns a private copy of its backbone, as
    /// when backbone sharing is unavailable. Private holders are named
    /// `<backbone>~<adapter>`; holders without adapters are kept as-is.
    pub fn unshared(&self) -> FunctionCatalog {
        let mut out = BTreeMap::new();
        for f in self.functions.values() {
            match f.backbone_dependency() {
                Some(b) => {
                    let holder = &self.functions[b];
                    let private_id = FunctionId(format!("{}~{}", b, f.id));
                    let mut private = holder.clone();
                    private.id = private_id.clone();
                    private.backbone = private_id.clone();
                    let mut adapter = f.clone();
                    adapter.backbone = private_id.clone();
                    out.insert(private_id, private);
                    out.insert(adapter.id.clone(), adapter);
                }
                None => {
                    if self.dependents(&f.id).next().is_none() {
                        out.insert(f.id.clone(), f.clone());
                    }
                }
            }
        }
        FunctionCatalog { functions: out }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub id: ContainerId,
    pub mem_bytes: u64,
    pub gpu: GpuId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub id: GpuId,
    pub mem_bytes: u64,
}

/// Containers and GPUs. Each container is attached to exactly one GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub containers: Vec<ContainerSpec>,
    pub gpus: Vec<GpuSpec>,
    pub context_overhead_bytes: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let mut gpus = BTreeSet::new();
        for g in &self.gpus {
            if g.mem_bytes == 0 {
                return Err(SpecError::Cluster(format!("gpu {} has zero capacity", g.id)));
            }
            if !gpus.insert(&g.id) {
                return Err(SpecError::Cluster(format!("duplicate gpu {}", g.id)));
            }
        }
        let mut containers = BTreeSet::new();
        for c in &self.containers {
            if c.mem_bytes == 0 {
                return Err(SpecError::Cluster(format!("container {} has zero capacity", c.id)));
            }
            if !gpus.contains(&c.gpu) {
                return Err(SpecError::Cluster(format!(
                    "container {} attached to unknown gpu {}",
                    c.id, c.gpu
                )));
            }
            if !containers.insert(&c.id) {
                return Err(SpecError::Cluster(format!("duplicate container {}", c.id)));
            }
        }
        Ok(())
    }

    pub fn container(&self, id: &ContainerId) -> Option<&ContainerSpec> {
        self.containers.iter().find(|c| &c.id == id)
    }

    pub fn gpu(&self, id: &GpuId) -> Option<&GpuSpec> {
        self.gpus.iter().find(|g| &g.id == id)
    }

    pub fn gpu_of(&self, container: &ContainerId) -> Option<&GpuId> {
        self.container(container).map(|c| &c.gpu)
    }

    pub fn containers_of<'a>(&'a self, gpu: &'a GpuId) -> impl Iterator<Item = &'a ContainerSpec> {
        self.containers.iter().filter(move |c| &c.gpu == gpu)
    }

    pub fn capacity(&self, tier: &Tier) -> Option<u64> {
        match tier {
            Tier::Container(c) => self.container(c).map(|c| c.mem_bytes),
            Tier::Gpu(g) => self.gpu(g).map(|g| g.mem_bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub function: FunctionId,
    pub kind: ArtifactKind,
    pub tier: Tier,
}

impl Placement {
    pub fn new(function: impl Into<FunctionId>, kind: ArtifactKind, tier: Tier) -> Self {
        Self {
            function: function.into(),
            kind,
            tier,
        }
    }
}

/// Set of pre-loading decisions. Duplicates of a (function, artifact) pair are
/// representable so that `validate_plan` can report them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreloadPlan {
    placements: BTreeSet<Placement>,
}

impl PreloadPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Placement) -> bool {
        self.placements.insert(p)
    }

    pub fn remove(&mut self, p: &Placement) -> bool {
        self.placements.remove(p)
    }

    pub fn contains(&self, p: &Placement) -> bool {
        self.placements.contains(p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Placement> {
        self.placements.iter()
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    /// First tier holding `(function, kind)`.
    pub fn tier_of(&self, function: &FunctionId, kind: ArtifactKind) -> Option<&Tier> {
        self.placements
            .iter()
            .find(|p| &p.function == function && p.kind == kind)
            .map(|p| &p.tier)
    }

    pub fn has(&self, function: &FunctionId, kind: ArtifactKind, tier: &Tier) -> bool {
        self.placements.iter().any(|p| &p.function == function && p.kind == kind && &p.tier == tier)
    }
}

impl FromIterator<Placement> for PreloadPlan {
    fn from_iter<I: IntoIterator<Item = Placement>>(iter: I) -> Self {
        Self {
            placements: iter.into_iter().collect(),
        }
    }
}

impl Extend<Placement> for PreloadPlan {
    fn extend<I: IntoIterator<Item = Placement>>(&mut self, iter: I) {
        self.placements.extend(iter)
    }
}

/// Per-function request arrival rate snapshot, requests per second.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArrivalStats {
    rates: BTreeMap<FunctionId, f64>,
}

impl ArrivalStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negative or non-finite rates are clamped to zero.
    pub fn set(&mut self, function: FunctionId, rate_per_s: f64) {
        let rate = if rate_per_s.is_finite() { rate_per_s.max(0.0) } else { 0.0 };
        self.rates.insert(function, rate);
    }

    pub fn rate(&self, function: &FunctionId) -> f64 {
        self.rates.get(function).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FunctionId, f64)> {
        self.rates.iter().map(|(k, v)| (k, *v))
    }
}

impl FromIterator<(FunctionId, f64)> for ArrivalStats {
    fn from_iter<I: IntoIterator<Item = (FunctionId, f64)>>(iter: I) -> Self {
        let mut s = ArrivalStats::new();
        for (f, r) in iter {
            s.set(f, r);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    CapacityContainer,
    CapacityGpu,
    DuplicatePlacement,
    LibraryPrecedence,
    ContainerGpuDependency,
    ModelKernelDependency,
    BackbonePresence,
    ContainerGroupCoherence,
    GpuConsistency,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    CapacityContainer { container: ContainerId, used: u64, capacity: u64 },
    CapacityGpu { gpu: GpuId, used: u64, capacity: u64 },
    DuplicatePlacement { function: FunctionId, kind: ArtifactKind },
    /// Model in a container without the function's library there.
    LibraryPrecedence { function: FunctionId, container: ContainerId },
    /// Model on a GPU without the function's library in an attached container.
    ContainerGpuDependency { function: FunctionId, gpu: GpuId },
    ModelKernelDependency { function: FunctionId, gpu: GpuId },
    /// Adapter on a GPU while its backbone is on no GPU at all.
    BackbonePresence { function: FunctionId, gpu: GpuId },
    /// Adapter in a container whose GPU group does not hold the backbone.
    ContainerGroupCoherence { function: FunctionId, container: ContainerId },
    /// Adapter and backbone on different GPUs.
    GpuConsistency { function: FunctionId, gpu: GpuId, backbone_gpu: GpuId },
}

impl Violation {
    pub fn kind(&self) -> ViolationKind {
        match self {
            Violation::CapacityContainer { .. } => ViolationKind::CapacityContainer,
            Violation::CapacityGpu { .. } => ViolationKind::CapacityGpu,
            Violation::DuplicatePlacement { .. } => ViolationKind::DuplicatePlacement,
            Violation::LibraryPrecedence { .. } => ViolationKind::LibraryPrecedence,
            Violation::ContainerGpuDependency { .. } => ViolationKind::ContainerGpuDependency,
            Violation::ModelKernelDependency { .. } => ViolationKind::ModelKernelDependency,
            Violation::BackbonePresence { .. } => ViolationKind::BackbonePresence,
            Violation::ContainerGroupCoherence { .. } => ViolationKind::ContainerGroupCoherence,
            Violation::GpuConsistency { .. } => ViolationKind::GpuConsistency,
        }
    }

    pub fn is_capacity(&self) -> bool {
        matches!(self.kind(), ViolationKind::CapacityContainer | ViolationKind::CapacityGpu)
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CapacityContainer { container, used, capacity } => {
                write!(f, "container {container} over capacity: {used} > {capacity} bytes")
            }
            Violation::CapacityGpu { gpu, used, capacity } => {
                write!(f, "gpu {gpu} over capacity: {used} > {capacity} bytes")
            }
            Violation::DuplicatePlacement { function, kind } => {
                write!(f, "{function}/{kind} placed more than once")
            }
            Violation::LibraryPrecedence { function, container } => {
                write!(f, "{function} model in {container} without its library")
            }
            Violation::ContainerGpuDependency { function, gpu } => {
                write!(f, "{function} model on {gpu} without its library in an attached container")
            }
            Violation::ModelKernelDependency { function, gpu } => {
                write!(f, "{function} kernel on {gpu} without its model")
            }
            Violation::BackbonePresence { function, gpu } => {
                write!(f, "{function} adapter on {gpu} but backbone not GPU-resident")
            }
            Violation::ContainerGroupCoherence { function, container } => {
                write!(f, "{function} adapter in {container} outside its backbone's GPU group")
            }
            Violation::GpuConsistency { function, gpu, backbone_gpu } => {
                write!(f, "{function} adapter on {gpu} but backbone on {backbone_gpu}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("unknown container {0}")]
    UnknownContainer(ContainerId),
    #[error("unknown gpu {0}")]
    UnknownGpu(GpuId),
    #[error("function {function} has no {kind} artifact")]
    MissingArtifact { function: FunctionId, kind: ArtifactKind },
    #[error("{kind} of {function} cannot be placed at {tier} tier")]
    IllegalTier {
        function: FunctionId,
        kind: ArtifactKind,
        tier: TierClass,
    },
}

/// Memory used per instance by a plan, including one context overhead per
/// context-charging function with any GPU-tier placement on a GPU.
pub fn plan_usage(
    plan: &PreloadPlan,
    cluster: &ClusterSpec,
    catalog: &FunctionCatalog,
) -> (BTreeMap<ContainerId, u64>, BTreeMap<GpuId, u64>) {
    let mut containers: BTreeMap<ContainerId, u64> =
        cluster.containers.iter().map(|c| (c.id.clone(), 0)).collect();
    let mut gpus: BTreeMap<GpuId, u64> = cluster.gpus.iter().map(|g| (g.id.clone(), 0)).collect();
    let mut contexts: BTreeSet<(&GpuId, &FunctionId)> = BTreeSet::new();
    for p in plan.iter() {
        let Some(f) = catalog.get(&p.function) else { continue };
        let size = f.artifact(p.kind).map_or(0, |a| a.size_bytes);
        match &p.tier {
            Tier::Container(c) => *containers.entry(c.clone()).or_default() += size,
            Tier::Gpu(g) => {
                *gpus.entry(g.clone()).or_default() += size;
                if f.charges_context() && contexts.insert((g, &p.function)) {
                    *gpus.entry(g.clone()).or_default() += cluster.context_overhead_bytes;
                }
            }
        }
    }
    (containers, gpus)
}

/// Checks every pre-loading constraint and reports all violations.
pub fn validate_plan(
    plan: &PreloadPlan,
    cluster: &ClusterSpec,
    catalog: &FunctionCatalog,
) -> Result<Vec<Violation>, PlanError> {
    for p in plan.iter() {
        let f = catalog
            .get(&p.function)
            .ok_or_else(|| PlanError::UnknownFunction(p.function.clone()))?;
        match &p.tier {
            Tier::Container(c) if cluster.container(c).is_none() => {
                return Err(PlanError::UnknownContainer(c.clone()))
            }
            Tier::Gpu(g) if cluster.gpu(g).is_none() => return Err(PlanError::UnknownGpu(g.clone())),
            _ => {}
        }
        if f.artifact(p.kind).is_none() {
            return Err(PlanError::MissingArtifact {
                function: p.function.clone(),
                kind: p.kind,
            });
        }
        if !p.kind.allows(p.tier.class()) {
            return Err(PlanError::IllegalTier {
                function: p.function.clone(),
                kind: p.kind,
                tier: p.tier.class(),
            });
        }
    }

    let mut violations = Vec::new();

    let (container_use, gpu_use) = plan_usage(plan, cluster, catalog);
    for c in &cluster.containers {
        let used = container_use[&c.id];
        if used > c.mem_bytes {
            violations.push(Violation::CapacityContainer {
                container: c.id.clone(),
                used,
                capacity: c.mem_bytes,
            });
        }
    }
    for g in &cluster.gpus {
        let used = gpu_use[&g.id];
        if used > g.mem_bytes {
            violations.push(Violation::CapacityGpu {
                gpu: g.id.clone(),
                used,
                capacity: g.mem_bytes,
            });
        }
    }

    let mut by_key: BTreeMap<(&FunctionId, ArtifactKind), Vec<&Tier>> = BTreeMap::new();
    for p in plan.iter() {
        by_key.entry((&p.function, p.kind)).or_default().push(&p.tier);
    }
    for ((function, kind), tiers) in &by_key {
        if tiers.len() > 1 {
            violations.push(Violation::DuplicatePlacement {
                function: (*function).clone(),
                kind: *kind,
            });
        }
    }
    fn tiers_in<'a>(
        by_key: &'a BTreeMap<(&FunctionId, ArtifactKind), Vec<&'a Tier>>,
        f: &FunctionId,
        k: ArtifactKind,
    ) -> &'a [&'a Tier] {
        by_key
            .iter()
            .find(|((id, kind), _)| *id == f && *kind == k)
            .map_or(&[], |(_, v)| v.as_slice())
    }
    let tiers_of = |f: &FunctionId, k: ArtifactKind| tiers_in(&by_key, f, k);

    for p in plan.iter() {
        let f = &catalog.get(&p.function).expect("checked above");
        let has_library = f.artifact(ArtifactKind::Library).is_some();
        let libraries = tiers_of(&f.id, ArtifactKind::Library);
        match (&p.tier, p.kind) {
            (Tier::Container(c), k) if k.is_model() => {
                if has_library && !libraries.iter().any(|t| matches!(t, Tier::Container(x) if x == c)) {
                    violations.push(Violation::LibraryPrecedence {
                        function: f.id.clone(),
                        container: c.clone(),
                    });
                }
                if let Some(b) = f.backbone_dependency() {
                    let group = cluster.gpu_of(c).expect("checked above");
                    let coherent = tiers_of(b, ArtifactKind::BackboneModel).iter().any(|t| match t {
                        Tier::Container(bc) => cluster.gpu_of(bc) == Some(group),
                        Tier::Gpu(bg) => bg == group,
                    });
                    if !coherent {
                        violations.push(Violation::ContainerGroupCoherence {
                            function: f.id.clone(),
                            container: c.clone(),
                        });
                    }
                }
            }
            (Tier::Gpu(g), k) if k.is_model() => {
                let attached = libraries.iter().any(|t| match t {
                    Tier::Container(c) => cluster.gpu_of(c) == Some(g),
                    Tier::Gpu(_) => false,
                });
                if has_library && !attached {
                    violations.push(Violation::ContainerGpuDependency {
                        function: f.id.clone(),
                        gpu: g.clone(),
                    });
                }
                if let Some(b) = f.backbone_dependency() {
                    let backbone_gpus: Vec<&GpuId> = tiers_of(b, ArtifactKind::BackboneModel)
                        .iter()
                        .filter_map(|t| match t {
                            Tier::Gpu(bg) => Some(bg),
                            Tier::Container(_) => None,
                        })
                        .collect();
                    if backbone_gpus.is_empty() {
                        violations.push(Violation::BackbonePresence {
                            function: f.id.clone(),
                            gpu: g.clone(),
                        });
                    }
                    for bg in backbone_gpus.into_iter().filter(|bg| *bg != g) {
                        violations.push(Violation::GpuConsistency {
                            function: f.id.clone(),
                            gpu: g.clone(),
                            backbone_gpu: bg.clone(),
                        });
                    }
                }
            }
            (Tier::Gpu(g), ArtifactKind::Kernel) => {
                let model_here = tiers_of(&f.id, f.model_kind())
                    .iter()
                    .any(|t| matches!(t, Tier::Gpu(x) if x == g));
                if !model_here {
                    violations.push(Violation::ModelKernelDependency {
                        function: f.id.clone(),
                        gpu: g.clone(),
                    });
                }
            }
            _ => {}
        }
    }

    violations.sort();
    violations.dedup();
    Ok(violations)
}
