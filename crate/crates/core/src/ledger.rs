//! Live residency and memory accounting for containers and GPUs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{
    ArtifactKind, ClusterSpec, ContainerId, FunctionCatalog, FunctionId, GpuId, Placement, PreloadPlan, Tier,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Preloaded,
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resident {
    pub bytes: u64,
    pub ready_at_ms: f64,
    pub origin: Origin,
}

impl Resident {
    pub fn is_ready(&self, now: f64) -> bool {
        self.ready_at_ms <= now
    }
}

pub type ResidentKey = (FunctionId, ArtifactKind);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("unknown tier {0}")]
    UnknownTier(Tier),
    #[error("{tier}: need {needed} bytes, {free} free")]
    Insufficient { tier: Tier, needed: u64, free: u64 },
    #[error("{function}/{kind} already resident on {tier}")]
    AlreadyResident {
        function: FunctionId,
        kind: ArtifactKind,
        tier: Tier,
    },
    #[error("function {0} has no such artifact")]
    MissingArtifact(FunctionId),
}

#[derive(Debug, Clone)]
pub struct ContainerState {
    pub capacity: u64,
    pub gpu: GpuId,
    pub resident: BTreeMap<ResidentKey, Resident>,
}

impl ContainerState {
    pub fn used(&self) -> u64 {
        self.resident.values().map(|r| r.bytes).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GpuState {
    pub capacity: u64,
    pub resident: BTreeMap<ResidentKey, Resident>,
    /// Context overhead charged per function.
    pub contexts: BTreeMap<FunctionId, u64>,
    /// KV cache reserved per in-flight batch.
    pub kv: BTreeMap<u64, u64>,
    /// Bumped on every mutation so stale offload decisions can be detected.
    pub version: u64,
}

impl GpuState {
    pub fn used(&self) -> u64 {
        self.resident.values().map(|r| r.bytes).sum::<u64>()
            + self.contexts.values().sum::<u64>()
            + self.kv.values().sum::<u64>()
    }

    pub fn kv_used(&self) -> u64 {
        self.kv.values().sum()
    }

    fn hosts_function(&self, f: &FunctionId) -> bool {
        self.resident.keys().any(|(id, _)| id == f)
    }
}

#[derive(Debug, Clone)]
pub struct ResidencyLedger {
    containers: BTreeMap<ContainerId, ContainerState>,
    gpus: BTreeMap<GpuId, GpuState>,
    context_overhead: u64,
}

impl ResidencyLedger {
    pub fn new(cluster: &ClusterSpec) -> Self {
        Self {
            containers: cluster
                .containers
                .iter()
                .map(|c| {
                    (
                        c.id.clone(),
                        ContainerState {
                            capacity: c.mem_bytes,
                            gpu: c.gpu.clone(),
                            resident: BTreeMap::new(),
                        },
                    )
                })
                .collect(),
            gpus: cluster
                .gpus
                .iter()
                .map(|g| {
                    (
                        g.id.clone(),
                        GpuState {
                            capacity: g.mem_bytes,
                            ..Default::default()
                        },
                    )
                })
                .collect(),
            context_overhead: cluster.context_overhead_bytes,
        }
    }

    /// Loads every placement of `plan` as pre-loaded and ready at `now`.
    pub fn materialize(&mut self, plan: &PreloadPlan, catalog: &FunctionCatalog, now: f64) -> Result<(), LedgerError> {
        for p in plan.iter() {
            self.load(&p.tier, catalog, &p.function, p.kind, now, Origin::Preloaded)?;
        }
        Ok(())
    }

    pub fn container(&self, id: &ContainerId) -> Option<&ContainerState> {
        self.containers.get(id)
    }

    pub fn gpu(&self, id: &GpuId) -> Option<&GpuState> {
        self.gpus.get(id)
    }

    pub fn containers(&self) -> impl Iterator<Item = (&ContainerId, &ContainerState)> {
        self.containers.iter()
    }

    pub fn gpus(&self) -> impl Iterator<Item = (&GpuId, &GpuState)> {
        self.gpus.iter()
    }

    pub fn version(&self, gpu: &GpuId) -> u64 {
        self.gpus.get(gpu).map_or(0, |g| g.version)
    }

    pub fn capacity(&self, tier: &Tier) -> Option<u64> {
        match tier {
            Tier::Container(c) => self.containers.get(c).map(|s| s.capacity),
            Tier::Gpu(g) => self.gpus.get(g).map(|s| s.capacity),
        }
    }

    pub fn used(&self, tier: &Tier) -> Option<u64> {
        match tier {
            Tier::Container(c) => self.containers.get(c).map(|s| s.used()),
            Tier::Gpu(g) => self.gpus.get(g).map(|s| s.used()),
        }
    }

    pub fn free(&self, tier: &Tier) -> u64 {
        match (self.capacity(tier), self.used(tier)) {
            (Some(c), Some(u)) => c.saturating_sub(u),
            _ => 0,
        }
    }

    pub fn resident(&self, tier: &Tier, function: &FunctionId, kind: ArtifactKind) -> Option<&Resident> {
        let key = (function.clone(), kind);
        match tier {
            Tier::Container(c) => self.containers.get(c)?.resident.get(&key),
            Tier::Gpu(g) => self.gpus.get(g)?.resident.get(&key),
        }
    }

    /// Bytes that loading `kind` of `function` onto `tier` would add, including
    /// a context overhead if this is the function's first artifact on a GPU.
    pub fn load_cost(&self, tier: &Tier, catalog: &FunctionCatalog, function: &FunctionId, kind: ArtifactKind) -> u64 {
        let Some(f) = catalog.get(function) else { return 0 };
        let size = f.artifact(kind).map_or(0, |a| a.size_bytes);
        match tier {
            Tier::Gpu(g) if f.charges_context() => {
                let charged = self.gpus.get(g).is_some_and(|s| s.contexts.contains_key(function));
                size + if charged { 0 } else { self.context_overhead }
            }
            _ => size,
        }
    }

    pub fn load(
        &mut self,
        tier: &Tier,
        catalog: &FunctionCatalog,
        function: &FunctionId,
        kind: ArtifactKind,
        ready_at_ms: f64,
        origin: Origin,
    ) -> Result<(), LedgerError> {
        let f = catalog
            .get(function)
            .ok_or_else(|| LedgerError::MissingArtifact(function.clone()))?;
        let bytes = f
            .artifact(kind)
            .ok_or_else(|| LedgerError::MissingArtifact(function.clone()))?
            .size_bytes;
        if self.resident(tier, function, kind).is_some() {
            return Err(LedgerError::AlreadyResident {
                function: function.clone(),
                kind,
                tier: tier.clone(),
            });
        }
        let needed = self.load_cost(tier, catalog, function, kind);
        let free = self.free(tier);
        if self.capacity(tier).is_none() {
            return Err(LedgerError::UnknownTier(tier.clone()));
        }
        if needed > free {
            return Err(LedgerError::Insufficient {
                tier: tier.clone(),
                needed,
                free,
            });
        }
        let entry = Resident {
            bytes,
            ready_at_ms,
            origin,
        };
        match tier {
            Tier::Container(c) => {
                self.containers
                    .get_mut(c)
                    .expect("checked")
                    .resident
                    .insert((function.clone(), kind), entry);
            }
            Tier::Gpu(g) => {
                let overhead = self.context_overhead;
                let state = self.gpus.get_mut(g).expect("checked");
                if f.charges_context() {
                    state.contexts.entry(function.clone()).or_insert(overhead);
                }
                state.resident.insert((function.clone(), kind), entry);
                state.version += 1;
            }
        }
        Ok(())
    }

    /// Removes a resident artifact, releasing the function's context once it
    /// has nothing left on that GPU.
    pub fn remove(&mut self, tier: &Tier, function: &FunctionId, kind: ArtifactKind) -> Option<Resident> {
        let key = (function.clone(), kind);
        match tier {
            Tier::Container(c) => self.containers.get_mut(c)?.resident.remove(&key),
            Tier::Gpu(g) => {
                let state = self.gpus.get_mut(g)?;
                let removed = state.resident.remove(&key)?;
                if !state.hosts_function(function) {
                    state.contexts.remove(function);
                }
                state.version += 1;
                Some(removed)
            }
        }
    }

    pub fn reserve_kv(&mut self, gpu: &GpuId, batch: u64, bytes: u64) -> Result<(), LedgerError> {
        let tier = Tier::Gpu(gpu.clone());
        let free = self.free(&tier);
        let state = self.gpus.get_mut(gpu).ok_or(LedgerError::UnknownTier(tier.clone()))?;
        if bytes > free {
            return Err(LedgerError::Insufficient {
                tier,
                needed: bytes,
                free,
            });
        }
        *state.kv.entry(batch).or_default() += bytes;
        state.version += 1;
        Ok(())
    }

    pub fn release_kv(&mut self, gpu: &GpuId, batch: u64) -> u64 {
        let Some(state) = self.gpus.get_mut(gpu) else { return 0 };
        let released = state.kv.remove(&batch).unwrap_or(0);
        if released > 0 {
            state.version += 1;
        }
        released
    }

    /// Everything currently resident, as a placement set.
    pub fn as_plan(&self) -> PreloadPlan {
        let containers = self.containers.iter().flat_map(|(id, s)| {
            s.resident
                .keys()
                .map(move |(f, k)| Placement::new(f.clone(), *k, Tier::Container(id.clone())))
        });
        let gpus = self.gpus.iter().flat_map(|(id, s)| {
            s.resident
                .keys()
                .map(move |(f, k)| Placement::new(f.clone(), *k, Tier::Gpu(id.clone())))
        });
        containers.chain(gpus).collect()
    }

    /// A copy of `cluster` whose GPU capacities exclude reserved KV cache.
    pub fn cluster_without_kv(&self, cluster: &ClusterSpec) -> ClusterSpec {
        let mut out = cluster.clone();
        for g in &mut out.gpus {
            let kv = self.gpus.get(&g.id).map_or(0, |s| s.kv_used());
            g.mem_bytes = g.mem_bytes.saturating_sub(kv);
        }
        out
    }

    /// Memory is never over-committed on any tier.
    pub fn check_capacity(&self) -> Result<(), LedgerError> {
        for (id, s) in &self.containers {
            if s.used() > s.capacity {
                return Err(LedgerError::Insufficient {
                    tier: Tier::Container(id.clone()),
                    needed: s.used(),
                    free: s.capacity,
                });
            }
        }
        for (id, s) in &self.gpus {
            if s.used() > s.capacity {
                return Err(LedgerError::Insufficient {
                    tier: Tier::Gpu(id.clone()),
                    needed: s.used(),
                    free: s.capacity,
                });
            }
        }
        Ok(())
    }
}
