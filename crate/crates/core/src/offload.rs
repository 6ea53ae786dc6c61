//! Value-density offloading of GPU-resident artifacts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::domain::{ArtifactKind, ContainerId, FunctionCatalog, FunctionId, GpuId, Tier};
use crate::ledger::{Origin, ResidencyLedger};

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadRequest {
    pub gpu: GpuId,
    pub required_bytes: u64,
    /// Functions with in-flight work; nothing they depend on may move.
    pub protected: BTreeSet<FunctionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvictionCandidate {
    pub function: FunctionId,
    pub kind: ArtifactKind,
    pub value: f64,
    pub weight: u64,
    /// Artifact this one cannot stay resident without.
    pub requires: Option<(FunctionId, ArtifactKind)>,
}

impl EvictionCandidate {
    fn key(&self) -> (FunctionId, ArtifactKind) {
        (self.function.clone(), self.kind)
    }

    fn density(&self) -> f64 {
        if self.weight == 0 {
            f64::INFINITY
        } else {
            self.value / self.weight as f64
        }
    }
}

/// Lowest density first, then lower value, then the larger artifact.
fn eviction_order(a: &EvictionCandidate, b: &EvictionCandidate) -> Ordering {
    a.density()
        .total_cmp(&b.density())
        .then(a.value.total_cmp(&b.value))
        .then(b.weight.cmp(&a.weight))
        .then(b.function.cmp(&a.function))
        .then(a.kind.cmp(&b.kind))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Destination {
    Demote(ContainerId),
    Discard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eviction {
    pub function: FunctionId,
    pub kind: ArtifactKind,
    pub bytes: u64,
    pub destination: Destination,
}

/// Where demoted models may go: each function's home container and the room
/// left in every container.
#[derive(Debug, Clone, Default)]
pub struct DemotionTargets {
    pub home: BTreeMap<FunctionId, ContainerId>,
    pub room: BTreeMap<ContainerId, u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OffloadError {
    #[error("need {deficit} bytes but only {evictable} are evictable")]
    InsufficientEvictableMemory { deficit: u64, evictable: u64 },
    #[error("gpu {gpu} changed since the decision (expected version {expected}, found {found})")]
    StaleState { gpu: GpuId, expected: u64, found: u64 },
}

/// Indices of candidates that may be evicted, and each candidate's dependents.
fn unblocked(protected: &BTreeSet<FunctionId>, candidates: &[EvictionCandidate]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let index: BTreeMap<(FunctionId, ArtifactKind), usize> =
        candidates.iter().enumerate().map(|(i, c)| (c.key(), i)).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        if let Some(&r) = c.requires.as_ref().and_then(|r| index.get(r)) {
            dependents[r].push(i);
        }
    }

    // A candidate is blocked if it is protected or anything depending on it is.
    fn is_blocked(
        i: usize,
        candidates: &[EvictionCandidate],
        dependents: &[Vec<usize>],
        protected: &BTreeSet<FunctionId>,
        memo: &mut [Option<bool>],
    ) -> bool {
        if let Some(b) = memo[i] {
            return b;
        }
        memo[i] = Some(true);
        let b = protected.contains(&candidates[i].function)
            || dependents[i]
                .iter()
                .any(|&d| is_blocked(d, candidates, dependents, protected, memo));
        memo[i] = Some(b);
        b
    }
    let mut memo = vec![None::<bool>; candidates.len()];
    let order = (0..candidates.len())
        .filter(|&i| !is_blocked(i, candidates, &dependents, protected, &mut memo))
        .collect();
    (order, dependents)
}

/// Total bytes that could be evicted without touching `protected` functions.
pub fn evictable_bytes(protected: &BTreeSet<FunctionId>, candidates: &[EvictionCandidate]) -> u64 {
    unblocked(protected, candidates).0.iter().map(|&i| candidates[i].weight).sum()
}

/// Picks artifacts to evict so that `required_bytes` fit alongside
/// `free_bytes`. Dependents always leave before what they depend on.
pub fn select_evictions(
    req: &OffloadRequest,
    candidates: &[EvictionCandidate],
    free_bytes: u64,
    targets: &DemotionTargets,
) -> Result<Vec<Eviction>, OffloadError> {
    if req.required_bytes <= free_bytes {
        return Ok(Vec::new());
    }
    let deficit = req.required_bytes - free_bytes;

    let (mut order, mut dependents) = unblocked(&req.protected, candidates);
    let evictable: u64 = order.iter().map(|&i| candidates[i].weight).sum();
    if evictable < deficit {
        return Err(OffloadError::InsufficientEvictableMemory { deficit, evictable });
    }
    order.sort_by(|&a, &b| eviction_order(&candidates[a], &candidates[b]));
    for deps in &mut dependents {
        deps.sort_by(|&a, &b| eviction_order(&candidates[a], &candidates[b]));
    }

    let mut room = targets.room.clone();
    let mut evicted = vec![false; candidates.len()];
    let mut out = Vec::new();
    let mut freed = 0u64;
    for &i in &order {
        if freed >= deficit {
            break;
        }
        // post-order walk so dependents go first
        let mut stack = vec![(i, false)];
        while let Some((j, expanded)) = stack.pop() {
            if evicted[j] {
                continue;
            }
            if !expanded {
                stack.push((j, true));
                for &d in dependents[j].iter().rev() {
                    if !evicted[d] {
                        stack.push((d, false));
                    }
                }
                continue;
            }
            if freed >= deficit {
                break;
            }
            let c = &candidates[j];
            let destination = if c.kind.is_model() {
                match targets.home.get(&c.function) {
                    Some(home) if room.get(home).copied().unwrap_or(0) >= c.weight => {
                        *room.get_mut(home).expect("checked") -= c.weight;
                        Destination::Demote(home.clone())
                    }
                    _ => Destination::Discard,
                }
            } else {
                Destination::Discard
            };
            evicted[j] = true;
            freed += c.weight;
            out.push(Eviction {
                function: c.function.clone(),
                kind: c.kind,
                bytes: c.weight,
                destination,
            });
        }
    }
    Ok(out)
}

/// Milliseconds to move `bytes` at `gbps` decimal gigabytes per second.
pub fn transfer_ms(bytes: u64, gbps: f64) -> f64 {
    if gbps <= 0.0 {
        return 0.0;
    }
    bytes as f64 / (gbps * 1e9) * 1000.0
}

/// Applies evictions to the ledger if the GPU has not changed since
/// `expected_version`. Returns the demotion latency in milliseconds.
pub fn apply_evictions(
    evictions: &[Eviction],
    ledger: &mut ResidencyLedger,
    catalog: &FunctionCatalog,
    gpu: &GpuId,
    expected_version: u64,
    demotion_gbps: f64,
) -> Result<f64, OffloadError> {
    let found = ledger.version(gpu);
    if found != expected_version {
        return Err(OffloadError::StaleState {
            gpu: gpu.clone(),
            expected: expected_version,
            found,
        });
    }
    let tier = Tier::Gpu(gpu.clone());
    let mut latency = 0.0;
    for e in evictions {
        let Some(removed) = ledger.remove(&tier, &e.function, e.kind) else { continue };
        if let Destination::Demote(c) = &e.destination {
            let target = Tier::Container(c.clone());
            if ledger.resident(&target, &e.function, e.kind).is_none()
                && ledger
                    .load(&target, catalog, &e.function, e.kind, removed.ready_at_ms, Origin::OnDemand)
                    .is_ok()
            {
                latency += transfer_ms(removed.bytes, demotion_gbps);
            }
        }
    }
    Ok(latency)
}
