#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lorasim_core::domain::{
    ArrivalStats, ArtifactKind, ArtifactSpec, ClusterSpec, ContainerSpec, FunctionCatalog, FunctionId, FunctionSpec,
    GpuSpec, Placement, Tier,
};
use lorasim_core::offload::EvictionCandidate;
use lorasim_core::preload::{compute_benefits, BenefitTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GB: u64 = 1_000_000_000;
pub const MB: u64 = 1_000_000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn artifact(kind: ArtifactKind, size: u64, cold: f64, from_container: f64) -> ArtifactSpec {
    ArtifactSpec {
        kind,
        size_bytes: size,
        load_cold_ms: cold,
        load_from_container_ms: from_container,
    }
}

pub fn holder(id: &str, model_bytes: u64, library: bool) -> FunctionSpec {
    let mut artifacts = vec![artifact(ArtifactKind::BackboneModel, model_bytes, 8000.0, 2000.0)];
    if library {
        artifacts.push(artifact(ArtifactKind::Library, 2 * GB, 3000.0, 0.0));
    }
    FunctionSpec {
        id: id.into(),
        backbone: id.into(),
        artifacts,
        slo_ttft_ms: 2500.0,
        prefill_base_ms: 500.0,
        prefill_marginal_ms: 100.0,
        decode_ms_per_token: 20.0,
        kv_bytes_per_request: 512 * MB,
        container_init_ms: 2000.0,
    }
}

pub fn adapter(id: &str, backbone: &str, adapter_bytes: u64, library: bool, kernel: bool) -> FunctionSpec {
    let mut artifacts = vec![artifact(ArtifactKind::AdapterModel, adapter_bytes, 500.0, 100.0)];
    if library {
        artifacts.push(artifact(ArtifactKind::Library, 2 * GB, 3000.0, 0.0));
    }
    if kernel {
        artifacts.push(artifact(ArtifactKind::Kernel, 500 * MB, 1500.0, 0.0));
    }
    FunctionSpec {
        id: id.into(),
        backbone: backbone.into(),
        artifacts,
        ..holder(id, 1, false)
    }
}

pub fn cluster(containers: &[(&str, u64, &str)], gpus: &[(&str, u64)], overhead: u64) -> ClusterSpec {
    ClusterSpec {
        containers: containers
            .iter()
            .map(|(id, mem, gpu)| ContainerSpec {
                id: (*id).into(),
                mem_bytes: *mem,
                gpu: (*gpu).into(),
            })
            .collect(),
        gpus: gpus
            .iter()
            .map(|(id, mem)| GpuSpec {
                id: (*id).into(),
                mem_bytes: *mem,
            })
            .collect(),
        context_overhead_bytes: overhead,
    }
}

/// A small random placement problem.
pub struct PckpInstance {
    pub cluster: ClusterSpec,
    pub catalog: FunctionCatalog,
    pub benefits: BenefitTable,
    pub unconstrained: bool,
}

fn random_spec_set(r: &mut ChaCha8Rng) -> Vec<FunctionSpec> {
    let mut fs = Vec::new();
    let mut h = holder("bb0", r.gen_range(1..=16) * GB, r.gen_bool(0.7));
    h.artifacts
        .iter_mut()
        .for_each(|a| a.load_cold_ms = r.gen_range(2500.0..9000.0));
    fs.push(h);
    let extra = r.gen_range(0..=2);
    for i in 0..extra {
        if r.gen_bool(0.2) {
            fs.push(holder(&format!("bb{}", i + 1), r.gen_range(1..=16) * GB, r.gen_bool(0.5)));
        } else {
            fs.push(adapter(
                &format!("ad{i}"),
                "bb0",
                r.gen_range(50..=800) * MB,
                r.gen_bool(0.7),
                r.gen_bool(0.6),
            ));
        }
    }
    fs
}

fn random_cluster(r: &mut ChaCha8Rng, demand: u64, unconstrained: bool) -> ClusterSpec {
    let n_gpus = r.gen_range(1..=2);
    let n_containers = r.gen_range(1..=2);
    let cap = |r: &mut ChaCha8Rng| {
        if unconstrained {
            1000 * demand.max(GB)
        } else {
            (demand as f64 * r.gen_range(0.1..1.0)) as u64 + 1
        }
    };
    let gpus: Vec<(String, u64)> = (0..n_gpus).map(|g| (format!("g{g}"), cap(r))).collect();
    let containers: Vec<(String, u64, String)> = (0..n_containers)
        .map(|c| (format!("c{c}"), cap(r), format!("g{}", r.gen_range(0..n_gpus))))
        .collect();
    let c: Vec<(&str, u64, &str)> = containers.iter().map(|(a, b, c)| (a.as_str(), *b, c.as_str())).collect();
    let g: Vec<(&str, u64)> = gpus.iter().map(|(a, b)| (a.as_str(), *b)).collect();
    cluster(&c, &g, r.gen_range(0..=600) * MB)
}

fn legal_placements(cluster: &ClusterSpec, catalog: &FunctionCatalog) -> Vec<Placement> {
    let mut out = Vec::new();
    for f in catalog.iter() {
        for a in &f.artifacts {
            if a.kind != ArtifactKind::Kernel {
                for c in &cluster.containers {
                    out.push(Placement::new(f.id.clone(), a.kind, Tier::Container(c.id.clone())));
                }
            }
            if a.kind != ArtifactKind::Library {
                for g in &cluster.gpus {
                    out.push(Placement::new(f.id.clone(), a.kind, Tier::Gpu(g.id.clone())));
                }
            }
        }
    }
    out
}

/// Random instance with at most 3 functions, 2 containers, 2 GPUs and at most
/// `max_candidates` legal placements. Benefits come from random arrival rates.
pub fn pckp_instance(seed: u64, max_candidates: usize) -> PckpInstance {
    let mut r = rng(seed);
    loop {
        let unconstrained = r.gen_bool(0.3);
        let specs = random_spec_set(&mut r);
        let catalog = FunctionCatalog::new(specs).expect("valid specs");
        let demand: u64 = catalog
            .iter()
            .flat_map(|f| f.artifacts.iter().map(|a| a.size_bytes))
            .sum();
        let cluster = random_cluster(&mut r, demand, unconstrained);
        if legal_placements(&cluster, &catalog).len() > max_candidates {
            continue;
        }
        let mut arrival = ArrivalStats::new();
        for f in catalog.iter() {
            arrival.set(f.id.clone(), r.gen_range(0.01..5.0));
        }
        let benefits = compute_benefits(&catalog, &arrival);
        return PckpInstance {
            cluster,
            catalog,
            benefits,
            unconstrained,
        };
    }
}

/// Every legal placement with its benefit, zero when the table has none.
pub fn enumerate_candidates(inst: &PckpInstance) -> Vec<(Placement, f64)> {
    legal_placements(&inst.cluster, &inst.catalog)
        .into_iter()
        .map(|p| {
            let v = inst.benefits.get(&p.function, p.kind, p.tier.class()).map_or(0.0, |b| b.value);
            (p, v)
        })
        .collect()
}

fn gpu_of<'a>(cluster: &'a ClusterSpec, container: &str) -> &'a str {
    cluster
        .containers
        .iter()
        .find(|c| c.id.0 == container)
        .map(|c| c.gpu.0.as_str())
        .expect("known container")
}

/// Independent feasibility check of a set of placements.
pub fn oracle_feasible(plan: &[&Placement], cluster: &ClusterSpec, catalog: &FunctionCatalog) -> bool {
    let mut seen = BTreeSet::new();
    for p in plan {
        if !seen.insert((p.function.clone(), p.kind)) {
            return false;
        }
    }
    let at = |f: &FunctionId, k: ArtifactKind| plan.iter().find(|p| &p.function == f && p.kind == k).map(|p| &p.tier);

    let mut used: BTreeMap<String, u64> = BTreeMap::new();
    let mut charged: BTreeSet<(String, FunctionId)> = BTreeSet::new();
    for p in plan {
        let f = catalog.get(&p.function).unwrap();
        let size = f.artifact(p.kind).unwrap().size_bytes;
        match &p.tier {
            Tier::Container(c) => *used.entry(format!("c:{}", c.0)).or_default() += size,
            Tier::Gpu(g) => {
                let e = used.entry(format!("g:{}", g.0)).or_default();
                *e += size;
                if f.is_adapter() && charged.insert((g.0.clone(), f.id.clone())) {
                    *e += cluster.context_overhead_bytes;
                }
            }
        }
    }
    for c in &cluster.containers {
        if used.get(&format!("c:{}", c.id.0)).copied().unwrap_or(0) > c.mem_bytes {
            return false;
        }
    }
    for g in &cluster.gpus {
        if used.get(&format!("g:{}", g.id.0)).copied().unwrap_or(0) > g.mem_bytes {
            return false;
        }
    }

    for p in plan {
        let f = catalog.get(&p.function).unwrap();
        let has_lib = f.artifact(ArtifactKind::Library).is_some();
        let lib = at(&f.id, ArtifactKind::Library);
        let backbone = f.is_adapter().then(|| at(&f.backbone, ArtifactKind::BackboneModel));
        let model_kind = if f.is_adapter() {
            ArtifactKind::AdapterModel
        } else {
            ArtifactKind::BackboneModel
        };
        match (&p.tier, p.kind) {
            (Tier::Container(c), ArtifactKind::BackboneModel | ArtifactKind::AdapterModel) => {
                if has_lib && lib != Some(&Tier::Container(c.clone())) {
                    return false;
                }
                if let Some(b) = backbone {
                    let group = gpu_of(cluster, &c.0);
                    let ok = match b {
                        Some(Tier::Container(bc)) => gpu_of(cluster, &bc.0) == group,
                        Some(Tier::Gpu(bg)) => bg.0 == group,
                        None => false,
                    };
                    if !ok {
                        return false;
                    }
                }
            }
            (Tier::Gpu(g), ArtifactKind::BackboneModel | ArtifactKind::AdapterModel) => {
                if has_lib && !matches!(lib, Some(Tier::Container(c)) if gpu_of(cluster, &c.0) == g.0) {
                    return false;
                }
                if let Some(b) = backbone {
                    if b != Some(&Tier::Gpu(g.clone())) {
                        return false;
                    }
                }
            }
            (Tier::Gpu(g), ArtifactKind::Kernel) => {
                if at(&f.id, model_kind) != Some(&Tier::Gpu(g.clone())) {
                    return false;
                }
            }
            (Tier::Container(_), ArtifactKind::Library) => {}
            _ => return false,
        }
    }
    true
}

/// Best plan value by enumerating every subset of candidates.
pub fn oracle_optimum(inst: &PckpInstance) -> f64 {
    let cands = enumerate_candidates(inst);
    assert!(cands.len() <= 16, "oracle instance too large");
    let mut best = 0.0f64;
    for mask in 0u32..(1 << cands.len()) {
        let chosen: Vec<&Placement> = (0..cands.len()).filter(|i| mask >> i & 1 == 1).map(|i| &cands[i].0).collect();
        let value: f64 = (0..cands.len()).filter(|i| mask >> i & 1 == 1).map(|i| cands[i].1).sum();
        if value > best && oracle_feasible(&chosen, &inst.cluster, &inst.catalog) {
            best = value;
        }
    }
    best
}

/// Random eviction instance: backbones with dependent adapters and kernels.
pub struct EvictInstance {
    pub candidates: Vec<EvictionCandidate>,
    pub protected: BTreeSet<FunctionId>,
}

pub fn evict_instance(r: &mut ChaCha8Rng, max_candidates: usize) -> EvictInstance {
    let mut candidates = Vec::new();
    let mut functions = Vec::new();
    let mut b = 0;
    while candidates.len() < max_candidates {
        let bb: FunctionId = format!("bb{b}").into();
        b += 1;
        candidates.push(EvictionCandidate {
            function: bb.clone(),
            kind: ArtifactKind::BackboneModel,
            value: r.gen_range(0.1..100.0),
            weight: r.gen_range(1..=16) * GB,
            requires: None,
        });
        functions.push(bb.clone());
        let adapters = r.gen_range(0..=4);
        for a in 0..adapters {
            if candidates.len() >= max_candidates {
                break;
            }
            let id: FunctionId = format!("{bb}-a{a}").into();
            candidates.push(EvictionCandidate {
                function: id.clone(),
                kind: ArtifactKind::AdapterModel,
                value: r.gen_range(0.1..20.0),
                weight: r.gen_range(50..=800) * MB,
                requires: Some((bb.clone(), ArtifactKind::BackboneModel)),
            });
            functions.push(id.clone());
            if candidates.len() < max_candidates && r.gen_bool(0.5) {
                candidates.push(EvictionCandidate {
                    function: id.clone(),
                    kind: ArtifactKind::Kernel,
                    value: r.gen_range(0.1..20.0),
                    weight: 500 * MB,
                    requires: Some((id.clone(), ArtifactKind::AdapterModel)),
                });
            }
        }
    }
    let protected = functions.into_iter().filter(|_| r.gen_bool(0.15)).collect();
    EvictInstance { candidates, protected }
}

/// Candidates that may leave: not protected and nothing protected depends on
/// them, directly or transitively.
pub fn oracle_movable(inst: &EvictInstance) -> Vec<bool> {
    let n = inst.candidates.len();
    let mut movable: Vec<bool> = inst
        .candidates
        .iter()
        .map(|c| !inst.protected.contains(&c.function))
        .collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            if movable[i] {
                continue;
            }
            if let Some(req) = &inst.candidates[i].requires {
                for j in 0..n {
                    let c = &inst.candidates[j];
                    if movable[j] && (&c.function, c.kind) == (&req.0, req.1) {
                        movable[j] = false;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return movable;
        }
    }
}

/// Smallest value lost by any dependency-closed eviction set freeing `deficit`.
pub fn oracle_min_loss(inst: &EvictInstance, deficit: u64) -> Option<f64> {
    let n = inst.candidates.len();
    let movable = oracle_movable(inst);
    let mut best: Option<f64> = None;
    'mask: for mask in 0u32..(1 << n) {
        let has = |i: usize| mask >> i & 1 == 1;
        let mut freed = 0u64;
        let mut lost = 0.0;
        for i in 0..n {
            if !has(i) {
                continue;
            }
            if !movable[i] {
                continue 'mask;
            }
            let c = &inst.candidates[i];
            // anything resting on this one must leave too
            for (j, d) in inst.candidates.iter().enumerate() {
                if d.requires.as_ref() == Some(&(c.function.clone(), c.kind)) && !has(j) {
                    continue 'mask;
                }
            }
            freed += c.weight;
            lost += c.value;
        }
        if freed >= deficit && best.map_or(true, |b| lost < b) {
            best = Some(lost);
        }
    }
    best
}
