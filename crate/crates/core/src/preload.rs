//! Pre-loading decisions: which artifact goes to which container or GPU.
//!
//! Each candidate `(function, artifact, tier)` carries a value (expected startup
//! latency avoided per second, `avoided_ms * rate`) and a weight (bytes). The
//! greedy planner scans candidates by value density and places each one on the
//! first instance that keeps the plan feasible, pulling in missing
//! prerequisites. [`exact_preload`] is an exhaustive oracle for small instances.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{
    plan_usage, validate_plan, ArrivalStats, ArtifactKind, ClusterSpec, FunctionCatalog, FunctionId,
    FunctionSpec, GpuId, Placement, PreloadPlan, Tier, TierClass, Violation,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Benefit {
    pub value: f64,
    pub weight: u64,
}

impl Benefit {
    pub fn density(&self) -> f64 {
        self.value / self.weight as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BenefitKey {
    pub function: FunctionId,
    pub kind: ArtifactKind,
    pub tier: TierClass,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenefitTable {
    entries: BTreeMap<BenefitKey, Benefit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEntry {
    pub function: FunctionId,
    pub kind: ArtifactKind,
    pub tier: TierClass,
    pub density: f64,
    pub value: f64,
    pub weight: u64,
}

impl DensityEntry {
    /// Pre-loading priority: density desc, value desc, weight asc, function id,
    /// then GPU before container. Offloading scans the reverse.
    pub fn priority_cmp(&self, other: &Self) -> Ordering {
        other
            .density
            .total_cmp(&self.density)
            .then_with(|| other.value.total_cmp(&self.value))
            .then_with(|| self.weight.cmp(&other.weight))
            .then_with(|| self.function.cmp(&other.function))
            .then_with(|| self.tier.cmp(&other.tier))
            .then_with(|| self.kind.cmp(&other.kind))
    }
}

impl BenefitTable {
    pub fn insert(&mut self, function: FunctionId, kind: ArtifactKind, tier: TierClass, benefit: Benefit) {
        self.entries.insert(BenefitKey { function, kind, tier }, benefit);
    }

    pub fn get(&self, function: &FunctionId, kind: ArtifactKind, tier: TierClass) -> Option<Benefit> {
        self.entries
            .get(&BenefitKey {
                function: function.clone(),
                kind,
                tier,
            })
            .copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BenefitKey, &Benefit)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn density_order(&self) -> Vec<DensityEntry> {
        let mut out: Vec<DensityEntry> = self
            .entries
            .iter()
            .map(|(k, b)| DensityEntry {
                function: k.function.clone(),
                kind: k.kind,
                tier: k.tier,
                density: b.density(),
                value: b.value,
                weight: b.weight,
            })
            .collect();
        out.sort_by(DensityEntry::priority_cmp);
        out
    }

    pub fn placement_value(&self, p: &Placement) -> f64 {
        self.get(&p.function, p.kind, p.tier.class()).map_or(0.0, |b| b.value)
    }

    /// Objective value of a plan: sum of its placements' values.
    pub fn plan_value(&self, plan: &PreloadPlan) -> f64 {
        plan.iter().map(|p| self.placement_value(p)).sum()
    }

    pub fn scaled(&self, factor: f64) -> BenefitTable {
        BenefitTable {
            entries: self
                .entries
                .iter()
                .map(|(k, b)| {
                    (
                        k.clone(),
                        Benefit {
                            value: b.value * factor,
                            weight: b.weight,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Arrival rate that drives a function's artifacts. A backbone holder serves
/// every adapter built on it, so its rate is the sum over its dependents.
pub fn effective_rate(catalog: &FunctionCatalog, arrival: &ArrivalStats, f: &FunctionSpec) -> f64 {
    if f.is_adapter() {
        arrival.rate(&f.id)
    } else {
        arrival.rate(&f.id) + catalog.dependents(&f.id).map(|d| arrival.rate(&d.id)).sum::<f64>()
    }
}

/// Startup latency avoided by having `kind` resident at `tier`.
pub fn avoided_delay_ms(f: &FunctionSpec, kind: ArtifactKind, tier: TierClass) -> Option<f64> {
    let a = f.artifact(kind)?;
    if !kind.allows(tier) {
        return None;
    }
    Some(match (kind.is_model(), tier) {
        (true, TierClass::Container) => a.load_cold_ms - a.load_from_container_ms,
        _ => a.load_cold_ms,
    })
}

pub fn compute_benefits(catalog: &FunctionCatalog, arrival: &ArrivalStats) -> BenefitTable {
    let mut table = BenefitTable::default();
    for f in catalog.iter() {
        let rate = effective_rate(catalog, arrival, f);
        for a in &f.artifacts {
            for &tier in a.kind.legal_tiers() {
                let avoided = avoided_delay_ms(f, a.kind, tier).expect("legal tier");
                table.insert(
                    f.id.clone(),
                    a.kind,
                    tier,
                    Benefit {
                        value: avoided * rate,
                        weight: a.size_bytes,
                    },
                );
            }
        }
    }
    table
}

struct Planner<'a> {
    cluster: &'a ClusterSpec,
    catalog: &'a FunctionCatalog,
}

impl Planner<'_> {
    fn free(&self, plan: &PreloadPlan) -> BTreeMap<Tier, i128> {
        let (cu, gu) = plan_usage(plan, self.cluster, self.catalog);
        let mut out = BTreeMap::new();
        for c in &self.cluster.containers {
            out.insert(Tier::Container(c.id.clone()), c.mem_bytes as i128 - cu[&c.id] as i128);
        }
        for g in &self.cluster.gpus {
            out.insert(Tier::Gpu(g.id.clone()), g.mem_bytes as i128 - gu[&g.id] as i128);
        }
        out
    }

    fn group_of<'t>(&'t self, tier: &'t Tier) -> Option<&'t GpuId> {
        match tier {
            Tier::Gpu(g) => Some(g),
            Tier::Container(c) => self.cluster.gpu_of(c),
        }
    }

    /// Instances of a tier class for `function`: those whose GPU group already
    /// holds artifacts of the same backbone family first, then GPUs with an
    /// attached container, then most free capacity, then by id.
    fn instances(&self, plan: &PreloadPlan, class: TierClass, function: &FunctionId) -> Vec<Tier> {
        let family = self.catalog.get(function).map(|f| &f.backbone);
        let mut affinity: BTreeMap<&GpuId, usize> = BTreeMap::new();
        for p in plan.iter() {
            if self.catalog.get(&p.function).map(|f| &f.backbone) == family {
                if let Some(g) = self.group_of(&p.tier) {
                    *affinity.entry(g).or_default() += 1;
                }
            }
        }
        let score = |t: &Tier| {
            let near = self.group_of(t).and_then(|g| affinity.get(g)).copied().unwrap_or(0);
            let hosts = match t {
                Tier::Gpu(g) => self.cluster.containers_of(g).next().is_some(),
                Tier::Container(_) => true,
            };
            (near, hosts)
        };
        let free = self.free(plan);
        let mut tiers: Vec<(Tier, i128)> = free.into_iter().filter(|(t, _)| t.class() == class).collect();
        tiers.sort_by(|a, b| {
            score(&b.0)
                .cmp(&score(&a.0))
                .then(b.1.cmp(&a.1))
                .then_with(|| a.0.cmp(&b.0))
        });
        tiers.into_iter().map(|(t, _)| t).collect()
    }

    /// Adds `(function, kind)` at `tier` to `plan` together with any missing
    /// prerequisites. Returns false when an existing placement conflicts.
    fn place(&self, plan: &mut PreloadPlan, function: &FunctionId, kind: ArtifactKind, tier: &Tier) -> bool {
        if let Some(existing) = plan.tier_of(function, kind) {
            return existing == tier;
        }
        let Some(f) = self.catalog.get(function) else { return false };
        if f.artifact(kind).is_none() || !kind.allows(tier.class()) {
            return false;
        }
        let has_library = f.artifact(ArtifactKind::Library).is_some();
        match (kind, tier) {
            (ArtifactKind::Library, _) => {}
            (k, Tier::Container(c)) if k.is_model() => {
                if has_library && !self.place(plan, function, ArtifactKind::Library, tier) {
                    return false;
                }
                if let Some(b) = f.backbone_dependency() {
                    let group = self.cluster.gpu_of(c).cloned();
                    match plan.tier_of(b, ArtifactKind::BackboneModel).cloned() {
                        Some(Tier::Gpu(g)) if Some(&g) == group.as_ref() => {}
                        Some(Tier::Container(bc)) if self.cluster.gpu_of(&bc) == group.as_ref() => {}
                        Some(_) => return false,
                        None => {
                            if !self.place(plan, b, ArtifactKind::BackboneModel, tier) {
                                return false;
                            }
                        }
                    }
                }
            }
            (k, Tier::Gpu(g)) if k.is_model() => {
                if has_library {
                    match plan.tier_of(function, ArtifactKind::Library).cloned() {
                        Some(Tier::Container(c)) => {
                            if self.cluster.gpu_of(&c) != Some(g) {
                                return false;
                            }
                        }
                        Some(Tier::Gpu(_)) => return false,
                        None => {
                            let free = self.free(plan);
                            let mut group: Vec<_> = self.cluster.containers_of(g).collect();
                            group.sort_by(|a, b| {
                                let fa = free[&Tier::Container(a.id.clone())];
                                let fb = free[&Tier::Container(b.id.clone())];
                                fb.cmp(&fa).then_with(|| a.id.cmp(&b.id))
                            });
                            let Some(c) = group.first() else { return false };
                            if !self.place(plan, function, ArtifactKind::Library, &Tier::Container(c.id.clone())) {
                                return false;
                            }
                        }
                    }
                }
                if let Some(b) = f.backbone_dependency() {
                    if !self.place(plan, b, ArtifactKind::BackboneModel, tier) {
                        return false;
                    }
                }
            }
            (ArtifactKind::Kernel, Tier::Gpu(_)) => {
                if !self.place(plan, function, f.model_kind(), tier) {
                    return false;
                }
            }
            _ => return false,
        }
        plan.insert(Placement {
            function: function.clone(),
            kind,
            tier: tier.clone(),
        });
        true
    }
}

fn violations(plan: &PreloadPlan, cluster: &ClusterSpec, catalog: &FunctionCatalog) -> Vec<Violation> {
    validate_plan(plan, cluster, catalog).unwrap_or_else(|e| panic!("planner produced invalid ids: {e}"))
}

/// Greedy value-density planner starting from an empty plan.
pub fn greedy_preload(benefits: &BenefitTable, cluster: &ClusterSpec, catalog: &FunctionCatalog) -> PreloadPlan {
    greedy_extend(PreloadPlan::new(), benefits, cluster, catalog)
}

/// Extends `base` greedily. An addition is accepted only when it leaves the
/// set of violations unchanged, so a feasible base stays feasible.
pub fn greedy_extend(
    base: PreloadPlan,
    benefits: &BenefitTable,
    cluster: &ClusterSpec,
    catalog: &FunctionCatalog,
) -> PreloadPlan {
    let planner = Planner { cluster, catalog };
    let mut plan = base;
    let baseline = violations(&plan, cluster, catalog);
    for entry in benefits.density_order() {
        if entry.value <= 0.0 || catalog.get(&entry.function).is_none() {
            continue;
        }
        if plan.tier_of(&entry.function, entry.kind).is_some() {
            continue;
        }
        let free = planner.free(&plan);
        for tier in planner.instances(&plan, entry.tier, &entry.function) {
            if free[&tier] < entry.weight as i128 {
                continue;
            }
            let mut tentative = plan.clone();
            if !planner.place(&mut tentative, &entry.function, entry.kind, &tier) {
                continue;
            }
            if violations(&tentative, cluster, catalog) == baseline {
                plan = tentative;
                break;
            }
        }
    }
    plan
}

pub const DEFAULT_EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PreloadError {
    #[error("{candidates} candidate placements exceed the exhaustive-search limit of {limit}")]
    InstanceTooLarge { candidates: usize, limit: usize },
}

/// Every concrete `(function, artifact, instance)` decision variable.
pub fn candidate_placements(
    benefits: &BenefitTable,
    cluster: &ClusterSpec,
    catalog: &FunctionCatalog,
) -> Vec<Placement> {
    let mut out = Vec::new();
    for f in catalog.iter() {
        for a in &f.artifacts {
            for &class in a.kind.legal_tiers() {
                if benefits.get(&f.id, a.kind, class).is_none() {
                    continue;
                }
                let tiers: Vec<Tier> = match class {
                    TierClass::Container => cluster.containers.iter().map(|c| Tier::Container(c.id.clone())).collect(),
                    TierClass::Gpu => cluster.gpus.iter().map(|g| Tier::Gpu(g.id.clone())).collect(),
                };
                out.extend(tiers.into_iter().map(|tier| Placement {
                    function: f.id.clone(),
                    kind: a.kind,
                    tier,
                }));
            }
        }
    }
    out.sort();
    out
}

const VALUE_EPS: f64 = 1e-9;

struct Search<'a> {
    candidates: Vec<(Placement, f64, u64)>,
    suffix_value: Vec<f64>,
    cluster: &'a ClusterSpec,
    catalog: &'a FunctionCatalog,
    best: Option<(f64, Vec<Placement>)>,
}

impl Search<'_> {
    fn better(&self, value: f64, chosen: &[Placement]) -> bool {
        let Some((best_value, best)) = &self.best else { return true };
        let tol = VALUE_EPS * best_value.abs().max(1.0);
        if value > best_value + tol {
            return true;
        }
        if value < best_value - tol {
            return false;
        }
        match chosen.len().cmp(&best.len()) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => chosen < best.as_slice(),
        }
    }

    fn dfs(&mut self, idx: usize, chosen: &mut Vec<Placement>, value: f64, used: &mut BTreeMap<Tier, u64>) {
        if let Some((best_value, _)) = &self.best {
            let tol = VALUE_EPS * best_value.abs().max(1.0);
            if value + self.suffix_value[idx] < best_value - tol {
                return;
            }
        }
        if idx == self.candidates.len() {
            let plan: PreloadPlan = chosen.iter().cloned().collect();
            let ok = validate_plan(&plan, self.cluster, self.catalog)
                .map(|v| v.is_empty())
                .unwrap_or(false);
            if ok && self.better(value, chosen) {
                self.best = Some((value, chosen.clone()));
            }
            return;
        }
        let (p, v, w) = self.candidates[idx].clone();
        let duplicate = chosen.iter().any(|c| c.function == p.function && c.kind == p.kind);
        if !duplicate {
            let cap = self.cluster.capacity(&p.tier).unwrap_or(0);
            let f = self.catalog.get(&p.function).expect("candidate from catalog");
            let mut extra = w;
            if let Tier::Gpu(g) = &p.tier {
                let has_context = chosen
                    .iter()
                    .any(|c| c.function == p.function && matches!(&c.tier, Tier::Gpu(x) if x == g));
                if f.charges_context() && !has_context {
                    extra += self.cluster.context_overhead_bytes;
                }
            }
            let cur = used.get(&p.tier).copied().unwrap_or(0);
            if cur + extra <= cap {
                used.insert(p.tier.clone(), cur + extra);
                chosen.push(p.clone());
                self.dfs(idx + 1, chosen, value + v, used);
                chosen.pop();
                used.insert(p.tier.clone(), cur);
            }
        }
        self.dfs(idx + 1, chosen, value, used);
    }
}

/// Exhaustive search for the value-maximizing feasible plan. Ties go to fewer
/// placements, then to the lexically smaller placement list.
pub fn exact_preload(
    benefits: &BenefitTable,
    cluster: &ClusterSpec,
    catalog: &FunctionCatalog,
    limit: usize,
) -> Result<PreloadPlan, PreloadError> {
    let candidates = candidate_placements(benefits, cluster, catalog);
    if candidates.len() > limit {
        return Err(PreloadError::InstanceTooLarge {
            candidates: candidates.len(),
            limit,
        });
    }
    let candidates: Vec<(Placement, f64, u64)> = candidates
        .into_iter()
        .map(|p| {
            let b = benefits.get(&p.function, p.kind, p.tier.class()).expect("filtered");
            (p, b.value, b.weight)
        })
        .collect();
    let mut suffix_value = vec![0.0; candidates.len() + 1];
    for i in (0..candidates.len()).rev() {
        suffix_value[i] = suffix_value[i + 1] + candidates[i].1.max(0.0);
    }
    let mut search = Search {
        candidates,
        suffix_value,
        cluster,
        catalog,
        best: None,
    };
    search.dfs(0, &mut Vec::new(), 0.0, &mut BTreeMap::new());
    Ok(search
        .best
        .map(|(_, placements)| placements.into_iter().collect())
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::*;

    fn rates(pairs: &[(&str, f64)]) -> ArrivalStats {
        pairs.iter().map(|(f, r)| (FunctionId::from(*f), *r)).collect()
    }

    #[test]
    fn zero_rates_give_zero_values() {
        let cat = catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama")]);
        let table = compute_benefits(&cat, &ArrivalStats::new());
        assert!(!table.is_empty());
        assert!(table.iter().all(|(_, b)| b.value == 0.0));
    }

    #[test]
    fn model_values_per_tier() {
        let mut f = holder("llama", 14 * GB);
        f.artifacts[1].load_cold_ms = 8000.0;
        f.artifacts[1].load_from_container_ms = 2000.0;
        let cat = catalog(vec![f]);
        let table = compute_benefits(&cat, &rates(&[("llama", 0.5)]));
        let id = FunctionId::from("llama");
        assert_eq!(table.get(&id, ArtifactKind::BackboneModel, TierClass::Container).unwrap().value, 3000.0);
        assert_eq!(table.get(&id, ArtifactKind::BackboneModel, TierClass::Gpu).unwrap().value, 4000.0);
        assert!(table.get(&id, ArtifactKind::Library, TierClass::Gpu).is_none());
    }

    #[test]
    fn shared_backbone_uses_summed_rate() {
        let cat = catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama"), adapter("a2", "llama")]);
        let table = compute_benefits(&cat, &rates(&[("a1", 0.2), ("a2", 0.3)]));
        let v = table.get(&"llama".into(), ArtifactKind::BackboneModel, TierClass::Gpu).unwrap().value;
        assert!((v - 8000.0 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn greedy_on_empty_catalog() {
        let cluster = cluster(&[("c1", GB, "g1")], &[("g1", GB)], 0);
        let cat = catalog(vec![]);
        let plan = greedy_preload(&BenefitTable::default(), &cluster, &cat);
        assert!(plan.is_empty());
        assert!(exact_preload(&BenefitTable::default(), &cluster, &cat, 20).unwrap().is_empty());
    }

    #[test]
    fn greedy_takes_everything_when_unconstrained() {
        let cluster = cluster(&[("c1", 100 * GB, "g1")], &[("g1", 100 * GB)], 473 * MB);
        let cat = catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama")]);
        let table = compute_benefits(&cat, &rates(&[("a1", 0.4)]));
        let plan = greedy_preload(&table, &cluster, &cat);
        assert!(validate_plan(&plan, &cluster, &cat).unwrap().is_empty());
        // libraries in the container, both models and the kernel on the GPU
        assert_eq!(plan.len(), 5);
        assert_eq!(plan.tier_of(&"a1".into(), ArtifactKind::AdapterModel), Some(&gpu("g1")));
        assert_eq!(plan.tier_of(&"llama".into(), ArtifactKind::BackboneModel), Some(&gpu("g1")));
        let exact = exact_preload(&table, &cluster, &cat, 20).unwrap();
        assert!((table.plan_value(&plan) - table.plan_value(&exact)).abs() < 1e-6);
    }

    #[test]
    fn shared_backbone_placed_once_and_weaker_adapter_spills() {
        let overhead = 473 * MB;
        // Room for the backbone, one adapter, one kernel, one context.
        let gpu_cap = 14 * GB + 200 * MB + 500 * MB + overhead;
        let cluster = cluster(&[("c1", 20 * GB, "g1")], &[("g1", gpu_cap)], overhead);
        let cat = catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama"), adapter("a2", "llama")]);
        let table = compute_benefits(&cat, &rates(&[("a1", 0.5), ("a2", 0.1)]));
        let plan = greedy_preload(&table, &cluster, &cat);
        assert!(validate_plan(&plan, &cluster, &cat).unwrap().is_empty());
        let backbones = plan.iter().filter(|p| p.kind == ArtifactKind::BackboneModel).count();
        assert_eq!(backbones, 1);
        assert_eq!(plan.tier_of(&"a1".into(), ArtifactKind::AdapterModel), Some(&gpu("g1")));
        assert_ne!(plan.tier_of(&"a2".into(), ArtifactKind::AdapterModel), Some(&gpu("g1")));
        assert!(plan.tier_of(&"a2".into(), ArtifactKind::Kernel).is_none());
    }

    #[test]
    fn exact_rejects_large_instances() {
        let cluster = cluster(
            &[("c1", GB, "g1"), ("c2", GB, "g1"), ("c3", GB, "g2")],
            &[("g1", GB), ("g2", GB)],
            0,
        );
        let cat = catalog(vec![holder("llama", 14 * GB), adapter("a1", "llama"), adapter("a2", "llama")]);
        let table = compute_benefits(&cat, &rates(&[("a1", 1.0)]));
        assert!(matches!(
            exact_preload(&table, &cluster, &cat, DEFAULT_EXACT_LIMIT),
            Err(PreloadError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn density_order_tie_breaks() {
        let mut t = BenefitTable::default();
        t.insert("b".into(), ArtifactKind::Kernel, TierClass::Gpu, Benefit { value: 10.0, weight: 10 });
        t.insert("a".into(), ArtifactKind::Kernel, TierClass::Gpu, Benefit { value: 10.0, weight: 10 });
        t.insert("c".into(), ArtifactKind::Kernel, TierClass::Gpu, Benefit { value: 20.0, weight: 20 });
        t.insert("a".into(), ArtifactKind::AdapterModel, TierClass::Container, Benefit { value: 10.0, weight: 10 });
        t.insert("a".into(), ArtifactKind::AdapterModel, TierClass::Gpu, Benefit { value: 10.0, weight: 10 });
        let order: Vec<(String, TierClass, ArtifactKind)> = t
            .density_order()
            .into_iter()
            .map(|e| (e.function.0, e.tier, e.kind))
            .collect();
        assert_eq!(
            order,
            vec![
                ("c".into(), TierClass::Gpu, ArtifactKind::Kernel),
                ("a".into(), TierClass::Gpu, ArtifactKind::AdapterModel),
                ("a".into(), TierClass::Gpu, ArtifactKind::Kernel),
                ("a".into(), TierClass::Container, ArtifactKind::AdapterModel),
                ("b".into(), TierClass::Gpu, ArtifactKind::Kernel),
            ]
        );
    }
}
