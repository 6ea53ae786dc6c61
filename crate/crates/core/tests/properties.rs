mod common;

use std::collections::BTreeSet;

use common::*;
use lorasim_core::batching::{
    batch_delay, schedule_round, BatchQueue, BatchingPolicy, ContentionView, FlushReason, QueueSlot,
};
use lorasim_core::domain::{validate_plan, FunctionId, GpuId, Placement, PreloadPlan};
use lorasim_core::offload::{evictable_bytes, select_evictions, DemotionTargets, OffloadError, OffloadRequest};
use lorasim_core::preload::{exact_preload, greedy_preload, DEFAULT_EXACT_LIMIT};
use lorasim_core::workload::interarrival_cov;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn greedy_plans_are_feasible(seed in any::<u64>()) {
        let inst = pckp_instance(seed, 12);
        let plan = greedy_preload(&inst.benefits, &inst.cluster, &inst.catalog);
        let placed: Vec<&Placement> = plan.iter().collect();
        prop_assert!(oracle_feasible(&placed, &inst.cluster, &inst.catalog));
        prop_assert!(validate_plan(&plan, &inst.cluster, &inst.catalog).unwrap().is_empty());
    }

    #[test]
    fn greedy_never_beats_exact(seed in any::<u64>()) {
        let inst = pckp_instance(seed, 12);
        let greedy = greedy_preload(&inst.benefits, &inst.cluster, &inst.catalog);
        let exact = exact_preload(&inst.benefits, &inst.cluster, &inst.catalog, DEFAULT_EXACT_LIMIT).unwrap();
        let (g, e) = (inst.benefits.plan_value(&greedy), inst.benefits.plan_value(&exact));
        prop_assert!(g <= e + 1e-9 * e.max(1.0), "greedy {g} > exact {e}");
    }

    #[test]
    fn plans_ignore_value_scale(seed in any::<u64>(), factor in 0.001f64..1000.0) {
        let inst = pckp_instance(seed, 12);
        let a = greedy_preload(&inst.benefits, &inst.cluster, &inst.catalog);
        let b = greedy_preload(&inst.benefits.scaled(factor), &inst.cluster, &inst.catalog);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dropping_a_placement_keeps_capacity(seed in any::<u64>()) {
        let inst = pckp_instance(seed, 12);
        let plan = greedy_preload(&inst.benefits, &inst.cluster, &inst.catalog);
        for p in plan.iter() {
            let mut smaller: PreloadPlan = plan.clone();
            smaller.remove(p);
            let v = validate_plan(&smaller, &inst.cluster, &inst.catalog).unwrap();
            prop_assert!(v.iter().all(|v| !v.is_capacity()));
        }
    }

    #[test]
    fn eviction_frees_enough_and_spares_protected(seed in any::<u64>(), n in 1usize..60, share in 0.0f64..1.5) {
        let mut r = rng(seed);
        let inst = evict_instance(&mut r, n);
        let evictable = evictable_bytes(&inst.protected, &inst.candidates);
        let deficit = ((evictable as f64 * share) as u64).max(1);
        let req = OffloadRequest {
            gpu: "g".into(),
            required_bytes: deficit,
            protected: inst.protected.clone(),
        };
        match select_evictions(&req, &inst.candidates, 0, &DemotionTargets::default()) {
            Ok(ev) => {
                let freed: u64 = ev.iter().map(|e| e.bytes).sum();
                prop_assert!(freed >= deficit);
                prop_assert!(ev.iter().all(|e| !inst.protected.contains(&e.function)));
                // nothing stays behind without what it requires
                let gone: BTreeSet<_> = ev.iter().map(|e| (e.function.clone(), e.kind)).collect();
                for c in &inst.candidates {
                    if let Some(req) = &c.requires {
                        if gone.contains(req) {
                            prop_assert!(gone.contains(&(c.function.clone(), c.kind)));
                        }
                    }
                }
            }
            Err(OffloadError::InsufficientEvictableMemory { .. }) => prop_assert!(deficit > evictable),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn cov_ignores_scale_and_shift(
        gaps in prop::collection::vec(1.0f64..10_000.0, 3..200),
        scale in 0.01f64..100.0,
        shift in 0.0f64..1e6,
    ) {
        let mut t = 0.0;
        let arrivals: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
        let moved: Vec<f64> = arrivals.iter().map(|a| a * scale + shift).collect();
        let (a, b) = (interarrival_cov(&arrivals).unwrap(), interarrival_cov(&moved).unwrap());
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn queues_always_drain_by_their_deadline(n in 1usize..40, busy in 0usize..4) {
        let spec = adapter("a", "bb", 200 * MB, true, true);
        let policy = BatchingPolicy::default();
        let gpu: GpuId = "g".into();
        let mut q = BatchQueue::new(FunctionId::from("a"), 21);
        for i in 0..n {
            q.push(i as u64, 0.0, &spec, &policy);
        }
        prop_assert_eq!(q.expire_deadline(), Some(batch_delay(&spec, n.min(21))));
        let mut served = 0;
        let mut now = 0.0;
        while now <= spec.slo_ttft_ms {
            let deadline = q.expire_deadline();
            let mut view = ContentionView::new();
            view.set(gpu.clone(), busy);
            let mut slots = [QueueSlot { queue: &mut q, spec: &spec, gpu: Some(gpu.clone()) }];
            for d in schedule_round(&mut slots, &mut view, now, &policy) {
                served += d.requests.len();
                let late = deadline.map_or(true, |t| now >= t + policy.tick_ms());
                prop_assert!(!late || d.reason == FlushReason::Full);
                if busy == 0 {
                    prop_assert!(d.reason != FlushReason::Margin);
                }
            }
            now += policy.tick_ms();
        }
        prop_assert_eq!(served, n);
    }
}

#[test]
fn a_lone_request_waits_out_the_full_slack() {
    let spec = adapter("a", "bb", 200 * MB, true, true);
    let policy = BatchingPolicy::default();
    let mut q = BatchQueue::new(FunctionId::from("a"), 21);
    q.push(0, 0.0, &spec, &policy);
    assert_eq!(q.expire_deadline(), Some(2000.0));
    let mut view = ContentionView::new();
    let gpu: GpuId = "g".into();
    let mut slots = [QueueSlot {
        queue: &mut q,
        spec: &spec,
        gpu: Some(gpu.clone()),
    }];
    assert!(schedule_round(&mut slots, &mut view, 1990.0, &policy).is_empty());
    let d = schedule_round(&mut slots, &mut view, 2000.0, &policy);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].reason, FlushReason::Expired);
}
