use lorasim_core::engine::simulate;
use lorasim_core::experiment::{prepare, ExperimentConfig, TraceSource, Variant, GB};
use lorasim_core::workload::CovClass;
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Full),
        Just(Variant::Nbs),
        Just(Variant::Npl),
        Just(Variant::Ndo),
        (1usize..=8, 0.0f64..1000.0).prop_map(|(size, delay_ms)| Variant::Nab { size, delay_ms }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Every request completes, with roomy and with tight GPUs.
    #[test]
    fn every_request_is_served(
        v in variant(),
        seed in 0u64..10_000,
        gpus in 1usize..=2,
        gpu_gb in prop::sample::select(vec![32u64, 40, 48]),
        rate in 0.05f64..1.0,
        bursty in any::<bool>(),
    ) {
        // without offloading nothing resident ever leaves, so every backbone
        // has to fit at once
        prop_assume!(v != Variant::Ndo || (gpus == 2 && gpu_gb == 48));
        let class = if bursty { CovClass::Normal } else { CovClass::Predictable };
        let mut cfg = ExperimentConfig::new(TraceSource::Generated(class), v);
        cfg.seed = seed;
        cfg.duration_s = 300.0;
        cfg.rate_per_s = rate;
        let Ok(mut p) = prepare(&cfg) else {
            // a short trace may not reach the requested variability
            return Ok(());
        };
        p.cluster.gpus.truncate(gpus);
        let kept: Vec<_> = p.cluster.gpus.iter().map(|g| g.id.clone()).collect();
        p.cluster.containers.retain(|c| kept.contains(&c.gpu));
        for g in &mut p.cluster.gpus {
            g.mem_bytes = gpu_gb * GB;
        }
        let out = simulate(&p.sim, &p.cluster, &p.catalog, &p.trace).unwrap();
        prop_assert_eq!(out.unserved(), 0, "{} unserved of {}", out.unserved(), out.requests.len());
        for r in &out.requests {
            let (d, f, c) = (r.dispatch_ms.unwrap(), r.first_token_ms.unwrap(), r.completion_ms.unwrap());
            prop_assert!(r.arrival_ms <= d && d <= f && f <= c);
        }
    }
}
