pub mod batching;
pub mod domain;
pub mod engine;
pub mod experiment;
pub mod ledger;
pub mod metrics;
pub mod offload;
pub mod preload;
pub mod rng;
pub mod workload;
