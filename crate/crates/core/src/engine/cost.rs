use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pay-as-you-go rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pricing {
    /// Per second of a whole GPU; partial use is billed by memory share.
    pub gpu_per_s: f64,
    /// Per GB-second of host (container) memory.
    pub mem_gb_per_s: f64,
    pub cpu_core_per_s: f64,
    #[serde(default = "default_cores")]
    pub cores_per_instance: f64,
}

fn default_cores() -> f64 {
    2.0
}

impl Default for Pricing {
    fn default() -> Self {
        Self {
            gpu_per_s: 0.004,
            mem_gb_per_s: 0.000_01,
            cpu_core_per_s: 0.000_02,
            cores_per_instance: default_cores(),
        }
    }
}

/// Resource usage accumulated over billed intervals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Billing {
    pub gpu_s: f64,
    pub host_gb_s: f64,
    pub core_s: f64,
}

impl Billing {
    pub fn add(&mut self, other: &Billing) {
        self.gpu_s += other.gpu_s;
        self.host_gb_s += other.host_gb_s;
        self.core_s += other.core_s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gpu: f64,
    pub host_memory: f64,
    pub cpu: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn gpu_share(&self) -> f64 {
        if self.total > 0.0 {
            self.gpu / self.total
        } else {
            0.0
        }
    }
}

pub fn monetary_cost(billing: &Billing, pricing: &Pricing) -> CostBreakdown {
    let gpu = billing.gpu_s * pricing.gpu_per_s;
    let host_memory = billing.host_gb_s * pricing.mem_gb_per_s;
    let cpu = billing.core_s * pricing.cpu_core_per_s;
    CostBreakdown {
        gpu,
        host_memory,
        cpu,
        total: gpu + host_memory + cpu,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum CostError {
    #[error("cost-effectiveness undefined: mean E2E {e2e_ms} ms, cost {cost}")]
    Degenerate { e2e_ms: f64, cost: f64 },
}

/// `1 / (mean E2E in seconds x total cost)`.
pub fn cost_effectiveness(mean_e2e_ms: f64, cost: f64) -> Result<f64, CostError> {
    if !(mean_e2e_ms > 0.0) || !(cost > 0.0) {
        return Err(CostError::Degenerate { e2e_ms: mean_e2e_ms, cost });
    }
    Ok(1.0 / (mean_e2e_ms / 1000.0 * cost))
}
