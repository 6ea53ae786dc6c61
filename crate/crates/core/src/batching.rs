//! Two-layer adaptive batching.
//!
//! Locally every function runs a fill-or-expire queue whose size cap keeps the
//! predicted prefill latency within the SLO and whose expiry leaves exactly
//! enough time for the prefill. Globally, when several batches share a GPU,
//! queues whose deadline margin is about to run out are flushed first.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FunctionId, FunctionSpec, GpuId};

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BatchingError {
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

/// Predicted time to first token of a batch of `b` requests with no contention.
pub fn predict_ttft(f: &FunctionSpec, b: usize) -> Result<f64, BatchingError> {
    if b == 0 {
        return Err(BatchingError::ZeroBatch);
    }
    Ok(f.prefill_base_ms + f.prefill_marginal_ms * (b - 1) as f64)
}

fn ttft(f: &FunctionSpec, b: usize) -> f64 {
    f.prefill_base_ms + f.prefill_marginal_ms * (b.max(1) - 1) as f64
}

/// Largest batch whose predicted TTFT fits the SLO; `usize::MAX` when the
/// marginal cost is zero.
pub fn slo_batch_cap(f: &FunctionSpec) -> usize {
    if f.prefill_marginal_ms <= 0.0 {
        return usize::MAX;
    }
    let slack = f.slo_ttft_ms - f.prefill_base_ms;
    if slack < 0.0 {
        return 1;
    }
    let mut b = 1 + (slack / f.prefill_marginal_ms).floor() as usize;
    // guard against floor() landing one step high through rounding
    while b > 1 && ttft(f, b) > f.slo_ttft_ms {
        b -= 1;
    }
    b.max(1)
}

/// Maximum batch size under the SLO, additionally capped by KV-cache room when
/// the free memory of the target GPU is known.
pub fn max_batch_size(f: &FunctionSpec, free_gpu_bytes: Option<u64>) -> usize {
    let slo_cap = slo_batch_cap(f);
    match free_gpu_bytes {
        Some(free) if f.kv_bytes_per_request > 0 => {
            let mem_cap = (free / f.kv_bytes_per_request) as usize;
            slo_cap.min(mem_cap).max(1)
        }
        _ => slo_cap,
    }
}

/// How long a queue holding `n` requests may still wait.
pub fn batch_delay(f: &FunctionSpec, n: usize) -> f64 {
    (f.slo_ttft_ms - ttft(f, n)).max(0.0)
}

/// SLO slack left if a batch of `b` is dispatched now, having waited
/// `waited_ms`, onto a GPU running `m` batches in total. Negative means a
/// violation is predicted.
pub fn deadline_margin(f: &FunctionSpec, b: usize, waited_ms: f64, m: usize) -> f64 {
    f.slo_ttft_ms - (waited_ms + m.max(1) as f64 * ttft(f, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guard {
    /// One marginal prefill step of the function.
    Alpha,
    FixedMs(f64),
}

impl Guard {
    pub fn threshold(&self, f: &FunctionSpec) -> f64 {
        match self {
            Guard::Alpha => f.prefill_marginal_ms,
            Guard::FixedMs(ms) => *ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BatchingPolicy {
    Adaptive { tick_ms: f64, guard: Guard },
    /// Fixed size and delay, no contention awareness.
    Fixed { size: usize, delay_ms: f64, tick_ms: f64 },
}

impl Default for BatchingPolicy {
    fn default() -> Self {
        BatchingPolicy::Adaptive {
            tick_ms: DEFAULT_TICK_MS,
            guard: Guard::Alpha,
        }
    }
}

pub const DEFAULT_TICK_MS: f64 = 10.0;

impl BatchingPolicy {
    pub fn tick_ms(&self) -> f64 {
        match self {
            BatchingPolicy::Adaptive { tick_ms, .. } | BatchingPolicy::Fixed { tick_ms, .. } => *tick_ms,
        }
    }

    /// Size cap for a queue given the memory-derived cap.
    pub fn size_cap(&self, f: &FunctionSpec, free_gpu_bytes: Option<u64>) -> usize {
        match self {
            BatchingPolicy::Adaptive { .. } => max_batch_size(f, free_gpu_bytes),
            BatchingPolicy::Fixed { size, .. } => {
                let mem = match free_gpu_bytes {
                    Some(free) if f.kv_bytes_per_request > 0 => (free / f.kv_bytes_per_request) as usize,
                    _ => usize::MAX,
                };
                (*size).min(mem).max(1)
            }
        }
    }

    fn delay(&self, f: &FunctionSpec, n: usize) -> f64 {
        match self {
            BatchingPolicy::Adaptive { .. } => batch_delay(f, n),
            BatchingPolicy::Fixed { delay_ms, .. } => *delay_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pending {
    pub request: RequestId,
    pub enqueued_ms: f64,
}

/// Per-function fill-or-expire queue.
#[derive(Debug, Clone)]
pub struct BatchQueue {
    pub function: FunctionId,
    pending: VecDeque<Pending>,
    max_batch: usize,
    expire_deadline: Option<f64>,
}

impl BatchQueue {
    pub fn new(function: FunctionId, max_batch: usize) -> Self {
        Self {
            function,
            pending: VecDeque::new(),
            max_batch: max_batch.max(1),
            expire_deadline: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn expire_deadline(&self) -> Option<f64> {
        self.expire_deadline
    }

    pub fn oldest_enqueue(&self) -> Option<f64> {
        self.pending.front().map(|p| p.enqueued_ms)
    }

    pub fn oldest_wait_ms(&self, now: f64) -> f64 {
        self.oldest_enqueue().map_or(0.0, |t| (now - t).max(0.0))
    }

    pub fn pending(&self) -> impl Iterator<Item = &Pending> {
        self.pending.iter()
    }

    /// Updates the size cap; a lower cap takes effect at the next round.
    pub fn set_max_batch(&mut self, max_batch: usize) {
        self.max_batch = max_batch.max(1);
    }

    pub fn push(&mut self, request: RequestId, now: f64, f: &FunctionSpec, policy: &BatchingPolicy) {
        self.pending.push_back(Pending {
            request,
            enqueued_ms: now,
        });
        self.refresh_deadline(f, policy);
    }

    /// Deadline anchored at the oldest request; it only ever moves earlier as
    /// the queue grows.
    fn refresh_deadline(&mut self, f: &FunctionSpec, policy: &BatchingPolicy) {
        let Some(first) = self.oldest_enqueue() else {
            self.expire_deadline = None;
            return;
        };
        let n = self.len().min(self.max_batch);
        let candidate = first + policy.delay(f, n);
        self.expire_deadline = Some(match self.expire_deadline {
            Some(d) => d.min(candidate),
            None => candidate,
        });
    }

    /// Removes up to `max_batch` of the oldest requests.
    pub fn take_batch(&mut self, f: &FunctionSpec, policy: &BatchingPolicy) -> Vec<Pending> {
        let n = self.len().min(self.max_batch);
        let batch: Vec<Pending> = self.pending.drain(..n).collect();
        self.expire_deadline = None;
        self.refresh_deadline(f, policy);
        batch
    }

    /// Puts requests back at the head of the queue, oldest first.
    pub fn requeue(&mut self, requests: Vec<Pending>, f: &FunctionSpec, policy: &BatchingPolicy) {
        for p in requests.into_iter().rev() {
            self.pending.push_front(p);
        }
        self.expire_deadline = None;
        self.refresh_deadline(f, policy);
    }
}

/// Number of batches executing or already dispatched on each GPU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContentionView {
    running: BTreeMap<GpuId, usize>,
}

impl ContentionView {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, gpu: GpuId, batches: usize) {
        self.running.insert(gpu, batches);
    }

    pub fn running(&self, gpu: &GpuId) -> usize {
        self.running.get(gpu).copied().unwrap_or(0)
    }

    pub fn add(&mut self, gpu: &GpuId) {
        *self.running.entry(gpu.clone()).or_default() += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushReason {
    Full,
    Expired,
    Margin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlushDecision {
    pub function: FunctionId,
    pub gpu: Option<GpuId>,
    pub requests: Vec<Pending>,
    pub reason: FlushReason,
    /// Deadline margin at decision time, with the batch itself counted in M.
    pub margin_ms: f64,
    /// Batches on the target GPU including this one.
    pub contention: usize,
}

/// A queue as seen by one scheduling round.
pub struct QueueSlot<'a> {
    pub queue: &'a mut BatchQueue,
    pub spec: &'a FunctionSpec,
    pub gpu: Option<GpuId>,
}

fn contention_of(view: &ContentionView, gpu: &Option<GpuId>) -> usize {
    gpu.as_ref().map_or(0, |g| view.running(g)) + 1
}

/// One scheduling round. Full or expired queues flush unconditionally; under
/// contention the remaining queues are visited in ascending deadline margin and
/// flushed when waiting one more tick would push the margin below the guard.
/// Every flush counts toward its GPU's contention for the rest of the round,
/// and each queue flushes at most once.
pub fn schedule_round(
    slots: &mut [QueueSlot<'_>],
    contention: &mut ContentionView,
    now: f64,
    policy: &BatchingPolicy,
) -> Vec<FlushDecision> {
    let mut out = Vec::new();
    let flush = |slot: &mut QueueSlot<'_>, contention: &mut ContentionView, reason| {
        let m = contention_of(contention, &slot.gpu);
        let waited = slot.queue.oldest_wait_ms(now);
        let requests = slot.queue.take_batch(slot.spec, policy);
        let margin = deadline_margin(slot.spec, requests.len(), waited, m);
        if let Some(g) = &slot.gpu {
            contention.add(g);
        }
        FlushDecision {
            function: slot.queue.function.clone(),
            gpu: slot.gpu.clone(),
            requests,
            reason,
            margin_ms: margin,
            contention: m,
        }
    };

    let mut flushed = vec![false; slots.len()];
    for (i, slot) in slots.iter_mut().enumerate() {
        if slot.queue.is_empty() {
            continue;
        }
        if slot.queue.len() >= slot.queue.max_batch() {
            out.push(flush(slot, contention, FlushReason::Full));
            flushed[i] = true;
        } else if slot.queue.expire_deadline().is_some_and(|d| d <= now) {
            out.push(flush(slot, contention, FlushReason::Expired));
            flushed[i] = true;
        }
    }

    let BatchingPolicy::Adaptive { tick_ms, guard } = policy else {
        return out;
    };
    let mut remaining: Vec<usize> = (0..slots.len())
        .filter(|&i| !flushed[i] && !slots[i].queue.is_empty())
        .collect();
    loop {
        // Contention-aware pass: only queues that would share a GPU matter.
        let mut best: Option<(usize, f64)> = None;
        for &i in &remaining {
            let slot = &slots[i];
            let m = contention_of(contention, &slot.gpu);
            if m < 2 {
                continue;
            }
            let b = slot.queue.len().min(slot.queue.max_batch());
            let margin = deadline_margin(slot.spec, b, slot.queue.oldest_wait_ms(now), m);
            if best.map_or(true, |(_, bm)| margin < bm) {
                best = Some((i, margin));
            }
        }
        let Some((i, margin)) = best else { break };
        let threshold = guard.threshold(slots[i].spec);
        if margin < 0.0 || margin - tick_ms < threshold {
            out.push(flush(&mut slots[i], contention, FlushReason::Margin));
            remaining.retain(|&j| j != i);
        } else {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::*;

    fn seven_b() -> FunctionSpec {
        let mut f = adapter("a1", "llama");
        f.prefill_base_ms = 500.0;
        f.prefill_marginal_ms = 100.0;
        f.slo_ttft_ms = 2500.0;
        f
    }

    #[test]
    fn ttft_law() {
        let f = seven_b();
        assert_eq!(predict_ttft(&f, 1).unwrap(), 500.0);
        assert_eq!(predict_ttft(&f, 5).unwrap(), 900.0);
        assert_eq!(predict_ttft(&f, 0), Err(BatchingError::ZeroBatch));
    }

    #[test]
    fn batch_caps() {
        let f = seven_b();
        assert_eq!(max_batch_size(&f, None), 21);
        assert_eq!(predict_ttft(&f, 21).unwrap(), 2500.0);
        let mut flat = seven_b();
        flat.prefill_marginal_ms = 0.0;
        assert_eq!(max_batch_size(&flat, None), usize::MAX);
        flat.kv_bytes_per_request = 512 * MB;
        assert_eq!(max_batch_size(&flat, Some(8 * 1024 * MB)), 16);
        let mut steep = seven_b();
        steep.prefill_marginal_ms = 5000.0;
        assert_eq!(max_batch_size(&steep, None), 1);
    }

    #[test]
    fn delays_and_margins() {
        let f = seven_b();
        assert_eq!(batch_delay(&f, 21), 0.0);
        assert_eq!(batch_delay(&f, 5), 1600.0);
        assert_eq!(batch_delay(&f, 1), 2000.0);
        assert_eq!(deadline_margin(&f, 1, 0.0, 1), 2000.0);
        assert_eq!(deadline_margin(&f, 5, 300.0, 2), 400.0);
        assert_eq!(deadline_margin(&f, 5, 800.0, 2), -100.0);
    }

    #[test]
    fn deadline_only_moves_earlier() {
        let f = seven_b();
        let policy = BatchingPolicy::default();
        let mut q = BatchQueue::new(f.id.clone(), 21);
        q.push(1, 0.0, &f, &policy);
        assert_eq!(q.expire_deadline(), Some(2000.0));
        q.push(2, 100.0, &f, &policy);
        assert_eq!(q.expire_deadline(), Some(1900.0));
        let batch = q.take_batch(&f, &policy);
        assert_eq!(batch.len(), 2);
        assert_eq!(q.expire_deadline(), None);
    }

    #[test]
    fn full_and_expired_queues_flush() {
        let f = seven_b();
        let policy = BatchingPolicy::default();
        let mut q = BatchQueue::new(f.id.clone(), 2);
        q.push(1, 0.0, &f, &policy);
        q.push(2, 0.0, &f, &policy);
        let mut view = ContentionView::new();
        let mut slots = [QueueSlot { queue: &mut q, spec: &f, gpu: Some("g1".into()) }];
        let out = schedule_round(&mut slots, &mut view, 0.0, &policy);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].reason, FlushReason::Full);
        assert_eq!(view.running(&"g1".into()), 1);

        let mut q = BatchQueue::new(f.id.clone(), 21);
        q.push(7, 0.0, &f, &policy);
        let mut slots = [QueueSlot { queue: &mut q, spec: &f, gpu: Some("g1".into()) }];
        let mut view = ContentionView::new();
        assert!(schedule_round(&mut slots, &mut view, 1990.0, &policy).is_empty());
        let out = schedule_round(&mut slots, &mut view, 2000.0, &policy);
        assert_eq!(out[0].reason, FlushReason::Expired);
        assert_eq!(out[0].requests.len(), 1);
    }

    #[test]
    fn tight_margin_flushes_first_under_contention() {
        // Queue 1 has waited long enough that its margin is 50 ms; queue 2 has 1500 ms.
        let f1 = seven_b();
        let mut f2 = seven_b();
        f2.id = "a2".into();
        let policy = BatchingPolicy::Adaptive { tick_ms: 100.0, guard: Guard::FixedMs(100.0) };
        // With M=2 and b=1: margin = 2500 - (w + 1000); w1 = 1450 -> 50, w2 = 0 -> 1500.
        let mut q1 = BatchQueue::new(f1.id.clone(), 21);
        q1.push(1, 0.0, &f1, &policy);
        let mut q2 = BatchQueue::new(f2.id.clone(), 21);
        q2.push(2, 1450.0, &f2, &policy);
        let mut view = ContentionView::new();
        view.set("g1".into(), 1);
        let mut slots = [
            QueueSlot { queue: &mut q1, spec: &f1, gpu: Some("g1".into()) },
            QueueSlot { queue: &mut q2, spec: &f2, gpu: Some("g1".into()) },
        ];
        let out = schedule_round(&mut slots, &mut view, 1450.0, &policy);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].function, FunctionId::from("a1"));
        assert_eq!(out[0].reason, FlushReason::Margin);
        assert_eq!(out[0].margin_ms, 50.0);
        assert_eq!(q2.len(), 1);
    }

    #[test]
    fn no_contention_means_plain_fill_or_expire() {
        let f = seven_b();
        let policy = BatchingPolicy::default();
        let mut q = BatchQueue::new(f.id.clone(), 21);
        q.push(1, 0.0, &f, &policy);
        let mut view = ContentionView::new();
        let mut slots = [QueueSlot { queue: &mut q, spec: &f, gpu: Some("g1".into()) }];
        // margin would be 10 ms here but nothing else shares the GPU
        assert!(schedule_round(&mut slots, &mut view, 1990.0, &policy).is_empty());
    }

    #[test]
    fn fixed_policy_uses_constant_delay() {
        let f = seven_b();
        let policy = BatchingPolicy::Fixed { size: 10, delay_ms: 500.0, tick_ms: 10.0 };
        let mut q = BatchQueue::new(f.id.clone(), policy.size_cap(&f, None));
        assert_eq!(q.max_batch(), 10);
        q.push(1, 0.0, &f, &policy);
        q.push(2, 300.0, &f, &policy);
        assert_eq!(q.expire_deadline(), Some(500.0));
    }
}
