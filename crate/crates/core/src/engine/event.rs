use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use crate::domain::{FunctionId, GpuId};

/// Same-time events are processed in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    RequestArrival,
    SchedulerTick,
    BatchDispatch,
    PrefillComplete,
    RequestComplete,
    PreloadComplete,
    EvictionComplete,
    KeepAliveExpire,
    ReplanTimer,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::RequestArrival => "arrival",
            EventKind::SchedulerTick => "tick",
            EventKind::BatchDispatch => "dispatch",
            EventKind::PrefillComplete => "prefill_done",
            EventKind::RequestComplete => "request_done",
            EventKind::PreloadComplete => "load_done",
            EventKind::EvictionComplete => "eviction_done",
            EventKind::KeepAliveExpire => "keep_alive_expire",
            EventKind::ReplanTimer => "replan",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Request(usize),
    Tick,
    Batch(u64),
    /// Executor wake-up, valid only if the GPU's epoch still matches.
    Exec { gpu: GpuId, epoch: u64 },
    Load { function: FunctionId, gpu: GpuId },
    Eviction { gpu: GpuId, bytes: u64 },
    KeepAlive { function: FunctionId, generation: u64 },
    Replan,
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time_ms: f64,
    pub kind: EventKind,
    pub seq: u64,
    pub payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time_ms
            .total_cmp(&self.time_ms)
            .then(other.kind.cmp(&self.kind))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_ms: f64, kind: EventKind, payload: Payload) {
        self.seq += 1;
        self.heap.push(Event {
            time_ms,
            kind,
            seq: self.seq,
            payload,
        });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time_ms)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_kind_then_sequence() {
        let mut q = EventQueue::new();
        q.push(5.0, EventKind::ReplanTimer, Payload::Replan);
        q.push(5.0, EventKind::RequestArrival, Payload::Request(2));
        q.push(1.0, EventKind::KeepAliveExpire, Payload::Tick);
        q.push(5.0, EventKind::RequestArrival, Payload::Request(3));
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.time_ms, e.kind, e.payload)).collect();
        assert_eq!(
            order,
            [
                (1.0, EventKind::KeepAliveExpire, Payload::Tick),
                (5.0, EventKind::RequestArrival, Payload::Request(2)),
                (5.0, EventKind::RequestArrival, Payload::Request(3)),
                (5.0, EventKind::ReplanTimer, Payload::Replan),
            ]
        );
    }
}
