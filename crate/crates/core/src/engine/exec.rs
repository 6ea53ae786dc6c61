//! Processor-sharing execution of batches on one GPU: with M batches active,
//! each progresses at rate 1/M through prefill and decode.

use crate::domain::FunctionId;

const EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BatchJob {
    pub id: u64,
    pub function: FunctionId,
    prefill_work: f64,
    /// (request index, work at which it completes), ascending.
    finishes: Vec<(usize, f64)>,
    done: f64,
    prefilled: bool,
    next_finish: usize,
}

impl BatchJob {
    /// `outputs` pairs each request with its output length in tokens.
    pub fn new(id: u64, function: FunctionId, prefill_ms: f64, decode_ms_per_token: f64, outputs: &[(usize, u32)]) -> Self {
        let mut finishes: Vec<(usize, f64)> = outputs
            .iter()
            .map(|&(r, o)| (r, prefill_ms + o.saturating_sub(1) as f64 * decode_ms_per_token))
            .collect();
        finishes.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Self {
            id,
            function,
            prefill_work: prefill_ms,
            finishes,
            done: 0.0,
            prefilled: false,
            next_finish: 0,
        }
    }

    fn next_milestone(&self) -> Option<(f64, bool)> {
        if !self.prefilled {
            return Some((self.prefill_work, true));
        }
        self.finishes.get(self.next_finish).map(|&(_, w)| (w, false))
    }

    fn is_finished(&self) -> bool {
        self.prefilled && self.next_finish >= self.finishes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Milestone {
    Prefill { batch: u64, function: FunctionId },
    RequestDone { batch: u64, request: usize },
    BatchDone { batch: u64, function: FunctionId },
}

#[derive(Debug, Clone, Default)]
pub struct GpuExecutor {
    batches: Vec<BatchJob>,
    last_ms: f64,
    epoch: u64,
}

impl GpuExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active(&self) -> usize {
        self.batches.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn runs(&self, function: &FunctionId) -> bool {
        self.batches.iter().any(|b| &b.function == function)
    }

    pub fn advance(&mut self, now: f64) {
        if !self.batches.is_empty() && now > self.last_ms {
            let share = (now - self.last_ms) / self.batches.len() as f64;
            for b in &mut self.batches {
                b.done += share;
            }
        }
        self.last_ms = self.last_ms.max(now);
    }

    pub fn add(&mut self, now: f64, job: BatchJob) {
        self.advance(now);
        self.batches.push(job);
        self.epoch += 1;
    }

    /// Advances to `now` and returns every milestone reached.
    pub fn collect(&mut self, now: f64) -> Vec<Milestone> {
        self.advance(now);
        let mut out = Vec::new();
        for b in &mut self.batches {
            while let Some((work, is_prefill)) = b.next_milestone() {
                if work > b.done + EPS {
                    break;
                }
                if is_prefill {
                    b.prefilled = true;
                    out.push(Milestone::Prefill {
                        batch: b.id,
                        function: b.function.clone(),
                    });
                } else {
                    out.push(Milestone::RequestDone {
                        batch: b.id,
                        request: b.finishes[b.next_finish].0,
                    });
                    b.next_finish += 1;
                }
            }
            if b.is_finished() {
                out.push(Milestone::BatchDone {
                    batch: b.id,
                    function: b.function.clone(),
                });
            }
        }
        if !out.is_empty() {
            self.batches.retain(|b| !b.is_finished());
            self.epoch += 1;
        }
        out
    }

    /// Time of the next milestone and whether it is a prefill completion.
    pub fn next_event(&self) -> Option<(f64, bool)> {
        let m = self.batches.len() as f64;
        self.batches
            .iter()
            .filter_map(|b| b.next_milestone().map(|(w, p)| (self.last_ms + (w - b.done).max(0.0) * m, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
    }
}
