//! Cached action-chunk queue consumed one row per control tick.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkSource {
    EdgeCache,
    Cloud,
}

/// `k` consecutive joint-space commands produced by one inference call,
/// together with the per-step action distribution logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    /// Request sequence number that produced this chunk.
    pub seq: u64,
    /// Control tick at which the observation was captured.
    pub origin_step: u64,
    pub actions: Vec<Vec<f64>>,
    /// Per-row categorical logits; empty when the producer has none.
    pub logits: Vec<Vec<f64>>,
    pub source: ChunkSource,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.actions.first() else {
            return Err(RapidError::Config("action chunk must hold at least one row".into()));
        };
        let n = first.len();
        for row in &self.actions {
            if row.len() != n {
                return Err(RapidError::Dimension {
                    expected: n,
                    got: row.len(),
                });
            }
            if !row.iter().all(|x| x.is_finite()) {
                return Err(RapidError::NonFinite("action"));
            }
        }
        if !self.logits.is_empty() && self.logits.len() != self.actions.len() {
            return Err(RapidError::Dimension {
                expected: self.actions.len(),
                got: self.logits.len(),
            });
        }
        Ok(())
    }
}

/// What to command while waiting on an empty queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallPolicy {
    #[default]
    HoldLast,
    ZeroVelocity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedAction {
    pub chunk_seq: u64,
    pub row: usize,
    pub action: Vec<f64>,
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pop {
    Action(QueuedAction),
    /// Queue empty with a request outstanding; `hold` is the command to
    /// repeat (empty before the first action ever executed).
    Stall { hold: Vec<f64> },
    /// Queue empty and nothing in flight: the caller must dispatch.
    NeedsDispatch,
}

#[derive(Debug, Clone, Default)]
pub struct ActionQueue {
    pending: VecDeque<QueuedAction>,
    in_flight: Option<u64>,
    stall_policy: StallPolicy,
    last_action: Option<Vec<f64>>,
    stall_count: u64,
    enqueued: u64,
    executed: u64,
    discarded: u64,
    dropped_responses: u64,
}

impl ActionQueue {
    pub fn new(stall_policy: StallPolicy) -> Self {
        ActionQueue {
            stall_policy,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn in_flight(&self) -> Option<u64> {
        self.in_flight
    }

    /// Marks request `seq` as the one outstanding. A newer request
    /// supersedes an older one, whose response will then be dropped.
    pub fn mark_in_flight(&mut self, seq: u64) {
        self.in_flight = Some(seq);
    }

    /// Forgets the outstanding request (for example after a timeout).
    pub fn clear_in_flight(&mut self) {
        self.in_flight = None;
    }

    pub fn front(&self) -> Option<&QueuedAction> {
        self.pending.front()
    }

    pub fn pop_action(&mut self) -> Pop {
        if let Some(a) = self.pending.pop_front() {
            self.executed += 1;
            self.last_action = Some(a.action.clone());
            return Pop::Action(a);
        }
        if self.in_flight.is_none() {
            return Pop::NeedsDispatch;
        }
        self.stall_count += 1;
        let hold = match (&self.last_action, self.stall_policy) {
            (Some(a), StallPolicy::HoldLast) => a.clone(),
            (Some(a), StallPolicy::ZeroVelocity) => vec![0.0; a.len()],
            (None, _) => Vec::new(),
        };
        Pop::Stall { hold }
    }

    /// Discards every pending row and enqueues the chunk's rows. Returns the
    /// number of rows discarded.
    pub fn preempt_and_refill(&mut self, chunk: &ActionChunk) -> usize {
        let discarded = self.pending.len();
        self.discarded += discarded as u64;
        self.pending.clear();
        for (row, action) in chunk.actions.iter().enumerate() {
            self.pending.push_back(QueuedAction {
                chunk_seq: chunk.seq,
                row,
                action: action.clone(),
                logits: chunk.logits.get(row).cloned(),
            });
        }
        self.enqueued += chunk.actions.len() as u64;
        self.in_flight = None;
        discarded
    }

    /// Applies a response only if it answers the newest outstanding
    /// request. Returns the discarded row count, or `None` for a stale
    /// response.
    pub fn deliver(&mut self, chunk: &ActionChunk) -> Option<usize> {
        if self.in_flight == Some(chunk.seq) {
            Some(self.preempt_and_refill(chunk))
        } else {
            self.dropped_responses += 1;
            None
        }
    }

    pub fn stall_count(&self) -> u64 {
        self.stall_count
    }

    pub fn enqueued(&self) -> u64 {
        self.enqueued
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn dropped_responses(&self) -> u64 {
        self.dropped_responses
    }
}
