use std::collections::VecDeque;

use rand::Rng;
use serde::Serialize;

use crate::envs::{Observation, StateId};

/// Replay capacity used in every experiment.
pub const DEFAULT_CAPACITY: usize = 1000;

/// One experienced transition `(s, a, r_extr, r_intr, gamma, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub obs: Observation,
    pub action: usize,
    pub r_extr: f64,
    pub r_intr: f64,
    pub discount: f64,
    pub next_obs: Observation,
    pub state: StateId,
    pub next_state: StateId,
}

/// NDJSON view of a record for buffer dumps.
#[derive(Clone, Debug, Serialize)]
pub struct RecordDump<'a> {
    pub index: usize,
    pub state: StateId,
    pub action: usize,
    pub next_state: StateId,
    pub r_extr: f64,
    pub r_intr: f64,
    pub discount: f64,
    pub encoded_state: &'a [f64],
    pub encoded_next_state: &'a [f64],
}

/// FIFO ring of transition records; the oldest record is evicted once
/// `capacity` is reached.
#[derive(Clone, Debug)]
pub struct HistoryBuffer {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            records: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record, returning the evicted one when full.
    pub fn push(&mut self, record: TransitionRecord) -> Option<TransitionRecord> {
        let evicted = if self.records.len() == self.capacity {
            self.records.pop_front()
        } else {
            None
        };
        self.records.push_back(record);
        evicted
    }

    pub fn get(&self, i: usize) -> Option<&TransitionRecord> {
        self.records.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut TransitionRecord> {
        self.records.iter_mut()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&TransitionRecord> {
        if self.records.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.records[rng.random_range(0..self.records.len())])
            .collect()
    }

    pub fn mean_r_intr(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.r_intr).sum::<f64>() / self.records.len() as f64
    }
}
