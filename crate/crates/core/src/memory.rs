//! Dual FIFO frame memories feeding the streaming transformer.
//!
//! New frames enter the work memory; once it is full, the oldest work
//! frame migrates into the long memory, which in turn discards its own
//! oldest frame when full. Snapshots expose both queues as fixed-size
//! slot arrays with validity masks, newest slot first, which is also the
//! indexing scheme of the model's positional embeddings.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// One time step of concatenated per-camera feature blocks
/// (front | rear | cabin), each `feature_dim` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
    pub timestamp: usize,
}

impl FeatureFrame {
    pub fn new(values: Vec<f64>, timestamp: usize) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FeatureFrame { values, timestamp }
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }
}

/// Sizes of the two memories, given in seconds of stream at `fps`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub fps: u32,
    pub work_seconds: f64,
    pub long_seconds: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            fps: 4,
            work_seconds: 3.0,
            long_seconds: 12.0,
        }
    }
}

impl MemoryConfig {
    /// Work-memory slot count `m_s = fps * work_seconds`.
    pub fn work_slots(&self) -> usize {
        ((self.fps as f64 * self.work_seconds).round() as usize).max(1)
    }

    /// Long-memory slot count `m_l = fps * long_seconds`.
    pub fn long_slots(&self) -> usize {
        ((self.fps as f64 * self.long_seconds).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 || self.work_seconds <= 0.0 || self.long_seconds <= 0.0 {
            return Err(Error::InvalidConfig(
                "fps and memory lengths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-size view of one memory: `slots[0]` is the newest frame's
/// values; invalid slots are zero-padded with `mask[i] == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryView {
    pub width: usize,
    pub slots: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl MemoryView {
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid slots as `(slot age, values)`, age 0 = newest.
    pub fn valid(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask[*i])
            .map(|(i, v)| (i, v.as_slice()))
    }
}

/// The two bounded FIFO queues, oldest-to-newest.
#[derive(Debug, Clone)]
pub struct MemoryState {
    config: MemoryConfig,
    width: usize,
    work: VecDeque<FeatureFrame>,
    long: VecDeque<FeatureFrame>,
}

impl MemoryState {
    pub fn new(config: MemoryConfig, frame_width: usize) -> Self {
        MemoryState {
            config,
            width: frame_width,
            work: VecDeque::new(),
            long: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn frame_width(&self) -> usize {
        self.width
    }

    pub fn work_len(&self) -> usize {
        self.work.len()
    }

    pub fn long_len(&self) -> usize {
        self.long.len()
    }

    /// Oldest-to-newest timestamps, long memory then work memory.
    pub fn timestamps(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.long.iter().map(|f| f.timestamp).collect(),
            self.work.iter().map(|f| f.timestamp).collect(),
        )
    }

    /// Appends a frame; overflow migrates work -> long -> discard.
    pub fn push_frame(&mut self, frame: FeatureFrame) -> Result<()> {
        if frame.width() != self.width {
            return Err(Error::shapes("push_frame", &[self.width], &[frame.width()]));
        }
        self.work.push_back(frame);
        if self.work.len() > self.config.work_slots() {
            let evicted = self.work.pop_front().expect("work nonempty");
            self.long.push_back(evicted);
            if self.long.len() > self.config.long_slots() {
                self.long.pop_front();
            }
        }
        Ok(())
    }

    /// Fixed-size `(long view, work view)` with newest-first slots.
    pub fn snapshot(&self) -> (MemoryView, MemoryView) {
        (
            view_of(&self.long, self.config.long_slots(), self.width),
            view_of(&self.work, self.config.work_slots(), self.width),
        )
    }

    /// Empties both queues (sequence boundary).
    pub fn reset(&mut self) {
        self.work.clear();
        self.long.clear();
    }
}

fn view_of(queue: &VecDeque<FeatureFrame>, capacity: usize, width: usize) -> MemoryView {
    let mut slots = vec![vec![0.0; width]; capacity];
    let mut mask = vec![false; capacity];
    // queue is oldest->newest; slot 0 is newest
    for (age, frame) in queue.iter().rev().enumerate() {
        slots[age] = frame.values.clone();
        mask[age] = true;
    }
    MemoryView { width, slots, mask }
}
