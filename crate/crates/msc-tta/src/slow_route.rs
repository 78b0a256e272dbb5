//! Per-cell adaptation engine: FIFO replay buffer, pseudo-labeled ingestion
//! at the teacher rate, and one-epoch training with broadcast at the student
//! rate when new samples arrived.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::domain::{CellId, LabelGrid, Sample, Timestamp};
use crate::error::Result;
use crate::learner::{adam_step, loss_and_grad, ModelSnapshot, OptimizerState, TeacherOracle, TrainingConfig};
use crate::world::WeatherState;

pub const DEFAULT_BUFFER_CAPACITY: usize = 100;

/// Which labels are stored next to the buffered samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Teacher pseudo labels (MSC-TTA).
    Tta,
    /// Ground-truth labels, the online-learning upper bound (MSC-OL).
    Ol,
}

#[derive(Clone, Debug)]
pub struct BufferItem {
    pub sample: Sample,
    pub labels: LabelGrid,
    pub inserted_at: Timestamp,
}

/// FIFO replay buffer of size R; oldest entries evicted first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<BufferItem>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: BufferItem) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn iter(&self) -> impl Iterator<Item = &BufferItem> {
        self.items.iter()
    }
}

/// Result of a training tick that actually trained.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub snapshot: ModelSnapshot,
    pub steps: usize,
    pub mean_loss: f64,
    pub buffer_len: usize,
}

/// Per-cell slow-route state.
#[derive(Clone, Debug)]
pub struct CellState {
    pub cell: CellId,
    pub buffer: ReplayBuffer,
    pub student: ModelSnapshot,
    pub opt: OptimizerState,
    pub has_new_samples: bool,
    pub last_trained_at: Timestamp,
}

impl CellState {
    pub fn new(cell: CellId, student: ModelSnapshot, buffer_capacity: usize) -> Self {
        let opt = OptimizerState::zeros(student.classes, student.dim);
        Self {
            cell,
            buffer: ReplayBuffer::new(buffer_capacity),
            student,
            opt,
            has_new_samples: false,
            last_trained_at: Timestamp(0.0),
        }
    }

    /// Label and buffer this tick's arrivals. Simultaneous arrivals are
    /// inserted in ascending agent id; an empty tick is a no-op.
    pub fn ingest_tick(
        &mut self,
        mut arrivals: Vec<Sample>,
        weather: &WeatherState,
        teacher: &TeacherOracle,
        mode: LabelMode,
        classes: usize,
    ) {
        if arrivals.is_empty() {
            return;
        }
        arrivals.sort_by_key(|s| s.agent);
        for sample in arrivals {
            let labels = match mode {
                LabelMode::Tta => teacher.label(&sample, weather, classes),
                LabelMode::Ol => LabelGrid(sample.truth.clone()),
            };
            let inserted_at = sample.time;
            self.buffer.push(BufferItem {
                sample,
                labels,
                inserted_at,
            });
        }
        self.has_new_samples = true;
    }

    /// One epoch over the buffer in insertion order, in consecutive batches
    /// of the configured size (final partial batch included), then broadcast.
    /// Skipped entirely unless new samples arrived since the last epoch.
    pub fn train_tick(&mut self, now: Timestamp, cfg: &TrainingConfig) -> Result<Option<TrainOutcome>> {
        if !self.has_new_samples || self.buffer.is_empty() {
            return Ok(None);
        }
        let items: Vec<(&Sample, &LabelGrid)> = self.buffer.iter().map(|it| (&it.sample, &it.labels)).collect();
        let mut steps = 0usize;
        let mut loss_sum = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_grad(&self.student, batch)?;
            adam_step(&mut self.student, &mut self.opt, &grads, cfg, self.cell)?;
            loss_sum += loss;
            steps += 1;
        }
        self.has_new_samples = false;
        self.last_trained_at = now;
        self.student.version += 1;
        Ok(Some(TrainOutcome {
            snapshot: self.student.clone(),
            steps,
            mean_loss: loss_sum / steps as f64,
            buffer_len: self.buffer.len(),
        }))
    }
}
