//! Shared domain types and the confusion-matrix / mIoU primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AgentId = usize;
pub type CellId = usize;
pub type ZoneId = usize;
pub type ClassId = usize;

/// Simulation time in seconds since t = 0.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub fn seconds(self) -> f64 {
        self.0
    }
}

/// One agent observation: P feature vectors with hidden ground-truth labels.
///
/// Features are stored row-major, `pixels * dim` values. The `truth` labels
/// are simulation-internal and must not leak into the adaptation path.
#[derive(Clone, Debug)]
pub struct Sample {
    pub agent: AgentId,
    pub time: Timestamp,
    pub pixels: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub truth: Vec<ClassId>,
}

impl Sample {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-pixel class labels for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid(pub Vec<ClassId>);

impl LabelGrid {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// C x C integer counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::contract(format!(
                "confusion matrix needs {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, truth: ClassId, predicted: ClassId) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// Row-major counts, the serialization used in run logs.
    pub fn counts_row_major(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Score one prediction against the truth, incrementing one count per pixel.
    pub fn update(&mut self, predicted: &LabelGrid, truth: &LabelGrid) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::contract(format!(
                "label grid length mismatch: predicted {} vs truth {}",
                predicted.len(),
                truth.len()
            )));
        }
        for (&p, &t) in predicted.0.iter().zip(truth.0.iter()) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::contract(format!(
                    "class id out of range: predicted {p}, truth {t}, classes {}",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; scoring a partition of pixels and merging equals
    /// scoring the whole set.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    pub fn unmerge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a -= b;
        }
    }

    /// Mean IoU over classes with nonzero union. Classes absent from both
    /// predictions and ground truth are excluded from the mean.
    pub fn miou(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.classes {
            let tp = self.at(c, c);
            let row: u64 = (0..self.classes).map(|j| self.at(c, j)).sum();
            let col: u64 = (0..self.classes).map(|i| self.at(i, c)).sum();
            let union = row + col - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::UndefinedMetric(
                "mIoU of an all-zero confusion matrix".into(),
            ));
        }
        Ok(sum / n as f64)
    }
}

/// Stream, teacher, and broadcast rates. The stream rate is given in Hz; the
/// teacher and student rates are expressed as integer strides on the stream
/// tick grid so that 1/3 Hz and 1/30 Hz are exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    /// f_D in Hz.
    pub stream_hz: f64,
    /// f_D / f_T: one teacher upload every this many stream ticks.
    pub teacher_every: u64,
    /// f_D / f_S: one student training/broadcast every this many stream ticks.
    pub student_every: u64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            stream_hz: 1.0,
            teacher_every: 3,
            student_every: 30,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stream_hz > 0.0) {
            return Err(Error::config("stream_hz must be positive"));
        }
        if self.teacher_every == 0 || self.student_every == 0 {
            return Err(Error::config("rate strides must be positive"));
        }
        if self.student_every % self.teacher_every != 0 {
            return Err(Error::config(
                "student_every must be a multiple of teacher_every (f_T/f_S integer)",
            ));
        }
        Ok(())
    }

    pub fn tick_seconds(&self) -> f64 {
        1.0 / self.stream_hz
    }

    pub fn teacher_hz(&self) -> f64 {
        self.stream_hz / self.teacher_every as f64
    }

    pub fn student_hz(&self) -> f64 {
        self.stream_hz / self.student_every as f64
    }
}
