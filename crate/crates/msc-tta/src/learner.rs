//! The lightweight student model (per-pixel softmax classifier), its exact
//! loss/gradient, the Adam optimizer, and the noisy teacher oracle.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassId, LabelGrid, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, keyed_rng, time_key};
use crate::world::{Daylight, WeatherState};

/// A versioned student parameter set: logits = W x + b per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub classes: usize,
    pub dim: usize,
    /// Row-major C x d weight matrix.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub version: u64,
}

impl ModelSnapshot {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
            version: 0,
        }
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for c in 0..self.classes {
            let row = &self.w[c * self.dim..(c + 1) * self.dim];
            let mut acc = self.b[c];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            out[c] = acc;
        }
    }

    /// Per-pixel argmax of W x + b; ties break toward the lowest class id.
    pub fn predict(&self, sample: &Sample) -> Result<LabelGrid> {
        if sample.dim != self.dim {
            return Err(Error::contract(format!(
                "feature dimension mismatch: sample {} vs model {}",
                sample.dim, self.dim
            )));
        }
        let mut scores = vec![0.0; self.classes];
        let mut labels = Vec::with_capacity(sample.pixels);
        for p in 0..sample.pixels {
            self.logits(sample.pixel(p), &mut scores);
            let mut best = 0usize;
            for c in 1..self.classes {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            labels.push(best);
        }
        Ok(LabelGrid(labels))
    }

    /// Checkpoint format: (C, d) as u32 LE, version as u64 LE, then
    /// C*d + C little-endian f64 values (W row-major, then b).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        for v in self.w.iter().chain(self.b.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let classes = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let version = u64::from_le_bytes(u64buf);
        let n = classes * dim + classes;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            values.push(f64::from_le_bytes(u64buf));
        }
        let b = values.split_off(classes * dim);
        Ok(Self {
            classes,
            dim,
            w: values,
            b,
            version,
        })
    }
}

/// Gradients shaped like (W, b).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// Mean softmax cross-entropy over every pixel of the batch, with the exact
/// analytic gradient averaged the same way.
pub fn loss_and_grad(model: &ModelSnapshot, batch: &[(&Sample, &LabelGrid)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::contract("loss_and_grad on an empty batch"));
    }
    let c = model.classes;
    let d = model.dim;
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    let mut loss = 0.0;
    let mut n_pixels = 0usize;
    let mut scores = vec![0.0; c];
    for (sample, labels) in batch {
        if labels.len() != sample.pixels {
            return Err(Error::contract("label grid does not match sample pixel count"));
        }
        if sample.dim != d {
            return Err(Error::contract("feature dimension mismatch in batch"));
        }
        for p in 0..sample.pixels {
            let x = sample.pixel(p);
            let y = labels.0[p];
            if y >= c {
                return Err(Error::contract(format!("label {y} out of range for {c} classes")));
            }
            model.logits(x, &mut scores);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            loss += -(scores[y] / z).ln();
            for k in 0..c {
                let prob = scores[k] / z;
                let err = prob - if k == y { 1.0 } else { 0.0 };
                gb[k] += err;
                let row = &mut gw[k * d..(k + 1) * d];
                for (gi, xi) in row.iter_mut().zip(x.iter()) {
                    *gi += err * xi;
                }
            }
            n_pixels += 1;
        }
    }
    let inv = 1.0 / n_pixels as f64;
    for g in gw.iter_mut().chain(gb.iter_mut()) {
        *g *= inv;
    }
    Ok((loss * inv, Gradients { w: gw, b: gb }))
}

/// Adam first/second moment accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            m_w: vec![0.0; classes * dim],
            v_w: vec![0.0; classes * dim],
            m_b: vec![0.0; classes],
            v_b: vec![0.0; classes],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 25,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// One Adam update with bias correction. `cell` only labels training faults.
pub fn adam_step(
    model: &mut ModelSnapshot,
    opt: &mut OptimizerState,
    grads: &Gradients,
    cfg: &TrainingConfig,
    cell: usize,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::TrainingFault {
            cell,
            detail: "non-finite gradients".into(),
        });
    }
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    };
    update(&mut model.w, &mut opt.m_w, &mut opt.v_w, &grads.w);
    update(&mut model.b, &mut opt.m_b, &mut opt.v_b, &grads.b);
    Ok(())
}

/// A tunable label-noise oracle standing in for the frozen teacher network.
/// Pixel labels are kept with probability 1 - eta and otherwise replaced by
/// a uniformly random other class; eta rises at night.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherOracle {
    pub base_error: f64,
    pub night_penalty: f64,
    pub key: u64,
}

impl Default for TeacherOracle {
    fn default() -> Self {
        Self {
            base_error: 0.15,
            night_penalty: 0.15,
            key: 0,
        }
    }
}

pub const TEACHER_ERROR_CAP: f64 = 0.9;

impl TeacherOracle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.base_error) || self.night_penalty < 0.0 {
            return Err(Error::config("teacher error rates out of range"));
        }
        Ok(())
    }

    pub fn effective_error(&self, daylight: Daylight) -> f64 {
        let eta = match daylight {
            Daylight::Day => self.base_error,
            Daylight::Night => self.base_error + self.night_penalty,
        };
        eta.min(TEACHER_ERROR_CAP)
    }

    /// Pseudo labels for one sample; deterministic in (key, agent, time, pixel).
    pub fn label(&self, sample: &Sample, weather: &WeatherState, classes: usize) -> LabelGrid {
        let eta = self.effective_error(weather.daylight());
        let tkey = time_key(sample.time.seconds());
        let labels = sample
            .truth
            .iter()
            .enumerate()
            .map(|(pixel, &truth)| {
                let mut prng = keyed_rng(self.key, rng::domain::TEACHER, sample.agent as u64, tkey, pixel as u64);
                if prng.gen_range(0.0..1.0f64) < eta {
                    let other = prng.gen_range(0..classes - 1);
                    if other >= truth {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    truth
                }
            })
            .collect::<Vec<ClassId>>();
        LabelGrid(labels)
    }
}
