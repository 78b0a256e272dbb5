//! Cell-partition rules and the three pretraining regimes.

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, CellId, LabelGrid, RateConfig, Sample, ZoneId};
use crate::error::{Error, Result};
use crate::learner::{adam_step, loss_and_grad, ModelSnapshot, OptimizerState, TrainingConfig};
use crate::rng;
use crate::world::{Daylight, WeatherKind, WorldState};

/// The six environment divisions. K is derived from the world shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    /// One cell per agent (independent single-stream adaptation).
    Baseline,
    /// A single shared cell.
    Common,
    /// One cell per zone.
    Spatial,
    /// Clear / rain / fog.
    Weather,
    /// Day / night.
    Daylight,
    /// Every (zone, weather, daylight) combination.
    Specific,
}

pub const ALL_PARTITIONS: [PartitionKind; 6] = [
    PartitionKind::Baseline,
    PartitionKind::Common,
    PartitionKind::Spatial,
    PartitionKind::Weather,
    PartitionKind::Daylight,
    PartitionKind::Specific,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPartition {
    pub kind: PartitionKind,
    pub agents: usize,
    pub zones: usize,
}

/// Everything a partition rule may look at when assigning a cell.
#[derive(Clone, Copy, Debug)]
pub struct CellContext {
    pub agent: AgentId,
    pub zone: ZoneId,
    pub weather: WeatherKind,
    pub daylight: Daylight,
}

impl CellPartition {
    pub fn new(kind: PartitionKind, agents: usize, zones: usize) -> Self {
        Self { kind, agents, zones }
    }

    pub fn cell_count(&self) -> usize {
        match self.kind {
            PartitionKind::Baseline => self.agents,
            PartitionKind::Common => 1,
            PartitionKind::Spatial => self.zones,
            PartitionKind::Weather => 3,
            PartitionKind::Daylight => 2,
            PartitionKind::Specific => self.zones * 6,
        }
    }

    /// Pure, total mapping from context to cell id.
    pub fn cell_of(&self, ctx: CellContext) -> CellId {
        match self.kind {
            PartitionKind::Baseline => ctx.agent,
            PartitionKind::Common => 0,
            PartitionKind::Spatial => ctx.zone,
            PartitionKind::Weather => ctx.weather.index(),
            PartitionKind::Daylight => ctx.daylight.index(),
            PartitionKind::Specific => ctx.zone * 6 + ctx.weather.index() * 2 + ctx.daylight.index(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    Scratch,
    General,
    Cell,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub mode: PretrainMode,
    /// Train fraction of the 90-10 split.
    pub split: f64,
    pub general_epochs: usize,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            mode: PretrainMode::General,
            split: 0.9,
            general_epochs: 3,
        }
    }
}

impl PretrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::config("pretrain split must be in (0, 1)"));
        }
        if self.mode != PretrainMode::Scratch && self.general_epochs == 0 {
            return Err(Error::config("pretraining needs at least one epoch"));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct PretrainBucket {
    pub train: Vec<(Sample, LabelGrid)>,
    pub val: Vec<(Sample, LabelGrid)>,
}

#[derive(Debug)]
pub struct PretrainSets {
    pub buckets: Vec<PretrainBucket>,
}

impl PretrainSets {
    pub fn total_train(&self) -> usize {
        self.buckets.iter().map(|b| b.train.len()).sum()
    }
}

/// Collect every active agent's stream-rate samples with ground-truth labels
/// over [0, duration), bucketed by the cell each sample was observed in, and
/// split 90-10 into train/validation by a deterministic hash of (agent, time).
pub fn build_pretraining_set(
    world: &WorldState,
    partition: &CellPartition,
    rates: &RateConfig,
    duration: f64,
    split: f64,
) -> Result<PretrainSets> {
    if duration > world.horizon() {
        return Err(Error::config("pretraining duration exceeds the horizon"));
    }
    let mut buckets: Vec<PretrainBucket> = (0..partition.cell_count()).map(|_| PretrainBucket::default()).collect();
    let tick_s = rates.tick_seconds();
    let n_ticks = (duration / tick_s).floor() as u64;
    for tick in 0..n_ticks {
        let t = tick as f64 * tick_s;
        let weather = world.weather_at(t)?;
        for agent in 0..world.cfg.agents {
            let Some(sample) = world.sample_at(agent, t)? else {
                continue;
            };
            let zone = world.zone_of(agent, t)?;
            let ctx = CellContext {
                agent,
                zone,
                weather: weather.dominant(),
                daylight: weather.daylight(),
            };
            let cell = partition.cell_of(ctx);
            let truth = LabelGrid(sample.truth.clone());
            let h = rng::mix(world.cfg.seed, rng::domain::SPLIT, agent as u64, rng::time_key(t), 0);
            let bucket = &mut buckets[cell];
            if (h % 1_000_000) as f64 / 1_000_000.0 < split {
                bucket.train.push((sample, truth));
            } else {
                bucket.val.push((sample, truth));
            }
        }
    }
    Ok(PretrainSets { buckets })
}

fn mean_loss(model: &ModelSnapshot, items: &[(Sample, LabelGrid)]) -> Result<f64> {
    let refs: Vec<(&Sample, &LabelGrid)> = items.iter().map(|(s, l)| (s, l)).collect();
    Ok(loss_and_grad(model, &refs)?.0)
}

/// Train `epochs` over `train` in insertion order with the same batching as
/// the slow route. When a validation set exists, the epoch checkpoint with
/// the lowest validation loss is returned.
fn train_epochs(
    train: &[(&Sample, &LabelGrid)],
    val: &[(Sample, LabelGrid)],
    epochs: usize,
    cfg: &TrainingConfig,
    classes: usize,
    dim: usize,
) -> Result<ModelSnapshot> {
    let mut model = ModelSnapshot::zeros(classes, dim);
    let mut opt = OptimizerState::zeros(classes, dim);
    let mut best: Option<(f64, ModelSnapshot)> = None;
    for _ in 0..epochs {
        for batch in train.chunks(cfg.batch_size) {
            let (_, grads) = loss_and_grad(&model, batch)?;
            adam_step(&mut model, &mut opt, &grads, cfg, usize::MAX)?;
        }
        if !val.is_empty() {
            let vloss = mean_loss(&model, val)?;
            if best.as_ref().map_or(true, |(b, _)| vloss < *b) {
                best = Some((vloss, model.clone()));
            }
        }
    }
    Ok(best.map(|(_, m)| m).unwrap_or(model))
}

/// Produce the per-cell initial snapshots for one pretraining regime.
///
/// Scratch: zero weights everywhere. General: one pooled model copied to all
/// cells. Cell: per-cell models with epochs scaled so the summed backward
/// pass budget matches General's; empty cells fall back to the General model.
pub fn pretrain(
    spec: &PretrainSpec,
    sets: &PretrainSets,
    cfg: &TrainingConfig,
    classes: usize,
    dim: usize,
) -> Result<Vec<ModelSnapshot>> {
    spec.validate()?;
    let k = sets.buckets.len();
    if spec.mode == PretrainMode::Scratch {
        return Ok(vec![ModelSnapshot::zeros(classes, dim); k]);
    }
    let n_total = sets.total_train();
    if n_total == 0 {
        return Err(Error::config("pretraining requires a nonempty training set"));
    }
    let pooled: Vec<(&Sample, &LabelGrid)> = sets
        .buckets
        .iter()
        .flat_map(|b| b.train.iter().map(|(s, l)| (s, l)))
        .collect();
    let pooled_val: Vec<(Sample, LabelGrid)> = sets
        .buckets
        .iter()
        .flat_map(|b| b.val.iter().cloned())
        .collect();
    let general = train_epochs(&pooled, &pooled_val, spec.general_epochs, cfg, classes, dim)?;
    match spec.mode {
        PretrainMode::Scratch => unreachable!(),
        PretrainMode::General => Ok(vec![general; k]),
        PretrainMode::Cell => {
            let mut models = Vec::with_capacity(k);
            for bucket in &sets.buckets {
                let n_k = bucket.train.len();
                if n_k == 0 {
                    models.push(general.clone());
                    continue;
                }
                // Equal backward-pass share per cell:
                // epochs_k = max(1, round(E * N_total / (K * N_k))).
                let epochs_k = ((spec.general_epochs as f64 * n_total as f64) / (k as f64 * n_k as f64))
                    .round()
                    .max(1.0) as usize;
                let train: Vec<(&Sample, &LabelGrid)> = bucket.train.iter().map(|(s, l)| (s, l)).collect();
                models.push(train_epochs(&train, &bucket.val, epochs_k, cfg, classes, dim)?);
            }
            Ok(models)
        }
    }
}
