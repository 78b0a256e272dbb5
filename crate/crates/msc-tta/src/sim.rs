//! The deterministic tick engine driving a full run: world sampling, fast
//! route, slow route, broadcasts, and logging.
//!
//! Tick-order contract: within one tick all predictions happen first, then
//! all cell ingestion (on teacher ticks), then all training and broadcasts
//! (on student ticks). Broadcast models become visible at the next tick;
//! model switches at cell transitions take effect before prediction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{CellId, ConfusionMatrix, LabelGrid, Sample, Timestamp, ZoneId};
use crate::error::Result;
use crate::eval::{summarize, RunSummary};
use crate::fast_route::{AgentState, CellModelView};
use crate::learner::{ModelSnapshot, TeacherOracle};
use crate::log::{
    BroadcastRecord, LogHeader, LogRecord, PredictionRecord, RunArtifacts, SnapshotRecord, TrainingRecord,
    TransitionRecord, TransitionScope,
};
use crate::scenarios::{build_pretraining_set, pretrain, CellContext, CellPartition, PretrainMode};
use crate::slow_route::{CellState, LabelMode};
use crate::world::{build_world, WorldState};

struct AgentTickOutput {
    sample: Sample,
    zone: ZoneId,
    cell: CellId,
    version: u64,
    cm: Vec<u64>,
    zone_from: Option<ZoneId>,
    cell_from: Option<CellId>,
}

/// Execute one full run: pretraining phase, then the adaptive test phase.
/// The result is a deterministic function of the configuration, including
/// when agents and cells are processed in parallel.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let world = build_world(&cfg.world)?;
    run_on_world(cfg, &world)
}

/// Like [`run`] but reusing an already-built world (the scenario grid shares
/// one world per seed so comparisons are paired).
pub fn run_on_world(cfg: &RunConfig, world: &WorldState) -> Result<RunArtifacts> {
    let classes = cfg.world.classes;
    let dim = cfg.world.feature_dim;
    let partition = CellPartition::new(cfg.partition, cfg.world.agents, cfg.world.zones);
    let k = partition.cell_count();

    // Phase 1: pretraining over [0, pretrain_duration).
    let pretrained: Vec<ModelSnapshot> = if cfg.pretrain.mode == PretrainMode::Scratch {
        vec![ModelSnapshot::zeros(classes, dim); k]
    } else {
        let sets = build_pretraining_set(world, &partition, &cfg.rates, cfg.pretrain_duration(), cfg.pretrain.split)?;
        pretrain(&cfg.pretrain, &sets, &cfg.training, classes, dim)?
    };

    let pretrained_map: BTreeMap<CellId, ModelSnapshot> =
        pretrained.iter().cloned().enumerate().collect();
    let mut current_models = pretrained_map.clone();
    let mut cell_states: Vec<CellState> = pretrained
        .iter()
        .enumerate()
        .map(|(cell, model)| CellState::new(cell, model.clone(), cfg.buffer_capacity))
        .collect();
    let mut agent_states: Vec<AgentState> = (0..cfg.world.agents).map(AgentState::new).collect();
    let mut prev_zones: Vec<Option<ZoneId>> = vec![None; cfg.world.agents];

    // The oracle's random stream varies with the run seed.
    let oracle = TeacherOracle {
        key: cfg.teacher.key ^ cfg.world.seed,
        ..cfg.teacher
    };

    let mut records: Vec<LogRecord> = Vec::new();
    let test_start = cfg.test_start();
    for (cell, model) in &pretrained_map {
        records.push(LogRecord::Snapshot(SnapshotRecord {
            time: test_start,
            cell: *cell,
            version: model.version,
            model: model.clone(),
        }));
    }

    // Phase 2: the test window on the stream tick grid.
    let tick_s = cfg.rates.tick_seconds();
    let n_ticks = (cfg.test_duration() / tick_s).round() as u64;
    for tick in 0..n_ticks {
        let t = test_start + tick as f64 * tick_s;
        let weather = world.weather_at(t)?;
        let view = CellModelView {
            current: &current_models,
            pretrained: &pretrained_map,
        };

        // (1)-(3) Observe, switch, predict; agents are independent.
        let outputs: Vec<Option<Result<AgentTickOutput>>> = agent_states
            .par_iter_mut()
            .zip(prev_zones.par_iter_mut())
            .enumerate()
            .map(|(agent, (state, prev_zone))| {
                // Inactive agents keep their last zone so a change across an
                // off gap still surfaces as a transition at reactivation.
                let sample = match world.sample_at(agent, t) {
                    Ok(Some(s)) => s,
                    Ok(None) => return None,
                    Err(e) => return Some(Err(e)),
                };
                let step = (|| {
                    let zone = world.zone_of(agent, t)?;
                    let ctx = CellContext {
                        agent,
                        zone,
                        weather: weather.dominant(),
                        daylight: weather.daylight(),
                    };
                    let cell = partition.cell_of(ctx);
                    let (prediction, cell_from) = state.tick(&sample, cell, &view)?;
                    let mut cm = ConfusionMatrix::new(classes);
                    cm.update(&prediction, &LabelGrid(sample.truth.clone()))?;
                    let zone_from = match *prev_zone {
                        Some(z) if z != zone => Some(z),
                        _ => None,
                    };
                    *prev_zone = Some(zone);
                    Ok(AgentTickOutput {
                        sample,
                        zone,
                        cell,
                        version: state.model_version,
                        cm: cm.counts_row_major().to_vec(),
                        zone_from,
                        cell_from,
                    })
                })();
                Some(step)
            })
            .collect();

        let mut tick_samples: Vec<Option<(CellId, Sample)>> = Vec::with_capacity(outputs.len());
        for (agent, output) in outputs.into_iter().enumerate() {
            let Some(output) = output else {
                tick_samples.push(None);
                continue;
            };
            let out = output?;
            if let Some(from) = out.zone_from {
                records.push(LogRecord::Transition(TransitionRecord {
                    time: t,
                    agent,
                    scope: TransitionScope::Zone,
                    from,
                    to: out.zone,
                }));
            }
            if let Some(from) = out.cell_from {
                records.push(LogRecord::Transition(TransitionRecord {
                    time: t,
                    agent,
                    scope: TransitionScope::Cell,
                    from,
                    to: out.cell,
                }));
            }
            records.push(LogRecord::Prediction(PredictionRecord {
                time: t,
                agent,
                zone: out.zone,
                cell: out.cell,
                version: out.version,
                cm: out.cm,
            }));
            tick_samples.push(Some((out.cell, out.sample)));
        }

        if !cfg.adapt {
            continue;
        }

        // (4) Teacher-rate ingestion into the cell streams.
        if tick % cfg.rates.teacher_every == 0 {
            let mut arrivals: BTreeMap<CellId, Vec<Sample>> = BTreeMap::new();
            for entry in tick_samples.into_iter().flatten() {
                arrivals.entry(entry.0).or_default().push(entry.1);
            }
            for (cell, samples) in arrivals {
                cell_states[cell].ingest_tick(samples, &weather, &oracle, cfg.mode, classes);
            }
        }

        // (5) Student-rate training and broadcast; cells are independent.
        if tick % cfg.rates.student_every == 0 {
            let outcomes: Vec<_> = cell_states
                .par_iter_mut()
                .map(|state| state.train_tick(Timestamp(t), &cfg.training))
                .collect();
            for (cell, outcome) in outcomes.into_iter().enumerate() {
                if let Some(outcome) = outcome? {
                    records.push(LogRecord::Training(TrainingRecord {
                        time: t,
                        cell,
                        buffer_len: outcome.buffer_len,
                        steps: outcome.steps,
                        mean_loss: outcome.mean_loss,
                    }));
                    records.push(LogRecord::Broadcast(BroadcastRecord {
                        time: t,
                        cell,
                        version: outcome.snapshot.version,
                    }));
                    records.push(LogRecord::Snapshot(SnapshotRecord {
                        time: t,
                        cell,
                        version: outcome.snapshot.version,
                        model: outcome.snapshot.clone(),
                    }));
                    current_models.insert(cell, outcome.snapshot);
                }
            }
        }
    }

    Ok(RunArtifacts {
        config: cfg.clone(),
        header: LogHeader::new(cfg),
        records,
    })
}

/// One row of the scenario/pretraining comparison grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixRow {
    pub partition: crate::scenarios::PartitionKind,
    pub pretrain: PretrainMode,
    pub mode: LabelMode,
    pub adapt: bool,
    pub seed: u64,
    pub summary: RunSummary,
}

/// Run the cartesian grid. Runs within one seed share a single world, so
/// every scenario sees identical sample streams.
pub fn run_matrix(
    base: &RunConfig,
    scenarios: &[crate::scenarios::PartitionKind],
    pretrains: &[PretrainMode],
    modes: &[LabelMode],
    seeds: &[u64],
) -> Result<Vec<MatrixRow>> {
    if scenarios.is_empty() || pretrains.is_empty() || modes.is_empty() || seeds.is_empty() {
        return Err(crate::error::Error::config("run_matrix requires nonempty lists"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut world_cfg = base.world.clone();
        world_cfg.seed = seed;
        let world = build_world(&world_cfg)?;
        for &partition in scenarios {
            for &pretrain in pretrains {
                for &mode in modes {
                    let mut cfg = base.clone();
                    cfg.world.seed = seed;
                    cfg.partition = partition;
                    cfg.pretrain.mode = pretrain;
                    cfg.mode = mode;
                    cfg.validate()?;
                    let artifacts = run_on_world(&cfg, &world)?;
                    let summary = summarize(&artifacts, &world)?;
                    rows.push(MatrixRow {
                        partition,
                        pretrain,
                        mode,
                        adapt: cfg.adapt,
                        seed,
                        summary,
                    });
                }
            }
        }
    }
    Ok(rows)
}
