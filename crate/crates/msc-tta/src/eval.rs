//! The online evaluation protocol, computed purely from run artifacts:
//! imminent and future mIoU series, horizon summaries, and the
//! transition-aligned recovery analysis.
//!
//! Aggregation is fleet-global by default: confusion matrices are merged
//! across agents and cells before mIoU is taken (merge-then-score). The
//! per-agent mean variant is available behind `per_agent_eval`. Horizon
//! summaries likewise merge matrices over the range rather than averaging
//! window scores; the two differ.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, ConfusionMatrix, LabelGrid};
use crate::error::{Error, Result};
use crate::log::RunArtifacts;
use crate::log::TransitionScope;
use crate::world::WorldState;

pub const IMMINENT_WINDOW_S: f64 = 30.0;
pub const FUTURE_DELAY_S: f64 = 300.0;
pub const TRANSITION_HALFWIDTH_S: f64 = 30.0;
pub const TRANSITION_WINDOW_S: f64 = 3.0;

/// A windowed mIoU series; `None` where the window held no pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    /// (window end time, mIoU or missing).
    pub points: Vec<(f64, Option<f64>)>,
}

/// The table row for one run: full-window and last-third aggregates of the
/// imminent and future metrics. The field names follow the canonical 5 h
/// horizon, where the test window is 3 hours and the tail is the last hour;
/// under scaled horizons they mean the full test window and its last third.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub miou_imminent_3h: f64,
    pub miou_imminent_lasthour: f64,
    pub miou_future_3h: f64,
    pub miou_future_lasthour: f64,
}

/// One per-frame matrix with its owner and timestamp.
#[derive(Clone, Debug)]
struct Frame {
    agent: AgentId,
    time: f64,
    cm: ConfusionMatrix,
}

fn imminent_frames(artifacts: &RunArtifacts) -> Vec<Frame> {
    artifacts
        .predictions()
        .map(|p| Frame {
            agent: p.agent,
            time: p.time,
            cm: artifacts.frame_matrix(p),
        })
        .collect()
}

/// Re-score every frame at time t against the model its agent held at
/// t - delay (same cell-assignment history). Frames whose lookback reaches
/// before the test window, or whose agent had no assignment yet, are skipped.
fn future_frames(artifacts: &RunArtifacts, world: &WorldState, delay: f64) -> Result<Vec<Frame>> {
    let snapshots = artifacts.snapshot_index();
    let test_start = artifacts.config.test_start();
    // Per-agent prediction history, already in time order within an agent.
    let mut history: Vec<Vec<(f64, usize, u64)>> = vec![Vec::new(); artifacts.config.world.agents];
    for p in artifacts.predictions() {
        history[p.agent].push((p.time, p.cell, p.version));
    }
    let preds: Vec<_> = artifacts.predictions().collect();
    let classes = artifacts.config.world.classes;
    preds
        .par_iter()
        .map(|p| {
            let lookback = p.time - delay;
            if lookback < test_start - 1e-9 {
                return Ok(None);
            }
            let hist = &history[p.agent];
            let idx = hist.partition_point(|&(t, _, _)| t <= lookback + 1e-9);
            let Some(&(_, cell, version)) = hist[..idx].last() else {
                return Ok(None);
            };
            let model = snapshots.get(&(cell, version)).ok_or_else(|| {
                Error::contract(format!("missing snapshot for cell {cell} version {version}"))
            })?;
            let sample = world
                .sample_at(p.agent, p.time)?
                .ok_or_else(|| Error::contract(format!("agent {} inactive at logged time {}", p.agent, p.time)))?;
            let predicted = model.predict(&sample)?;
            let mut cm = ConfusionMatrix::new(classes);
            cm.update(&predicted, &LabelGrid(sample.truth.clone()))?;
            Ok(Some(Frame {
                agent: p.agent,
                time: p.time,
                cm,
            }))
        })
        .filter_map(|r| r.transpose())
        .collect()
}

/// Slide a `(t - window, t]` merge over the tick grid of the test window.
fn windowed_series(artifacts: &RunArtifacts, frames: &[Frame], window: f64) -> MetricSeries {
    let cfg = &artifacts.config;
    let tick_s = cfg.rates.tick_seconds();
    let test_start = cfg.test_start();
    let n_ticks = (cfg.test_duration() / tick_s).round() as usize;
    let wlen = ((window / tick_s).round() as usize).max(1);

    // Bucket frames by tick index so the window advances with integer
    // add/remove of matrices.
    let classes = cfg.world.classes;
    let mut buckets: Vec<Vec<&ConfusionMatrix>> = vec![Vec::new(); n_ticks];
    for f in frames {
        let idx = ((f.time - test_start) / tick_s).round() as i64;
        if (0..n_ticks as i64).contains(&idx) {
            buckets[idx as usize].push(&f.cm);
        }
    }

    let mut acc = ConfusionMatrix::new(classes);
    let mut points = Vec::with_capacity(n_ticks);
    for i in 0..n_ticks {
        for cm in &buckets[i] {
            acc.merge(cm);
        }
        if i >= wlen {
            for cm in &buckets[i - wlen] {
                acc.unmerge(cm);
            }
        }
        let t = test_start + i as f64 * tick_s;
        points.push((t, acc.miou().ok()));
    }
    MetricSeries { points }
}

pub fn imminent_series(artifacts: &RunArtifacts, window: f64) -> MetricSeries {
    windowed_series(artifacts, &imminent_frames(artifacts), window)
}

pub fn future_series(
    artifacts: &RunArtifacts,
    world: &WorldState,
    delay: f64,
    window: f64,
) -> Result<MetricSeries> {
    let frames = future_frames(artifacts, world, delay)?;
    Ok(windowed_series(artifacts, &frames, window))
}

/// Merge-then-score over `[lo, hi]`, or the mean of per-agent merged scores
/// when `per_agent` is set. Undefined when the range holds no pixels.
fn aggregate(frames: &[Frame], lo: f64, hi: f64, classes: usize, per_agent: bool) -> Result<f64> {
    let in_range = frames.iter().filter(|f| f.time >= lo - 1e-9 && f.time <= hi + 1e-9);
    if per_agent {
        let mut per: std::collections::BTreeMap<AgentId, ConfusionMatrix> = Default::default();
        for f in in_range {
            per.entry(f.agent)
                .or_insert_with(|| ConfusionMatrix::new(classes))
                .merge(&f.cm);
        }
        let scores: Vec<f64> = per.values().filter_map(|cm| cm.miou().ok()).collect();
        if scores.is_empty() {
            return Err(Error::UndefinedMetric(format!("no scored frames in [{lo}, {hi}]")));
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    } else {
        let mut acc = ConfusionMatrix::new(classes);
        for f in in_range {
            acc.merge(&f.cm);
        }
        acc.miou()
            .map_err(|_| Error::UndefinedMetric(format!("no scored frames in [{lo}, {hi}]")))
    }
}

/// Fleet aggregate of the imminent metric over an arbitrary `[lo, hi]`
/// time range (honors `per_agent_eval`).
pub fn imminent_aggregate(artifacts: &RunArtifacts, lo: f64, hi: f64) -> Result<f64> {
    aggregate(
        &imminent_frames(artifacts),
        lo,
        hi,
        artifacts.config.world.classes,
        artifacts.config.per_agent_eval,
    )
}

/// Horizon aggregates for both metrics over the full test window and its
/// last third.
pub fn summarize(artifacts: &RunArtifacts, world: &WorldState) -> Result<RunSummary> {
    let cfg = &artifacts.config;
    let classes = cfg.world.classes;
    let per_agent = cfg.per_agent_eval;
    let start = cfg.test_start();
    let end = cfg.test_end();
    let tail_start = end - cfg.test_duration() / 3.0;

    let imminent = imminent_frames(artifacts);
    let future = future_frames(artifacts, world, cfg.future_delay_s)?;
    Ok(RunSummary {
        miou_imminent_3h: aggregate(&imminent, start, end, classes, per_agent)?,
        miou_imminent_lasthour: aggregate(&imminent, tail_start, end, classes, per_agent)?,
        miou_future_3h: aggregate(&future, start, end, classes, per_agent)?,
        miou_future_lasthour: aggregate(&future, tail_start, end, classes, per_agent)?,
    })
}

/// One 3 s bin of the transition-aligned curve; `offset_s` is the bin start
/// relative to the transition instant and frames at offset 0 already use the
/// post-transition model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionBin {
    pub offset_s: f64,
    pub miou: Option<f64>,
    pub frames: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub halfwidth_s: f64,
    pub window_s: f64,
    pub transitions: usize,
    pub bins: Vec<TransitionBin>,
}

/// Align every cell transition on its instant and merge the transitioning
/// agent's frames into `window`-second bins covering ±`halfwidth`. Bins are
/// `[k*window, (k+1)*window)`. Transitions near run boundaries contribute the
/// frames they have (truncated, not dropped).
pub fn transition_report(artifacts: &RunArtifacts, halfwidth: f64, window: f64) -> Result<TransitionReport> {
    transition_report_scoped(artifacts, halfwidth, window, TransitionScope::Cell)
}

/// Like [`transition_report`] but aligned on a chosen transition scope;
/// zone scope lets partitions whose cells never change (Baseline, Common)
/// be compared at the same world events.
pub fn transition_report_scoped(
    artifacts: &RunArtifacts,
    halfwidth: f64,
    window: f64,
    scope: TransitionScope,
) -> Result<TransitionReport> {
    if !(halfwidth > 0.0 && window > 0.0) {
        return Err(Error::contract("transition report needs positive window sizes"));
    }
    let classes = artifacts.config.world.classes;
    let n_side = (halfwidth / window).round() as i64;

    let mut per_agent: Vec<Vec<&crate::log::PredictionRecord>> =
        vec![Vec::new(); artifacts.config.world.agents];
    for p in artifacts.predictions() {
        per_agent[p.agent].push(p);
    }

    let mut acc: Vec<ConfusionMatrix> = (0..2 * n_side).map(|_| ConfusionMatrix::new(classes)).collect();
    let mut counts = vec![0u64; 2 * n_side as usize];
    let mut transitions = 0usize;
    for tr in artifacts.transitions() {
        if tr.scope != scope {
            continue;
        }
        transitions += 1;
        let preds = &per_agent[tr.agent];
        let lo = preds.partition_point(|p| p.time < tr.time - halfwidth);
        for p in &preds[lo..] {
            let offset = p.time - tr.time;
            if offset >= halfwidth {
                break;
            }
            let k = (offset / window).floor() as i64 + n_side;
            if (0..2 * n_side).contains(&k) {
                acc[k as usize].merge(&artifacts.frame_matrix(p));
                counts[k as usize] += 1;
            }
        }
    }

    let bins = acc
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (cm, frames))| TransitionBin {
            offset_s: (i as i64 - n_side) as f64 * window,
            miou: cm.miou().ok(),
            frames,
        })
        .collect();
    Ok(TransitionReport {
        halfwidth_s: halfwidth,
        window_s: window,
        transitions,
        bins,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_series_csv(path: &Path, header: &str, series: &MetricSeries) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    writeln!(w, "window_end_s,miou")?;
    for &(t, miou) in &series.points {
        writeln!(w, "{t},{}", fmt_opt(miou))?;
    }
    Ok(())
}

/// Emit the full plot-data surface for one run into `dir`:
/// `metrics_imminent.csv`, `metrics_future.csv`, `summary.json`,
/// `transitions.csv`. Re-running over the same artifacts is idempotent.
pub fn write_reports(artifacts: &RunArtifacts, world: &WorldState, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    let header = artifacts.header.comment_line();

    let imminent = imminent_series(artifacts, IMMINENT_WINDOW_S);
    write_series_csv(&dir.join("metrics_imminent.csv"), &header, &imminent)?;

    let future = future_series(artifacts, world, artifacts.config.future_delay_s, IMMINENT_WINDOW_S)?;
    write_series_csv(&dir.join("metrics_future.csv"), &header, &future)?;

    let summary = summarize(artifacts, world)?;
    let doc = serde_json::json!({
        "schema": artifacts.header.schema,
        "config_hash": artifacts.header.config_hash,
        "seed": artifacts.header.seed,
        "summary": summary,
    });
    std::fs::write(dir.join("summary.json"), format!("{:#}\n", doc))?;

    let report = transition_report(artifacts, TRANSITION_HALFWIDTH_S, TRANSITION_WINDOW_S)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("transitions.csv"))?);
    writeln!(w, "{header}")?;
    writeln!(w, "offset_s,miou,frames")?;
    for bin in &report.bins {
        writeln!(w, "{},{},{}", bin.offset_s, fmt_opt(bin.miou), bin.frames)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::log::{LogHeader, LogRecord, PredictionRecord, TransitionRecord};
    use crate::scenarios::{PartitionKind, PretrainMode};
    use crate::sim;
    use crate::world::{build_world, WeatherMode, WorldConfig};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.world = WorldConfig {
            seed: 21,
            horizon_s: 300.0,
            classes: 3,
            feature_dim: 4,
            pixels: 4,
            zones: 3,
            agents: 3,
            weather_mode: WeatherMode::Static,
            ..WorldConfig::default()
        };
        cfg.partition = PartitionKind::Spatial;
        cfg.pretrain.mode = PretrainMode::Scratch;
        // The tiny 300 s horizon leaves a 180 s test window; keep a usable
        // future metric by shrinking the lookback.
        cfg.future_delay_s = 30.0;
        cfg
    }

    fn synthetic_artifacts(times_and_cms: &[(f64, usize, Vec<u64>)]) -> RunArtifacts {
        let mut cfg = tiny_config();
        cfg.world.classes = 2;
        let header = LogHeader::new(&cfg);
        let records = times_and_cms
            .iter()
            .map(|(t, agent, cm)| {
                LogRecord::Prediction(PredictionRecord {
                    time: *t,
                    agent: *agent,
                    zone: 0,
                    cell: 0,
                    version: 0,
                    cm: cm.clone(),
                })
            })
            .collect();
        RunArtifacts {
            config: cfg,
            header,
            records,
        }
    }

    #[test]
    fn three_frame_window_matches_manual_merge() {
        // Test window starts at 120 s for the 300 s tiny horizon.
        let a = synthetic_artifacts(&[
            (120.0, 0, vec![2, 0, 0, 2]),
            (121.0, 1, vec![1, 1, 0, 0]),
            (122.0, 2, vec![0, 0, 1, 1]),
        ]);
        let series = imminent_series(&a, 30.0);
        let at = |t: f64| {
            series
                .points
                .iter()
                .find(|(pt, _)| (*pt - t).abs() < 1e-9)
                .unwrap()
                .1
        };
        // Merge of all three: [[3,1],[1,3]]; IoU_0 = 3/5, IoU_1 = 3/5.
        let merged = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
        assert!((at(122.0).unwrap() - merged.miou().unwrap()).abs() < 1e-12);
        // First window holds only the first (perfect) frame.
        assert!((at(120.0).unwrap() - 1.0).abs() < 1e-12);
        // Empty windows are missing.
        assert_eq!(at(160.0), None);
    }

    #[test]
    fn single_tick_window_is_per_frame_miou() {
        let a = synthetic_artifacts(&[(120.0, 0, vec![1, 1, 0, 1])]);
        let series = imminent_series(&a, 1.0);
        let (_, v) = series.points[0];
        assert!((v.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_delay_future_equals_imminent() {
        let cfg = tiny_config();
        let world = build_world(&cfg.world).unwrap();
        let artifacts = sim::run_on_world(&cfg, &world).unwrap();
        let imminent = imminent_series(&artifacts, 30.0);
        let future = future_series(&artifacts, &world, 0.0, 30.0).unwrap();
        for (a, b) in imminent.points.iter().zip(future.points.iter()) {
            assert_eq!(a.0, b.0);
            match (a.1, b.1) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn future_uses_the_stale_snapshot() {
        use crate::learner::ModelSnapshot;
        use crate::log::SnapshotRecord;

        let mut cfg = tiny_config();
        cfg.world.classes = 3;
        // The fabricated predictions below cover every tick, so keep
        // agent 0 active over the whole horizon.
        cfg.world.duty_off_min_frac = 0.0;
        cfg.world.duty_off_max_frac = 0.0;
        let world = build_world(&cfg.world).unwrap();
        let test_start = cfg.test_start();

        // Two snapshots for cell 0 with extreme biases: version 0 predicts
        // class 0 everywhere, version 1 predicts class 1 everywhere.
        let mut m0 = ModelSnapshot::zeros(3, 4);
        m0.b[0] = 100.0;
        let mut m1 = ModelSnapshot::zeros(3, 4);
        m1.b[1] = 100.0;
        m1.version = 1;

        let mut records = vec![
            LogRecord::Snapshot(SnapshotRecord {
                time: test_start,
                cell: 0,
                version: 0,
                model: m0,
            }),
            LogRecord::Snapshot(SnapshotRecord {
                time: test_start + 50.0,
                cell: 0,
                version: 1,
                model: m1,
            }),
        ];
        // Agent 0 holds version 0 until t = 170, version 1 afterwards.
        for i in 0..120 {
            let t = test_start + i as f64;
            records.push(LogRecord::Prediction(PredictionRecord {
                time: t,
                agent: 0,
                zone: 0,
                cell: 0,
                version: if t < test_start + 50.0 { 0 } else { 1 },
                cm: vec![0; 9],
            }));
        }
        let artifacts = RunArtifacts {
            header: LogHeader::new(&cfg),
            config: cfg,
            records,
        };

        let frames = future_frames(&artifacts, &world, 30.0).unwrap();
        // A frame at lookback < 50 s must be scored with version 0: every
        // prediction lands in column 0 of the matrix.
        let early = frames.iter().find(|f| f.time < test_start + 60.0).unwrap();
        let col0: u64 = (0..3).map(|r| early.cm.at(r, 0)).sum();
        assert_eq!(col0, early.cm.total());
        // A frame whose lookback is past the swap uses version 1.
        let late = frames.iter().find(|f| f.time > test_start + 90.0).unwrap();
        let col1: u64 = (0..3).map(|r| late.cm.at(r, 1)).sum();
        assert_eq!(col1, late.cm.total());
        // Frames whose lookback precedes the test window are skipped.
        assert!(frames.iter().all(|f| f.time >= test_start + 30.0 - 1e-9));
    }

    #[test]
    fn summary_matches_brute_force_rescoring() {
        let cfg = tiny_config();
        let world = build_world(&cfg.world).unwrap();
        let artifacts = sim::run_on_world(&cfg, &world).unwrap();
        let snapshots = artifacts.snapshot_index();

        // Rescore every frame from the world and the logged snapshot and
        // merge; must equal the merge of the logged matrices.
        let mut oracle = ConfusionMatrix::new(cfg.world.classes);
        for p in artifacts.predictions() {
            let model = snapshots[&(p.cell, p.version)];
            let sample = world.sample_at(p.agent, p.time).unwrap().unwrap();
            let predicted = model.predict(&sample).unwrap();
            oracle
                .update(&predicted, &LabelGrid(sample.truth.clone()))
                .unwrap();
        }
        let summary = summarize(&artifacts, &world).unwrap();
        assert!((summary.miou_imminent_3h - oracle.miou().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn summaries_are_idempotent_and_bounded() {
        let cfg = tiny_config();
        let world = build_world(&cfg.world).unwrap();
        let artifacts = sim::run_on_world(&cfg, &world).unwrap();
        let a = summarize(&artifacts, &world).unwrap();
        let b = summarize(&artifacts, &world).unwrap();
        assert_eq!(a, b);
        for v in [
            a.miou_imminent_3h,
            a.miou_imminent_lasthour,
            a.miou_future_3h,
            a.miou_future_lasthour,
        ] {
            assert!((0.0..=1.0).contains(&v), "{v} out of range");
        }
    }

    #[test]
    fn transition_alignment_shows_a_step_at_offset_zero() {
        let mut a = synthetic_artifacts(&[]);
        let t0 = 150.0;
        let mut records = Vec::new();
        // 10 s of wrong predictions, then the transition, then 10 s perfect.
        for i in -10i64..10 {
            let t = t0 + i as f64;
            let cm = if i < 0 { vec![0, 2, 0, 0] } else { vec![2, 0, 0, 0] };
            records.push(LogRecord::Prediction(PredictionRecord {
                time: t,
                agent: 0,
                zone: 0,
                cell: if i < 0 { 0 } else { 1 },
                version: 0,
                cm,
            }));
        }
        records.push(LogRecord::Transition(TransitionRecord {
            time: t0,
            agent: 0,
            scope: TransitionScope::Cell,
            from: 0,
            to: 1,
        }));
        a.records = records;

        let report = transition_report(&a, 30.0, 3.0).unwrap();
        assert_eq!(report.transitions, 1);
        assert_eq!(report.bins.len(), 20);
        let bin_at = |off: f64| report.bins.iter().find(|b| b.offset_s == off).unwrap();
        assert_eq!(bin_at(-3.0).miou, Some(0.0));
        assert_eq!(bin_at(0.0).miou, Some(1.0));
        // Truncation: bins outside the logged span are simply empty.
        assert_eq!(bin_at(-30.0).frames, 0);
        assert_eq!(bin_at(-30.0).miou, None);
    }

    #[test]
    fn agents_without_transitions_contribute_nothing() {
        let a = synthetic_artifacts(&[(120.0, 0, vec![2, 0, 0, 2])]);
        let report = transition_report(&a, 30.0, 3.0).unwrap();
        assert_eq!(report.transitions, 0);
        assert!(report.bins.iter().all(|b| b.frames == 0 && b.miou.is_none()));
    }

    #[test]
    fn reports_are_idempotent_on_disk() {
        let cfg = tiny_config();
        let world = build_world(&cfg.world).unwrap();
        let artifacts = sim::run_on_world(&cfg, &world).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_reports(&artifacts, &world, dir.path()).unwrap();
        let read_all = || {
            ["metrics_imminent.csv", "metrics_future.csv", "summary.json", "transitions.csv"]
                .map(|f| std::fs::read(dir.path().join(f)).unwrap())
        };
        let first = read_all();
        write_reports(&artifacts, &world, dir.path()).unwrap();
        assert_eq!(first, read_all());
    }

    #[test]
    fn per_agent_variant_averages_agent_scores() {
        let a = synthetic_artifacts(&[
            (120.0, 0, vec![2, 0, 0, 2]),
            (121.0, 1, vec![0, 2, 2, 0]),
        ]);
        let frames = imminent_frames(&a);
        // Agent 0 is perfect (1.0), agent 1 fully wrong (0.0): mean 0.5.
        let per_agent = aggregate(&frames, 0.0, 300.0, 2, true).unwrap();
        assert!((per_agent - 0.5).abs() < 1e-12);
        // The fleet-global merge differs: [[2,2],[2,2]] gives IoU 1/3 each.
        let global = aggregate(&frames, 0.0, 300.0, 2, false).unwrap();
        assert!((global - 1.0 / 3.0).abs() < 1e-12);
    }
}
