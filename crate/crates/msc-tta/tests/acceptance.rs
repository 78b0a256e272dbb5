//! Acceptance gate: one test per criterion, each printing a pass line.
//! Expensive simulation grids are shared between criteria through lazily
//! initialized statics.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use msc_tta::config::RunConfig;
use msc_tta::domain::{ConfusionMatrix, LabelGrid, Sample, Timestamp};
use msc_tta::eval;
use msc_tta::learner::{loss_and_grad, ModelSnapshot, TeacherOracle, TrainingConfig};
use msc_tta::log::{RunArtifacts, TransitionScope};
use msc_tta::scenarios::{PartitionKind, PretrainMode};
use msc_tta::sim;
use msc_tta::slow_route::{BufferItem, CellState, LabelMode, ReplayBuffer};
use msc_tta::world::{build_world, Daylight, WeatherMode, WeatherState};

const SEEDS: [u64; 3] = [1, 2, 3];

/// 60-minute acceptance world: N = 12, Z = 7, C = 6, d = 16, P = 32.
fn acceptance_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.world.horizon_s = 3600.0;
    cfg
}

fn scenario_config(partition: PartitionKind, seed: u64) -> RunConfig {
    let mut cfg = acceptance_config();
    cfg.world.seed = seed;
    cfg.world.weather_mode = WeatherMode::Static;
    cfg.partition = partition;
    cfg.pretrain.mode = PretrainMode::Scratch;
    cfg.mode = LabelMode::Ol;
    cfg
}

/// Criterion 5/8 grid: static weather, Scratch, MSC-OL, three partitions,
/// three paired seeds.
fn scenario_grid() -> &'static Vec<(PartitionKind, u64, RunArtifacts)> {
    static GRID: OnceLock<Vec<(PartitionKind, u64, RunArtifacts)>> = OnceLock::new();
    GRID.get_or_init(|| {
        let mut out = Vec::new();
        for seed in SEEDS {
            let world = build_world(&scenario_config(PartitionKind::Spatial, seed).world).unwrap();
            for partition in [PartitionKind::Spatial, PartitionKind::Common, PartitionKind::Baseline] {
                let cfg = scenario_config(partition, seed);
                let artifacts = sim::run_on_world(&cfg, &world).unwrap();
                out.push((partition, seed, artifacts));
            }
        }
        out
    })
}

fn last_quarter_imminent(artifacts: &RunArtifacts) -> f64 {
    let end = artifacts.config.test_end();
    let lo = end - artifacts.config.test_duration() / 4.0;
    eval::imminent_aggregate(artifacts, lo, end).unwrap()
}

#[test]
fn criterion_1_miou_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let classes = rng.gen_range(2..=6usize);
        let pixels = rng.gen_range(1..=64usize);
        let predicted = LabelGrid((0..pixels).map(|_| rng.gen_range(0..classes)).collect());
        let truth = LabelGrid((0..pixels).map(|_| rng.gen_range(0..classes)).collect());
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&predicted, &truth).unwrap();

        // Independent brute-force per-class IoU straight from the grids.
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..classes {
            let tp = predicted.0.iter().zip(&truth.0).filter(|&(&p, &t)| p == c && t == c).count();
            let fp = predicted.0.iter().zip(&truth.0).filter(|&(&p, &t)| p == c && t != c).count();
            let fneg = predicted.0.iter().zip(&truth.0).filter(|&(&p, &t)| p != c && t == c).count();
            let union = tp + fp + fneg;
            if union > 0 {
                sum += tp as f64 / union as f64;
                n += 1;
            }
        }
        let oracle = sum / n as f64;
        assert!((cm.miou().unwrap() - oracle).abs() < 1e-12);
    }
    println!("acceptance criterion 1 (mIoU oracle equivalence, 1000 grids): PASS");
}

#[test]
fn criterion_2_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let classes = rng.gen_range(2..=6usize);
        let dim = rng.gen_range(2..=8usize);
        let model = ModelSnapshot {
            classes,
            dim,
            w: (0..classes * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            b: (0..classes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            version: 0,
        };
        let samples: Vec<(Sample, LabelGrid)> = (0..rng.gen_range(1..=4usize))
            .map(|_| {
                let pixels = rng.gen_range(1..=6usize);
                let s = Sample {
                    agent: 0,
                    time: Timestamp(0.0),
                    pixels,
                    dim,
                    features: (0..pixels * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                    truth: (0..pixels).map(|_| rng.gen_range(0..classes)).collect(),
                };
                let l = LabelGrid(s.truth.clone());
                (s, l)
            })
            .collect();
        let batch: Vec<(&Sample, &LabelGrid)> = samples.iter().map(|(s, l)| (s, l)).collect();
        let (_, grads) = loss_and_grad(&model, &batch).unwrap();
        let mut probe = |set: &dyn Fn(&mut ModelSnapshot, f64), analytic: f64| {
            let mut hi = model.clone();
            set(&mut hi, h);
            let mut lo = model.clone();
            set(&mut lo, -h);
            let fd = (loss_and_grad(&hi, &batch).unwrap().0 - loss_and_grad(&lo, &batch).unwrap().0) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "relative error {rel}");
        };
        for i in 0..classes * dim {
            probe(&|m, eps| m.w[i] += eps, grads.w[i]);
        }
        for i in 0..classes {
            probe(&|m, eps| m.b[i] += eps, grads.b[i]);
        }
    }
    println!("acceptance criterion 2 (gradient vs finite differences, worst rel err {worst:.2e}): PASS");
}

#[test]
fn criterion_3_fifo_and_training_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    // (a) Arbitrary push sequences leave exactly the last R items in order.
    for _ in 0..200 {
        let capacity = rng.gen_range(1..=50usize);
        let pushes = rng.gen_range(0..=150usize);
        let mut buffer = ReplayBuffer::new(capacity);
        for tag in 0..pushes {
            buffer.push(BufferItem {
                sample: Sample {
                    agent: tag,
                    time: Timestamp(tag as f64),
                    pixels: 1,
                    dim: 1,
                    features: vec![0.0],
                    truth: vec![0],
                },
                labels: LabelGrid(vec![0]),
                inserted_at: Timestamp(tag as f64),
            });
        }
        let got: Vec<usize> = buffer.iter().map(|it| it.sample.agent).collect();
        let expect: Vec<usize> = (pushes.saturating_sub(capacity)..pushes).collect();
        assert_eq!(got, expect);
    }

    // (b) Without new samples, training is skipped and weights stay
    // bitwise identical; no broadcast is produced.
    let clear_day = WeatherState {
        weights: [1.0, 0.0, 0.0],
        sun_altitude_deg: 45.0,
    };
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut state = CellState::new(0, ModelSnapshot::zeros(3, 2), 50);
        let arrivals: Vec<Sample> = (0..rng.gen_range(1..=40usize))
            .map(|i| Sample {
                agent: i,
                time: Timestamp(1.0),
                pixels: 2,
                dim: 2,
                features: (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                truth: vec![rng.gen_range(0..3), rng.gen_range(0..3)],
            })
            .collect();
        state.ingest_tick(arrivals, &clear_day, &TeacherOracle::default(), LabelMode::Ol, 3);
        state.train_tick(Timestamp(30.0), &TrainingConfig::default()).unwrap().unwrap();
        let frozen = state.student.clone();
        let outcome = state.train_tick(Timestamp(60.0), &TrainingConfig::default()).unwrap();
        assert!(outcome.is_none());
        assert_eq!(state.student.w, frozen.w);
        assert_eq!(state.student.b, frozen.b);
        assert_eq!(state.student.version, frozen.version);
    }
    println!("acceptance criterion 3 (FIFO + training gate properties): PASS");
}

#[test]
fn criterion_4_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_msc-tta");
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let status = std::process::Command::new(bin)
            .args([
                "run",
                "--seed",
                "7",
                "--set",
                "world.horizon_s=1800",
                "--set",
                "pretrain.mode=scratch",
                "--out",
            ])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
        let root = dir.path().join(out);
        std::fs::read_dir(root).unwrap().next().unwrap().unwrap().path()
    };
    let a = run("a");
    let b = run("b");
    for file in ["run_log.jsonl", "summary.json", "metrics_imminent.csv", "metrics_future.csv"] {
        let left = std::fs::read(a.join(file)).unwrap();
        let right = std::fs::read(b.join(file)).unwrap();
        assert_eq!(left, right, "{file} differs between identical runs");
    }
    println!("acceptance criterion 4 (byte-identical logs and summaries): PASS");
}

#[test]
fn criterion_5_scenario_ordering() {
    let grid = scenario_grid();
    for seed in SEEDS {
        let score = |p: PartitionKind| {
            let (_, _, artifacts) = grid.iter().find(|(q, s, _)| *q == p && *s == seed).unwrap();
            last_quarter_imminent(artifacts)
        };
        let spatial = score(PartitionKind::Spatial);
        let common = score(PartitionKind::Common);
        let baseline = score(PartitionKind::Baseline);
        println!(
            "  seed {seed}: spatial {spatial:.3}, common {common:.3}, baseline {baseline:.3}"
        );
        assert!(spatial > common, "seed {seed}: spatial {spatial} <= common {common}");
        assert!(common > baseline, "seed {seed}: common {common} <= baseline {baseline}");
        assert!(
            spatial - baseline >= 0.05,
            "seed {seed}: spatial-baseline gap {}",
            spatial - baseline
        );
    }
    println!("acceptance criterion 5 (Spatial > Common > Baseline, gap >= 0.05, 3/3 seeds): PASS");
}

/// Criterion 6 runs: dynamic weather, General pretraining, Spatial cells,
/// with a strong night teacher penalty separating OL from TTA.
fn ol_tta_pairs() -> &'static Vec<(u64, f64, f64)> {
    static PAIRS: OnceLock<Vec<(u64, f64, f64)>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = acceptance_config();
                cfg.world.seed = seed;
                cfg.pretrain.mode = PretrainMode::General;
                cfg.teacher.night_penalty = 0.45;
                let world = build_world(&cfg.world).unwrap();
                let score = |mode: LabelMode| {
                    let mut c = cfg.clone();
                    c.mode = mode;
                    let artifacts = sim::run_on_world(&c, &world).unwrap();
                    eval::summarize(&artifacts, &world).unwrap().miou_imminent_3h
                };
                (seed, score(LabelMode::Ol), score(LabelMode::Tta))
            })
            .collect()
    })
}

#[test]
fn criterion_6_ol_dominates_tta() {
    for &(seed, ol, tta) in ol_tta_pairs() {
        println!("  seed {seed}: OL {ol:.4}, TTA {tta:.4}");
        assert!(ol >= tta, "seed {seed}: OL {ol} < TTA {tta}");
    }
    println!("acceptance criterion 6 (MSC-OL >= MSC-TTA on every seed): PASS");
}

#[test]
fn criterion_7_adaptive_beats_frozen_under_drift() {
    for seed in SEEDS {
        let mut cfg = acceptance_config();
        cfg.world.seed = seed;
        cfg.pretrain.mode = PretrainMode::General;
        cfg.mode = LabelMode::Tta;
        let world = build_world(&cfg.world).unwrap();
        let score = |adapt: bool| {
            let mut c = cfg.clone();
            c.adapt = adapt;
            let artifacts = sim::run_on_world(&c, &world).unwrap();
            last_quarter_imminent(&artifacts)
        };
        let adaptive = score(true);
        let frozen = score(false);
        println!("  seed {seed}: adaptive {adaptive:.3}, frozen {frozen:.3}");
        assert!(adaptive > frozen, "seed {seed}: adaptive {adaptive} <= frozen {frozen}");
    }
    println!("acceptance criterion 7 (adaptive > frozen under dynamic weather, 3/3 seeds): PASS");
}

fn post_transition_mean(artifacts: &RunArtifacts) -> f64 {
    let report = eval::transition_report_scoped(artifacts, 30.0, 3.0, TransitionScope::Zone).unwrap();
    let vals: Vec<f64> = report
        .bins
        .iter()
        .filter(|b| b.offset_s >= 0.0 && b.offset_s < 9.0)
        .filter_map(|b| b.miou)
        .collect();
    assert!(!vals.is_empty(), "no post-transition frames");
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_8_transition_recovery() {
    let grid = scenario_grid();
    let mean_of = |p: PartitionKind| {
        let scores: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let (_, _, a) = grid.iter().find(|(q, s, _)| *q == p && *s == seed).unwrap();
                post_transition_mean(a)
            })
            .collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    let spatial = mean_of(PartitionKind::Spatial);
    let baseline = mean_of(PartitionKind::Baseline);
    println!("  post-transition (0, +9 s]: spatial {spatial:.3}, baseline {baseline:.3}");
    assert!(
        spatial - baseline >= 0.03,
        "recovery gap {} below 0.03",
        spatial - baseline
    );

    // Reported sub-check (not gated): with boundary-blended sampling the
    // Spatial curve dips right before the transition.
    let mut cfg = scenario_config(PartitionKind::Spatial, 1);
    cfg.world.boundary_blend_s = 20.0;
    let artifacts = sim::run(&cfg).unwrap();
    let report = eval::transition_report_scoped(&artifacts, 30.0, 3.0, TransitionScope::Zone).unwrap();
    let mean_over = |lo: f64, hi: f64| {
        let v: Vec<f64> = report
            .bins
            .iter()
            .filter(|b| b.offset_s >= lo && b.offset_s < hi)
            .filter_map(|b| b.miou)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let steady = mean_over(-30.0, -18.0);
    let just_before = mean_over(-9.0, 0.0);
    println!(
        "  reported: pre-transition dip under boundary blend: steady {steady:.3}, last 9 s {just_before:.3}, dip {}",
        if just_before < steady { "present" } else { "absent" }
    );
    println!("acceptance criterion 8 (transition recovery gap >= 0.03): PASS");
}

#[test]
fn criterion_9_teacher_calibration() {
    let oracle = TeacherOracle {
        base_error: 0.15,
        night_penalty: 0.15,
        key: 99,
    };
    let day = WeatherState {
        weights: [1.0, 0.0, 0.0],
        sun_altitude_deg: 45.0,
    };
    let night = WeatherState {
        weights: [1.0, 0.0, 0.0],
        sun_altitude_deg: 0.0,
    };
    let classes = 6;
    let pixels = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut flips = [0u64; 2];
    let mut total = 0u64;
    for i in 0..1000u64 {
        let sample = Sample {
            agent: (i % 16) as usize,
            time: Timestamp(i as f64),
            pixels,
            dim: 1,
            features: vec![0.0; pixels],
            truth: (0..pixels).map(|_| rng.gen_range(0..classes)).collect(),
        };
        for (slot, weather) in [(0usize, &day), (1usize, &night)] {
            let labels = oracle.label(&sample, weather, classes);
            flips[slot] += labels.0.iter().zip(&sample.truth).filter(|(a, b)| a != b).count() as u64;
        }
        total += pixels as u64;
    }
    let day_rate = flips[0] as f64 / total as f64;
    let night_rate = flips[1] as f64 / total as f64;
    println!("  empirical flip rates over {total} pixels: day {day_rate:.4}, night {night_rate:.4}");
    assert!((day_rate - 0.15).abs() <= 0.01, "day flip rate {day_rate}");
    assert!((night_rate - 0.30).abs() <= 0.01, "night flip rate {night_rate}");
    // The configured error rates differ exactly by the night penalty.
    assert_eq!(
        oracle.effective_error(Daylight::Night) - oracle.effective_error(Daylight::Day),
        oracle.night_penalty
    );
    println!("acceptance criterion 9 (teacher flip-rate calibration): PASS");
}

#[test]
fn criterion_10_specific_partition_starvation() {
    let mut cfg = acceptance_config();
    cfg.world.seed = 1;
    cfg.partition = PartitionKind::Specific;
    cfg.pretrain.mode = PretrainMode::Scratch;
    cfg.mode = LabelMode::Ol;
    let world = build_world(&cfg.world).unwrap();
    let artifacts = sim::run_on_world(&cfg, &world).unwrap();

    // Every training tick of a Specific cell must be backed by at least one
    // teacher tick inside its gating window where the cell's (weather,
    // daylight) combination was actually the active context.
    let stride = cfg.rates.teacher_every as f64 / cfg.rates.stream_hz;
    let student_period = cfg.rates.student_every as f64 / cfg.rates.stream_hz;
    let mut trainings = 0usize;
    for tr in artifacts.trainings() {
        trainings += 1;
        let kind = (tr.cell % 6) / 2;
        let daylight = tr.cell % 2;
        let mut backed = false;
        let mut tau = tr.time;
        while tau > tr.time - student_period - 1e-9 {
            let w = world.weather_at(tau).unwrap();
            if w.dominant().index() == kind && w.daylight().index() == daylight {
                backed = true;
                break;
            }
            tau -= stride;
        }
        assert!(
            backed,
            "cell {} trained at t={} while its (weather, daylight) combination was inactive",
            tr.cell, tr.time
        );
    }
    assert!(trainings > 0, "no training activity recorded");

    // And inactivity is visible: combinations that never occur in the test
    // window leave their cells entirely untrained.
    let mut active_combo = [[false; 2]; 3];
    let tick_s = cfg.rates.tick_seconds();
    let n_ticks = (cfg.test_duration() / tick_s).round() as u64;
    for tick in 0..n_ticks {
        let t = cfg.test_start() + tick as f64 * tick_s;
        let w = world.weather_at(t).unwrap();
        active_combo[w.dominant().index()][w.daylight().index()] = true;
    }
    let mut starved_cells = 0usize;
    for cell in 0..42 {
        let kind = (cell % 6) / 2;
        let daylight = cell % 2;
        if !active_combo[kind][daylight] {
            let count = artifacts.trainings().filter(|tr| tr.cell == cell).count();
            assert_eq!(count, 0, "cell {cell} trained despite an inactive combination");
            starved_cells += 1;
        }
    }
    println!(
        "  {trainings} training ticks audited; {starved_cells} cells fully starved by inactive combinations"
    );
    println!("acceptance criterion 10 (Specific-partition starvation): PASS");
}
