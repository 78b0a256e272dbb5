//! Command-line front end: run single simulations, sweep the scenario grid,
//! re-emit reports from persisted logs, and export world schedules.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msc_tta::config::{load_config, parse_config, RunConfig};
use msc_tta::error::{Error, Result};
use msc_tta::eval::{write_reports, RunSummary};
use msc_tta::log::RunArtifacts;
use msc_tta::scenarios::{PartitionKind, PretrainMode, ALL_PARTITIONS};
use msc_tta::sim;
use msc_tta::slow_route::LabelMode;
use msc_tta::world::{build_world, WorldState};

#[derive(Parser)]
#[command(name = "msc-tta", version, about = "Multi-stream cellular test-time adaptation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply for everything left unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set world.agents=4.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Output root; falls back to $MSC_TTA_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one run and persist its artifacts and reports.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Override the world seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the scenario × pretraining × mode grid over paired seeds.
    Matrix {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated seeds, one shared world per seed.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Comma-separated partition subset (default: all six).
        #[arg(long)]
        partitions: Option<String>,
        /// Comma-separated pretraining subset (default: scratch,general,cell).
        #[arg(long)]
        pretrains: Option<String>,
        /// Comma-separated label-mode subset (default: ol,tta).
        #[arg(long)]
        modes: Option<String>,
    },
    /// Recompute the evaluation reports from a persisted run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Export the deterministic agent-zone and weather schedules as CSV.
    ExportSchedule {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("MSC_TTA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load(common: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path, &common.set)?,
        None => parse_config("", &common.set)?,
    };
    if let Some(seed) = seed {
        cfg.world.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-s{}", cfg.content_hash(), cfg.world.seed))
}

/// Persist one finished run: config, log, pretrained checkpoints, reports.
fn persist_run(dir: &Path, cfg: &RunConfig, artifacts: &RunArtifacts, world: &WorldState) -> Result<RunSummary> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let config_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("config serialization failed: {e}")))?;
    std::fs::write(dir.join("config.json"), config_json + "\n")?;
    artifacts.write_log(&dir.join("run_log.jsonl"))?;
    for ((cell, version), model) in artifacts.snapshot_index() {
        if version == 0 {
            let file = std::fs::File::create(dir.join("checkpoints").join(format!("pretrained_{cell}.bin")))?;
            model.write_to(std::io::BufWriter::new(file))?;
        }
    }
    write_reports(artifacts, world, dir)
}

fn cmd_run(common: &ConfigArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load(common, seed)?;
    let world = build_world(&cfg.world)?;
    let artifacts = sim::run_on_world(&cfg, &world)?;
    let dir = run_dir(&out_root(&common.out), &cfg);
    persist_run(&dir, &cfg, &artifacts, &world)?;
    println!("{}", dir.display());
    Ok(())
}

fn parse_list<T, F>(raw: &Option<String>, default: &[T], parse: F, what: &str) -> Result<Vec<T>>
where
    T: Copy,
    F: Fn(&str) -> Option<T>,
{
    match raw {
        None => Ok(default.to_vec()),
        Some(s) => s
            .split(',')
            .map(|item| {
                parse(item.trim()).ok_or_else(|| Error::config(format!("unknown {what} '{item}'")))
            })
            .collect(),
    }
}

fn cmd_matrix(
    common: &ConfigArgs,
    seeds: &str,
    partitions: &Option<String>,
    pretrains: &Option<String>,
    modes: &Option<String>,
) -> Result<()> {
    let base = load(common, None)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    let partitions = parse_list(
        partitions,
        &ALL_PARTITIONS,
        |s| match s {
            "baseline" => Some(PartitionKind::Baseline),
            "common" => Some(PartitionKind::Common),
            "spatial" => Some(PartitionKind::Spatial),
            "weather" => Some(PartitionKind::Weather),
            "daylight" => Some(PartitionKind::Daylight),
            "specific" => Some(PartitionKind::Specific),
            _ => None,
        },
        "partition",
    )?;
    let pretrains = parse_list(
        pretrains,
        &[PretrainMode::Scratch, PretrainMode::General, PretrainMode::Cell],
        |s| match s {
            "scratch" => Some(PretrainMode::Scratch),
            "general" => Some(PretrainMode::General),
            "cell" => Some(PretrainMode::Cell),
            _ => None,
        },
        "pretraining",
    )?;
    let modes = parse_list(
        modes,
        &[LabelMode::Ol, LabelMode::Tta],
        |s| match s {
            "ol" => Some(LabelMode::Ol),
            "tta" => Some(LabelMode::Tta),
            _ => None,
        },
        "mode",
    )?;

    let root = out_root(&common.out);
    std::fs::create_dir_all(&root)?;
    let mut rows: Vec<(RunConfig, RunSummary)> = Vec::new();
    for &seed in &seeds {
        let mut world_cfg = base.world.clone();
        world_cfg.seed = seed;
        // The world is built lazily: a fully resumed seed never needs it.
        let mut world: Option<WorldState> = None;
        for &partition in &partitions {
            for &pretrain in &pretrains {
                for &mode in &modes {
                    let mut cfg = base.clone();
                    cfg.world.seed = seed;
                    cfg.partition = partition;
                    cfg.pretrain.mode = pretrain;
                    cfg.mode = mode;
                    let dir = run_dir(&root, &cfg);
                    let summary = match read_summary(&dir.join("summary.json")) {
                        Some(summary) => summary,
                        None => {
                            if world.is_none() {
                                world = Some(build_world(&world_cfg)?);
                            }
                            let world = world.as_ref().unwrap();
                            let artifacts = sim::run_on_world(&cfg, world)?;
                            persist_run(&dir, &cfg, &artifacts, world)?
                        }
                    };
                    rows.push((cfg, summary));
                }
            }
        }
    }

    let table = root.join("table.csv");
    let mut text = format!(
        "# schema={} config={} seeds={}\n",
        msc_tta::log::SCHEMA_VERSION,
        base.content_hash(),
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
    );
    text.push_str("partition,pretrain,mode,adapt,seed,miou_imminent_3h,miou_imminent_lasthour,miou_future_3h,miou_future_lasthour\n");
    for (cfg, s) in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            name_of(&cfg.partition),
            name_of(&cfg.pretrain.mode),
            name_of(&cfg.mode),
            cfg.adapt,
            cfg.world.seed,
            s.miou_imminent_3h,
            s.miou_imminent_lasthour,
            s.miou_future_3h,
            s.miou_future_lasthour,
        ));
    }
    std::fs::write(&table, text)?;
    println!("{}", table.display());
    Ok(())
}

fn name_of<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn read_summary(path: &Path) -> Option<RunSummary> {
    let text = std::fs::read_to_string(path).ok()?;
    let doc: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(doc.get("summary")?.clone()).ok()
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    let config_text = std::fs::read_to_string(run_dir.join("config.json"))
        .map_err(|e| Error::config(format!("cannot read {}: {e}", run_dir.join("config.json").display())))?;
    let cfg: RunConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::config(format!("invalid config.json: {e}")))?;
    let artifacts = RunArtifacts::read_log(cfg.clone(), &run_dir.join("run_log.jsonl"))?;
    let world = build_world(&cfg.world)?;
    write_reports(&artifacts, &world, run_dir)?;
    println!("{}", run_dir.display());
    Ok(())
}

fn cmd_export_schedule(common: &ConfigArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load(common, seed)?;
    let world = build_world(&cfg.world)?;
    let root = out_root(&common.out);
    std::fs::create_dir_all(&root)?;
    let header = format!(
        "# schema={} config={} seed={}",
        msc_tta::log::SCHEMA_VERSION,
        cfg.content_hash(),
        cfg.world.seed
    );

    let mut agents = format!("{header}\nagent,segment_start_s,zone\n");
    for schedule in &world.schedules {
        for &(start, zone) in &schedule.segments {
            agents.push_str(&format!("{},{},{}\n", schedule.agent, start, zone));
        }
    }
    std::fs::write(root.join("schedule_agents.csv"), agents)?;

    let period = cfg.world.weather_period();
    let mut weather = format!("{header}\nperiod,start_s,kind\n");
    for (i, kind) in world.weather_periods.iter().enumerate() {
        weather.push_str(&format!("{},{},{}\n", i, i as f64 * period, name_of(kind)));
    }
    std::fs::write(root.join("schedule_weather.csv"), weather)?;
    println!("{}", root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { common, seed } => cmd_run(common, *seed),
        Cmd::Matrix {
            common,
            seeds,
            partitions,
            pretrains,
            modes,
        } => cmd_matrix(common, seeds, partitions, pretrains, modes),
        Cmd::Report { run_dir } => cmd_report(run_dir),
        Cmd::ExportSchedule { common, seed } => cmd_export_schedule(common, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
