//! Multi-Stream Cellular Test-Time Adaptation (MSC-TTA) simulator.
//!
//! A deterministic multi-agent world streams labeled samples to a fleet of
//! agents; the environment is divided into cells, each owning a replay
//! buffer and a student model that adapts online from teacher pseudo labels
//! and broadcasts its weights back to the agents in the cell. This crate
//! implements the full pipeline — synthetic drifting world, fast
//! (per-agent inference) and slow (per-cell adaptation) routes, six cell
//! partitions, three pretraining regimes — plus the online evaluation
//! protocol (imminent/future mIoU, horizon summaries, transition-aligned
//! recovery analysis) and a CLI for running scenario grids.
//!
//! Every run is a pure function of its [`config::RunConfig`]: identical
//! configurations produce byte-identical run logs, including under the
//! internal rayon parallelism.
//!
//! The `book/` directory contains a guide with runnable snippets; its code
//! blocks are compiled as doc-tests below so the guide cannot drift from
//! the API.

pub mod config;
pub mod domain;
pub mod error;
pub mod eval;
pub mod fast_route;
pub mod learner;
pub mod log;
pub mod rng;
pub mod scenarios;
pub mod sim;
pub mod slow_route;
pub mod world;

pub use config::RunConfig;
pub use domain::{ConfusionMatrix, LabelGrid, RateConfig, Sample, Timestamp};
pub use error::{Error, Result};
pub use eval::{imminent_series, future_series, summarize, transition_report, RunSummary};
pub use learner::{ModelSnapshot, TeacherOracle, TrainingConfig};
pub use log::{LogRecord, RunArtifacts};
pub use scenarios::{PartitionKind, PretrainMode};
pub use sim::{run, run_matrix};
pub use slow_route::LabelMode;
pub use world::{build_world, WorldConfig, WorldState};

// Compile the guide's code blocks as doc-tests so book and API stay in sync.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(world, "../../../book/src/world.md");
    chapter!(adaptation, "../../../book/src/adaptation.md");
    chapter!(scenarios, "../../../book/src/scenarios.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
    chapter!(determinism, "../../../book/src/determinism.md");
}
