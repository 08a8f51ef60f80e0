//! Experiment plumbing: configuration files, run directories, evaluation,
//! heuristic baselines, sweeps and plots.

pub mod config;
pub mod evaluate;
pub mod plot;
pub mod run;
pub mod sweep;

pub use config::{EnvSection, EvalSection, ExperimentConfig, Profile, DESK_UPDATES_PER_ITERATION};
pub use evaluate::{
    deploy, eval_seed, evaluate, heuristic_action, summarize, write_samples, EvalSummary, HeuristicKind, Method,
    Scheduler,
};
pub use run::{default_out_root, load_checkpoint, train_run, RunManifest, RunStatus, TrainedRun, OUT_ROOT_VAR};
pub use sweep::{aggregate, run_cell, run_sweep, CellResult, SummaryRow, SweepParam, SweepRow, SweepSpec};
