//! Episode orchestration, baseline policies, benchmark runner and
//! configuration surface.

pub mod config;
pub mod episode;
pub mod suite;

pub use config::{
    Anchor, ClothSet, ClothSpec, Corner, EpisodeConfig, PolicyKind, RawConfig, SuiteConfig,
};
pub use episode::{baseline_random_action, baseline_triangular, run_episode, EpisodeResult, StepRow};
pub use suite::{
    calibrate, calibration_csv, cloth_draws, resolve_out_dir, results_csv, run_benchmark,
    summary_csv, write_outputs, BenchmarkResults, CalibrationRow, EpisodeRecord, SummaryRow,
};
