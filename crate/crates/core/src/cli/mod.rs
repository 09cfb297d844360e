//! Config-driven experiment runner behind the `bbh` binary.

pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod runner;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config, DataSource, EvalConfig, ExperimentConfig, MnistSource, NetworkChoice, ToySource};
pub use runner::{read_config, run_experiment, run_grid, RunSummary};
