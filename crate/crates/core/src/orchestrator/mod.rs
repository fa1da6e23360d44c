//! Checkpoints with stage lineage, run configuration, and the experiment
//! grid that assembles the results table.

mod checkpoint;
mod config;
mod grid;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CheckpointStore, LineageEntry, Stage, EXTENSION,
    FORMAT_VERSION, MAGIC,
};
pub use config::{DataConfig, GridAxes, Method, MidtrainAxis, RunConfig, STEPS_KEY};
pub use grid::{run_grid, Cell, GridRow, Improvement, Pipeline, ResultsTable};
