//! End-to-end experiment orchestration.
//!
//! [`run_pipeline`] executes nine stages in order (generate, split, train,
//! embed, eval_knn, sweep_k, eval_distortion, tsne, panels). Each completed
//! stage leaves a stamp holding a content hash of its inputs; a rerun skips a
//! stage whose stamp matches and whose outputs still exist.

mod config;
mod run;
mod stamp;
mod sweep;

pub use config::{
    ExperimentConfig, RetrievalSettings, SeedScope, TsneScope, VizSettings, OUTPUT_ROOT_ENV,
};
pub use run::{run_pipeline, PipelineSummary, StageRecord, StageStatus, STAGES};
pub use stamp::Stamp;
pub use sweep::{ablation, channel_sweep, ChannelRow, ChannelSweepReport};
