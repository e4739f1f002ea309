//! Static analysis artifacts: 2D projections of embeddings, scatter plots,
//! K-sweep curves and retrieval montages. Every image has a CSV or JSON twin.

mod emit;
mod project;
mod raster;

pub use emit::{
    emit_k_sweep, emit_retrieval_panel, emit_scatter, read_scatter_csv, PanelEntry, PanelSidecar,
    ScatterRow,
};
pub use project::{project_2d, ProjectionConfig, ProjectionMethod};

use crate::error::Result;
use crate::retrieval::EmbeddingTable;

/// Project every row of a table.
pub fn project_table(table: &EmbeddingTable, config: &ProjectionConfig) -> Result<Vec<[f64; 2]>> {
    project_2d(&table.vectors, table.len(), table.channels, config)
}
