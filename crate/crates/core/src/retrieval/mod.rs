//! Tumor embedding tables, exact Euclidean KNN retrieval and its
//! evaluation, the bounding-box distortion study, and a small HTTP query
//! endpoint.

mod distort;
mod eval;
mod index;
mod serve;
mod table;

pub use distort::{
    distort_bbox, eval_distortion, DistortedBox, DistortionDraw, DistortionParams,
    DistortionReport,
};
pub use eval::{eval_knn, eval_knn_with, sweep_k, EvalOptions, KnnEvalReport, QueryPrediction};
pub use index::{Neighbor, QueryResult, RetrievalIndex};
pub use serve::{neighbors_of, serve, NeighborsResponse, ServedNeighbor, Server};
pub use table::{
    embed_dataset, embed_manifest, extract_embedding, extract_embeddings, inference_window,
    EmbeddingTable, TableRow, TABLE_SCHEMA_VERSION,
};
