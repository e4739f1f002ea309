//! Synthetic labeled brain-tumor phantoms.
//!
//! Volumes are ellipsoidal "brains" with a dark midline fissure and paired
//! ventricles; tumors are type-conditioned blobs whose labels (bounding box,
//! linear size, localization, region) are re-derivable from their masks.

mod config;
mod dataset;
mod labels;
mod synth;
mod volume;

pub use config::{PhantomConfig, TumorType};
pub use dataset::{
    generate_dataset, generate_image, load_manifest, save_manifest, split_dataset, DatasetManifest, ImageEntry,
    Split, TumorRecord, MANIFEST_SCHEMA_VERSION,
};
pub use labels::{derive_labels, region_of_centroid, DerivedLabels};
pub use synth::{
    connected_components, synth_brain, synth_tumor, Brain, BlobShape, Ellipsoid, PlacementFailed,
    TumorFragment,
};
pub use volume::{SegmentationTarget, Volume};
