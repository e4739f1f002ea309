use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hashing::file_sha256;
use crate::model::{load_checkpoint, Network, Task};
use crate::nn::Tensor;
use crate::phantom::{load_manifest, DatasetManifest, Split, TumorRecord, Volume};
use crate::training::TaskLabels;

pub const TABLE_SCHEMA_VERSION: u32 = 1;

/// Metadata of one embedded tumor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub tumor_id: String,
    pub image_id: String,
    /// Box the embedding was computed from.
    pub bbox: BBox,
    pub labels: TaskLabels,
    pub linear_size_mm: f64,
}

impl TableRow {
    pub fn from_record(record: &TumorRecord, bbox: BBox) -> Self {
        Self {
            tumor_id: record.tumor_id.clone(),
            image_id: record.image_id.clone(),
            bbox,
            labels: crate::training::task_labels(record),
            linear_size_mm: record.linear_size_mm,
        }
    }

    pub fn label(&self, task: Task) -> Option<usize> {
        self.labels.get(&task).copied().flatten()
    }
}

/// Tumor embeddings of one model, row-aligned with their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// SHA-256 of the checkpoint that produced the vectors.
    pub fingerprint: String,
    pub channels: usize,
    pub rows: Vec<TableRow>,
    /// Row-major `rows.len() x channels`.
    pub vectors: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    schema_version: u32,
    channels: usize,
    fingerprint: String,
    rows: usize,
    label_schema: Vec<Task>,
}

impl EmbeddingTable {
    pub fn new(fingerprint: String, channels: usize) -> Self {
        Self {
            fingerprint,
            channels,
            rows: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.channels..(i + 1) * self.channels]
    }

    pub fn position(&self, tumor_id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.tumor_id == tumor_id)
    }

    pub fn push(&mut self, row: TableRow, vector: &[f32]) -> Result<()> {
        if vector.len() != self.channels {
            return Err(Error::Shape(format!(
                "embedding of length {} in a table of width {}",
                vector.len(),
                self.channels
            )));
        }
        self.rows.push(row);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    /// Vectors must be finite with the declared width; ids unique.
    pub fn validate(&self) -> Result<()> {
        if self.vectors.len() != self.rows.len() * self.channels {
            return Err(Error::Shape("vector block does not match row count".into()));
        }
        if let Some(i) = self.vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite embedding for {}",
                self.rows[i / self.channels.max(1)].tumor_id
            )));
        }
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.tumor_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate tumor_id {}", w[0])));
        }
        Ok(())
    }

    /// JSON header line, raw little-endian f32 block, JSON row metadata.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = TableHeader {
            schema_version: TABLE_SCHEMA_VERSION,
            channels: self.channels,
            fingerprint: self.fingerprint.clone(),
            rows: self.rows.len(),
            label_schema: Task::CLASSIFICATION.to_vec(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json("table header", e))?;
        bytes.push(b'\n');
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        serde_json::to_writer(&mut bytes, &self.rows).map_err(|e| Error::json("table rows", e))?;
        bytes.push(b'\n');
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: TableHeader =
            serde_json::from_str(&line).map_err(|e| Error::json("table header", e))?;
        if header.schema_version != TABLE_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported table schema version {}",
                header.schema_version
            )));
        }
        let mut raw = vec![0u8; header.rows * header.channels * 4];
        r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let rows: Vec<TableRow> =
            serde_json::from_reader(r).map_err(|e| Error::json("table rows", e))?;
        if rows.len() != header.rows {
            return Err(Error::Data(format!(
                "header declares {} rows, found {}",
                header.rows,
                rows.len()
            )));
        }
        let table = Self {
            fingerprint: header.fingerprint,
            channels: header.channels,
            rows,
            vectors,
        };
        table.validate()?;
        Ok(table)
    }
}

/// Patch window for embedding `bbox` (already clipped to `shape`): at least
/// `min_side` and a multiple of `factor` per axis, centered on the box and
/// shifted inward at the borders. Extends past the volume only when the
/// volume is smaller than the window.
pub fn inference_window(bbox: &BBox, shape: [usize; 3], min_side: usize, factor: usize) -> BBox {
    let mut start = [0i64; 3];
    let mut stop = [0i64; 3];
    for a in 0..3 {
        let side = bbox.side(a) as usize;
        let p = side.div_ceil(factor).max(1) * factor;
        let p = p.max(min_side.div_ceil(factor) * factor) as i64;
        let v = shape[a] as i64;
        let s = if p <= v {
            (bbox.start[a] - (p - bbox.side(a)) / 2).clamp(0, v - p)
        } else {
            -((p - v) / 2)
        };
        start[a] = s;
        stop[a] = s + p;
    }
    BBox { start, stop }
}

/// Embed several boxes of one volume. Each box gets its own patch.
pub fn extract_embeddings(
    net: &mut Network<f32>,
    volume: &Volume,
    bboxes: &[BBox],
    min_patch: usize,
) -> Result<Vec<Vec<f32>>> {
    bboxes
        .iter()
        .map(|b| extract_embedding(net, volume, b, min_patch))
        .collect()
}

/// Backbone + RoiPool embedding of one box in inference mode.
pub fn extract_embedding(
    net: &mut Network<f32>,
    volume: &Volume,
    bbox: &BBox,
    min_patch: usize,
) -> Result<Vec<f32>> {
    bbox.validate()?;
    let clipped = bbox
        .clip(volume.shape)
        .ok_or_else(|| Error::BBox(format!("{bbox} lies outside the volume {:?}", volume.shape)))?;
    let window = inference_window(&clipped, volume.shape, min_patch, net.config.down_up_factor);
    let sides = window.sides().map(|s| s as usize);
    let patch = Tensor::from_vec([1, 1, sides[0], sides[1], sides[2]], volume.crop(&window));
    let rebased = clipped.translate(window.start.map(|v| -v));
    let mut out = net.embed(&patch, &[rebased])?;
    Ok(out.pop().expect("one box"))
}

/// Embed the tumors of `split` (all images when `None`), replacing each box
/// through `boxes` (identity for clean boxes).
pub fn embed_manifest(
    net: &mut Network<f32>,
    fingerprint: &str,
    manifest: &DatasetManifest,
    base: &Path,
    split: Option<Split>,
    min_patch: usize,
    mut boxes: impl FnMut(&TumorRecord, [usize; 3]) -> BBox,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(fingerprint.to_string(), net.channels());
    for entry in manifest.images_in(split) {
        if entry.tumors.is_empty() {
            continue;
        }
        let volume = entry.load_volume(base)?;
        for record in &entry.tumors {
            let bbox = boxes(record, entry.shape);
            let v = extract_embedding(net, &volume, &bbox, min_patch)?;
            table.push(TableRow::from_record(record, bbox), &v)?;
        }
    }
    if table.is_empty() {
        return Err(Error::Retrieval(format!("no tumors in split {split:?}")));
    }
    table.validate()?;
    Ok(table)
}

/// Load a checkpoint and embed every tumor of a split with clean boxes.
pub fn embed_dataset(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Option<Split>,
    min_patch: usize,
) -> Result<EmbeddingTable> {
    let mut net = load_checkpoint::<f32>(checkpoint)?;
    let fingerprint = file_sha256(checkpoint)?;
    let (manifest, base) = load_manifest(manifest_path)?;
    embed_manifest(&mut net, &fingerprint, &manifest, &base, split, min_patch, |r, _| r.bbox)
}
