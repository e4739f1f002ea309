use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::raster::{self, Frame, Marker};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::Task;
use crate::phantom::{DatasetManifest, TumorType, Volume};
use crate::retrieval::{neighbors_of, EmbeddingTable, KnnEvalReport, RetrievalIndex};

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn type_name(label: Option<usize>) -> &'static str {
    label
        .and_then(TumorType::from_index)
        .map_or("unknown", TumorType::name)
}

fn type_marker(label: Option<usize>) -> Marker {
    match label {
        Some(0) => Marker::Circle,
        Some(1) => Marker::Square,
        _ => Marker::Triangle,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub tumor_id: String,
    pub x: f64,
    pub y: f64,
    pub size_mm: f64,
    pub tumor_type: String,
}

/// Scatter of 2D coordinates colored by linear size with one marker per
/// tumor type, plus a CSV twin next to the PNG. Returns the CSV path.
pub fn emit_scatter(coords: &[[f64; 2]], table: &EmbeddingTable, out_png: &Path) -> Result<PathBuf> {
    if table.is_empty() {
        return Err(Error::Data("empty table".into()));
    }
    if coords.len() != table.len() {
        return Err(Error::Shape(format!(
            "{} coordinates for {} table rows",
            coords.len(),
            table.len()
        )));
    }
    let sizes: Vec<f64> = table.rows.iter().map(|r| r.linear_size_mm).collect();
    let (smin, smax) = sizes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let frame = Frame::new(coords.iter().map(|c| c[0]), coords.iter().map(|c| c[1]), 640, 640);
    let mut img = RgbImage::from_pixel(frame.width, frame.height, raster::WHITE);
    frame.axes(&mut img);
    let mut csv = String::from("tumor_id,x,y,size_mm,type\n");
    for ((c, row), size) in coords.iter().zip(&table.rows).zip(&sizes) {
        let label = row.label(Task::Type);
        let (px, py) = frame.px(c[0], c[1]);
        let t = if smax > smin { (size - smin) / (smax - smin) } else { 0.5 };
        raster::marker(&mut img, px, py, 4, type_marker(label), raster::viridis(t));
        writeln!(csv, "{},{},{},{},{}", row.tumor_id, c[0], c[1], size, type_name(label))
            .expect("string write");
    }
    save_png(&img, out_png)?;
    let csv_path = out_png.with_extension("csv");
    write_text(&csv_path, &csv)?;
    Ok(csv_path)
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Data(format!("{}: malformed line {line}", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
            Ok(ScatterRow {
                tumor_id: f[0].to_string(),
                x: num(f[1])?,
                y: num(f[2])?,
                size_mm: num(f[3])?,
                tumor_type: f[4].to_string(),
            })
        })
        .collect()
}

/// Accuracy curves per task and the size RMSE curve over K, plus a CSV of
/// `k,metric,value` rows. Returns the CSV path.
pub fn emit_k_sweep(reports: &[KnnEvalReport], out_png: &Path) -> Result<PathBuf> {
    if reports.len() < 2 {
        return Err(Error::Data("a K sweep needs at least 2 reports".into()));
    }
    let metrics: Vec<BTreeMap<String, f64>> = reports.iter().map(KnnEvalReport::metrics).collect();
    let names: BTreeSet<&String> = metrics[0].keys().collect();
    for (i, (m, r)) in metrics.iter().zip(reports).enumerate().skip(1) {
        let these: BTreeSet<&String> = m.keys().collect();
        if let Some(missing) = names.difference(&these).next() {
            return Err(Error::Data(format!(
                "report {i} (k={}) lacks metric {missing}",
                r.k
            )));
        }
        if let Some(extra) = these.difference(&names).next() {
            return Err(Error::Data(format!(
                "report {i} (k={}) has unexpected metric {extra}",
                r.k
            )));
        }
    }
    let mut csv = String::from("k,metric,value\n");
    for name in &names {
        for (m, r) in metrics.iter().zip(reports) {
            writeln!(csv, "{},{},{}", r.k, name, m[*name]).expect("string write");
        }
    }

    let ks: Vec<f64> = reports.iter().map(|r| r.k as f64).collect();
    let (w, h) = (480u32, 360u32);
    let mut img = RgbImage::from_pixel(2 * w, h, raster::WHITE);
    let mut left = RgbImage::from_pixel(w, h, raster::WHITE);
    let acc_frame = Frame::new(ks.iter().copied(), [0.0, 1.0].into_iter(), w, h);
    acc_frame.axes(&mut left);
    let acc_names: Vec<&&String> = names.iter().filter(|n| n.ends_with("_acc")).collect();
    for (ci, name) in acc_names.iter().enumerate() {
        let color = raster::PALETTE[ci % raster::PALETTE.len()];
        plot_series(&mut left, &acc_frame, &ks, metrics.iter().map(|m| m[**name]), color);
    }
    let mut right = RgbImage::from_pixel(w, h, raster::WHITE);
    let rmse: Vec<f64> = metrics.iter().map(|m| m["size_rmse_mm"]).collect();
    let rmse_frame = Frame::new(ks.iter().copied(), rmse.iter().copied().chain([0.0]), w, h);
    rmse_frame.axes(&mut right);
    plot_series(&mut right, &rmse_frame, &ks, rmse.iter().copied(), raster::BLACK);
    imageops::replace(&mut img, &left, 0, 0);
    imageops::replace(&mut img, &right, i64::from(w), 0);
    save_png(&img, out_png)?;
    let csv_path = out_png.with_extension("csv");
    write_text(&csv_path, &csv)?;
    Ok(csv_path)
}

fn plot_series(
    img: &mut RgbImage,
    frame: &Frame,
    xs: &[f64],
    ys: impl Iterator<Item = f64>,
    color: Rgb<u8>,
) {
    let pts: Vec<(i64, i64)> = xs.iter().zip(ys).map(|(&x, y)| frame.px(x, y)).collect();
    for w in pts.windows(2) {
        raster::line(img, w[0], w[1], color);
    }
    for &(x, y) in &pts {
        raster::marker(img, x, y, 2, Marker::Square, color);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub tumor_id: String,
    pub image_id: String,
    /// Distance to the query; zero for the query itself.
    pub distance: f64,
    pub bbox: BBox,
    /// Index along the third axis of the rendered slice.
    pub slice: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSidecar {
    pub query: PanelEntry,
    pub neighbors: Vec<PanelEntry>,
}

const PANEL_SCALE: u32 = 3;

/// Slice through the box center along the third axis; first axis runs
/// left to right, second top to bottom; box outlined in red.
fn render_slice(volume: &Volume, bbox: &BBox, slice: i64) -> RgbImage {
    let [nx, ny, _] = volume.shape;
    let s = PANEL_SCALE;
    let mut img = RgbImage::new(nx as u32 * s, ny as u32 * s);
    for x in 0..nx {
        for y in 0..ny {
            let v = volume.get(x, y, slice as usize).clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            for dx in 0..s {
                for dy in 0..s {
                    img.put_pixel(x as u32 * s + dx, y as u32 * s + dy, Rgb([g, g, g]));
                }
            }
        }
    }
    let s = i64::from(s);
    raster::rect(
        &mut img,
        bbox.start[0] * s,
        bbox.start[1] * s,
        bbox.stop[0] * s - 1,
        bbox.stop[1] * s - 1,
        raster::RED,
    );
    img
}

/// Query tumor and its `k` nearest neighbors from other images, one slice
/// panel each, laid out left to right. Writes a JSON sidecar next to the PNG.
pub fn emit_retrieval_panel(
    manifest: &DatasetManifest,
    base: &Path,
    index: &RetrievalIndex,
    tumor_id: &str,
    k: usize,
    out_png: &Path,
) -> Result<PanelSidecar> {
    let table = index.table();
    let response = neighbors_of(index, tumor_id, k).map_err(|(_, m)| Error::Retrieval(m))?;
    let entry = |id: &str, distance: f64| -> Result<PanelEntry> {
        let row = &table.rows[table.position(id).expect("id from the table")];
        let bbox = row.bbox;
        Ok(PanelEntry {
            tumor_id: id.to_string(),
            image_id: row.image_id.clone(),
            distance,
            bbox,
            slice: (bbox.start[2] + bbox.stop[2] - 1).div_euclid(2),
        })
    };
    let query = entry(tumor_id, 0.0)?;
    let neighbors = response
        .neighbors
        .iter()
        .map(|n| entry(&n.tumor_id, n.distance))
        .collect::<Result<Vec<_>>>()?;

    let mut panels = Vec::new();
    for e in std::iter::once(&query).chain(&neighbors) {
        let image = manifest
            .images
            .iter()
            .find(|i| i.image_id == e.image_id)
            .ok_or_else(|| Error::Data(format!("image {} not in manifest", e.image_id)))?;
        let volume = image.load_volume(base)?;
        let slice = e.slice.clamp(0, volume.shape[2] as i64 - 1);
        panels.push(render_slice(&volume, &e.bbox, slice));
    }
    let gap = 8u32;
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 - 1);
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let mut montage = RgbImage::from_pixel(width, height, raster::GRAY);
    let mut x = 0i64;
    for p in &panels {
        imageops::replace(&mut montage, p, x, 0);
        x += i64::from(p.width() + gap);
    }
    save_png(&montage, out_png)?;
    let sidecar = PanelSidecar { query, neighbors };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("panel sidecar", e))?;
    write_text(&out_png.with_extension("json"), &text)?;
    Ok(sidecar)
}
