use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// A 3D scalar image in C order with the last axis fastest.
///
/// Axis 0 runs left to right, axis 1 front to rear, axis 2 lower to upper.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(shape: [usize; 3], spacing_mm: [f64; 3]) -> Self {
        Self {
            shape,
            spacing_mm,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "volume data length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite intensities".into()));
        }
        Ok(())
    }

    /// Copy out `bbox` (may extend past the volume; outside reads as zero).
    pub fn crop(&self, bbox: &BBox) -> Vec<f32> {
        crop_padded(&self.data, self.shape, bbox)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, &bytes)
    }

    pub fn read_raw(path: &Path, shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        let bytes = read_file(path)?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, expected {} for shape {:?}",
                path.display(),
                bytes.len(),
                n * 4,
                shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let v = Volume {
            shape,
            spacing_mm,
            data,
        };
        v.validate()?;
        Ok(v)
    }
}

/// Binary tumor mask aligned with a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationTarget {
    pub shape: [usize; 3],
    pub mask: Vec<u8>,
}

impl SegmentationTarget {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            mask: vec![0; shape.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn tight_bbox(&self) -> Option<BBox> {
        BBox::tight(&self.mask, self.shape)
    }

    pub fn crop(&self, bbox: &BBox) -> Vec<u8> {
        crop_padded(&self.mask, self.shape, bbox)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_file(path, &self.mask)
    }

    pub fn read_raw(path: &Path, shape: [usize; 3]) -> Result<Self> {
        let mask = read_file(path)?;
        if mask.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, expected shape {:?}",
                path.display(),
                mask.len(),
                shape
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Data(format!("{} is not a binary mask", path.display())));
        }
        Ok(Self { shape, mask })
    }
}

pub(crate) fn crop_padded<T: Copy + Default>(data: &[T], shape: [usize; 3], bbox: &BBox) -> Vec<T> {
    let sides = bbox.sides().map(|s| s.max(0) as usize);
    let mut out = vec![T::default(); sides.iter().product()];
    for i in 0..sides[0] {
        let x = bbox.start[0] + i as i64;
        if x < 0 || x >= shape[0] as i64 {
            continue;
        }
        for j in 0..sides[1] {
            let y = bbox.start[1] + j as i64;
            if y < 0 || y >= shape[1] as i64 {
                continue;
            }
            let z0 = bbox.start[2].max(0);
            let z1 = bbox.stop[2].min(shape[2] as i64);
            if z0 >= z1 {
                continue;
            }
            let src = (x as usize * shape[1] + y as usize) * shape[2];
            let dst = (i * sides[1] + j) * sides[2];
            let off = (z0 - bbox.start[2]) as usize;
            let len = (z1 - z0) as usize;
            out[dst + off..dst + off + len]
                .copy_from_slice(&data[src + z0 as usize..src + z0 as usize + len]);
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}
