//! Axis-aligned voxel boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open voxel box `[start, stop)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub start: [i64; 3],
    pub stop: [i64; 3],
}

impl BBox {
    pub fn new(start: [i64; 3], stop: [i64; 3]) -> Result<Self> {
        let b = BBox { start, stop };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.start[axis] >= self.stop[axis] {
                return Err(Error::BBox(format!(
                    "empty extent on axis {axis}: [{}, {})",
                    self.start[axis], self.stop[axis]
                )));
            }
        }
        Ok(())
    }

    pub fn side(&self, axis: usize) -> i64 {
        self.stop[axis] - self.start[axis]
    }

    pub fn sides(&self) -> [i64; 3] {
        [self.side(0), self.side(1), self.side(2)]
    }

    pub fn volume(&self) -> i64 {
        self.sides().iter().product()
    }

    /// Continuous center, in voxel-index coordinates of the box edges.
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.start[a] + self.stop[a]) as f64)
    }

    pub fn is_within(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.start[a] >= 0 && self.stop[a] <= shape[a] as i64)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        (0..3).all(|a| self.start[a] <= other.start[a] && other.stop[a] <= self.stop[a])
    }

    pub fn intersects_shape(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.stop[a] > 0 && self.start[a] < shape[a] as i64)
    }

    /// Clip to `[0, shape)`; `None` when nothing remains.
    pub fn clip(&self, shape: [usize; 3]) -> Option<BBox> {
        let start: [i64; 3] = std::array::from_fn(|a| self.start[a].max(0));
        let stop: [i64; 3] = std::array::from_fn(|a| self.stop[a].min(shape[a] as i64));
        let b = BBox { start, stop };
        b.validate().ok().map(|_| b)
    }

    pub fn translate(&self, offset: [i64; 3]) -> BBox {
        BBox {
            start: std::array::from_fn(|a| self.start[a] + offset[a]),
            stop: std::array::from_fn(|a| self.stop[a] + offset[a]),
        }
    }

    /// Tight box of the nonzero voxels of a C-order array of `shape`.
    pub fn tight<T: Copy + PartialEq + Default>(data: &[T], shape: [usize; 3]) -> Option<BBox> {
        let zero = T::default();
        let mut start = [i64::MAX; 3];
        let mut stop = [i64::MIN; 3];
        let mut any = false;
        let (_, ny, nz) = (shape[0], shape[1], shape[2]);
        for (idx, v) in data.iter().enumerate() {
            if *v == zero {
                continue;
            }
            any = true;
            let p = [
                (idx / (ny * nz)) as i64,
                ((idx / nz) % ny) as i64,
                (idx % nz) as i64,
            ];
            for a in 0..3 {
                start[a] = start[a].min(p[a]);
                stop[a] = stop[a].max(p[a] + 1);
            }
        }
        any.then_some(BBox { start, stop })
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}..{})x[{}..{})x[{}..{})",
            self.start[0], self.stop[0], self.start[1], self.stop[1], self.start[2], self.stop[2]
        )
    }
}
