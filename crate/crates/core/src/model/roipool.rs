use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Scalar, Tensor};

/// Per-channel global max over the voxels of `bbox` in sample `n`.
///
/// Returns the pooled vector and, for each channel, the flat index of the
/// winning voxel in `feat.data` (first occurrence on ties).
pub fn roipool<T: Scalar>(feat: &Tensor<T>, n: usize, bbox: &BBox) -> Result<(Vec<T>, Vec<usize>)> {
    bbox.validate()?;
    let spatial = feat.spatial();
    if !bbox.is_within(spatial) {
        return Err(Error::BBox(format!(
            "{bbox} is outside the feature map {spatial:?}"
        )));
    }
    if n >= feat.batch() {
        return Err(Error::Shape(format!("sample {n} out of range")));
    }
    let [_, h, w] = spatial;
    let s = feat.spatial_len();
    let c = feat.channels();
    let mut values = Vec::with_capacity(c);
    let mut argmax = Vec::with_capacity(c);
    for ch in 0..c {
        let base = (n * c + ch) * s;
        let mut best = T::neg_infinity();
        let mut best_i = base;
        for z in bbox.start[0]..bbox.stop[0] {
            for y in bbox.start[1]..bbox.stop[1] {
                let row = base + (z as usize * h + y as usize) * w;
                for x in bbox.start[2] as usize..bbox.stop[2] as usize {
                    let v = feat.data[row + x];
                    if v > best {
                        best = v;
                        best_i = row + x;
                    }
                }
            }
        }
        values.push(best);
        argmax.push(best_i);
    }
    Ok((values, argmax))
}

/// Route embedding gradients back to the winning voxels.
pub fn roipool_backward<T: Scalar>(dfeat: &mut Tensor<T>, argmax: &[usize], grad: &[T]) {
    for (&i, &g) in argmax.iter().zip(grad) {
        dfeat.data[i] = dfeat.data[i] + g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_max_construction() {
        let mut feat = Tensor::<f32>::zeros([1, 4, 6, 6, 6]);
        let s = 216;
        feat.data[2 * s + (3 * 6 + 2) * 6 + 4] = 5.0;
        let b = BBox::new([1, 1, 1], [5, 5, 5]).unwrap();
        let (v, _) = roipool(&feat, 0, &b).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn full_box_is_global_max() {
        let data: Vec<f64> = (0..2 * 125).map(|i| ((i * 7919) % 251) as f64).collect();
        let feat = Tensor::from_vec([1, 2, 5, 5, 5], data.clone());
        let (v, _) = roipool(&feat, 0, &BBox::new([0; 3], [5; 3]).unwrap()).unwrap();
        for ch in 0..2 {
            let m = data[ch * 125..(ch + 1) * 125].iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(v[ch], m);
        }
    }

    #[test]
    fn rejects_out_of_bounds() {
        let feat = Tensor::<f32>::zeros([1, 1, 4, 4, 4]);
        assert!(roipool(&feat, 0, &BBox::new([0; 3], [5, 4, 4]).unwrap()).is_err());
        let empty = BBox { start: [1; 3], stop: [1, 2, 2] };
        assert!(roipool(&feat, 0, &empty).is_err());
    }
}
