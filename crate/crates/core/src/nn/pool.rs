use super::{Scalar, Tensor};

/// Non-overlapping max pooling with window and stride `factor`.
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    pub factor: usize,
    input_shape: Option<[usize; 5]>,
    argmax: Vec<usize>,
}

impl MaxPool3d {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            input_shape: None,
            argmax: Vec::new(),
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let f = self.factor;
        let [n, c, d, h, w] = x.shape;
        assert!(d % f == 0 && h % f == 0 && w % f == 0, "maxpool: side not divisible");
        let (od, oh, ow) = (d / f, h / f, w / f);
        let mut y = Tensor::zeros([n, c, od, oh, ow]);
        self.argmax = vec![0; y.data.len()];
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = base;
                        for dz in 0..f {
                            for dy in 0..f {
                                let row = base + ((z * f + dz) * h + yy * f + dy) * w + xx * f;
                                for dx in 0..f {
                                    let v = x.data[row + dx];
                                    if v > best {
                                        best = v;
                                        best_i = row + dx;
                                    }
                                }
                            }
                        }
                        let o = ((nc * od + z) * oh + yy) * ow + xx;
                        y.data[o] = best;
                        self.argmax[o] = best_i;
                    }
                }
            }
        }
        self.input_shape = Some(x.shape);
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.expect("maxpool backward before forward");
        let mut dx = Tensor::zeros(shape);
        for (o, &i) in self.argmax.iter().enumerate() {
            dx.data[i] = dx.data[i] + dy.data[o];
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
        self.argmax = Vec::new();
    }
}

/// Trilinear upsampling by an integer factor (half-pixel centers, edge clamp).
#[derive(Debug, Clone)]
pub struct Upsample3d {
    pub factor: usize,
    input_shape: Option<[usize; 5]>,
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(len: usize, factor: usize) -> Vec<Tap> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

/// Linear resampling of the middle axis of an `[outer, len, inner]` array.
fn upsample_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize, factor: usize) -> Vec<T> {
    let t = taps(len, factor);
    let olen = len * factor;
    let mut y = vec![T::zero(); outer * olen * inner];
    for a in 0..outer {
        for (o, tap) in t.iter().enumerate() {
            let (w0, w1) = (T::from_f64_lossy(tap.w0), T::from_f64_lossy(tap.w1));
            let src0 = &x[(a * len + tap.i0) * inner..][..inner];
            let src1 = &x[(a * len + tap.i1) * inner..][..inner];
            let dst = &mut y[(a * olen + o) * inner..][..inner];
            for i in 0..inner {
                dst[i] = w0 * src0[i] + w1 * src1[i];
            }
        }
    }
    y
}

fn upsample_axis_adjoint<T: Scalar>(
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    factor: usize,
) -> Vec<T> {
    let t = taps(len, factor);
    let olen = len * factor;
    let mut dx = vec![T::zero(); outer * len * inner];
    for a in 0..outer {
        for (o, tap) in t.iter().enumerate() {
            let (w0, w1) = (T::from_f64_lossy(tap.w0), T::from_f64_lossy(tap.w1));
            let src = &dy[(a * olen + o) * inner..][..inner];
            for i in 0..inner {
                let g = src[i];
                let j0 = (a * len + tap.i0) * inner + i;
                dx[j0] = dx[j0] + w0 * g;
                let j1 = (a * len + tap.i1) * inner + i;
                dx[j1] = dx[j1] + w1 * g;
            }
        }
    }
    dx
}

impl Upsample3d {
    pub fn new(factor: usize) -> Self {
        Self {
            factor,
            input_shape: None,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let f = self.factor;
        let [n, c, d, h, w] = x.shape;
        let a = upsample_axis(&x.data, n * c, d, h * w, f);
        let b = upsample_axis(&a, n * c * d * f, h, w, f);
        let out = upsample_axis(&b, n * c * d * f * h * f, w, 1, f);
        self.input_shape = Some(x.shape);
        Tensor::from_vec([n, c, d * f, h * f, w * f], out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, d, h, w] = self.input_shape.expect("upsample backward before forward");
        let f = self.factor;
        let b = upsample_axis_adjoint(&dy.data, n * c * d * f * h * f, w, 1, f);
        let a = upsample_axis_adjoint(&b, n * c * d * f, h, w, f);
        let dx = upsample_axis_adjoint(&a, n * c, d, h * w, f);
        Tensor::from_vec([n, c, d, h, w], dx)
    }
}
