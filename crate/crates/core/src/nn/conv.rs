use rand::Rng;

use super::{gemm, Param, ParamVisitor, Scalar, Tensor};

/// Stride-1 3D convolution with "same" zero padding; kernel side 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out, in, k, k, k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
    cols: Vec<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel side must be 1 or 3");
        let fan_in = in_channels * kernel.pow(3);
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::normal(
                vec![out_channels, in_channels, kernel, kernel, kernel],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Param::filled(vec![out_channels], T::zero()),
            input: None,
            cols: Vec::new(),
        }
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let s = x.spatial_len();
        let rows = self.in_channels * self.taps();
        let mut y = Tensor::zeros([x.batch(), self.out_channels, x.shape[2], x.shape[3], x.shape[4]]);
        if self.kernel == 3 {
            self.cols.resize(rows * s, T::zero());
        }
        for n in 0..x.batch() {
            let out = y.sample_mut(n);
            for (o, chunk) in out.chunks_mut(s).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            let b: &[T] = if self.kernel == 3 {
                im2col(x.sample(n), self.in_channels, x.spatial(), &mut self.cols);
                &self.cols
            } else {
                x.sample(n)
            };
            gemm(false, false, self.out_channels, s, rows, T::one(), &self.weight.value, b, T::one(), out);
        }
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward before forward");
        let s = x.spatial_len();
        let rows = self.in_channels * self.taps();
        let mut dx = Tensor::zeros(x.shape);
        let mut dcols = vec![T::zero(); rows * s];
        for n in 0..x.batch() {
            let g = dy.sample(n);
            for (o, chunk) in g.chunks(s).enumerate() {
                self.bias.grad[o] = self.bias.grad[o] + chunk.iter().copied().sum::<T>();
            }
            if self.kernel == 3 {
                self.cols.resize(rows * s, T::zero());
                im2col(x.sample(n), self.in_channels, x.spatial(), &mut self.cols);
                gemm(false, true, self.out_channels, rows, s, T::one(), g, &self.cols, T::one(), &mut self.weight.grad);
                gemm(true, false, rows, s, self.out_channels, T::one(), &self.weight.value, g, T::zero(), &mut dcols);
                col2im(&dcols, self.in_channels, x.spatial(), dx.sample_mut(n));
            } else {
                gemm(false, true, self.out_channels, rows, s, T::one(), g, x.sample(n), T::one(), &mut self.weight.grad);
                gemm(true, false, rows, s, self.out_channels, T::one(), &self.weight.value, g, T::zero(), dx.sample_mut(n));
            }
        }
        self.input = Some(x);
        dx
    }

    /// Drop cached activations and scratch space.
    pub fn clear_cache(&mut self) {
        self.input = None;
        self.cols = Vec::new();
    }
}

/// Unfold 3x3x3 neighborhoods: row `(c*27 + tap)`, column = output voxel.
fn im2col<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], cols: &mut [T]) {
    let [d, h, w] = dims;
    let s = d * h * w;
    for c in 0..channels {
        let src = &x[c * s..(c + 1) * s];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = c * 27 + kd * 9 + kh * 3 + kw;
                    let dst = &mut cols[row * s..(row + 1) * s];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            let line = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                line.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let s_line = &src[(sz as usize * h + sy as usize) * w..][..w];
                            match kw {
                                0 => {
                                    line[0] = T::zero();
                                    line[1..].copy_from_slice(&s_line[..w - 1]);
                                }
                                1 => line.copy_from_slice(s_line),
                                _ => {
                                    line[..w - 1].copy_from_slice(&s_line[1..]);
                                    line[w - 1] = T::zero();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], channels: usize, dims: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = dims;
    let s = d * h * w;
    for c in 0..channels {
        let dst = &mut dx[c * s..(c + 1) * s];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = c * 27 + kd * 9 + kh * 3 + kw;
                    let src = &cols[row * s..(row + 1) * s];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let line = &src[(z * h + y) * w..][..w];
                            let d_line = &mut dst[(sz as usize * h + sy as usize) * w..][..w];
                            match kw {
                                0 => {
                                    for i in 1..w {
                                        d_line[i - 1] = d_line[i - 1] + line[i];
                                    }
                                }
                                1 => {
                                    for i in 0..w {
                                        d_line[i] = d_line[i] + line[i];
                                    }
                                }
                                _ => {
                                    for i in 0..w - 1 {
                                        d_line[i + 1] = d_line[i + 1] + line[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution used as an oracle.
    fn direct(conv: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, ci, d, h, w] = x.shape;
        let co = conv.out_channels;
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut y = Tensor::zeros([n, co, d, h, w]);
        for b in 0..n {
            for o in 0..co {
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let mut acc = conv.bias.value[o];
                            for c in 0..ci {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let (sz, sy, sx) = (
                                                z as isize + kd - r,
                                                yy as isize + kh - r,
                                                xx as isize + kw - r,
                                            );
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                                continue;
                                            }
                                            let wi = (((o * ci + c) as isize * k + kd) * k + kh) * k + kw;
                                            let xi = (((b * ci + c) * d + sz as usize) * h + sy as usize) * w + sx as usize;
                                            acc += conv.weight.value[wi as usize] * x.data[xi];
                                        }
                                    }
                                }
                            }
                            y.data[(((b * co + o) * d + z) * h + yy) * w + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let mut conv = Conv3d::<f64>::new(3, 4, k, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
            let x = random_tensor([2, 3, 4, 5, 6], &mut rng);
            let y = conv.forward(&x);
            let want = direct(&conv, &x);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, J dx> == <J^T dy, dx> for the linear part of the layer.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let mut conv = Conv3d::<f64>::new(2, 3, k, &mut rng);
            let x = random_tensor([1, 2, 3, 4, 5], &mut rng);
            let dy = random_tensor([1, 3, 3, 4, 5], &mut rng);
            let y0 = conv.forward(&Tensor::zeros(x.shape));
            let y = conv.forward(&x);
            let dx = conv.backward(&dy);
            let lhs: f64 = dy
                .data
                .iter()
                .zip(y.data.iter().zip(&y0.data))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            let rhs: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}
