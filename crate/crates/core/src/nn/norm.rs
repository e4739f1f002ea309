use super::{Mode, Param, ParamVisitor, Scalar, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm3d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: Param::buffer(vec![channels], T::zero()),
            running_var: Param::buffer(vec![channels], T::one()),
            cache: None,
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(x.channels(), self.channels, "batchnorm channels");
        let (n, c, s) = (x.batch(), self.channels, x.spatial_len());
        let count = (n * s) as f64;
        let eps = T::from_f64_lossy(EPS);
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * s;
                        sum += x.data[off..off + s].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * s;
                        sq += x.data[off..off + s]
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = self.running_mean.value[ch].to_f64().unwrap();
                    let rv = self.running_var.value[ch].to_f64().unwrap();
                    self.running_mean.value[ch] =
                        T::from_f64_lossy((1.0 - MOMENTUM) * rm + MOMENTUM * mean[ch]);
                    self.running_var.value[ch] =
                        T::from_f64_lossy((1.0 - MOMENTUM) * rv + MOMENTUM * var[ch] * unbias);
                }
                (
                    mean.into_iter().map(T::from_f64_lossy).collect(),
                    var.into_iter().map(T::from_f64_lossy).collect(),
                )
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape);
        let mut y = Tensor::zeros(x.shape);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                let (g, bt, m, is) = (self.gamma.value[ch], self.beta.value[ch], mean[ch], inv_std[ch]);
                for i in off..off + s {
                    let h = (x.data[i] - m) * is;
                    xhat.data[i] = h;
                    y.data[i] = g * h + bt;
                }
            }
        }
        self.cache = Some(Cache { xhat, inv_std, mode });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batchnorm backward before forward");
        let (n, c, s) = (dy.batch(), self.channels, dy.spatial_len());
        let count = T::from_usize(n * s).unwrap();
        let mut dx = Tensor::zeros(dy.shape);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    sum_dy = sum_dy + dy.data[i];
                    sum_dy_xhat = sum_dy_xhat + dy.data[i] * cache.xhat.data[i];
                }
            }
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xhat;
            self.beta.grad[ch] = self.beta.grad[ch] + sum_dy;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    dx.data[i] = match cache.mode {
                        Mode::Eval => g * is * dy.data[i],
                        Mode::Train => {
                            g * is / count
                                * (count * dy.data[i] - sum_dy - cache.xhat.data[i] * sum_dy_xhat)
                        }
                    };
                }
            }
        }
        self.cache = Some(cache);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_and_eval_uses_running_stats() {
        let mut bn = BatchNorm3d::<f64>::new(2);
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = Tensor::from_vec([2, 2, 1, 2, 2], data);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data[(b * 2 + ch) * 4..(b * 2 + ch) * 4 + 4].to_vec())
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 8.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // Fresh running stats (0, 1) after one update with momentum 0.1.
        assert!((bn.running_mean.value[0] - 0.1 * 5.5).abs() < 1e-12);

        let mut fresh = BatchNorm3d::<f64>::new(2);
        let z = fresh.forward(&Tensor::zeros([1, 2, 2, 2, 2]), Mode::Eval);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }
}
