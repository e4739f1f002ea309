use rand::Rng;

use super::{Param, ParamVisitor, Scalar};

/// Affine map `y = W x + b` on single vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::normal(
                vec![out_features, in_features],
                (1.0 / in_features as f64).sqrt(),
                rng,
            ),
            bias: Param::filled(vec![out_features], T::zero()),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_features, "linear input width");
        (0..self.out_features)
            .map(|o| {
                let row = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                row.iter().zip(x).fold(self.bias.value[o], |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    /// Accumulate parameter gradients for input `x`; returns `dL/dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_features];
        for (o, &g) in dy.iter().enumerate() {
            self.bias.grad[o] = self.bias.grad[o] + g;
            let base = o * self.in_features;
            for i in 0..self.in_features {
                self.weight.grad[base + i] = self.weight.grad[base + i] + g * x[i];
                dx[i] = dx[i] + g * self.weight.value[base + i];
            }
        }
        dx
    }
}
