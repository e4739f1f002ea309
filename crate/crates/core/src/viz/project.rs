use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Tsne,
    PcaFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub perplexity: f64,
    pub n_iterations: usize,
    pub seed: u64,
    pub method: ProjectionMethod,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iterations: 1000,
            seed: 0,
            method: ProjectionMethod::Tsne,
        }
    }
}

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const LEARNING_RATE: f64 = 200.0;
const MIN_GAIN: f64 = 0.01;

/// Project `n` row-major vectors of width `dim` to 2D.
pub fn project_2d(
    data: &[f32],
    n: usize,
    dim: usize,
    config: &ProjectionConfig,
) -> Result<Vec<[f64; 2]>> {
    if data.len() != n * dim {
        return Err(Error::Shape(format!("{} values for {n} x {dim}", data.len())));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input to projection".into()));
    }
    let x: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
    match config.method {
        ProjectionMethod::PcaFallback => {
            if n == 0 {
                return Err(Error::Data("nothing to project".into()));
            }
            Ok(pca_2d(&x, n, dim, config.seed))
        }
        ProjectionMethod::Tsne => {
            if n < 10 {
                return Err(Error::Data(format!("t-SNE needs at least 10 points, got {n}")));
            }
            if !(config.perplexity > 0.0) || config.perplexity >= (n as f64 - 1.0) / 3.0 {
                return Err(Error::config(
                    "perplexity",
                    format!(
                        "perplexity {} too large for {n} points (must be < {:.2})",
                        config.perplexity,
                        (n as f64 - 1.0) / 3.0
                    ),
                ));
            }
            if config.n_iterations < 250 {
                return Err(Error::config("n_iterations", "at least 250 iterations required"));
            }
            Ok(tsne(&x, n, dim, config))
        }
    }
}

fn sq_distances(x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i * dim..(i + 1) * dim]
                .iter()
                .zip(&x[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional affinities with a per-point precision found by bisection so
/// that each row's entropy matches `ln(perplexity)`.
fn affinities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        // Shift by the smallest off-diagonal distance for numerical range.
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(row[j] - dmin) * beta).exp();
                sum += w;
                weighted += w * (row[j] - dmin);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let mut sum = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let w = (-(row[j] - dmin) * beta).exp();
            p[i * n + j] = w;
            sum += w;
        }
        for j in 0..n {
            p[i * n + j] /= sum;
        }
    }
    // Symmetrize and normalize.
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    sym
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
fn tsne(x: &[f64], n: usize, dim: usize, config: &ProjectionConfig) -> Vec<[f64; 2]> {
    let p = affinities(&sq_distances(x, n, dim), n, config.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut q = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    for it in 0..config.n_iterations {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let m = (exaggeration * p[i * n + j] - w / qsum) * w;
                grad[2 * i] += 4.0 * m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += 4.0 * m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        for k in 0..2 * n {
            let same_sign = (grad[k] > 0.0) == (update[k] > 0.0);
            gains[k] = if same_sign { gains[k] * 0.8 } else { gains[k] + 0.2 };
            gains[k] = gains[k].max(MIN_GAIN);
            update[k] = momentum * update[k] - LEARNING_RATE * gains[k] * grad[k];
            y[k] += update[k];
        }
        for axis in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + axis]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + axis] -= mean);
        }
    }
    (0..n).map(|i| [y[2 * i], y[2 * i + 1]]).collect()
}

/// Top-two principal component scores via power iteration with deflation.
fn pca_2d(x: &[f64], n: usize, dim: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut centered = x.to_vec();
    for c in 0..dim {
        let mean = (0..n).map(|i| x[i * dim + c]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| centered[i * dim + c] -= mean);
    }
    let mut cov = vec![0.0; dim * dim];
    for i in 0..n {
        let row = &centered[i * dim..(i + 1) * dim];
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] += row[a] * row[b];
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut components: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..dim)
                .map(|a| (0..dim).map(|b| cov[a * dim + b] * v[b]).sum())
                .collect();
            for c in &components {
                let dot: f64 = w.iter().zip(c).map(|(p, q)| p * q).sum();
                w.iter_mut().zip(c).for_each(|(p, q)| *p -= dot * q);
            }
            let norm = w.iter().map(|p| p * p).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|p| *p /= norm);
            v = w;
        }
        components.push(v);
    }
    (0..n)
        .map(|i| {
            let row = &centered[i * dim..(i + 1) * dim];
            let s = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [s(&components[0]), s(&components[1])]
        })
        .collect()
}
