use crate::model::Network;
use crate::nn::Scalar;

/// SGD with (optionally Nesterov) momentum and no weight decay:
/// `v = mu * v + g`, then `p -= lr * (g + mu * v)` (Nesterov) or `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            velocity: Vec::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, net: &mut Network<T>, lr: f64) {
        let mu = self.momentum;
        let nesterov = self.nesterov;
        let velocity = &mut self.velocity;
        let mut slot = 0;
        net.visit_params(&mut |_, p| {
            if !p.trainable {
                return;
            }
            if velocity.len() <= slot {
                velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut velocity[slot];
            for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let g = g.to_f64().unwrap();
                *vi = mu * *vi + g;
                let update = if nesterov { g + mu * *vi } else { *vi };
                *w = T::from_f64_lossy(w.to_f64().unwrap() - lr * update);
            }
            slot += 1;
        });
    }
}
