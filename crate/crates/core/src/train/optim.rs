//! Parameter updates.

/// Anything that turns a gradient into an in-place parameter update.
pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grads: &[f64]);
}

/// SGD with heavy-ball momentum and decoupled-from-mask weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-parameter flag: true if weight decay applies.
    decay_mask: Vec<bool>,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        Sgd {
            lr,
            momentum,
            weight_decay,
            decay_mask,
            velocity: vec![0.0; n],
        }
    }

    /// No momentum, no decay.
    pub fn plain(lr: f64) -> Self {
        Sgd::new(lr, 0.0, 0.0, Vec::new())
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "optimizer length mismatch");
        if self.velocity.len() != params.len() {
            self.velocity.resize(params.len(), 0.0);
        }
        for i in 0..params.len() {
            let mut g = grads[i];
            if self.weight_decay != 0.0 && self.decay_mask.get(i).copied().unwrap_or(false) {
                g += self.weight_decay * params[i];
            }
            let v = if self.momentum != 0.0 {
                self.velocity[i] = self.momentum * self.velocity[i] + g;
                self.velocity[i]
            } else {
                g
            };
            params[i] -= self.lr * v;
        }
    }
}
