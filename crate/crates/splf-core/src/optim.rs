//! AdamW with decoupled weight decay. Parameter storage is f32 but the
//! moment buffers and the whole update arithmetic run in f64, which keeps
//! short trajectories reproducible against a 64-bit reference.

use crate::tensor::Param;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamW {
    params: Vec<Param>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub lr: f64,
    pub weight_decay: f64,
    t: u64,
}

impl AdamW {
    pub fn new(params: Vec<Param>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW { params, m, v, lr, weight_decay, t: 0 }
    }

    /// One update from the gradients currently held by the parameters.
    /// A parameter that received no gradient this step is treated as having
    /// a zero gradient; frozen parameters are left untouched entirely, so
    /// weight decay never drags them away from their fixed values.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (idx, p) in self.params.iter().enumerate() {
            if !p.trainable() {
                continue;
            }
            let grad = p.grad();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            p.update_value(|theta| {
                for i in 0..theta.len() {
                    let g = grad[i] as f64;
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    let x = theta[i] as f64;
                    theta[i] = (x - self.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * x)) as f32;
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
