//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use crate::model::{Group, Params};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup: usize,
    pub peak: f64,
    pub floor: f64,
    pub total: usize,
}

impl Schedule {
    /// Learning rate for 0-based `step`: linear warmup to `peak`, then cosine
    /// decay to `floor` at `total`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params<f32>,
    v: Params<f32>,
    t: i32,
}

/// Weight decay applies to matrices, not to biases, norms or embeddings.
fn decays(name: &str) -> bool {
    name.ends_with("_w") || name.ends_with(".w")
}

impl AdamW {
    pub fn new(params: &Params<f32>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update; tensors in `frozen` groups are left untouched.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64, frozen: &[Group]) {
        self.step_scaled(params, grads, lr, |g| if frozen.contains(&g) { 0.0 } else { 1.0 });
    }

    /// One update with the learning rate multiplied per group; a zero
    /// multiplier leaves the group untouched.
    pub fn step_scaled(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64, scale: impl Fn(Group) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let base = lr;
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let lr = base * scale(p.group);
            if lr == 0.0 {
                continue;
            }
            let decay = if decays(&p.name) { (1.0 - lr * self.weight_decay) as f32 } else { 1.0 };
            let step = (lr / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            let eps = self.eps as f32;
            let g = &grads.tensors[i].data;
            let m = &mut self.m.tensors[i].data;
            let v = &mut self.v.tensors[i].data;
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                p.data[j] = p.data[j] * decay - update;
            }
        }
    }
}
