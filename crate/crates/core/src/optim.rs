//! Decoupled-weight-decay adaptive-moment optimizer with linear warmup and
//! cosine decay, operating on flat parameter vectors.

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(param_len: usize, cfg: OptimConfig) -> Self {
        AdamW { cfg, m: vec![0.0; param_len], v: vec![0.0; param_len], t: 0 }
    }

    /// Learning rate after `t` completed steps (1-based inside `step`).
    pub fn lr_at(&self, t: u64) -> f64 {
        let c = &self.cfg;
        if c.warmup_steps > 0 && t <= c.warmup_steps {
            return c.lr * t as f64 / c.warmup_steps as f64;
        }
        let total = c.total_steps.max(t).max(c.warmup_steps + 1);
        let progress = (t - c.warmup_steps) as f64 / (total - c.warmup_steps) as f64;
        0.5 * c.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update in place; `params` and `grads` must match the state length.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let lr = self.lr_at(self.t);
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}
