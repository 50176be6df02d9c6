use super::{Float, ParamStore};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Linear warmup to a constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub warmup: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64, warmup: u64) -> Self {
        Self {
            schedule: Schedule { lr, warmup },
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay, applied only to parameters flagged for
/// decay in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Rebuild from saved moments.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("optimizer moment shapes disagree".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.step)
    }

    /// Apply one update from the gradients stored on `params`, then clear
    /// them. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<f64> {
        for id in 0..params.len() {
            if params.grad(id).is_none() {
                return Err(Error::MissingGradient(params.name(id).to_string()));
            }
        }
        if self.m.is_empty() {
            self.m = (0..params.len()).map(|i| vec![T::zero(); params.tensor(i).len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || (0..params.len()).any(|i| self.m[i].len() != params.tensor(i).len())
        {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let lr = c.schedule.lr_at(self.step);
        let mut clip = 1.0;
        if let Some(max_norm) = c.grad_clip {
            let sq: f64 = (0..params.len())
                .flat_map(|i| params.grad(i).unwrap_or(&[]).iter().map(|g| g.f64() * g.f64()))
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr_t, eps, clip_t) = (T::of(lr), T::of(c.eps), T::of(clip));
        for id in 0..params.len() {
            let g: Vec<T> = params.grad(id).expect("checked").to_vec();
            let decay = if params.decays(id) {
                T::of(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = &mut params.tensor_mut(id).data;
            for i in 0..p.len() {
                let gi = g[i] * clip_t;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        params.clear_grads();
        Ok(lr)
    }
}
