use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::Parameter;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam with bias correction. Moments are kept in f32, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update `p -= lr * m̂ / (sqrt(v̂) + eps)`. `grads` are left untouched.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} moment buffers, {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.value.shape() != g.shape() || p.value.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape())));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in it {
                let g = g as f64;
                let m1 = beta1 * *m as f64 + (1.0 - beta1) * g;
                let v1 = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = m1 as f32;
                *v = v1 as f32;
                *w = (*w as f64 - lr * (m1 / c1) / ((v1 / c2).sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}
