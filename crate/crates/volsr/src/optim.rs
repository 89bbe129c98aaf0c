//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{lit, Element};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state aligned with a `ParamSet`'s registration order.
pub struct Adam<E: Element> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(params: &ParamSet<E>, cfg: AdamConfig) -> Self {
        let m = params
            .iter()
            .map(|p| vec![E::zero(); p.tensor.numel()])
            .collect();
        let v = params
            .iter()
            .map(|p| vec![E::zero(); p.tensor.numel()])
            .collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over every parameter. Every parameter must carry a
    /// gradient; a missing one indicates a wiring bug, not a soft condition.
    pub fn step(&mut self, params: &ParamSet<E>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = lit::<E>(self.cfg.lr);
        let eps = lit::<E>(self.cfg.eps);
        let b1e = lit::<E>(b1);
        let b2e = lit::<E>(b2);
        let ob1 = lit::<E>(1.0 - b1);
        let ob2 = lit::<E>(1.0 - b2);
        let ibc1 = lit::<E>(1.0 / bc1);
        let ibc2 = lit::<E>(1.0 / bc2);
        for (i, p) in params.iter().enumerate() {
            let grad = p.tensor.grad().ok_or_else(|| {
                Error::Contract(format!("adam step: missing gradient for {}", p.name))
            })?;
            let g = grad.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.tensor.map_data(|data| {
                for j in 0..data.len() {
                    m[j] = b1e * m[j] + ob1 * g[j];
                    v[j] = b2e * v[j] + ob2 * g[j] * g[j];
                    let mhat = m[j] * ibc1;
                    let vhat = v[j] * ibc2;
                    data[j] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Moment buffers keyed for checkpointing, in registration order.
    pub fn state_blobs(&self, params: &ParamSet<E>) -> Vec<(String, Vec<E>)> {
        let mut out = Vec::new();
        for (i, p) in params.iter().enumerate() {
            out.push((format!("{}/adam_m", p.name), self.m[i].clone()));
            out.push((format!("{}/adam_v", p.name), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, index: usize, m: Vec<E>, v: Vec<E>) {
        assert_eq!(self.m[index].len(), m.len());
        self.m[index] = m;
        self.v[index] = v;
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}
