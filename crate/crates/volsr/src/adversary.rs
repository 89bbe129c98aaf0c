//! SRGAN-style 3D critic with layer normalization and the WGAN-GP loss
//! machinery.
//!
//! The critic ends in a bare linear unit: no squashing nonlinearity anywhere
//! after the last dense layer, since Wasserstein scores are unbounded. The
//! gradient penalty differentiates through the critic's input gradient, the
//! one second-order path the tensor engine supports, and that support is
//! scoped to scalar-output critics built from this module's layer set.

use crate::error::{Error, Result};
use crate::nn::{Conv3d, LayerNorm, Linear, ParamSet};
use crate::tensor::{grad_of, no_grad, Element, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub stages: usize,
    pub head_width: usize,
    pub input_size: [usize; 3],
    pub in_channels: usize,
    /// Drop trailing stages (with a warning) instead of erroring when the
    /// stride chain shrinks a patch below kernel support.
    pub allow_truncation: bool,
}

impl DiscriminatorConfig {
    pub fn new(input_size: [usize; 3]) -> Self {
        DiscriminatorConfig {
            base_width: 64,
            stages: 8,
            head_width: 1024,
            input_size,
            in_channels: 1,
            allow_truncation: false,
        }
    }

    fn stage_width(&self, s: usize) -> usize {
        self.base_width * (1usize << ((s - 1) / 2))
    }

    fn stage_stride(&self, s: usize) -> usize {
        if s % 2 == 0 {
            2
        } else {
            1
        }
    }
}

struct DStage<E: Element> {
    conv: Conv3d<E>,
    ln: Option<LayerNorm<E>>,
}

pub struct Discriminator<E: Element> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamSet<E>,
    stages: Vec<DStage<E>>,
    fc1: Linear<E>,
    fc2: Linear<E>,
    flat_width: usize,
}

impl<E: Element> Discriminator<E> {
    pub fn build(cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.base_width == 0 || cfg.stages == 0 || cfg.head_width == 0 || cfg.in_channels == 0 {
            return Err(Error::config(
                "discriminator config needs positive widths and stage count".to_string(),
            ));
        }
        let mut params = ParamSet::new();
        let mut stages = Vec::new();
        let mut dims = cfg.input_size;
        let mut cin = cfg.in_channels;
        for s in 1..=cfg.stages {
            if dims.iter().any(|&d| d < 3) {
                if cfg.allow_truncation {
                    log::warn!(
                        "discriminator stride chain truncated to {} stages: dims {:?} below kernel support",
                        s - 1,
                        dims
                    );
                    break;
                }
                return Err(Error::config(format!(
                    "patch {:?} too small for the stride chain: dims {:?} before stage {}",
                    cfg.input_size, dims, s
                )));
            }
            let width = cfg.stage_width(s);
            let stride = cfg.stage_stride(s);
            let conv = Conv3d::new(
                &mut params,
                &format!("stage{}/conv", s),
                cin,
                width,
                [3, 3, 3],
                [stride, stride, stride],
                rng,
            );
            let ln = (s > 1).then(|| LayerNorm::new(&mut params, &format!("stage{}/ln", s), width));
            stages.push(DStage { conv, ln });
            cin = width;
            for d in &mut dims {
                *d = (*d - 1) / stride + 1;
            }
        }
        if stages.is_empty() {
            return Err(Error::config(format!(
                "patch {:?} too small for any discriminator stage",
                cfg.input_size
            )));
        }
        let flat_width = cin * dims.iter().product::<usize>();
        let fc1 = Linear::new(&mut params, "head/fc1", flat_width, cfg.head_width, rng);
        let fc2 = Linear::new(&mut params, "head/fc2", cfg.head_width, 1, rng);
        Ok(Discriminator {
            cfg: *cfg,
            params,
            stages,
            fc1,
            fc2,
            flat_width,
        })
    }

    /// Critic scores, one unbounded scalar per sample, shape [B, 1].
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = x.shape().to_vec();
        let want = [
            self.cfg.in_channels,
            self.cfg.input_size[0],
            self.cfg.input_size[1],
            self.cfg.input_size[2],
        ];
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::shape(format!(
                "discriminator expects [B,{},{},{},{}], got {:?}",
                want[0], want[1], want[2], want[3], shape
            )));
        }
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.conv.forward(&h)?;
            if let Some(ln) = &stage.ln {
                h = ln.forward(&h)?;
            }
            h = h.leaky_relu(LEAKY_SLOPE);
        }
        let b = shape[0];
        let flat = h.reshape(&[b, self.flat_width])?;
        let hidden = self.fc1.forward(&flat)?.leaky_relu(LEAKY_SLOPE);
        self.fc2.forward(&hidden)
    }
}

#[derive(Clone)]
pub struct GanLossTerms<E: Element> {
    pub d_loss: Tensor<E>,
    pub g_adv_loss: Tensor<E>,
    pub gradient_penalty: Tensor<E>,
    pub em_estimate: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
}

/// WGAN-GP terms for one batch. `critic` maps [B,C,D,H,W] to [B,1] scores.
///
/// d_loss = mean D(fake) - mean D(real) + lambda_gp * mean((|grad| - 1)^2)
/// over interpolates x_hat = eps*real + (1-eps)*fake with per-sample eps;
/// g_adv_loss = -mean D(fake). Detach `fake` before calling when the result
/// drives a critic update.
pub fn wgan_gp_terms<E: Element>(
    critic: impl Fn(&Tensor<E>) -> Result<Tensor<E>>,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    lambda_gp: f64,
    rng: &mut impl Rng,
) -> Result<GanLossTerms<E>> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(format!(
            "real {:?} and fake {:?} batches must share a shape",
            real.shape(),
            fake.shape()
        )));
    }
    if lambda_gp < 0.0 {
        return Err(Error::config("lambda_gp must be >= 0".to_string()));
    }
    let batch = real.shape()[0];
    let d_real = critic(real)?;
    let d_fake = critic(fake)?;
    if !d_real.all_finite() || !d_fake.all_finite() {
        return Err(Error::TrainingIntegrity(
            "critic produced a non-finite score".to_string(),
        ));
    }
    let mean_real = d_real.mean_all();
    let mean_fake = d_fake.mean_all();
    let em_estimate = mean_real.value_f64() - mean_fake.value_f64();

    let mut eps_shape = vec![1usize; real.shape().len()];
    eps_shape[0] = batch;
    let eps = Tensor::<E>::rand_uniform(&eps_shape, 0.0, 1.0, rng);
    let one_minus = eps.neg().add_scalar(1.0);
    let x_hat = no_grad(|| -> Result<Tensor<E>> {
        real.mul(&eps)?.add(&fake.mul(&one_minus)?)
    })?
    .requires_grad();
    let d_hat = critic(&x_hat)?;
    let grads = grad_of(&d_hat.sum_all(), &[&x_hat], true)?;
    let g = &grads[0];
    let sq_sum = g.mul(g)?.sum_to(&eps_shape)?.reshape(&[batch, 1])?;
    let norm = sq_sum.sqrt();
    let dev = norm.add_scalar(-1.0);
    let penalty = dev.mul(&dev)?.mean_all();
    if !penalty.all_finite() {
        return Err(Error::TrainingIntegrity(
            "gradient penalty is non-finite".to_string(),
        ));
    }
    let gradient_penalty = penalty.scale(lambda_gp);
    let d_loss = mean_fake.sub(&mean_real)?.add(&gradient_penalty)?;
    let g_adv_loss = mean_fake.neg();
    Ok(GanLossTerms {
        d_loss,
        g_adv_loss,
        gradient_penalty,
        em_estimate,
        mean_real: mean_real.value_f64(),
        mean_fake: mean_fake.value_f64(),
    })
}

/// L1 reconstruction plus weighted adversarial term.
pub fn composite_generator_loss<E: Element>(
    sr: &Tensor<E>,
    hr: &Tensor<E>,
    g_adv_loss: &Tensor<E>,
    lambda: f64,
) -> Result<Tensor<E>> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape(format!(
            "sr {:?} and hr {:?} must share a shape",
            sr.shape(),
            hr.shape()
        )));
    }
    let l1 = sr.sub(hr)?.abs().mean_all();
    l1.add(&g_adv_loss.scale(lambda))
}
