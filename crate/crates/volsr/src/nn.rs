//! Parameter registry and the layer set used by the networks.

use crate::error::{Error, Result};
use crate::tensor::{conv3d, grad_enabled, lit, no_grad, Element, Tensor};
use rand::Rng;
use std::collections::HashSet;
use std::sync::RwLock;

/// A named gradient target.
pub struct Parameter<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
}

/// Ordered set of parameters with unique path-like names. Registration order
/// is the canonical order for optimizer state and checkpoints.
pub struct ParamSet<E: Element> {
    entries: Vec<Parameter<E>>,
    names: HashSet<String>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            names: HashSet::new(),
        }
    }

    /// Registers a fresh leaf tensor and hands back the grad-required handle.
    pub fn register(&mut self, name: impl Into<String>, init: Tensor<E>) -> Tensor<E> {
        let name = name.into();
        assert!(
            self.names.insert(name.clone()),
            "duplicate parameter name {}",
            name
        );
        let tensor = init.requires_grad();
        self.entries.push(Parameter {
            name,
            tensor: tensor.clone(),
        });
        tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<E>> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Total element count over all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.entries {
            p.tensor.zero_grad();
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<E>> {
        self.entries.iter().map(|p| &p.tensor).collect()
    }
}

/// Zero-mean uniform init with fan-in scaling.
pub fn uniform_fan_in<E: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

/// 3-d convolution with bias and "same" padding at stride 1.
pub struct Conv3d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    stride: [usize; 3],
    padding: [usize; 3],
    cout: usize,
}

impl<E: Element> Conv3d<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        prefix: &str,
        cin: usize,
        cout: usize,
        ksize: [usize; 3],
        stride: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * ksize[0] * ksize[1] * ksize[2];
        let wshape = [cout, cin, ksize[0], ksize[1], ksize[2]];
        let weight = params.register(
            format!("{}/weight", prefix),
            uniform_fan_in(&wshape, fan_in, rng),
        );
        let bias = params.register(format!("{}/bias", prefix), Tensor::zeros(&[cout]));
        let padding = [ksize[0] / 2, ksize[1] / 2, ksize[2] / 2];
        Conv3d {
            weight,
            bias,
            stride,
            padding,
            cout,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = conv3d(x, &self.weight, self.stride, self.padding)?;
        y.add(&self.bias.reshape(&[1, self.cout, 1, 1, 1])?)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Per-channel batch normalization over (B, D, H, W).
///
/// Running statistics update only during recorded training-mode passes, so a
/// no-grad train-mode forward is pure and tiles can run it concurrently.
pub struct BatchNorm3d<E: Element> {
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
    prefix: String,
    channels: usize,
    momentum: f64,
    eps: f64,
    running_mean: RwLock<Vec<E>>,
    running_var: RwLock<Vec<E>>,
}

impl<E: Element> BatchNorm3d<E> {
    pub fn new(params: &mut ParamSet<E>, prefix: &str, channels: usize) -> Self {
        let scale = params.register(format!("{}/scale", prefix), Tensor::ones(&[channels]));
        let shift = params.register(format!("{}/shift", prefix), Tensor::zeros(&[channels]));
        BatchNorm3d {
            scale,
            shift,
            prefix: prefix.to_string(),
            channels,
            momentum: 0.99,
            eps: 1e-5,
            running_mean: RwLock::new(vec![E::zero(); channels]),
            running_var: RwLock::new(vec![E::one(); channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: BnMode) -> Result<Tensor<E>> {
        if x.shape().len() != 5 || x.shape()[1] != self.channels {
            return Err(Error::shape(format!(
                "batch_norm3d expects [B,{},D,H,W], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let c = self.channels;
        let cshape = [1usize, c, 1, 1, 1];
        let (mean, var) = match mode {
            BnMode::Train => {
                let count = (x.numel() / c) as f64;
                let mean = x.sum_to(&cshape)?.scale(1.0 / count);
                let centered = x.sub(&mean)?;
                let var = centered
                    .mul(&centered)?
                    .sum_to(&cshape)?
                    .scale(1.0 / count);
                if grad_enabled() {
                    self.update_running(&mean, &var);
                }
                (mean, var)
            }
            BnMode::Eval => {
                let mean =
                    Tensor::from_vec(self.running_mean.read().unwrap().clone(), &cshape)?;
                let var = Tensor::from_vec(self.running_var.read().unwrap().clone(), &cshape)?;
                (mean, var)
            }
        };
        let xhat = x.sub(&mean)?.div(&var.add_scalar(self.eps).sqrt())?;
        xhat.mul(&self.scale.reshape(&cshape)?)?
            .add(&self.shift.reshape(&cshape)?)
    }

    fn update_running(&self, mean: &Tensor<E>, var: &Tensor<E>) {
        let m = lit::<E>(self.momentum);
        let om = lit::<E>(1.0 - self.momentum);
        let (mv, vv) = no_grad(|| (mean.to_vec(), var.to_vec()));
        let mut rm = self.running_mean.write().unwrap();
        let mut rv = self.running_var.write().unwrap();
        for i in 0..self.channels {
            rm[i] = rm[i] * m + mv[i] * om;
            rv[i] = rv[i] * m + vv[i] * om;
        }
    }

    /// Non-parameter state for checkpoints: (name, values) pairs.
    pub fn buffers(&self) -> Vec<(String, Vec<E>)> {
        vec![
            (
                format!("{}/running_mean", self.prefix),
                self.running_mean.read().unwrap().clone(),
            ),
            (
                format!("{}/running_var", self.prefix),
                self.running_var.read().unwrap().clone(),
            ),
        ]
    }

    pub fn load_buffers(&self, mean: Vec<E>, var: Vec<E>) {
        assert_eq!(mean.len(), self.channels);
        assert_eq!(var.len(), self.channels);
        *self.running_mean.write().unwrap() = mean;
        *self.running_var.write().unwrap() = var;
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Per-sample normalization over all non-batch axes with per-channel affine.
pub struct LayerNorm<E: Element> {
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
    channels: usize,
    eps: f64,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(params: &mut ParamSet<E>, prefix: &str, channels: usize) -> Self {
        let scale = params.register(format!("{}/scale", prefix), Tensor::ones(&[channels]));
        let shift = params.register(format!("{}/shift", prefix), Tensor::zeros(&[channels]));
        // small enough that the affine-invariance identity holds to 1e-6
        LayerNorm {
            scale,
            shift,
            channels,
            eps: 1e-10,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.shape().len() != 5 || x.shape()[1] != self.channels {
            return Err(Error::shape(format!(
                "layer_norm expects [B,{},D,H,W], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let b = x.shape()[0];
        let sshape = [b, 1, 1, 1, 1];
        let count = (x.numel() / b) as f64;
        let mean = x.sum_to(&sshape)?.scale(1.0 / count);
        let centered = x.sub(&mean)?;
        let var = centered
            .mul(&centered)?
            .sum_to(&sshape)?
            .scale(1.0 / count);
        let xhat = centered.div(&var.add_scalar(self.eps).sqrt())?;
        let cshape = [1usize, self.channels, 1, 1, 1];
        xhat.mul(&self.scale.reshape(&cshape)?)?
            .add(&self.shift.reshape(&cshape)?)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer on [B, F] activations.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    out_features: usize,
}

impl<E: Element> Linear<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.register(
            format!("{}/weight", prefix),
            uniform_fan_in(&[in_features, out_features], in_features, rng),
        );
        let bias = params.register(format!("{}/bias", prefix), Tensor::zeros(&[out_features]));
        Linear {
            weight,
            bias,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.matmul(&self.weight, false, false)?;
        y.add(&self.bias.reshape(&[1, self.out_features])?)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}
