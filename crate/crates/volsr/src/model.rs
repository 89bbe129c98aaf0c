//! The multi-level densely connected SR generator.
//!
//! Wiring: a 3x3x3 stem to 2k channels; b dense blocks of u units each,
//! where every unit sees its block input plus all earlier unit outputs, and
//! every block past the first compresses the stem output plus all previous
//! blocks' new features back to 2k with a 1x1x1 conv; the head sees the stem
//! output and every unit output of every block. Units are pre-activation
//! (BN, ELU, conv) and gain a 4k 1x1x1 bottleneck once their input width
//! strictly exceeds the bottleneck threshold. There is no upsampling layer;
//! output shape equals input shape.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm3d, BnMode, Conv3d, ParamSet};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconVariant {
    /// single 1x1x1 conv over all accumulated features
    Direct,
    /// "-r": 1x1x1 bottleneck to 8k, BN, then 3x3x3 conv to one channel
    BottleneckR,
}

pub const DEFAULT_GROWTH: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub blocks: usize,
    pub units: usize,
    pub growth: usize,
    pub recon: ReconVariant,
    pub bottleneck_threshold: usize,
    pub in_channels: usize,
}

impl GeneratorConfig {
    pub fn new(blocks: usize, units: usize, growth: usize, recon: ReconVariant) -> Result<Self> {
        let cfg = GeneratorConfig {
            blocks,
            units,
            growth,
            recon,
            bottleneck_threshold: 4 * growth,
            in_channels: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.units == 0 || self.growth == 0 || self.in_channels == 0 {
            return Err(Error::config(format!(
                "generator config needs positive b/u/k/in_channels, got b{} u{} k{} in{}",
                self.blocks, self.units, self.growth, self.in_channels
            )));
        }
        Ok(())
    }

    /// Parse names like "b4u4k12", "b8u4k8", "b1u12-r", "b4u4-r".
    /// A missing k falls back to 12.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed generator config {:?}", s));
        let rest = s.strip_prefix('b').ok_or_else(bad)?;
        let (rest, recon) = match rest.strip_suffix("-r") {
            Some(r) => (r, ReconVariant::BottleneckR),
            None => (rest, ReconVariant::Direct),
        };
        let u_at = rest.find('u').ok_or_else(bad)?;
        let blocks: usize = rest[..u_at].parse().map_err(|_| bad())?;
        let tail = &rest[u_at + 1..];
        let (units, growth) = match tail.find('k') {
            Some(k_at) => (
                tail[..k_at].parse().map_err(|_| bad())?,
                tail[k_at + 1..].parse().map_err(|_| bad())?,
            ),
            None => (tail.parse().map_err(|_| bad())?, DEFAULT_GROWTH),
        };
        GeneratorConfig::new(blocks, units, growth, recon)
    }

    pub fn name(&self) -> String {
        let mut s = format!("b{}u{}k{}", self.blocks, self.units, self.growth);
        if self.recon == ReconVariant::BottleneckR {
            s.push_str("-r");
        }
        s
    }

    fn stem_width(&self) -> usize {
        2 * self.growth
    }

    /// Channel width entering unit j (1-based) of any block.
    fn unit_input_width(&self, j: usize) -> usize {
        self.stem_width() + (j - 1) * self.growth
    }

    fn unit_has_bottleneck(&self, j: usize) -> bool {
        self.unit_input_width(j) > self.bottleneck_threshold
    }

    /// Width of the accumulated feature list after `i` blocks (0 = stem only).
    fn accumulated_width(&self, i: usize) -> usize {
        self.stem_width() + i * self.units * self.growth
    }
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k * k + cout
}

fn bn_params(c: usize) -> usize {
    2 * c
}

#[derive(Clone, Debug)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct TopologyReport {
    pub config: String,
    pub layers: Vec<LayerInfo>,
    pub total: usize,
}

impl TopologyReport {
    pub fn render(&self) -> String {
        let mut s = format!("config {}\n", self.config);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<28} {:<5} k{} {:>4} -> {:<4} params {}",
                l.name, l.kind, l.kernel, l.cin, l.cout, l.params
            );
        }
        let _ = writeln!(s, "total {}", self.total);
        s
    }
}

/// Per-layer topology and parameter subtotals, straight from the wiring
/// rules; totals agree exactly with a built network.
pub fn describe(cfg: &GeneratorConfig) -> Result<TopologyReport> {
    cfg.validate()?;
    let k = cfg.growth;
    let mut layers = Vec::new();
    let conv = |name: String, cin: usize, cout: usize, ks: usize, layers: &mut Vec<LayerInfo>| {
        layers.push(LayerInfo {
            name,
            kind: "conv",
            kernel: ks,
            cin,
            cout,
            params: conv_params(cin, cout, ks),
        });
    };
    let bn = |name: String, c: usize, layers: &mut Vec<LayerInfo>| {
        layers.push(LayerInfo {
            name,
            kind: "bn",
            kernel: 0,
            cin: c,
            cout: c,
            params: bn_params(c),
        });
    };
    conv("stem/conv".into(), cfg.in_channels, cfg.stem_width(), 3, &mut layers);
    for i in 1..=cfg.blocks {
        if i > 1 {
            conv(
                format!("block{}/compress/conv", i),
                cfg.accumulated_width(i - 1),
                cfg.stem_width(),
                1,
                &mut layers,
            );
        }
        for j in 1..=cfg.units {
            let cin = cfg.unit_input_width(j);
            bn(format!("block{}/unit{}/bn1", i, j), cin, &mut layers);
            if cfg.unit_has_bottleneck(j) {
                conv(
                    format!("block{}/unit{}/bottleneck/conv", i, j),
                    cin,
                    4 * k,
                    1,
                    &mut layers,
                );
                bn(format!("block{}/unit{}/bn2", i, j), 4 * k, &mut layers);
                conv(format!("block{}/unit{}/conv", i, j), 4 * k, k, 3, &mut layers);
            } else {
                conv(format!("block{}/unit{}/conv", i, j), cin, k, 3, &mut layers);
            }
        }
    }
    let head_in = cfg.accumulated_width(cfg.blocks);
    match cfg.recon {
        ReconVariant::Direct => conv("head/conv".into(), head_in, 1, 1, &mut layers),
        ReconVariant::BottleneckR => {
            conv("head/bottleneck/conv".into(), head_in, 8 * k, 1, &mut layers);
            bn("head/bn".into(), 8 * k, &mut layers);
            conv("head/conv".into(), 8 * k, 1, 3, &mut layers);
        }
    }
    let total = layers.iter().map(|l| l.params).sum();
    Ok(TopologyReport {
        config: cfg.name(),
        layers,
        total,
    })
}

/// Closed-form parameter count (conv weights and biases, BN scales and
/// shifts). Always equals the built network's parameter sum.
pub fn count_params(cfg: &GeneratorConfig) -> Result<usize> {
    Ok(describe(cfg)?.total)
}

struct DenseUnit<E: Element> {
    bn1: BatchNorm3d<E>,
    bottleneck: Option<(Conv3d<E>, BatchNorm3d<E>)>,
    conv: Conv3d<E>,
}

impl<E: Element> DenseUnit<E> {
    fn forward(&self, x: &Tensor<E>, mode: BnMode) -> Result<Tensor<E>> {
        let mut h = self.bn1.forward(x, mode)?.elu();
        if let Some((bconv, bn2)) = &self.bottleneck {
            h = bn2.forward(&bconv.forward(&h)?, mode)?.elu();
        }
        self.conv.forward(&h)
    }
}

struct DenseBlock<E: Element> {
    compressor: Option<Conv3d<E>>,
    units: Vec<DenseUnit<E>>,
}

enum Head<E: Element> {
    Direct(Conv3d<E>),
    Recon {
        bottleneck: Conv3d<E>,
        bn: BatchNorm3d<E>,
        conv: Conv3d<E>,
    },
}

pub struct GeneratorNet<E: Element> {
    pub cfg: GeneratorConfig,
    pub params: ParamSet<E>,
    stem: Conv3d<E>,
    blocks: Vec<DenseBlock<E>>,
    head: Head<E>,
}

const S1: [usize; 3] = [1, 1, 1];
const K1: [usize; 3] = [1, 1, 1];
const K3: [usize; 3] = [3, 3, 3];

impl<E: Element> GeneratorNet<E> {
    pub fn build(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.growth;
        let mut params = ParamSet::new();
        let stem = Conv3d::new(
            &mut params,
            "stem",
            cfg.in_channels,
            cfg.stem_width(),
            K3,
            S1,
            rng,
        );
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 1..=cfg.blocks {
            let compressor = (i > 1).then(|| {
                Conv3d::new(
                    &mut params,
                    &format!("block{}/compress", i),
                    cfg.accumulated_width(i - 1),
                    cfg.stem_width(),
                    K1,
                    S1,
                    rng,
                )
            });
            let mut units = Vec::with_capacity(cfg.units);
            for j in 1..=cfg.units {
                let cin = cfg.unit_input_width(j);
                let prefix = format!("block{}/unit{}", i, j);
                let bn1 = BatchNorm3d::new(&mut params, &format!("{}/bn1", prefix), cin);
                let bottleneck = cfg.unit_has_bottleneck(j).then(|| {
                    let bconv = Conv3d::new(
                        &mut params,
                        &format!("{}/bottleneck", prefix),
                        cin,
                        4 * k,
                        K1,
                        S1,
                        rng,
                    );
                    let bn2 = BatchNorm3d::new(&mut params, &format!("{}/bn2", prefix), 4 * k);
                    (bconv, bn2)
                });
                let conv_in = if bottleneck.is_some() { 4 * k } else { cin };
                let conv = Conv3d::new(&mut params, &prefix, conv_in, k, K3, S1, rng);
                units.push(DenseUnit { bn1, bottleneck, conv });
            }
            blocks.push(DenseBlock { compressor, units });
        }
        let head_in = cfg.accumulated_width(cfg.blocks);
        let head = match cfg.recon {
            ReconVariant::Direct => {
                Head::Direct(Conv3d::new(&mut params, "head", head_in, 1, K1, S1, rng))
            }
            ReconVariant::BottleneckR => Head::Recon {
                bottleneck: Conv3d::new(
                    &mut params,
                    "head/bottleneck",
                    head_in,
                    8 * k,
                    K1,
                    S1,
                    rng,
                ),
                bn: BatchNorm3d::new(&mut params, "head/bn", 8 * k),
                conv: Conv3d::new(&mut params, "head", 8 * k, 1, K3, S1, rng),
            },
        };
        Ok(GeneratorNet {
            cfg: *cfg,
            params,
            stem,
            blocks,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor<E>, mode: BnMode) -> Result<Tensor<E>> {
        let shape = x.shape().to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(format!(
                "generator input must be [B,C,D,H,W], got {:?}",
                shape
            )));
        }
        if shape[2..].iter().any(|&d| d < 3) {
            return Err(Error::shape(format!(
                "generator input spatial dims {:?} below kernel support 3",
                &shape[2..]
            )));
        }
        let stem_out = self.stem.forward(x)?;
        let mut accumulated = vec![stem_out.clone()];
        for block in &self.blocks {
            let block_in = match &block.compressor {
                None => stem_out.clone(),
                Some(c) => c.forward(&Tensor::concat_channels(&accumulated)?)?,
            };
            let mut feats = vec![block_in];
            for unit in &block.units {
                let u_in = if feats.len() == 1 {
                    feats[0].clone()
                } else {
                    Tensor::concat_channels(&feats)?
                };
                let u_out = unit.forward(&u_in, mode)?;
                feats.push(u_out);
            }
            accumulated.extend(feats.into_iter().skip(1));
        }
        let all = Tensor::concat_channels(&accumulated)?;
        match &self.head {
            Head::Direct(conv) => conv.forward(&all),
            Head::Recon { bottleneck, bn, conv } => {
                conv.forward(&bn.forward(&bottleneck.forward(&all)?, mode)?)
            }
        }
    }

    fn for_each_bn(&self, f: &mut impl FnMut(&BatchNorm3d<E>)) {
        for block in &self.blocks {
            for unit in &block.units {
                f(&unit.bn1);
                if let Some((_, bn2)) = &unit.bottleneck {
                    f(bn2);
                }
            }
        }
        if let Head::Recon { bn, .. } = &self.head {
            f(bn);
        }
    }

    /// Named BN running-stat buffers for checkpointing.
    pub fn buffers(&self) -> Vec<(String, Vec<E>)> {
        let mut out = Vec::new();
        self.for_each_bn(&mut |bn| out.extend(bn.buffers()));
        out
    }

    /// Restore BN running stats by buffer name.
    pub fn load_buffers(&self, blobs: &[(String, Vec<E>)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Vec<E>> =
            blobs.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let mut missing = Vec::new();
        self.for_each_bn(&mut |bn| {
            let names: Vec<String> = bn.buffers().into_iter().map(|(n, _)| n).collect();
            match (map.get(names[0].as_str()), map.get(names[1].as_str())) {
                (Some(mean), Some(var)) => bn.load_buffers((*mean).clone(), (*var).clone()),
                _ => missing.push(names[0].clone()),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint is missing BN buffers: {:?}",
                missing
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(s: &str) -> GeneratorConfig {
        GeneratorConfig::parse(s).unwrap()
    }

    #[test]
    fn parses_table_names() {
        let c = cfg("b4u4k12");
        assert_eq!((c.blocks, c.units, c.growth), (4, 4, 12));
        assert_eq!(c.recon, ReconVariant::Direct);
        let c = cfg("b1u12-r");
        assert_eq!((c.blocks, c.units, c.growth), (1, 12, 12));
        assert_eq!(c.recon, ReconVariant::BottleneckR);
        let c = cfg("b4u4-r");
        assert_eq!((c.blocks, c.units, c.growth), (4, 4, 12));
        assert_eq!(c.name(), "b4u4k12-r");
        for bad in ["", "b4", "u4k12", "b0u1k1", "b4u4k12-q", "bxu4k12", "b4u4k"] {
            assert!(GeneratorConfig::parse(bad).is_err(), "{:?} parsed", bad);
        }
    }

    #[test]
    fn frozen_parameter_counts() {
        let expected = [
            ("b4u4k8", 100_865usize),
            ("b4u4k12", 225_409),
            ("b4u4k16", 399_361),
            ("b6u4k12", 344_977),
            ("b8u4k12", 469_153),
            ("b8u4k8", 209_729),
            ("b1u12-r", 244_897),
            ("b1u16-r", 349_537),
            ("b4u4-r", 248_809),
        ];
        for (name, want) in expected {
            let got = count_params(&cfg(name)).unwrap();
            assert_eq!(got, want, "{}", name);
        }
    }

    #[test]
    fn closed_form_matches_built_network() {
        for name in ["b1u1k1", "b2u3k4", "b4u4k12", "b1u12-r", "b4u4-r"] {
            let c = cfg(name);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let net = GeneratorNet::<f32>::build(&c, &mut rng).unwrap();
            assert_eq!(net.params.total_elements(), count_params(&c).unwrap(), "{}", name);
        }
    }

    #[test]
    fn count_is_monotone_in_each_dimension() {
        let base = count_params(&cfg("b3u3k8")).unwrap();
        assert!(count_params(&cfg("b4u3k8")).unwrap() > base);
        assert!(count_params(&cfg("b3u4k8")).unwrap() > base);
        assert!(count_params(&cfg("b3u3k9")).unwrap() > base);
    }

    #[test]
    fn report_reflects_wiring() {
        let r = describe(&cfg("b4u4k12")).unwrap();
        let compressors = r
            .layers
            .iter()
            .filter(|l| l.name.contains("compress"))
            .count();
        assert_eq!(compressors, 3);
        let head = r.layers.iter().find(|l| l.name == "head/conv").unwrap();
        assert_eq!(head.cin, 24 + 4 * 4 * 12);
        assert_eq!(r.total, count_params(&cfg("b4u4k12")).unwrap());
        let text = r.render();
        assert!(text.contains("stem/conv"));
        assert!(text.contains("total 225409"));
    }

    #[test]
    fn bottlenecks_follow_threshold() {
        // k defaults to 12, so threshold is 48; inputs 24,36,48 stay plain
        let r = describe(&cfg("b1u16-r")).unwrap();
        for j in 1..=16 {
            let has = r
                .layers
                .iter()
                .any(|l| l.name == format!("block1/unit{}/bottleneck/conv", j));
            assert_eq!(has, 24 + (j - 1) * 12 > 48, "unit {}", j);
        }
    }

    #[test]
    fn compressor_widths_accumulate() {
        let r = describe(&cfg("b8u4k12")).unwrap();
        let widths: Vec<usize> = (2..=8)
            .map(|i| {
                r.layers
                    .iter()
                    .find(|l| l.name == format!("block{}/compress/conv", i))
                    .unwrap()
                    .cin
            })
            .collect();
        assert_eq!(widths, vec![72, 120, 168, 216, 264, 312, 360]);
    }

    #[test]
    fn minimal_config_has_three_convs_and_keeps_shape() {
        let c = cfg("b1u1k1");
        let r = describe(&c).unwrap();
        let convs = r.layers.iter().filter(|l| l.kind == "conv").count();
        assert_eq!(convs, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = GeneratorNet::<f64>::build(&c, &mut rng).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 8, 8, 8], -1.0, 1.0, &mut rng);
        let y = no_grad(|| net.forward(&x, BnMode::Eval)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
    }

    #[test]
    fn rejects_tiny_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = GeneratorNet::<f64>::build(&cfg("b1u1k2"), &mut rng).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 2, 8, 8], -1.0, 1.0, &mut rng);
        assert!(net.forward(&x, BnMode::Eval).is_err());
        let x4 = Tensor::<f64>::rand_uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut rng);
        assert!(net.forward(&x4, BnMode::Eval).is_err());
    }

    #[test]
    fn zero_parameters_give_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = GeneratorNet::<f64>::build(&cfg("b2u2k4"), &mut rng).unwrap();
        for t in net.params.tensors() {
            t.set_data(vec![0.0; t.numel()]);
        }
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 6, 6, 6], -1.0, 1.0, &mut rng);
        let y = no_grad(|| net.forward(&x, BnMode::Eval)).unwrap();
        let vals = y.to_vec();
        assert!(vals.iter().all(|&v| v == vals[0]));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = GeneratorNet::<f64>::build(&cfg("b2u2k4"), &mut rng).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[2, 1, 5, 5, 5], -1.0, 1.0, &mut rng);
        let a = no_grad(|| net.forward(&x, BnMode::Eval)).unwrap().to_vec();
        let b = no_grad(|| net.forward(&x, BnMode::Eval)).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(p, q)| p == q));
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = GeneratorNet::<f64>::build(&cfg("b2u2k4"), &mut rng).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[2, 1, 5, 5, 5], -1.0, 1.0, &mut rng);
        let target = Tensor::<f64>::rand_uniform(&[2, 1, 5, 5, 5], -1.0, 1.0, &mut rng);
        let pred = net.forward(&x, BnMode::Train).unwrap();
        let loss = pred.sub(&target).unwrap().abs().mean_all();
        loss.backward().unwrap();
        for p in net.params.iter() {
            let g = p.tensor.grad().unwrap_or_else(|| panic!("{} has no grad", p.name));
            let vals = g.to_vec();
            assert!(vals.iter().all(|v| v.is_finite()), "{} grad not finite", p.name);
            assert!(
                vals.iter().any(|&v| v != 0.0),
                "{} grad identically zero",
                p.name
            );
        }
    }

    #[test]
    fn bn_buffers_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = GeneratorNet::<f64>::build(&cfg("b2u2k4"), &mut rng).unwrap();
        let x = Tensor::<f64>::rand_uniform(&[2, 1, 5, 5, 5], -1.0, 1.0, &mut rng);
        net.forward(&x, BnMode::Train).unwrap();
        let blobs = net.buffers();
        assert!(blobs.iter().any(|(n, _)| n == "block1/unit1/bn1/running_mean"));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let other = GeneratorNet::<f64>::build(&cfg("b2u2k4"), &mut rng2).unwrap();
        other.load_buffers(&blobs).unwrap();
        let a: Vec<_> = net.buffers().into_iter().map(|(_, v)| v).collect();
        let b: Vec<_> = other.buffers().into_iter().map(|(_, v)| v).collect();
        assert_eq!(a, b);
        assert!(other.load_buffers(&blobs[..2]).is_err());
    }
}
