//! Validates the autodiff engine against central finite differences, in
//! double precision: first a whole generator under an L1 loss, then the
//! critic under the full gradient-penalty objective, whose analytic gradient
//! flows through an inner derivative (double backward).
//!
//! Run with: cargo run --release --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volsr::adversary::{wgan_gp_terms, Discriminator, DiscriminatorConfig};
use volsr::gradcheck::{check_grads, check_grads_graphful};
use volsr::model::{GeneratorConfig, GeneratorNet};
use volsr::nn::BnMode;
use volsr::tensor::Tensor;
use volsr::Result;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let cfg = GeneratorConfig::parse("b1u2k3")?;
    let net = GeneratorNet::<f64>::build(&cfg, &mut rng)?;
    let x = Tensor::<f64>::rand_uniform(&[2, 1, 7, 7, 7], -1.0, 1.0, &mut rng);
    let y = Tensor::<f64>::rand_uniform(&[2, 1, 7, 7, 7], -1.0, 1.0, &mut rng);
    let n_params = net.params.total_elements();
    println!(
        "checking all {} generator parameters of {} under an L1 loss...",
        n_params,
        cfg.name()
    );
    let loss_fn = || {
        net.forward(&x, BnMode::Train)
            .unwrap()
            .sub(&y)
            .unwrap()
            .abs()
            .mean_all()
    };
    let refs: Vec<&Tensor<f64>> = net.params.tensors();
    let err = check_grads(loss_fn, &refs, 1e-5);
    println!("  worst relative error vs finite differences: {:.3e}", err);
    assert!(err <= 1e-4);

    let d_cfg = DiscriminatorConfig {
        base_width: 2,
        stages: 2,
        head_width: 8,
        input_size: [5, 5, 5],
        in_channels: 1,
        allow_truncation: false,
    };
    let d = Discriminator::<f64>::build(&d_cfg, &mut rng)?;
    let real = Tensor::<f64>::rand_uniform(&[2, 1, 5, 5, 5], -1.0, 1.0, &mut rng);
    let fake = Tensor::<f64>::rand_uniform(&[2, 1, 5, 5, 5], -1.0, 1.0, &mut rng);
    println!();
    println!(
        "checking all {} critic parameters under the gradient-penalty loss...",
        d.params.total_elements()
    );
    // The penalty differentiates the critic internally, so the numeric
    // baseline must keep graph recording on; the graphful variant does.
    let gp_loss = || {
        let mut eps_rng = ChaCha8Rng::seed_from_u64(42);
        wgan_gp_terms(|t| d.forward(t), &real, &fake, 10.0, &mut eps_rng)
            .unwrap()
            .d_loss
    };
    let d_refs: Vec<&Tensor<f64>> = d.params.tensors();
    let err = check_grads_graphful(gp_loss, &d_refs, 1e-5);
    println!("  worst relative error vs finite differences: {:.3e}", err);
    assert!(err <= 1e-4);

    println!();
    println!("both objectives agree with finite differences to 1e-4");
    Ok(())
}
