//! Prints the full layer table for the default generator and the parameter
//! counts for the family of published configurations, from the tiny b4u4k8
//! up to b8u4k12 and the bottlenecked single-block "-r" variants.
//!
//! Run with: cargo run --release --example generator_params

use volsr::model::{count_params, describe, GeneratorConfig};
use volsr::Result;

fn main() -> Result<()> {
    let cfg = GeneratorConfig::parse("b4u4k12")?;
    print!("{}", describe(&cfg)?.render());
    println!();

    println!("{:<10} {:>10} {:>8}", "config", "params", "millions");
    for name in [
        "b4u4k8", "b4u4k12", "b4u4k16", "b6u4k12", "b8u4k12", "b8u4k8",
        "b1u12-r", "b1u16-r", "b4u4-r",
    ] {
        let cfg = GeneratorConfig::parse(name)?;
        let n = count_params(&cfg)?;
        println!("{:<10} {:>10} {:>8.2}", name, n, n as f64 / 1e6);
    }
    Ok(())
}
