//! Finite-difference checks of the composed generator losses.

use super::loss::{generator_loss, LossWeights};
use super::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, DISCRIMINATOR_TAG,
    GENERATOR_TAG,
};
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, END_TO_END_TOLERANCE};
use crate::nn::{ParamStore, Tensor};

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        rgb_stem_channels: 2,
        shsi_stem_channels: 2,
        stem_kernel: 3,
        branch_blocks: 1,
        fused_blocks: 1,
        ..Default::default()
    }
}

fn options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        coords_per_param: Some(3),
        seed,
        tolerance: END_TO_END_TOLERANCE,
        floor: 1e-6,
    }
}

/// Targets alternate between 0.05 and 0.95 so `|ŷ − y|` stays far from
/// its kink for a freshly initialized generator.
fn inputs(side: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<bool>) {
    let rgb = Tensor::randn([1, 3, side, side], 0.5, seed);
    let shsi = Tensor::randn([1, 24, side, side], 0.5, seed + 1);
    let n = side * side;
    let target = Tensor {
        shape: [1, 1, side, side],
        data: (0..n)
            .map(|i| if (i / side + i) % 2 == 0 { 0.05 } else { 0.95 })
            .collect(),
    };
    let mask = (0..n).map(|i| i % 5 != 0).collect();
    (rgb, shsi, target, mask)
}

/// `beta · masked_l1(G(x), y)` on a 16×16 input, w.r.t. generator weights.
pub fn generator_l1_check(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new(GENERATOR_TAG, seed);
    let g = Generator::new(&mut store, &small_generator())?;
    let (rgb, shsi, target, mask) = inputs(16, seed);
    let beta = LossWeights::default().beta;
    grad_check(
        "generator masked L1, 16x16",
        &mut store,
        |tape, s| {
            let r = tape.constant(rgb.clone());
            let h = tape.constant(shsi.clone());
            let y = g.forward(tape, s, r, h)?;
            let l1 = tape.masked_l1(y, &target, &mask)?;
            Ok(tape.scale(l1, beta))
        },
        options(seed),
    )
}

/// Full generator loss including the adversarial term through a narrow
/// discriminator, on a 32×32 input (the smallest the patch stack accepts).
pub fn generator_loss_check(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new(GENERATOR_TAG, seed);
    let g = Generator::new(&mut store, &small_generator())?;
    let mut d_store = ParamStore::<f64>::new(DISCRIMINATOR_TAG, seed + 1);
    let d = Discriminator::new(
        &mut d_store,
        &DiscriminatorConfig {
            widths: vec![2, 2, 2, 2],
            ..Default::default()
        },
    )?;
    // Stronger discriminator weights so the adversarial gradient is not
    // negligible next to the L1 term.
    for p in &mut d_store.params {
        if p.name.ends_with("weight") {
            p.value.data.iter_mut().for_each(|v| *v *= 25.0);
        }
    }
    let (rgb, shsi, target, mask) = inputs(32, seed);
    let weights = LossWeights::default();
    grad_check(
        "generator loss (adversarial + masked L1), 32x32",
        &mut store,
        |tape, s| {
            let r = tape.constant(rgb.clone());
            let h = tape.constant(shsi.clone());
            let y = g.forward(tape, s, r, h)?;
            let cond = tape.concat_channels(r, h)?;
            let fake = d.forward(tape, &d_store, cond, y)?;
            Ok(generator_loss(tape, fake, y, &target, &mask, &weights, None)?.total)
        },
        options(seed),
    )
}

pub fn end_to_end_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![generator_l1_check(seed)?, generator_loss_check(seed)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_to_end_losses_pass() {
        for r in end_to_end_suite(5).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_err);
        }
    }
}
