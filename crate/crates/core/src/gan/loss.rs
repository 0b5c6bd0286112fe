use serde::{Deserialize, Serialize};

use super::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::nn::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the masked L1 term in the generator loss.
    pub beta: f64,
    /// Also drop patches whose receptive-field centre is excluded from the
    /// adversarial term. Off by default: only L1 is masked.
    pub mask_adversarial: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 400.0,
            mask_adversarial: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// `BCE(real, 1) + BCE(fake, 0)`.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let a = tape.bce(real, 1.0);
    let b = tape.bce(fake, 0.0);
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    /// Unweighted masked L1.
    pub l1: Var,
    /// `beta · l1`, the L1 contribution to `total`.
    pub l1_term: Var,
    pub adv: Var,
}

/// `BCE(fake, 1) + beta · masked_l1(y_hat, y)`. With `patch_mask`, the
/// adversarial term averages over the kept patches only.
pub fn generator_loss<T: Real>(
    tape: &mut Tape<T>,
    fake_scores: Var,
    y_hat: Var,
    target: &Tensor<T>,
    mask: &[bool],
    weights: &LossWeights,
    patch_mask: Option<&[bool]>,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let adv = match patch_mask {
        Some(m) => tape.masked_bce(fake_scores, 1.0, m)?,
        None => tape.bce(fake_scores, 1.0),
    };
    let l1 = tape.masked_l1(y_hat, target, mask)?;
    let l1_term = tape.scale(l1, weights.beta);
    let total = tape.add(adv, l1_term)?;
    Ok(GeneratorLoss {
        total,
        l1,
        l1_term,
        adv,
    })
}

/// Value-level `(loss_D, loss_G)` for given score maps and predictions.
pub fn gan_losses(
    scores_real: &Tensor<f64>,
    scores_fake: &Tensor<f64>,
    y_hat: &Tensor<f64>,
    y: &Tensor<f64>,
    mask: &[bool],
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    if scores_real.shape != scores_fake.shape {
        return Err(Error::dims(
            format!("{:?}", scores_real.shape),
            format!("{:?}", scores_fake.shape),
        ));
    }
    let mut tape = Tape::new();
    let real = tape.constant(scores_real.clone());
    let fake = tape.constant(scores_fake.clone());
    let pred = tape.constant(y_hat.clone());
    let d = discriminator_loss(&mut tape, real, fake)?;
    let g = generator_loss(&mut tape, fake, pred, y, mask, weights, None)?;
    Ok((tape.value(d).item(), tape.value(g.total).item()))
}

/// Per-patch keep flags for an `N×1×oh×ow` score map: a patch is kept when
/// the pixel at its receptive-field centre is effective. `mask` holds
/// `N·height·width` flags.
pub fn patch_mask(
    cfg: &DiscriminatorConfig,
    mask: &[bool],
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<bool>> {
    if mask.len() != n * height * width {
        return Err(Error::SizeMismatch {
            expected: n * height * width,
            found: mask.len(),
        });
    }
    let (oh, ow) = match (cfg.output_size(height), cfg.output_size(width)) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::dims(
                "input large enough for the discriminator",
                format!("{width}x{height}"),
            ))
        }
    };
    let centre =
        |i: usize, side: usize| cfg.patch_centre(i).round().clamp(0.0, (side - 1) as f64) as usize;
    let mut out = Vec::with_capacity(n * oh * ow);
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                out.push(mask[s * height * width + centre(i, height) * width + centre(j, width)]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: f64) -> Tensor<f64> {
        Tensor::filled(shape, v)
    }

    #[test]
    fn closed_forms() {
        let all = vec![true; 16];
        let w = LossWeights::default();
        let (d, _) = gan_losses(
            &t([1, 1, 3, 3], 1.0),
            &t([1, 1, 3, 3], 0.0),
            &t([1, 1, 4, 4], 0.3),
            &t([1, 1, 4, 4], 0.3),
            &all,
            &w,
        )
        .unwrap();
        assert!(d.abs() < 1e-6);
        let (d, g) = gan_losses(
            &t([1, 1, 3, 3], 0.5),
            &t([1, 1, 3, 3], 0.5),
            &t([1, 1, 4, 4], 0.3),
            &t([1, 1, 4, 4], 0.3),
            &all,
            &w,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d - 2.0 * ln2).abs() < 1e-12);
        assert!((g - ln2).abs() < 1e-12);
        let (_, g) = gan_losses(
            &t([1, 1, 3, 3], 0.5),
            &t([1, 1, 3, 3], 1.0),
            &t([1, 1, 4, 4], 0.3),
            &t([1, 1, 4, 4], 0.3),
            &all,
            &w,
        )
        .unwrap();
        assert!(g.abs() < 1e-6);
    }

    #[test]
    fn beta_scales_only_the_l1_term() {
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let y = Tensor::<f64>::randn([1, 1, 4, 4], 0.2, 1);
        let y_hat = Tensor::<f64>::randn([1, 1, 4, 4], 0.2, 2);
        let parts = |beta: f64| {
            let mut tape = Tape::new();
            let fake = tape.constant(t([1, 1, 2, 2], 0.3));
            let p = tape.constant(y_hat.clone());
            let w = LossWeights {
                beta,
                ..Default::default()
            };
            let g = generator_loss(&mut tape, fake, p, &y, &mask, &w, None).unwrap();
            (
                tape.value(g.adv).item(),
                tape.value(g.l1_term).item(),
                tape.value(g.total).item(),
            )
        };
        let (a1, l1, t1) = parts(400.0);
        let (a3, l3, t3) = parts(1200.0);
        assert_eq!(a1, a3);
        assert!((l3 - 3.0 * l1).abs() < 1e-12 * l3);
        assert!(((t3 - a3) - 3.0 * (t1 - a1)).abs() < 1e-9);
    }

    #[test]
    fn excluded_pixels_get_zero_gradient() {
        let mask: Vec<bool> = (0..36).map(|i| i % 2 == 0).collect();
        let y = Tensor::<f64>::filled([1, 1, 6, 6], 0.9);
        let mut tape = Tape::new();
        let fake = tape.constant(t([1, 1, 2, 2], 0.4));
        let p = tape.leaf(Tensor::filled([1, 1, 6, 6], 0.2));
        let g =
            generator_loss(&mut tape, fake, p, &y, &mask, &LossWeights::default(), None).unwrap();
        let grads = tape.backward(g.total).unwrap();
        let gp = grads.var(p).unwrap();
        for (i, m) in mask.iter().enumerate() {
            if *m {
                assert!(gp.data[i] != 0.0);
            } else {
                assert_eq!(gp.data[i], 0.0);
            }
        }
    }

    #[test]
    fn patch_mask_follows_centres() {
        let cfg = DiscriminatorConfig::default();
        let (h, w) = (64, 64);
        let mut mask = vec![true; h * w];
        // Exclude the pixel at the centre of patch (0, 0): (12, 12) after rounding.
        let c = cfg.patch_centre(0).round() as usize;
        mask[c * w + c] = false;
        let pm = patch_mask(&cfg, &mask, 1, h, w).unwrap();
        assert_eq!(pm.len(), 36);
        assert!(!pm[0]);
        assert_eq!(pm.iter().filter(|k| !**k).count(), 1);
    }
}
