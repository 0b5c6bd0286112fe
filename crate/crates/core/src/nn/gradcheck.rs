//! Central finite-difference verification of tape gradients at 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::ResidualBlock;
use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Relative-error tolerance for individual kernels.
pub const KERNEL_TOLERANCE: f64 = 1e-4;
/// Relative-error tolerance for composed end-to-end losses.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
    pub tolerance: f64,
    /// Denominator floor so gradients that are zero up to rounding do not
    /// produce spurious relative errors.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            coords_per_param: None,
            seed: 0,
            tolerance: KERNEL_TOLERANCE,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compare the tape gradient of the scalar built by `build` against central
/// differences, for (a sample of) every coordinate of every parameter in
/// `store`.
pub fn grad_check<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::training(&[store.tag]);
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?.for_store(store);
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = build(&mut tape, store)?;
        Ok(tape.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    for pi in 0..store.len() {
        let len = store.params[pi].value.len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in coords {
            let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data[j]);
            let orig = store.params[pi].value.data[j];
            store.params[pi].value.data[j] = orig + opts.eps;
            let plus = eval(store)?;
            store.params[pi].value.data[j] = orig - opts.eps;
            let minus = eval(store)?;
            store.params[pi].value.data[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
        tolerance: opts.tolerance,
    })
}

/// Random input with entries pushed at least `margin` away from zero, so
/// piecewise-linear kernels are not probed across their kink.
fn input_away_from_zero(shape: [usize; 4], seed: u64, margin: f64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, 1.0, seed);
    for v in &mut t.data {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

fn probe(len: usize, seed: u64) -> Vec<f64> {
    Tensor::<f64>::randn([1, 1, 1, len], 1.0, seed).data
}

/// Gradient checks for every differentiable kernel.
pub fn kernel_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let mut reports = Vec::new();

    // conv2d: random 2×3×8×8 input, 4×4 stride-2 and 3×3 stride-1 kernels.
    for (label, k, stride, pad) in [("conv2d k4 s2 p1", 4, 2, 1), ("conv2d k3 s1 p1", 3, 1, 1)] {
        let mut store = ParamStore::<f64>::new(0, seed);
        let x = store.normal("x", [2, 3, 8, 8], 1.0);
        let w = store.normal("w", [5, 3, k, k], 0.5);
        let b = store.normal("b", [1, 5, 1, 1], 0.5);
        let out_len = 2 * 5 * ((8 + 2 * pad - k) / stride + 1).pow(2);
        let r = probe(out_len, seed + 1);
        reports.push(grad_check(
            label,
            &mut store,
            |tape, s| {
                let (x, w, b) = (tape.param(s, x), tape.param(s, w), tape.param(s, b));
                let y = tape.conv2d(x, w, b, stride, pad)?;
                tape.dot(y, r.clone())
            },
            opts,
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new(0, seed);
        let x = store.normal("x", [2, 3, 4, 4], 1.0);
        let w = store.normal("w", [3, 2, 4, 4], 0.5);
        let b = store.normal("b", [1, 2, 1, 1], 0.5);
        let r = probe(2 * 2 * 8 * 8, seed + 2);
        reports.push(grad_check(
            "conv_transpose2d k4 s2 p1",
            &mut store,
            |tape, s| {
                let (x, w, b) = (tape.param(s, x), tape.param(s, w), tape.param(s, b));
                let y = tape.conv_transpose2d(x, w, b, 2, 1)?;
                tape.dot(y, r.clone())
            },
            opts,
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new(0, seed);
        let x = store.normal("x", [2, 3, 5, 4], 2.0);
        let sc = store.normal("scale", [1, 3, 1, 1], 1.0);
        let sh = store.normal("shift", [1, 3, 1, 1], 1.0);
        let r = probe(2 * 3 * 5 * 4, seed + 3);
        reports.push(grad_check(
            "instance_norm",
            &mut store,
            |tape, s| {
                let (x, sc, sh) = (tape.param(s, x), tape.param(s, sc), tape.param(s, sh));
                let y = tape.instance_norm(x, sc, sh, 1e-5)?;
                tape.dot(y, r.clone())
            },
            opts,
        )?);
    }

    type Act = fn(&mut Tape<f64>, Var) -> Var;
    let acts: [(&str, Act); 4] = [
        ("leaky_relu", |t, x| t.leaky_relu(x, 0.2)),
        ("relu", |t, x| t.relu(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
    ];
    for (label, act) in acts {
        let mut store = ParamStore::<f64>::new(0, seed);
        store.params.push(super::Parameter {
            name: "x".into(),
            value: input_away_from_zero([2, 2, 4, 4], seed + 4, 1e-2),
            init: super::Init::Constant { value: 0.0 },
        });
        let x = super::ParamId { store: 0, index: 0 };
        let r = probe(64, seed + 5);
        reports.push(grad_check(
            label,
            &mut store,
            |tape, s| {
                let x = tape.param(s, x);
                let y = act(tape, x);
                tape.dot(y, r.clone())
            },
            opts,
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new(0, seed);
        let a = store.normal("a", [2, 3, 4, 4], 1.0);
        let b = store.normal("b", [2, 5, 4, 4], 1.0);
        let r = probe(2 * 8 * 16, seed + 6);
        reports.push(grad_check(
            "concat_channels",
            &mut store,
            |tape, s| {
                let (a, b) = (tape.param(s, a), tape.param(s, b));
                let y = tape.concat_channels(a, b)?;
                tape.dot(y, r.clone())
            },
            opts,
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new(0, seed);
        let x = store.normal("x", [1, 4, 6, 6], 1.0);
        let block = ResidualBlock::new(&mut store, "res", 4);
        // Larger kernels than the 0.02 init so the check exercises a
        // non-trivial residual branch.
        for p in &mut store.params {
            if p.name.ends_with("weight") {
                p.value.data.iter_mut().for_each(|v| *v *= 20.0);
            }
        }
        let r = probe(4 * 36, seed + 7);
        reports.push(grad_check(
            "residual_block",
            &mut store,
            |tape, s| {
                let x = tape.param(s, x);
                let y = block.forward(tape, s, x)?;
                tape.dot(y, r.clone())
            },
            opts,
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new(0, seed);
        let p = store.normal("pred", [1, 1, 6, 6], 1.0);
        let target = Tensor::<f64>::randn([1, 1, 6, 6], 1.0, seed + 8);
        let mask: Vec<bool> = (0..36).map(|i| i % 3 != 0).collect();
        reports.push(grad_check(
            "masked_l1",
            &mut store,
            |tape, s| {
                let p = tape.param(s, p);
                tape.masked_l1(p, &target, &mask)
            },
            opts,
        )?);
    }

    for target in [0.0, 1.0] {
        let mut store = ParamStore::<f64>::new(0, seed);
        let mut scores = Tensor::<f64>::randn([1, 1, 5, 5], 1.0, seed + 9);
        scores
            .data
            .iter_mut()
            .for_each(|v| *v = 0.05 + 0.9 * super::tape::sigmoid(*v));
        store.params.push(super::Parameter {
            name: "scores".into(),
            value: scores,
            init: super::Init::Constant { value: 0.0 },
        });
        let id = super::ParamId { store: 0, index: 0 };
        reports.push(grad_check(
            &format!("bce target {target}"),
            &mut store,
            |tape, s| {
                let v = tape.param(s, id);
                Ok(tape.bce(v, target))
            },
            opts,
        )?);
    }

    {
        let mut store = ParamStore::<f64>::new(0, seed);
        let mut scores = Tensor::<f64>::randn([1, 1, 5, 5], 1.0, seed + 10);
        scores
            .data
            .iter_mut()
            .for_each(|v| *v = 0.05 + 0.9 * super::tape::sigmoid(*v));
        store.params.push(super::Parameter {
            name: "scores".into(),
            value: scores,
            init: super::Init::Constant { value: 0.0 },
        });
        let id = super::ParamId { store: 0, index: 0 };
        let mask: Vec<bool> = (0..25).map(|i| i % 4 != 1).collect();
        reports.push(grad_check(
            "masked_bce",
            &mut store,
            |tape, s| {
                let v = tape.param(s, id);
                tape.masked_bce(v, 1.0, &mask)
            },
            opts,
        )?);
    }

    Ok(reports)
}
