//! Recording tape and reverse-mode backward pass.
//!
//! Every op appends one node holding its output value and the saved inputs
//! it needs; `backward` walks the nodes in exact reverse order and
//! accumulates gradients additively, so shared inputs receive the sum of
//! their consumers' contributions.

use std::collections::HashMap;

use super::kernels::{col2im, im2col, matmul, ConvGeom};
use super::{numel, ParamId, ParamStore, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Mean {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        n_effective: usize,
    },
    Bce {
        scores: Var,
        target: T,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    trainable: Vec<u32>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.var(*v))
    }

    /// Gradients aligned with `store.params`, `None` where the parameter
    /// was not reached.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|index| {
                self.param(ParamId {
                    store: store.tag,
                    index,
                })
                .cloned()
            })
            .collect()
    }
}

impl<T: Real> Tape<T> {
    /// A tape on which no parameter is trainable (pure forward / constants).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape on which parameters of the stores tagged `tags` receive gradients.
    pub fn training(tags: &[u32]) -> Self {
        Self {
            trainable: tags.to_vec(),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Input that receives a gradient regardless of store bindings.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Bind a parameter; repeated binds of one parameter share a node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let trainable = self.trainable.contains(&id.store);
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let [n, cin, h, wd] = xs;
        let [cout, wcin, k, k2] = ws;
        if wcin != cin || k != k2 || numel(bs) != cout {
            return Err(Error::dims(
                format!("weight [_, {cin}, k, k] and bias [{cout}]"),
                format!("weight {ws:?}, bias {bs:?}"),
            ));
        }
        let g = ConvGeom::new(cin, h, wd, k, stride, pad)
            .ok_or_else(|| Error::dims(format!("input >= kernel {k}"), format!("{h}x{wd}")))?;
        let mut out = Tensor::zeros([n, cout, g.oh, g.ow]);
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        let (xv, wv, bv) = (
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
        );
        let per_out = cout * g.cols();
        for s in 0..n {
            im2col(&xv[s * cin * h * wd..(s + 1) * cin * h * wd], &g, &mut cols);
            let o = &mut out.data[s * per_out..(s + 1) * per_out];
            matmul(cout, g.rows(), g.cols(), wv, false, &cols, false, o, false);
            for (co, chunk) in o.chunks_mut(g.cols()).enumerate() {
                let bias = bv[co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed convolution; weight layout `[cin, cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let [n, cin, h, wd] = xs;
        let [wcin, cout, k, k2] = ws;
        if wcin != cin || k != k2 || numel(bs) != cout || stride == 0 {
            return Err(Error::dims(
                format!("weight [{cin}, cout, k, k] and bias [cout]"),
                format!("weight {ws:?}, bias {bs:?}"),
            ));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::dims("positive output", format!("{h} with pad {pad}")))?;
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::dims("positive output", format!("{wd} with pad {pad}")))?;
        let g = ConvGeom::new(cout, oh, ow, k, stride, pad).expect("transposed geometry");
        debug_assert_eq!((g.oh, g.ow), (h, wd));
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        let (xv, wv, bv) = (
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
        );
        let per_out = cout * oh * ow;
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            matmul(
                g.rows(),
                cin,
                g.cols(),
                wv,
                true,
                xs,
                false,
                &mut cols,
                false,
            );
            let o = &mut out.data[s * per_out..(s + 1) * per_out];
            col2im(&cols, &g, o);
            for (co, chunk) in o.chunks_mut(oh * ow).enumerate() {
                let bias = bv[co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Per-(sample, channel) spatial standardization followed by a
    /// per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let m = h * w;
        if m < 2 {
            return Err(Error::dims("spatial size >= 2", format!("{h}x{w}")));
        }
        if numel(self.shape(scale)) != c || numel(self.shape(shift)) != c {
            return Err(Error::dims(format!("{c} affine channels"), "mismatch"));
        }
        let xv = &self.value(x).data;
        let (sc, sh) = (&self.value(scale).data, &self.value(shift).data);
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mf = T::of(m as f64);
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * m;
                let slice = &xv[off..off + m];
                let mean = slice.iter().copied().sum::<T>() / mf;
                let var = slice.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
                let inv = T::one() / (var + T::of(eps)).sqrt();
                inv_std[s * c + ch] = inv;
                for i in 0..m {
                    let xh = (slice[i] - mean) * inv;
                    xhat[off + i] = xh;
                    out.data[off + i] = sc[ch] * xh + sh[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape,
            data: v.data.iter().map(|e| f(*e)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.map(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LeakyRelu { x, slope: s },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([na, ca, ha, wa], [nb, cb, hb, wb]) = (self.shape(a), self.shape(b));
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dims(
                format!("[{na}, _, {ha}, {wa}]"),
                format!("[{nb}, _, {hb}, {wb}]"),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for s in 0..na {
            data.extend_from_slice(av.sample(s));
            data.extend_from_slice(bv.sample(s));
        }
        let out = Tensor {
            shape: [na, ca + cb, ha, wa],
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kt = T::of(k);
        self.map(x, move |v| v * kt, Op::Scale { x, k: kt })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// `Σ weights ⊙ x`, a scalar probe used by gradient checks.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if weights.len() != v.len() {
            return Err(Error::SizeMismatch {
                expected: v.len(),
                found: weights.len(),
            });
        }
        let s = v.data.iter().zip(&weights).map(|(a, b)| *a * *b).sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, rg))
    }

    /// Mean absolute error over pixels where `mask` is true. Excluded pixels
    /// contribute neither loss nor gradient.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape != target.shape || mask.len() != p.len() {
            return Err(Error::dims(
                format!("{:?} with {} mask entries", p.shape, p.len()),
                format!("{:?} with {} mask entries", target.shape, mask.len()),
            ));
        }
        let n_effective = mask.iter().filter(|m| **m).count();
        if n_effective == 0 {
            return Err(Error::NoEffectivePixels);
        }
        let total = p
            .data
            .iter()
            .zip(&target.data)
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((a, b), _)| (*a - *b).abs())
            .sum::<T>();
        let loss = total / T::of(n_effective as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedL1 {
                pred,
                target: target.data.clone(),
                mask: mask.to_vec(),
                n_effective,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probability scores against a constant
    /// label, with probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, scores: Var, target: f64) -> Var {
        self.bce_inner(scores, target, None)
    }

    /// BCE averaged over the entries where `mask` is true only.
    pub fn masked_bce(&mut self, scores: Var, target: f64, mask: &[bool]) -> Result<Var> {
        let n = self.value(scores).len();
        if mask.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                found: mask.len(),
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::NoEffectivePixels);
        }
        Ok(self.bce_inner(scores, target, Some(mask.to_vec())))
    }

    fn bce_inner(&mut self, scores: Var, target: f64, mask: Option<Vec<bool>>) -> Var {
        let v = self.value(scores);
        let t = T::of(target);
        let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let count = (0..v.len()).filter(|i| keep(*i)).count();
        let sum = v
            .data
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, s)| {
                let p = s.max(lo).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum::<T>();
        let loss = sum / T::of(count as f64);
        let rg = self.rg(scores);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                scores,
                target: t,
                mask,
                count,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dims(
                "scalar loss",
                format!("{:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: self.param_vars.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, cin, h, wd] = xv.shape;
                let [cout, _, k, _] = wv.shape;
                let geom = ConvGeom::new(cin, h, wd, k, *stride, *pad).expect("recorded geometry");
                let mut cols = vec![T::zero(); geom.rows() * geom.cols()];
                let mut dcols = vec![T::zero(); geom.rows() * geom.cols()];
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.shape));
                let per_in = cin * h * wd;
                let per_out = cout * geom.cols();
                for s in 0..n {
                    let gs = &g.data[s * per_out..(s + 1) * per_out];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv.data[s * per_in..(s + 1) * per_in], &geom, &mut cols);
                        matmul(
                            cout,
                            geom.cols(),
                            geom.rows(),
                            gs,
                            false,
                            &cols,
                            true,
                            &mut dw.data,
                            true,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(
                            geom.rows(),
                            cout,
                            geom.cols(),
                            &wv.data,
                            true,
                            gs,
                            false,
                            &mut dcols,
                            false,
                        );
                        col2im(&dcols, &geom, &mut dx.data[s * per_in..(s + 1) * per_in]);
                    }
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, bias_grad(g, self.shape(*b)));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, cin, h, wd] = xv.shape;
                let [_, cout, k, _] = wv.shape;
                let [_, _, oh, ow] = node.value.shape;
                let geom =
                    ConvGeom::new(cout, oh, ow, k, *stride, *pad).expect("recorded geometry");
                let mut dcols = vec![T::zero(); geom.rows() * geom.cols()];
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.shape));
                let per_in = cin * h * wd;
                let per_out = cout * oh * ow;
                for s in 0..n {
                    im2col(&g.data[s * per_out..(s + 1) * per_out], &geom, &mut dcols);
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx.data[s * per_in..(s + 1) * per_in];
                        matmul(
                            cin,
                            geom.rows(),
                            geom.cols(),
                            &wv.data,
                            false,
                            &dcols,
                            false,
                            dxs,
                            false,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xs = &xv.data[s * per_in..(s + 1) * per_in];
                        matmul(
                            cin,
                            geom.cols(),
                            geom.rows(),
                            xs,
                            false,
                            &dcols,
                            true,
                            &mut dw.data,
                            true,
                        );
                    }
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, bias_grad(g, self.shape(*b)));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = g.shape;
                let m = h * w;
                let mf = T::of(m as f64);
                let sc = &self.value(*scale).data;
                let mut dscale = Tensor::zeros(self.shape(*scale));
                let mut dshift = Tensor::zeros(self.shape(*shift));
                let mut dx = Tensor::zeros(g.shape);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * m;
                        let gs = &g.data[off..off + m];
                        let xh = &xhat[off..off + m];
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for i in 0..m {
                            sum_g += gs[i];
                            sum_gx += gs[i] * xh[i];
                        }
                        dshift.data[ch] += sum_g;
                        dscale.data[ch] += sum_gx;
                        // dxhat = g·scale, folded into the sums.
                        let k = sc[ch] * inv_std[s * c + ch] / mf;
                        for i in 0..m {
                            dx.data[off + i] = k * (mf * gs[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                }
                self.accumulate(grads, *scale, dscale);
                self.accumulate(grads, *shift, dshift);
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, gi)| if *v > T::zero() { *gi } else { *gi * *slope })
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: g.shape,
                        data,
                    },
                );
            }
            Op::Tanh { x } => {
                let data = node
                    .value
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(y, gi)| *gi * (T::one() - *y * *y))
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: g.shape,
                        data,
                    },
                );
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(y, gi)| *gi * *y * (T::one() - *y))
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: g.shape,
                        data,
                    },
                );
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let la = sa[1] * sa[2] * sa[3];
                let lb = sb[1] * sb[2] * sb[3];
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for s in 0..sa[0] {
                    let src = &g.data[s * (la + lb)..(s + 1) * (la + lb)];
                    ga.data[s * la..(s + 1) * la].copy_from_slice(&src[..la]);
                    gb.data[s * lb..(s + 1) * lb].copy_from_slice(&src[la..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale { x, k } => {
                let data = g.data.iter().map(|v| *v * *k).collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: g.shape,
                        data,
                    },
                );
            }
            Op::Mean { x } => {
                let shape = self.shape(*x);
                let v = g.item() / T::of(numel(shape) as f64);
                self.accumulate(grads, *x, Tensor::filled(shape, v));
            }
            Op::Dot { x, weights } => {
                let gi = g.item();
                let data = weights.iter().map(|w| *w * gi).collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: self.shape(*x),
                        data,
                    },
                );
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                n_effective,
            } => {
                let k = g.item() / T::of(*n_effective as f64);
                let pv = self.value(*pred);
                let data = pv
                    .data
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((p, t), m)| {
                        if !*m || *p == *t {
                            T::zero()
                        } else if *p > *t {
                            k
                        } else {
                            -k
                        }
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *pred,
                    Tensor {
                        shape: pv.shape,
                        data,
                    },
                );
            }
            Op::Bce {
                scores,
                target,
                mask,
                count,
            } => {
                let sv = self.value(*scores);
                let k = g.item() / T::of(*count as f64);
                let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
                let t = *target;
                let data = sv
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        if *s < lo || *s > hi || mask.as_ref().is_some_and(|m| !m[i]) {
                            T::zero()
                        } else {
                            -k * (t / *s - (T::one() - t) / (T::one() - *s))
                        }
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *scores,
                    Tensor {
                        shape: sv.shape,
                        data,
                    },
                );
            }
        }
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>, bias_shape: Shape) -> Tensor<T> {
    let [n, c, h, w] = g.shape;
    let m = h * w;
    let mut out = Tensor::zeros(bias_shape);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * m;
            out.data[ch] += g.data[off..off + m].iter().copied().sum::<T>();
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::randn([2, 3, 5, 5], 1.0, 1);
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            w.data[c * 3 + c] = 1.0;
        }
        let x = tape.constant(xv.clone());
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn conv_shape_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 256, 256]));
        let w = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 128, 128]);

        let x = tape.constant(Tensor::zeros([1, 1, 128, 128]));
        let y = tape.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 256, 256]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 8, 8]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        let mut tape = Tape::<f64>::new();
        let wv = Tensor::randn([4, 3, 4, 4], 1.0, 3);
        let xv = Tensor::randn([1, 3, 8, 8], 1.0, 4);
        let yv = Tensor::randn([1, 4, 4, 4], 1.0, 5);
        // conv weight [cout=4, cin=3]; the transpose reads it as [cin=4, cout=3].
        let w = tape.constant(wv);
        let x = tape.constant(xv.clone());
        let b4 = tape.constant(Tensor::zeros([1, 4, 1, 1]));
        let b3 = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let cx = tape.conv2d(x, w, b4, 2, 1).unwrap();
        let y = tape.constant(yv.clone());
        let ty = tape.conv_transpose2d(y, w, b3, 2, 1).unwrap();
        let lhs: f64 = tape
            .value(cx)
            .data
            .iter()
            .zip(&yv.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = xv
            .data
            .iter()
            .zip(&tape.value(ty).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn([2, 3, 6, 5], 3.0, 9));
        let sc = tape.constant(Tensor::filled([1, 3, 1, 1], 1.0));
        let sh = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let y = tape.instance_norm(x, sc, sh, 1e-5).unwrap();
        for chunk in tape.value(y).data.chunks(30) {
            let mean = chunk.iter().sum::<f64>() / 30.0;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_norm_constant_slice_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled([1, 1, 4, 4], 2.5));
        let sc = tape.constant(Tensor::filled([1, 1, 1, 1], 1.0));
        let sh = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let y = tape.instance_norm(x, sc, sh, 1e-5).unwrap();
        assert!(tape.value(y).data.iter().all(|v| *v == 0.0));
        let x1 = tape.constant(Tensor::filled([1, 1, 1, 1], 2.5));
        assert!(tape.instance_norm(x1, sc, sh, 1e-5).is_err());
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t([1, 1, 1, 3], vec![0.0, -2.0, 3.0]));
        let lr = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(lr).data, vec![0.0, -0.4, 3.0]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data, vec![0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data[0], 0.5);
        let big = tape.constant(Tensor::randn([1, 1, 10, 10], 5.0, 2));
        let th = tape.tanh(big);
        assert!(tape.value(th).data.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3, 4, 4]));
        let b = tape.constant(Tensor::zeros([2, 24, 4, 4]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), [2, 27, 4, 4]);
        let e = tape.constant(Tensor::zeros([2, 0, 4, 4]));
        let ae = tape.concat_channels(a, e).unwrap();
        assert_eq!(tape.value(ae), tape.value(a));
        let bad = tape.constant(Tensor::zeros([2, 1, 5, 4]));
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn shared_input_gradients_add() {
        // f(x) = sum(tanh x), g(x) = sum(2x); d/dx (f + g) = (1 - tanh²) + 2.
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::randn([1, 1, 3, 3], 1.0, 6);
        let x = tape.leaf(xv.clone());
        let th = tape.tanh(x);
        let f = tape.dot(th, vec![1.0; 9]).unwrap();
        let sx = tape.scale(x, 2.0);
        let g = tape.dot(sx, vec![1.0; 9]).unwrap();
        let total = tape.add(f, g).unwrap();
        let grads = tape.backward(total).unwrap();
        let gx = grads.var(x).unwrap();
        for (gi, v) in gx.data.iter().zip(&xv.data) {
            let expected = 1.0 - v.tanh().powi(2) + 2.0;
            assert!((gi - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_l1_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(t([1, 1, 1, 4], vec![0.3, 0.5, 0.9, 0.1]));
        let target = t([1, 1, 1, 4], vec![0.1, 0.5, 0.7, 0.1]);
        let mask = [true, true, false, true];
        let l = tape.masked_l1(pred, &target, &mask).unwrap();
        assert!((tape.value(l).item() - 0.2 / 3.0).abs() < 1e-12);
        let grads = tape.backward(l).unwrap();
        let g = grads.var(pred).unwrap();
        assert_eq!(g.data[2], 0.0);
        assert!((g.data[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!(tape.masked_l1(pred, &target, &[false; 4]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let half = tape.constant(Tensor::filled([1, 1, 30, 30], 0.5));
        let l1 = tape.bce(half, 1.0);
        let l0 = tape.bce(half, 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((tape.value(l1).item() - ln2).abs() < 1e-12);
        assert!((tape.value(l0).item() - ln2).abs() < 1e-12);
        let ones = tape.constant(Tensor::filled([1, 1, 2, 2], 1.0));
        let l = tape.bce(ones, 1.0);
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
