//! Small reverse-mode autodiff over NCHW tensors: exactly the kernels the
//! generator and discriminator need, generic over `f32` (training) and
//! `f64` (gradient checking).

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod optim;
pub mod tape;

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{Conv2d, ConvTranspose2d, InstanceNorm, ResidualBlock};
pub use optim::{Adam, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};

/// Floating-point element type of tensors.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` for row/column-strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover the strided extents;
                // kernels::gemm_checked asserts this before every call.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// NCHW shape.
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::filled([1, 1, 1, 1], v)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::SizeMismatch {
                expected: numel(shape),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn randn(shape: Shape, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel(shape))
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// One sample as a contiguous `C·H·W` slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Samples `range` of the batch.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Tensor<T> {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [range.len(), self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[range.start * len..range.end * len].to_vec(),
        }
    }

    /// Stack same-shaped tensors along the batch dimension.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(Error::Empty("tensor stack"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::dims(
                    format!("{:?}", first.shape),
                    format!("{:?}", p.shape),
                ));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// How a parameter was initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Init {
    Normal { std: f64, seed: u64 },
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub store: u32,
    pub index: usize,
}

/// Owns the parameters of one network. `tag` distinguishes stores on a
/// shared tape (generator vs discriminator).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub tag: u32,
    pub seed: u64,
    pub params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(tag: u32, seed: u64) -> Self {
        Self {
            tag,
            seed,
            params: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor<T>, init: Init) -> ParamId {
        self.params.push(Parameter { name, value, init });
        ParamId {
            store: self.tag,
            index: self.params.len() - 1,
        }
    }

    /// Zero-mean Gaussian parameter; the stream seed derives from the store
    /// seed and the parameter's position.
    pub fn normal(&mut self, name: impl Into<String>, shape: Shape, std: f64) -> ParamId {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.params.len() as u64 + 1);
        let value = Tensor::randn(shape, std, seed);
        self.push(name.into(), value, Init::Normal { std, seed })
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: Shape, value: f64) -> ParamId {
        self.push(
            name.into(),
            Tensor::filled(shape, T::of(value)),
            Init::Constant { value },
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        debug_assert_eq!(id.store, self.tag);
        &self.params[id.index].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        debug_assert_eq!(id.store, self.tag);
        &mut self.params[id.index].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tag: self.tag,
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    init: p.init,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_init_is_seeded() {
        let mut a = ParamStore::<f32>::new(0, 7);
        let mut b = ParamStore::<f32>::new(0, 7);
        a.normal("w", [2, 3, 4, 4], 0.02);
        b.normal("w", [2, 3, 4, 4], 0.02);
        assert_eq!(a, b);
        let mut c = ParamStore::<f32>::new(0, 8);
        c.normal("w", [2, 3, 4, 4], 0.02);
        assert_ne!(a.params[0].value, c.params[0].value);
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::<f32>::filled([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::filled([2, 2, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape, [3, 2, 2, 2]);
        assert_eq!(s.slice_batch(0..1), a);
        let bad = Tensor::<f32>::filled([1, 3, 2, 2], 1.0);
        assert!(Tensor::stack(&[a, bad]).is_err());
    }
}
