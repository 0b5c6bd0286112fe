use super::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used for convolution kernels.
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.normal(
            format!("{name}.weight"),
            [out_channels, in_channels, kernel, kernel],
            INIT_STD,
        );
        let bias = store.constant(format!("{name}.bias"), [1, out_channels, 1, 1], 0.0);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.normal(
            format!("{name}.weight"),
            [in_channels, out_channels, kernel, kernel],
            INIT_STD,
        );
        let bias = store.constant(format!("{name}.bias"), [1, out_channels, 1, 1], 0.0);
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            scale: store.constant(format!("{name}.scale"), [1, channels, 1, 1], 1.0),
            shift: store.constant(format!("{name}.shift"), [1, channels, 1, 1], 0.0),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.param(store, self.scale);
        let b = tape.param(store, self.shift);
        tape.instance_norm(x, s, b, NORM_EPS)
    }
}

/// `x + F(x)` with `F = conv3 → norm → relu → conv3 → norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub channels: usize,
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
}

impl ResidualBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), channels),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), channels),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let c = tape.shape(x)[1];
        if c != self.channels {
            return Err(Error::dims(
                format!("{} channels", self.channels),
                format!("{c} channels"),
            ));
        }
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.norm2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
