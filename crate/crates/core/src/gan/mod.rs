//! Dual-input generator, PatchGAN discriminator, losses, training and
//! inference.

pub mod gradcheck;
pub mod loss;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Conv2d, ConvTranspose2d, InstanceNorm, ParamStore, Real, ResidualBlock, Tape, Var,
};

pub use loss::{
    discriminator_loss, gan_losses, generator_loss, patch_mask, GeneratorLoss, LossWeights,
};
pub use train::{
    infer, prepare, train, InferenceModel, LossRecord, ModelMeta, PreparedSample, SampleSource,
    TrainConfig, TrainState,
};

/// Store tags: parameters of each network live in their own store.
pub const GENERATOR_TAG: u32 = 0;
pub const DISCRIMINATOR_TAG: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub rgb_channels: usize,
    pub shsi_channels: usize,
    pub rgb_stem_channels: usize,
    pub shsi_stem_channels: usize,
    pub stem_kernel: usize,
    /// Stride-2, channel-doubling stages per branch; the decoder mirrors
    /// them with transposed convolutions.
    pub downsamples: usize,
    pub branch_blocks: usize,
    pub fused_blocks: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            rgb_channels: 3,
            shsi_channels: 24,
            rgb_stem_channels: 32,
            shsi_stem_channels: 32,
            stem_kernel: 7,
            downsamples: 2,
            branch_blocks: 2,
            fused_blocks: 4,
            out_channels: 1,
        }
    }
}

impl GeneratorConfig {
    /// Same topology with narrow stems and a 3×3 stem kernel, for
    /// single-core training runs.
    pub fn desk() -> Self {
        Self {
            rgb_stem_channels: 8,
            shsi_stem_channels: 8,
            stem_kernel: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb_channels == 0
            || self.shsi_channels == 0
            || self.rgb_stem_channels == 0
            || self.shsi_stem_channels == 0
            || self.out_channels == 0
            || self.stem_kernel % 2 == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid generator config {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels entering the fused trunk.
    pub fn fused_channels(&self) -> usize {
        (self.rgb_stem_channels + self.shsi_stem_channels) << self.downsamples
    }

    /// Input sides must divide by `2^downsamples`.
    pub fn size_multiple(&self) -> usize {
        1 << self.downsamples
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Branch {
    stem: Conv2d,
    stem_norm: InstanceNorm,
    downs: Vec<(Conv2d, InstanceNorm)>,
    blocks: Vec<ResidualBlock>,
}

impl Branch {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        stem: usize,
        cfg: &GeneratorConfig,
    ) -> Self {
        let k = cfg.stem_kernel;
        let mut c = stem;
        let mut downs = Vec::new();
        for i in 0..cfg.downsamples {
            downs.push((
                Conv2d::new(store, &format!("{name}.down{i}"), c, 2 * c, 4, 2, 1),
                InstanceNorm::new(store, &format!("{name}.down{i}.norm"), 2 * c),
            ));
            c *= 2;
        }
        Self {
            stem: Conv2d::new(store, &format!("{name}.stem"), cin, stem, k, 1, k / 2),
            stem_norm: InstanceNorm::new(store, &format!("{name}.stem.norm"), stem),
            downs,
            blocks: (0..cfg.branch_blocks)
                .map(|i| ResidualBlock::new(store, &format!("{name}.res{i}"), c))
                .collect(),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(tape, store, x)?;
        let h = self.stem_norm.forward(tape, store, h)?;
        let mut h = tape.relu(h);
        for (conv, norm) in &self.downs {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// Two encoder branches, channel concatenation, a residual trunk and a
/// transposed-convolution decoder ending in a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    rgb: Branch,
    shsi: Branch,
    fused: Vec<ResidualBlock>,
    ups: Vec<(ConvTranspose2d, InstanceNorm)>,
    head: Conv2d,
}

impl Generator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let rgb = Branch::new(
            store,
            "rgb",
            config.rgb_channels,
            config.rgb_stem_channels,
            config,
        );
        let shsi = Branch::new(
            store,
            "shsi",
            config.shsi_channels,
            config.shsi_stem_channels,
            config,
        );
        let mut c = config.fused_channels();
        let fused = (0..config.fused_blocks)
            .map(|i| ResidualBlock::new(store, &format!("fused.res{i}"), c))
            .collect();
        let mut ups = Vec::new();
        for i in 0..config.downsamples {
            ups.push((
                ConvTranspose2d::new(store, &format!("up{i}"), c, c / 2, 4, 2, 1),
                InstanceNorm::new(store, &format!("up{i}.norm"), c / 2),
            ));
            c /= 2;
        }
        let k = config.stem_kernel;
        let head = Conv2d::new(store, "head", c, config.out_channels, k, 1, k / 2);
        Ok(Self {
            config: config.clone(),
            rgb,
            shsi,
            fused,
            ups,
            head,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        rgb: Var,
        shsi: Var,
    ) -> Result<Var> {
        let (rs, ss) = (tape.shape(rgb), tape.shape(shsi));
        let m = self.config.size_multiple();
        if rs[1] != self.config.rgb_channels
            || ss[1] != self.config.shsi_channels
            || rs[0] != ss[0]
            || rs[2..] != ss[2..]
            || rs[2] % m != 0
            || rs[3] % m != 0
            || rs[2] < 2 * m
            || rs[3] < 2 * m
        {
            return Err(Error::dims(
                format!(
                    "rgb N×{}×H×W and shsi N×{}×H×W, H and W multiples of {m} (at least {})",
                    self.config.rgb_channels,
                    self.config.shsi_channels,
                    2 * m
                ),
                format!("rgb {rs:?}, shsi {ss:?}"),
            ));
        }
        let a = self.rgb.forward(tape, store, rgb)?;
        let b = self.shsi.forward(tape, store, shsi)?;
        let mut h = tape.concat_channels(a, b)?;
        for block in &self.fused {
            h = block.forward(tape, store, h)?;
        }
        for (up, norm) in &self.ups {
            h = up.forward(tape, store, h)?;
            h = norm.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        let h = self.head.forward(tape, store, h)?;
        Ok(tape.sigmoid(h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Condition (RGB + sHSI) plus the real or generated map.
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub pad: usize,
    pub slope: f64,
    /// Instance normalization after every conv but the first.
    pub norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 28,
            widths: vec![64, 128, 256, 512],
            strides: vec![2, 2, 2, 1],
            kernel: 4,
            pad: 1,
            slope: 0.2,
            norm: true,
        }
    }
}

impl DiscriminatorConfig {
    /// Same geometry, widths 16→128.
    pub fn desk() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.len() != self.strides.len()
            || self.widths.contains(&0)
            || self.strides.contains(&0)
            || self.kernel == 0
            || self.in_channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid discriminator config {self:?}"
            )));
        }
        Ok(())
    }

    /// Strides of every conv, including the final 1-channel stride-1 layer.
    fn all_strides(&self) -> Vec<usize> {
        let mut s = self.strides.clone();
        s.push(1);
        s
    }

    /// Side of the input window seen by one output unit.
    pub fn receptive_field(&self) -> usize {
        self.all_strides()
            .iter()
            .rev()
            .fold(1, |rf, s| (rf - 1) * s + self.kernel)
    }

    /// Spatial size after each conv, starting from `input`.
    pub fn shape_chain(&self, input: usize) -> Option<Vec<usize>> {
        let mut out = vec![input];
        let mut n = input;
        for s in self.all_strides() {
            n = (n + 2 * self.pad).checked_sub(self.kernel)? / s + 1;
            out.push(n);
        }
        Some(out)
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        self.shape_chain(input).and_then(|c| c.last().copied())
    }

    /// Input coordinate of the centre of output unit `i`'s receptive field.
    pub fn patch_centre(&self, i: usize) -> f64 {
        let (mut jump, mut start) = (1.0, (self.kernel as f64 - 1.0) / 2.0 - self.pad as f64);
        for (li, s) in self.all_strides().iter().enumerate() {
            if li > 0 {
                start += ((self.kernel as f64 - 1.0) / 2.0 - self.pad as f64) * jump;
            }
            jump *= *s as f64;
        }
        // `start` is the centre of unit 0 in input pixel-index units.
        start + i as f64 * jump
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    layers: Vec<(Conv2d, Option<InstanceNorm>)>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let (k, p) = (config.kernel, config.pad);
        let mut c = config.in_channels;
        let mut layers = Vec::new();
        for (i, (&w, &s)) in config.widths.iter().zip(&config.strides).enumerate() {
            let conv = Conv2d::new(store, &format!("d{i}"), c, w, k, s, p);
            let norm =
                (config.norm && i > 0).then(|| InstanceNorm::new(store, &format!("d{i}.norm"), w));
            layers.push((conv, norm));
            c = w;
        }
        let head = Conv2d::new(store, "d.head", c, 1, k, 1, p);
        Ok(Self {
            config: config.clone(),
            layers,
            head,
        })
    }

    /// Patch scores in (0, 1) for `concat(condition, y)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        condition: Var,
        y: Var,
    ) -> Result<Var> {
        let mut h = tape.concat_channels(condition, y)?;
        let c = tape.shape(h)[1];
        if c != self.config.in_channels {
            return Err(Error::dims(
                format!("{} discriminator input channels", self.config.in_channels),
                format!("{c}"),
            ));
        }
        for (conv, norm) in &self.layers {
            h = conv.forward(tape, store, h)?;
            if let Some(n) = norm {
                h = n.forward(tape, store, h)?;
            }
            h = tape.leaky_relu(h, self.config.slope);
        }
        let h = self.head.forward(tape, store, h)?;
        Ok(tape.sigmoid(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn discriminator_geometry() {
        let c = DiscriminatorConfig::default();
        assert_eq!(c.receptive_field(), 70);
        assert_eq!(c.shape_chain(256).unwrap(), vec![256, 128, 64, 32, 31, 30]);
        assert_eq!(c.output_size(64), Some(6));
        assert_eq!(c.output_size(8), None);
        // Unit 0 sees input rows -23..=46.
        assert_eq!(c.patch_centre(0), 11.5);
        assert_eq!(c.patch_centre(1) - c.patch_centre(0), 8.0);
    }

    #[test]
    fn patch_centre_matches_window_propagation() {
        let c = DiscriminatorConfig::default();
        // Propagate the [lo, hi] input interval of output unit i backwards.
        let strides = c.all_strides();
        for i in [0usize, 3, 29] {
            let (mut lo, mut hi) = (i as i64, i as i64);
            for s in strides.iter().rev() {
                lo = lo * *s as i64 - c.pad as i64;
                hi = hi * *s as i64 - c.pad as i64 + c.kernel as i64 - 1;
            }
            assert_eq!(hi - lo + 1, 70);
            assert_eq!(c.patch_centre(i), (lo + hi) as f64 / 2.0);
        }
    }

    fn tiny() -> (GeneratorConfig, DiscriminatorConfig) {
        (
            GeneratorConfig {
                rgb_stem_channels: 2,
                shsi_stem_channels: 2,
                stem_kernel: 3,
                branch_blocks: 1,
                fused_blocks: 1,
                ..Default::default()
            },
            DiscriminatorConfig {
                widths: vec![2, 2, 2, 2],
                ..Default::default()
            },
        )
    }

    #[test]
    fn generator_output_contract() {
        let (gc, _) = tiny();
        let mut store = ParamStore::<f32>::new(GENERATOR_TAG, 3);
        let g = Generator::new(&mut store, &gc).unwrap();
        let mut tape = Tape::new();
        let rgb = tape.constant(Tensor::randn([2, 3, 16, 16], 1.0, 1));
        let shsi = tape.constant(Tensor::randn([2, 24, 16, 16], 1.0, 2));
        let y = g.forward(&mut tape, &store, rgb, shsi).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape, [2, 1, 16, 16]);
        assert!(v.data.iter().all(|p| *p > 0.0 && *p < 1.0));

        // Per-sample results do not depend on the rest of the batch.
        let mut tape1 = Tape::new();
        let rgb1 = tape1.constant(tape.value(rgb).slice_batch(1..2));
        let shsi1 = tape1.constant(tape.value(shsi).slice_batch(1..2));
        let y1 = g.forward(&mut tape1, &store, rgb1, shsi1).unwrap();
        assert_eq!(tape1.value(y1).data, v.slice_batch(1..2).data);

        let bad = tape.constant(Tensor::zeros([2, 24, 12, 16]));
        assert!(g.forward(&mut tape, &store, rgb, bad).is_err());
    }

    #[test]
    fn discriminator_output_contract() {
        let (_, dc) = tiny();
        let mut store = ParamStore::<f32>::new(DISCRIMINATOR_TAG, 3);
        let d = Discriminator::new(&mut store, &dc).unwrap();
        let mut tape = Tape::new();
        let cond = tape.constant(Tensor::randn([1, 27, 64, 64], 1.0, 1));
        let y = tape.constant(Tensor::filled([1, 1, 64, 64], 0.5));
        let s = d.forward(&mut tape, &store, cond, y).unwrap();
        assert_eq!(tape.shape(s), [1, 1, 6, 6]);
        assert!(tape.value(s).data.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn fused_channels_add_up() {
        let c = GeneratorConfig::default();
        assert_eq!(c.fused_channels(), 256);
        let mut store = ParamStore::<f32>::new(0, 0);
        assert!(Generator::new(
            &mut store,
            &GeneratorConfig {
                stem_kernel: 4,
                ..c
            }
        )
        .is_err());
    }
}
