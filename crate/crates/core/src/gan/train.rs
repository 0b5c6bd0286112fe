//! Alternating discriminator/generator updates, checkpoints and inference.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{discriminator_loss, generator_loss, patch_mask, LossWeights};
use super::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, DISCRIMINATOR_TAG,
    GENERATOR_TAG,
};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::fibre::SparseHypercube;
use crate::hypercube::{PixelMask, RgbImage};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::optim::adam_step;
use crate::nn::{AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::oximetry::StO2Map;
use crate::raster::Planes;

/// Network-ready sample: NaN inputs replaced by 0, loss mask as flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub shsi: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Vec<bool>,
}

fn planes_tensor(p: &Planes) -> Tensor<f32> {
    let data = p
        .data
        .iter()
        .map(|v| if v.is_nan() { 0.0 } else { *v })
        .collect();
    Tensor {
        shape: [1, p.channels, p.height, p.width],
        data,
    }
}

pub fn prepare(sample: &Sample) -> PreparedSample {
    let mask = &sample.target.mask;
    PreparedSample {
        id: sample.id.clone(),
        rgb: planes_tensor(&sample.rgb.0),
        shsi: planes_tensor(&sample.shsi.0.planes),
        target: planes_tensor(&sample.target.to_planes()),
        mask: (0..mask.codes.len())
            .map(|i| mask.is_effective(i))
            .collect(),
    }
}

/// Indexable training data; lets large augmented sets be materialized one
/// batch at a time.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<PreparedSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [PreparedSample] {
    fn len(&self) -> usize {
        <[PreparedSample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<PreparedSample> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no sample {index}")))
    }
}

impl SampleSource for Vec<PreparedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<PreparedSample> {
        self.as_slice().sample(index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set: train until this many total steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Write `checkpoint_<step>.oxck` every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 1,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

/// One row of the loss log. `loss_g = adv_term + l1_term`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub l1_term: f64,
    pub adv_term: f64,
}

/// Checkpoint metadata: architecture plus the run's loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub history: Vec<LossRecord>,
    #[serde(default)]
    pub version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub g_store: ParamStore<f32>,
    pub d_store: ParamStore<f32>,
    pub g_opt: AdamState<f32>,
    pub d_opt: AdamState<f32>,
    pub step: u64,
    pub seed: u64,
    pub history: Vec<LossRecord>,
}

fn check_layout(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    let sig = |s: &ParamStore<f32>| {
        s.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape))
            .collect::<Vec<_>>()
    };
    if expected.tag != found.tag || sig(expected) != sig(found) {
        return Err(Error::Checkpoint(format!(
            "parameters do not match the configured architecture (store {})",
            found.tag
        )));
    }
    Ok(())
}

impl TrainState {
    pub fn new(
        generator: &GeneratorConfig,
        discriminator: &DiscriminatorConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut g_store = ParamStore::new(GENERATOR_TAG, seed);
        Generator::new(&mut g_store, generator)?;
        let mut d_store = ParamStore::new(DISCRIMINATOR_TAG, seed ^ 0xD15C_0000_0000_0001);
        Discriminator::new(&mut d_store, discriminator)?;
        if generator.rgb_channels + generator.shsi_channels + generator.out_channels
            != discriminator.in_channels
        {
            return Err(Error::InvalidArgument(format!(
                "discriminator expects {} channels, generator provides {}",
                discriminator.in_channels,
                generator.rgb_channels + generator.shsi_channels + generator.out_channels
            )));
        }
        Ok(Self {
            generator: generator.clone(),
            discriminator: discriminator.clone(),
            g_opt: AdamState::new(&g_store),
            d_opt: AdamState::new(&d_store),
            g_store,
            d_store,
            step: 0,
            seed,
            history: Vec::new(),
        })
    }

    /// Rebuild both networks and check the stores fit them.
    pub fn networks(&self) -> Result<(Generator, Discriminator)> {
        let mut gs = ParamStore::new(GENERATOR_TAG, 0);
        let g = Generator::new(&mut gs, &self.generator)?;
        check_layout(&gs, &self.g_store)?;
        let mut ds = ParamStore::new(DISCRIMINATOR_TAG, 0);
        let d = Discriminator::new(&mut ds, &self.discriminator)?;
        check_layout(&ds, &self.d_store)?;
        Ok((g, d))
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Checkpoint {
        let meta = ModelMeta {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            train: train.cloned(),
            history: self.history.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            step: self.step,
            seed: self.seed,
            stores: vec![self.g_store.clone(), self.d_store.clone()],
            optimizers: vec![self.g_opt.clone(), self.d_opt.clone()],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(ckpt)?;
        let [g_store, d_store] =
            <[ParamStore<f32>; 2]>::try_from(ckpt.stores.clone()).map_err(|_| {
                Error::Checkpoint("training state needs generator and discriminator stores".into())
            })?;
        let [g_opt, d_opt] = <[AdamState<f32>; 2]>::try_from(ckpt.optimizers.clone())
            .map_err(|_| Error::Checkpoint("training state needs two optimizer states".into()))?;
        let state = Self {
            generator: meta.generator,
            discriminator: meta.discriminator,
            g_store,
            d_store,
            g_opt,
            d_opt,
            step: ckpt.step,
            seed: ckpt.seed,
            history: meta.history,
        };
        state.networks()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        self.to_checkpoint(train).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// `step,loss_d,loss_g,l1_term,adv_term` rows.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss_d,loss_g,l1_term,adv_term\n");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.loss_d, r.loss_g, r.l1_term, r.adv_term
            );
        }
        out
    }
}

fn parse_meta(ckpt: &Checkpoint) -> Result<ModelMeta> {
    serde_json::from_str(&ckpt.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))
}

/// Sample order of one epoch: a seeded permutation.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

struct Batch {
    rgb: Tensor<f32>,
    shsi: Tensor<f32>,
    target: Tensor<f32>,
    mask: Vec<bool>,
}

fn make_batch<S: SampleSource + ?Sized>(data: &S, idx: &[usize]) -> Result<Batch> {
    let samples = idx
        .iter()
        .map(|&i| data.sample(i))
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&PreparedSample) -> &Tensor<f32>| {
        Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
    };
    Ok(Batch {
        rgb: pick(|s| &s.rgb)?,
        shsi: pick(|s| &s.shsi)?,
        target: pick(|s| &s.target)?,
        mask: samples
            .iter()
            .flat_map(|s| s.mask.iter().copied())
            .collect(),
    })
}

fn finite(v: f32, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(f64::from(v))
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at step {step}")))
    }
}

/// One discriminator update on the detached generator output, then one
/// generator update through the updated discriminator.
fn train_step(
    state: &mut TrainState,
    g: &Generator,
    d: &Discriminator,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let step = state.step + 1;
    let mut gt = Tape::training(&[GENERATOR_TAG]);
    let rgb = gt.constant(batch.rgb.clone());
    let shsi = gt.constant(batch.shsi.clone());
    let y_hat = g.forward(&mut gt, &state.g_store, rgb, shsi)?;

    let loss_d = {
        let mut dt = Tape::training(&[DISCRIMINATOR_TAG]);
        let rgb = dt.constant(batch.rgb.clone());
        let shsi = dt.constant(batch.shsi.clone());
        let cond = dt.concat_channels(rgb, shsi)?;
        let real_y = dt.constant(batch.target.clone());
        let fake_y = dt.constant(gt.value(y_hat).clone());
        let real = d.forward(&mut dt, &state.d_store, cond, real_y)?;
        let fake = d.forward(&mut dt, &state.d_store, cond, fake_y)?;
        let loss = discriminator_loss(&mut dt, real, fake)?;
        let value = finite(dt.value(loss).item(), "loss_D", step)?;
        let grads = dt.backward(loss)?.for_store(&state.d_store);
        adam_step(&mut state.d_store, &grads, &mut state.d_opt, &cfg.adam)?;
        value
    };

    let cond = gt.concat_channels(rgb, shsi)?;
    let fake = d.forward(&mut gt, &state.d_store, cond, y_hat)?;
    let [n, _, h, w] = batch.target.shape;
    let patches = if cfg.weights.mask_adversarial {
        Some(patch_mask(&d.config, &batch.mask, n, h, w)?)
    } else {
        None
    };
    let loss = generator_loss(
        &mut gt,
        fake,
        y_hat,
        &batch.target,
        &batch.mask,
        &cfg.weights,
        patches.as_deref(),
    )?;
    let loss_g = finite(gt.value(loss.total).item(), "loss_G", step)?;
    let grads = gt.backward(loss.total)?.for_store(&state.g_store);
    adam_step(&mut state.g_store, &grads, &mut state.g_opt, &cfg.adam)?;
    state.step = step;
    Ok(LossRecord {
        step,
        loss_d,
        loss_g,
        l1_term: f64::from(gt.value(loss.l1_term).item()),
        adv_term: f64::from(gt.value(loss.adv).item()),
    })
}

/// Train until `cfg.max_steps` (or `cfg.epochs` worth of steps) have been
/// taken in total, continuing from `state.step`. Batch order depends only
/// on the state seed and the step, so a restored checkpoint resumes the
/// exact sequence. With `out`, writes checkpoints and `losses.csv`.
pub fn train<S: SampleSource + ?Sized>(
    state: &mut TrainState,
    data: &S,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    cfg.weights.validate()?;
    let (g, d) = state.networks()?;
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total = cfg.max_steps.unwrap_or(cfg.epochs as u64 * per_epoch);
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step < total {
        let (epoch, pos) = (state.step / per_epoch, (state.step % per_epoch) as usize);
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(state.seed, epoch, data.len())));
        }
        let idx = &order.as_ref().expect("order set").1;
        let lo = pos * cfg.batch_size;
        let batch = make_batch(data, &idx[lo..(lo + cfg.batch_size).min(idx.len())])?;
        let record = train_step(state, &g, &d, &batch, cfg)?;
        state.history.push(record);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state.save(
                    &dir.join(format!("checkpoint_{:06}.oxck", state.step)),
                    Some(cfg),
                )?;
            }
        }
    }
    if let Some(dir) = out {
        state.save(&dir.join("checkpoint.oxck"), Some(cfg))?;
        let path = dir.join("losses.csv");
        std::fs::write(&path, state.loss_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Generator only, for prediction.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub meta: ModelMeta,
    generator: Generator,
    store: ParamStore<f32>,
}

impl InferenceModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(ckpt)?;
        let store = ckpt
            .stores
            .iter()
            .find(|s| s.tag == GENERATOR_TAG)
            .ok_or_else(|| Error::Checkpoint("no generator parameters".into()))?
            .clone();
        let mut fresh = ParamStore::new(GENERATOR_TAG, 0);
        let generator = Generator::new(&mut fresh, &meta.generator)?;
        check_layout(&fresh, &store)?;
        Ok(Self {
            meta,
            generator,
            store,
        })
    }

    pub fn from_state(state: &TrainState) -> Result<Self> {
        Self::from_checkpoint(&state.to_checkpoint(None))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// One generator forward pass on `N` prepared inputs; returns `N×1×H×W`.
    pub fn forward(&self, rgb: &Tensor<f32>, shsi: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let r = tape.constant(rgb.clone());
        let s = tape.constant(shsi.clone());
        let y = self.generator.forward(&mut tape, &self.store, r, s)?;
        Ok(tape.value(y).clone())
    }

    /// StO2 map carrying `mask`, and the wall-clock time of the forward pass.
    pub fn predict(
        &self,
        rgb: &RgbImage,
        shsi: &SparseHypercube,
        mask: &PixelMask,
    ) -> Result<(StO2Map, Duration)> {
        let (r, s) = (planes_tensor(&rgb.0), planes_tensor(&shsi.0.planes));
        let start = Instant::now();
        let y = self.forward(&r, &s)?;
        let elapsed = start.elapsed();
        let map = StO2Map::new(y.w(), y.h(), y.data, mask.clone())?;
        Ok((map, elapsed))
    }
}

/// Predict a sample's map, packaged with the sample's own mask.
pub fn infer(model: &InferenceModel, sample: &Sample) -> Result<(StO2Map, Duration)> {
    model.predict(&sample.rgb, &sample.shsi, sample.mask())
}
