//! Experiment configuration, provenance records and the fibre-count
//! ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    self, AcquisitionRecord, AcquisitionSetup, AugmentConfig, PhantomSpec, Sample, Split, SuiteSpec,
};
use crate::error::{Error, Result};
use crate::fibre::{self, BundleSpec, FibreMask, LatticeAnchor};
use crate::gan::{
    self, DiscriminatorConfig, GeneratorConfig, InferenceModel, PreparedSample, SampleSource,
    TrainConfig, TrainState,
};
use crate::hypercube::{Hypercube, SpectralResponse};
use crate::metrics::{self, AcquisitionMetrics, EvalReport, SsimParams, Summary, HAP_THRESHOLD};
use crate::oximetry::{self, ChromophoreTable, DEFAULT_COD_THRESHOLD};
use crate::raster::{Flip, Window};

/// Fibre bundle: a preset by spot count, or explicit geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleConfig {
    pub n_spot: usize,
    /// Custom core radius; with `d`, replaces the preset geometry.
    pub r: Option<f64>,
    pub d: Option<f64>,
    pub bundle_radius: Option<f64>,
    pub anchor: LatticeAnchor,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            n_spot: 300,
            r: None,
            d: None,
            bundle_radius: None,
            anchor: LatticeAnchor::default(),
        }
    }
}

impl BundleConfig {
    pub fn spec(&self) -> Result<BundleSpec> {
        let spec = match (self.r, self.d) {
            (Some(r), Some(d)) => BundleSpec::new(self.n_spot, r, d)?,
            (None, None) => BundleSpec::preset(self.n_spot)?,
            _ => {
                return Err(Error::InvalidArgument(
                    "bundle needs both r and d, or neither".into(),
                ))
            }
        };
        Ok(match self.bundle_radius {
            Some(radius) => spec.with_bundle_radius(radius),
            None => spec,
        })
    }

    pub fn mask(&self, width: usize, height: usize) -> Result<FibreMask> {
        fibre::generate_mask(&self.spec()?, width, height, self.anchor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OximetryConfig {
    pub cod_threshold: f64,
    /// CSV `wavelength_nm,eps_hbo2,eps_hb`; the bundled table when absent.
    pub chromophores: Option<PathBuf>,
    /// CSV `wavelength_nm,i0`; flat when absent.
    pub white_reference: Option<PathBuf>,
    /// CSV `wavelength_nm,r,g,b`; Gaussian channels when absent.
    pub response: Option<PathBuf>,
}

impl Default for OximetryConfig {
    fn default() -> Self {
        Self {
            cod_threshold: DEFAULT_COD_THRESHOLD,
            chromophores: None,
            white_reference: None,
            response: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub ssim: SsimParams,
    pub hap_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            hap_threshold: HAP_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub presets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            presets: BundleSpec::PRESETS.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

/// Everything a run depends on. Defaults are the desk-scale setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub suite: SuiteSpec,
    pub bundle: BundleConfig,
    pub augment: AugmentConfig,
    pub oximetry: OximetryConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs"),
            suite: SuiteSpec::default(),
            bundle: BundleConfig::default(),
            augment: AugmentConfig {
                out_width: 64,
                out_height: 64,
                ..AugmentConfig::default()
            },
            oximetry: OximetryConfig::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            train: TrainConfig {
                max_steps: Some(600),
                ..TrainConfig::default()
            },
            metrics: MetricsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn resources(&self) -> Result<Resources> {
        let table = match &self.oximetry.chromophores {
            Some(p) => ChromophoreTable::from_csv(p, &ChromophoreTable::reference().grid)?,
            None => ChromophoreTable::reference(),
        };
        let white_ref = match &self.oximetry.white_reference {
            Some(p) => oximetry::load_white_reference(p, &table.grid)?,
            None => oximetry::flat_white_reference(table.bands()),
        };
        let response = match &self.oximetry.response {
            Some(p) => SpectralResponse::from_csv(p, &table.grid)?,
            None => SpectralResponse::gaussian(&table.grid),
        };
        Ok(Resources {
            table,
            white_ref,
            response,
            cod_threshold: self.oximetry.cod_threshold,
        })
    }
}

/// Loaded spectral tables shared by every stage.
#[derive(Clone, Debug)]
pub struct Resources {
    pub table: ChromophoreTable,
    pub white_ref: Vec<f64>,
    pub response: SpectralResponse,
    pub cod_threshold: f64,
}

impl Resources {
    pub fn setup(&self) -> AcquisitionSetup<'_> {
        AcquisitionSetup {
            response: &self.response,
            table: &self.table,
            white_ref: &self.white_ref,
            cod_threshold: self.cod_threshold,
        }
    }
}

/// What a command ran with; enough to reproduce its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub config: ExperimentConfig,
}

impl Provenance {
    pub fn new(
        command: &str,
        args: Vec<String>,
        config: &ExperimentConfig,
        seeds: Vec<u64>,
    ) -> Self {
        Self {
            command: command.to_string(),
            args,
            config_sha256: config.hash(),
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("provenance.json");
        let body = serde_json::to_string_pretty(self).expect("provenance serializes");
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

/// Phantom cubes of the suite, generated once and shared across presets.
pub struct PhantomSet {
    pub specs: Vec<(Split, PhantomSpec)>,
    pub cubes: Vec<Hypercube>,
}

pub fn phantom_set(suite: &SuiteSpec, seed: u64, res: &Resources) -> Result<PhantomSet> {
    let specs = suite.phantoms(seed)?;
    let cubes = specs
        .iter()
        .map(|(_, s)| dataset::phantom(s, &res.table).map(|(cube, _)| cube))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomSet { specs, cubes })
}

/// Acquisitions of every phantom under one fibre bundle.
pub fn acquisitions(
    set: &PhantomSet,
    bundle: &BundleConfig,
    res: &Resources,
) -> Result<Vec<(AcquisitionRecord, Sample)>> {
    let mut out = Vec::with_capacity(set.cubes.len());
    let mut masks: Option<FibreMask> = None;
    for (i, ((split, spec), cube)) in set.specs.iter().zip(&set.cubes).enumerate() {
        let fits = masks
            .as_ref()
            .is_some_and(|m| m.width == cube.width() && m.height == cube.height());
        if !fits {
            masks = Some(bundle.mask(cube.width(), cube.height())?);
        }
        let id = format!("acq{i:03}");
        let sample = dataset::acquire(
            &id,
            spec.animal_id,
            cube,
            masks.as_ref().expect("mask built"),
            &res.setup(),
        )?;
        out.push((
            AcquisitionRecord {
                id: id.clone(),
                animal_id: spec.animal_id,
                split: *split,
                path: PathBuf::from(&id),
                phantom: Some(spec.clone()),
            },
            sample,
        ));
    }
    dataset::check_disjoint(&out.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())?;
    Ok(out)
}

/// Augmented crops of in-memory acquisitions, materialized on demand.
pub struct CropSource<'a> {
    pub acquisitions: Vec<&'a Sample>,
    pub windows: Vec<(usize, Flip, Window)>,
    pub augment: AugmentConfig,
}

impl<'a> CropSource<'a> {
    pub fn new(acquisitions: Vec<&'a Sample>, augment: AugmentConfig) -> Result<Self> {
        let mut windows = Vec::new();
        for (i, a) in acquisitions.iter().enumerate() {
            for (flip, win) in augment.windows(a.width(), a.height())? {
                windows.push((i, flip, win));
            }
        }
        Ok(Self {
            acquisitions,
            windows,
            augment,
        })
    }
}

impl SampleSource for CropSource<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn sample(&self, index: usize) -> Result<PreparedSample> {
        let (a, flip, win) = self
            .windows
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no crop {index}")))?;
        let s = self.acquisitions[*a].transform(
            *win,
            *flip,
            self.augment.out_width,
            self.augment.out_height,
        )?;
        Ok(gan::prepare(&s))
    }
}

/// Training crops listed in a manifest; acquisitions are loaded once.
pub struct ManifestSource {
    pub manifest: dataset::DatasetManifest,
    acquisitions: Vec<Option<Sample>>,
}

impl ManifestSource {
    pub fn load(manifest: dataset::DatasetManifest, base: &Path) -> Result<Self> {
        let mut acquisitions = Vec::with_capacity(manifest.acquisitions.len());
        for rec in &manifest.acquisitions {
            acquisitions.push(match rec.split {
                Split::Train => Some(Sample::load(&base.join(&rec.path))?),
                Split::Test => None,
            });
        }
        Ok(Self {
            manifest,
            acquisitions,
        })
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.train.len()
    }

    fn sample(&self, index: usize) -> Result<PreparedSample> {
        let r = self
            .manifest
            .train
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no training sample {index}")))?;
        let acq = self
            .acquisitions
            .get(r.acquisition)
            .and_then(Option::as_ref)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "acquisition {} is not a training acquisition",
                    r.acquisition
                ))
            })?;
        Ok(gan::prepare(&self.manifest.materialize(r, acq)?))
    }
}

/// Predict every test sample and score it against its target.
pub fn evaluate_samples(
    model: &InferenceModel,
    tests: &[Sample],
    params: &MetricsConfig,
) -> Result<(Vec<AcquisitionMetrics>, Duration)> {
    let mut rows = Vec::with_capacity(tests.len());
    let mut total = Duration::ZERO;
    for t in tests {
        let (pred, elapsed) = gan::infer(model, t)?;
        total += elapsed;
        let mut row = metrics::evaluate(&t.id, &pred, &t.target, &params.ssim)?;
        row.p_hap = metrics::p_hap(&pred, &t.target, params.hap_threshold)?;
        rows.push(row);
    }
    Ok((rows, total / tests.len().max(1) as u32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ssim: f64,
    pub e_bar: f64,
    pub p_hap: f64,
    pub final_loss_g: f64,
}

/// One row of the fibre-count table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_spot: usize,
    pub n_fibres: usize,
    pub r: f64,
    pub d: f64,
    pub gamma: f64,
    /// Over all test acquisitions of all seeds.
    pub ssim: Summary,
    pub e_bar: Summary,
    pub p_hap: Summary,
    /// Mean over seeds of the per-seed mean test ē.
    pub mean_e_bar: f64,
    pub seeds: Vec<SeedResult>,
    pub shsi_all_zero: bool,
    pub inference_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, n_spot: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.n_spot == n_spot)
    }

    /// Markdown table, one row per fibre count.
    pub fn table(&self) -> String {
        let mut s = String::from(
            "| n_spot | fibres | r | d | gamma | SSIM | e_bar | p_HAP |\n|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.3} ± {:.3} | {:.4} ± {:.4} | {:.3} ± {:.3} |",
                r.n_spot,
                r.n_fibres,
                r.r,
                r.d,
                r.gamma,
                r.ssim.mean,
                r.ssim.std,
                r.e_bar.mean,
                r.e_bar.std,
                r.p_hap.mean,
                r.p_hap.std
            );
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (
                "ablation.json",
                serde_json::to_string_pretty(self).expect("report serializes"),
            ),
            ("ablation.md", self.table()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// For each seed: one phantom suite; for each preset: acquisitions,
/// training on augmented crops, evaluation on central test crops.
pub fn run_ablation(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<AblationReport> {
    if cfg.ablation.presets.is_empty() || cfg.ablation.seeds.is_empty() {
        return Err(Error::Empty("ablation presets or seeds"));
    }
    let res = cfg.resources()?;
    let mut per_preset: Vec<(Vec<AcquisitionMetrics>, Vec<SeedResult>, bool, f64, usize)> = cfg
        .ablation
        .presets
        .iter()
        .map(|_| (Vec::new(), Vec::new(), true, 0.0, 0))
        .collect();
    for &seed in &cfg.ablation.seeds {
        let set = phantom_set(&cfg.suite, seed, &res)?;
        for (pi, &n_spot) in cfg.ablation.presets.iter().enumerate() {
            let bundle = BundleConfig {
                n_spot,
                r: None,
                d: None,
                ..cfg.bundle.clone()
            };
            let acqs = acquisitions(&set, &bundle, &res)?;
            let slot = &mut per_preset[pi];
            slot.4 = bundle
                .mask(set.cubes[0].width(), set.cubes[0].height())?
                .len();
            if n_spot == 0 {
                slot.2 &= acqs
                    .iter()
                    .all(|(_, s)| s.shsi.0.planes.data.iter().all(|v| *v == 0.0));
            }
            let train_set: Vec<&Sample> = acqs
                .iter()
                .filter(|(r, _)| r.split == Split::Train)
                .map(|(_, s)| s)
                .collect();
            let tests = acqs
                .iter()
                .filter(|(r, _)| r.split == Split::Test)
                .map(|(_, s)| dataset::make_test(s, &cfg.augment))
                .collect::<Result<Vec<_>>>()?;
            let source = CropSource::new(train_set, cfg.augment)?;
            let mut state = TrainState::new(&cfg.generator, &cfg.discriminator, seed)?;
            let run_dir = out.map(|d| d.join(format!("n{n_spot}_seed{seed}")));
            if let Some(d) = &run_dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            gan::train(&mut state, &source, &cfg.train, run_dir.as_deref())?;
            let model = InferenceModel::from_state(&state)?;
            let (mut rows, per_frame) = evaluate_samples(&model, &tests, &cfg.metrics)?;
            for r in &mut rows {
                r.id = format!("seed{seed}/{}", r.id);
            }
            slot.1.push(SeedResult {
                seed,
                ssim: mean(rows.iter().map(|r| r.ssim)),
                e_bar: mean(rows.iter().map(|r| r.e_bar)),
                p_hap: mean(rows.iter().map(|r| r.p_hap)),
                final_loss_g: state.history.last().map_or(f64::NAN, |h| h.loss_g),
            });
            slot.3 += per_frame.as_secs_f64() * 1e3 / cfg.ablation.seeds.len() as f64;
            slot.0.extend(rows);
            log::info!("n_spot {n_spot} seed {seed}: {:?}", slot.1.last());
        }
    }
    let mut rows = Vec::new();
    for (&n_spot, (metrics_rows, seeds, zero, ms, n_fibres)) in
        cfg.ablation.presets.iter().zip(per_preset)
    {
        let spec = BundleSpec::preset(n_spot)?;
        let agg = metrics::aggregate(metrics_rows)?;
        rows.push(AblationRow {
            n_spot,
            n_fibres,
            r: spec.r,
            d: spec.d,
            gamma: if spec.is_empty() { 0.0 } else { spec.gamma() },
            ssim: agg.ssim,
            e_bar: agg.e_bar,
            p_hap: agg.p_hap,
            mean_e_bar: mean(seeds.iter().map(|s| s.e_bar)),
            seeds,
            shsi_all_zero: n_spot == 0 && zero,
            inference_ms: ms,
        });
    }
    let report = AblationReport { rows };
    if let Some(d) = out {
        report.save(d)?;
    }
    Ok(report)
}

/// Write the suite's acquisitions under `dir` and return the manifest.
pub fn build_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<dataset::DatasetManifest> {
    let res = cfg.resources()?;
    let set = phantom_set(&cfg.suite, cfg.seed, &res)?;
    let acqs = acquisitions(&set, &cfg.bundle, &res)?;
    let mut records = Vec::with_capacity(acqs.len());
    let mut dims = Vec::with_capacity(acqs.len());
    for (rec, sample) in acqs {
        sample.save(&dir.join(&rec.path))?;
        dims.push((sample.width(), sample.height()));
        records.push(rec);
    }
    let manifest = dataset::DatasetManifest::build(cfg.augment, records, &dims)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Evaluate a checkpoint on a manifest's test split.
pub fn evaluate_manifest(
    model: &InferenceModel,
    manifest: &dataset::DatasetManifest,
    base: &Path,
    params: &MetricsConfig,
) -> Result<EvalReport> {
    let tests = manifest.load_split(Split::Test, base)?;
    let (rows, per_frame) = evaluate_samples(model, &tests, params)?;
    let mut report = metrics::aggregate(rows)?;
    report.inference_ms = Some(per_frame.as_secs_f64() * 1e3);
    Ok(report)
}
