//! Synthetic acquisitions, sliding-window augmentation and train/test
//! assembly.
//!
//! Phantoms stand in for in-vivo captures: smooth random StO2 and total
//! haemoglobin fields with vessel strokes and specular highlights, pushed
//! through the modified Beer-Lambert forward model.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fibre::{apply_mask, FibreMask, SparseHypercube};
use crate::hypercube::{
    self, decode_container, encode_container, synthesize_rgb, Hypercube, PixelCode, PixelMask,
    RgbImage, SpectralResponse, WavelengthGrid,
};
use crate::oximetry::{self, ChromophoreTable, StO2Map};
use crate::raster::{Flip, Planes, Window};

/// Smooth random field: uniform values on a square lattice with spacing
/// `correlation_px`, bilinearly interpolated and mapped to `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub correlation_px: f64,
    pub min: f64,
    pub max: f64,
}

impl FieldSpec {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.correlation_px > 0.0)
            || !(self.min <= self.max)
            || !self.min.is_finite()
            || !self.max.is_finite()
        {
            return Err(Error::InvalidArgument(format!("bad {what} field {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Synthetic subject; splits are made by this id.
    pub animal_id: u32,
    pub sto2_field: FieldSpec,
    /// Total haemoglobin (same units as the extinction table inverse).
    pub thb_field: FieldSpec,
    /// Wavelength-independent attenuation offset (scattering, geometry).
    pub offset_field: FieldSpec,
    pub vessel_count: usize,
    pub specular_count: usize,
    /// Specular disc radii are drawn from `[2, specular_max_radius]`.
    pub specular_max_radius: f64,
    /// Gaussian noise added to the attenuation of every band.
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 192,
            animal_id: 0,
            sto2_field: FieldSpec {
                correlation_px: 48.0,
                min: 0.2,
                max: 0.95,
            },
            thb_field: FieldSpec {
                correlation_px: 64.0,
                min: 0.01,
                max: 0.03,
            },
            offset_field: FieldSpec {
                correlation_px: 96.0,
                min: 0.0,
                max: 0.3,
            },
            vessel_count: 3,
            specular_count: 3,
            specular_max_radius: 5.0,
            noise_sigma: 0.002,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("phantom needs non-zero size".into()));
        }
        self.sto2_field.validate("sto2")?;
        self.thb_field.validate("thb")?;
        self.offset_field.validate("offset")?;
        if self.sto2_field.min < 0.0 || self.sto2_field.max > 1.0 {
            return Err(Error::InvalidArgument(
                "sto2 field must stay within [0, 1]".into(),
            ));
        }
        if !(self.thb_field.min > 0.0) {
            return Err(Error::InvalidArgument("thb field must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma {} < 0",
                self.noise_sigma
            )));
        }
        if !(self.specular_max_radius >= 2.0) {
            return Err(Error::InvalidArgument(
                "specular_max_radius must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Independent stream per phantom component.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, f: &FieldSpec) -> Vec<f64> {
    let nx = (w as f64 / f.correlation_px).ceil() as usize + 2;
    let ny = (h as f64 / f.correlation_px).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..nx * ny).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let v = (y as f64 + 0.5) / f.correlation_px;
        let (j, ty) = (v.floor() as usize, v.fract());
        for x in 0..w {
            let u = (x as f64 + 0.5) / f.correlation_px;
            let (i, tx) = (u.floor() as usize, u.fract());
            let at = |i: usize, j: usize| lattice[j * nx + i];
            let top = at(i, j) + tx * (at(i + 1, j) - at(i, j));
            let bottom = at(i, j + 1) + tx * (at(i + 1, j + 1) - at(i, j + 1));
            let s = (top + ty * (bottom - top)).clamp(0.0, 1.0);
            out.push(f.min + s * (f.max - f.min));
        }
    }
    out
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - a.0 - t * dx).hypot(py - a.1 - t * dy)
}

/// Specular disc: pixels whose centre lies within `r` of `(cx, cy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disc {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (x as f64 + 0.5 - self.cx).hypot(y as f64 + 0.5 - self.cy) <= self.r
    }
}

/// Non-overlapping discs fully inside the image, separated by at least two
/// pixels so each forms its own connected region.
fn place_discs(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Result<Vec<Disc>> {
    let mut discs: Vec<Disc> = Vec::with_capacity(spec.specular_count);
    let mut attempts = 0;
    while discs.len() < spec.specular_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {} specular discs in {}x{}",
                spec.specular_count, spec.width, spec.height
            )));
        }
        let r = rng.random_range(2.0..=spec.specular_max_radius);
        let (w, h) = (spec.width as f64, spec.height as f64);
        if 2.0 * r + 2.0 > w || 2.0 * r + 2.0 > h {
            continue;
        }
        let cx = rng.random_range(r + 1.0..=w - r - 1.0);
        let cy = rng.random_range(r + 1.0..=h - r - 1.0);
        let disc = Disc { cx, cy, r };
        if discs
            .iter()
            .all(|d| (d.cx - cx).hypot(d.cy - cy) > d.r + r + 2.0)
        {
            discs.push(disc);
        }
    }
    Ok(discs)
}

/// Ground-truth fields of a phantom before the forward model.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomFields {
    pub sto2: Vec<f64>,
    pub thb: Vec<f64>,
    pub offset: Vec<f64>,
    pub discs: Vec<Disc>,
}

pub fn phantom_fields(spec: &PhantomSpec) -> Result<PhantomFields> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut sto2 = value_noise(&mut stream(spec.seed, 1), w, h, &spec.sto2_field);
    let mut thb = value_noise(&mut stream(spec.seed, 2), w, h, &spec.thb_field);
    let offset = value_noise(&mut stream(spec.seed, 3), w, h, &spec.offset_field);

    let mut rng = stream(spec.seed, 4);
    for _ in 0..spec.vessel_count {
        let a = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
        );
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(0.3..0.8) * w.max(h) as f64;
        let b = (a.0 + len * angle.cos(), a.1 + len * angle.sin());
        let half_width = rng.random_range(1.0..2.5);
        let lo = spec.sto2_field.min;
        let vessel_sto2 = rng.random_range(lo..=lo + 0.25 * (spec.sto2_field.max - lo));
        let vessel_thb = 1.6 * spec.thb_field.max;
        for y in 0..h {
            for x in 0..w {
                if segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b) <= half_width {
                    sto2[y * w + x] = vessel_sto2;
                    thb[y * w + x] = vessel_thb;
                }
            }
        }
    }
    let discs = place_discs(&mut stream(spec.seed, 5), spec)?;
    Ok(PhantomFields {
        sto2,
        thb,
        offset,
        discs,
    })
}

/// Reflectance cube (flat white reference) and its exact StO2 truth.
/// Specular pixels are NaN in every band and saturated in the truth mask.
pub fn phantom(spec: &PhantomSpec, table: &ChromophoreTable) -> Result<(Hypercube, StO2Map)> {
    let f = phantom_fields(spec)?;
    let (w, h, bands) = (spec.width, spec.height, table.bands());
    let white = oximetry::flat_white_reference(bands);
    let mut noise_rng = stream(spec.seed, 6);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = vec![0.0f32; w * h * bands];
    let mut truth = vec![0.0f32; w * h];
    let mut mask = PixelMask::new(w, h, PixelCode::Effective);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if f.discs.iter().any(|d| d.contains(x, y)) {
                mask.codes[i] = PixelCode::Saturated;
                for b in 0..bands {
                    data[b * w * h + i] = f32::NAN;
                }
                continue;
            }
            let mut a = oximetry::forward_spectrum(f.sto2[i], f.thb[i], f.offset[i], table)?;
            if spec.noise_sigma > 0.0 {
                for v in &mut a {
                    *v += noise.sample(&mut noise_rng);
                }
            }
            for (b, v) in oximetry::reflectance(&a, &white).into_iter().enumerate() {
                data[b * w * h + i] = v as f32;
            }
            truth[i] = f.sto2[i] as f32;
        }
    }
    let cube = Hypercube::new(w, h, table.grid, data)?;
    Ok((cube, StO2Map::new(w, h, truth, mask)?))
}

/// Co-registered network inputs and regression target. Acquisitions and
/// augmented crops share this type; the target's mask is the loss mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub animal_id: u32,
    pub rgb: RgbImage,
    pub shsi: SparseHypercube,
    pub target: StO2Map,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.target.width
    }

    pub fn height(&self) -> usize {
        self.target.height
    }

    pub fn mask(&self) -> &PixelMask {
        &self.target.mask
    }

    fn check(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        for (name, p) in [("rgb", &self.rgb.0), ("shsi", &self.shsi.0.planes)] {
            if p.width != w || p.height != h {
                return Err(Error::dims(
                    format!("{name} {w}x{h}"),
                    format!("{}x{}", p.width, p.height),
                ));
            }
        }
        Ok(())
    }

    /// Crop, then flip, then resize every raster; the mask is resized by
    /// nearest neighbour so codes stay valid.
    pub fn transform(
        &self,
        win: Window,
        flip: Flip,
        width: usize,
        height: usize,
    ) -> Result<Sample> {
        self.check()?;
        let geo = |p: &Planes| -> Result<Planes> {
            Ok(p.crop(win)?.flipped(flip).resize_bilinear(width, height))
        };
        let values = geo(&self.target.to_planes())?;
        let mask = PixelMask::from_planes(
            &self
                .target
                .mask
                .to_planes()
                .crop(win)?
                .flipped(flip)
                .resize_nearest(width, height),
        )?;
        Ok(Sample {
            id: format!("{}:{}:{}:{}", self.id, flip_tag(flip), win.x, win.y),
            animal_id: self.animal_id,
            rgb: RgbImage(geo(&self.rgb.0)?),
            shsi: SparseHypercube(Hypercube {
                grid: self.shsi.0.grid,
                planes: geo(&self.shsi.0.planes)?,
            }),
            target: StO2Map::new(width, height, values.data, mask)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rgb_grid = WavelengthGrid {
            start_nm: 0.0,
            step_nm: 1.0,
            bands: 3,
        };
        let write = |name: &str, bytes: Vec<u8>| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        write("rgb.oxc", encode_container(&self.rgb.0, &rgb_grid))?;
        write(
            "shsi.oxc",
            encode_container(&self.shsi.0.planes, &self.shsi.0.grid),
        )?;
        self.target.save(&dir.join("target.oxc"))?;
        write(
            "mask.oxc",
            encode_container(&self.target.mask.to_planes(), &MASK_GRID),
        )?;
        let meta = serde_json::json!({ "id": self.id, "animal_id": self.animal_id });
        write("sample.json", meta.to_string().into_bytes())?;
        self.rgb.save_png(&dir.join("rgb.png"))?;
        self.target.save_png(&dir.join("target.png"))?;
        self.target.mask.save_png(&dir.join("mask.png"))
    }

    pub fn load(dir: &Path) -> Result<Sample> {
        let read = |name: &str| decode_container(&hypercube::read_file(&dir.join(name))?);
        let (rgb, _) = read("rgb.oxc")?;
        let (shsi, grid) = read("shsi.oxc")?;
        let (mask, _) = read("mask.oxc")?;
        let mask = PixelMask::from_planes(&mask)?;
        let target = StO2Map::load(&dir.join("target.oxc"), mask)?;
        let meta_path = dir.join("sample.json");
        let meta: serde_json::Value = serde_json::from_slice(&hypercube::read_file(&meta_path)?)
            .map_err(|e| Error::MalformedHeader(format!("{}: {e}", meta_path.display())))?;
        let sample = Sample {
            id: meta["id"].as_str().unwrap_or_default().to_string(),
            animal_id: meta["animal_id"].as_u64().unwrap_or(0) as u32,
            rgb: RgbImage(rgb),
            shsi: SparseHypercube(Hypercube { grid, planes: shsi }),
            target,
        };
        sample.check()?;
        Ok(sample)
    }
}

const MASK_GRID: WavelengthGrid = WavelengthGrid {
    start_nm: 0.0,
    step_nm: 1.0,
    bands: 1,
};

fn flip_tag(flip: Flip) -> &'static str {
    match flip {
        Flip::Identity => "id",
        Flip::Horizontal => "h",
        Flip::Vertical => "v",
    }
}

/// Everything needed to turn a cube into network inputs and a target.
#[derive(Clone, Debug)]
pub struct AcquisitionSetup<'a> {
    pub response: &'a SpectralResponse,
    pub table: &'a ChromophoreTable,
    pub white_ref: &'a [f64],
    pub cod_threshold: f64,
}

/// RGB by spectral projection, sHSI by fibre sampling of the full-frame
/// cube, and the regression StO2 map as the target.
pub fn acquire(
    id: &str,
    animal_id: u32,
    cube: &Hypercube,
    fibres: &FibreMask,
    setup: &AcquisitionSetup,
) -> Result<Sample> {
    let sample = Sample {
        id: id.to_string(),
        animal_id,
        rgb: synthesize_rgb(cube, setup.response)?,
        shsi: apply_mask(cube, fibres)?,
        target: oximetry::estimate_sto2_map(
            cube,
            setup.white_ref,
            setup.table,
            setup.cod_threshold,
        )?,
    };
    sample.check()?;
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: usize,
    pub stride: usize,
    pub out_width: usize,
    pub out_height: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 96,
            stride: 16,
            out_width: 256,
            out_height: 256,
        }
    }
}

impl AugmentConfig {
    fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.crop == 0 || self.stride == 0 || self.out_width == 0 || self.out_height == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate augmentation {self:?}"
            )));
        }
        if width < self.crop || height < self.crop {
            return Err(Error::dims(
                format!("at least {0}x{0}", self.crop),
                format!("{width}x{height}"),
            ));
        }
        Ok(())
    }

    /// `3·(⌊(W−crop)/stride⌋+1)·(⌊(H−crop)/stride⌋+1)`.
    pub fn count(&self, width: usize, height: usize) -> Result<usize> {
        self.validate(width, height)?;
        Ok(3 * ((width - self.crop) / self.stride + 1) * ((height - self.crop) / self.stride + 1))
    }

    /// Variant-major, then window row, then window column.
    pub fn windows(&self, width: usize, height: usize) -> Result<Vec<(Flip, Window)>> {
        self.validate(width, height)?;
        let mut out = Vec::new();
        for flip in Flip::ALL {
            for y in (0..=height - self.crop).step_by(self.stride) {
                for x in (0..=width - self.crop).step_by(self.stride) {
                    out.push((flip, self.window(x, y)));
                }
            }
        }
        Ok(out)
    }

    fn window(&self, x: usize, y: usize) -> Window {
        Window {
            x,
            y,
            width: self.crop,
            height: self.crop,
        }
    }

    pub fn central_window(&self, width: usize, height: usize) -> Result<Window> {
        self.validate(width, height)?;
        Ok(self.window((width - self.crop) / 2, (height - self.crop) / 2))
    }
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig) -> Result<Vec<Sample>> {
    cfg.windows(sample.width(), sample.height())?
        .into_iter()
        .map(|(flip, win)| sample.transform(win, flip, cfg.out_width, cfg.out_height))
        .collect()
}

/// Central crop, resized like the training crops.
pub fn make_test(sample: &Sample, cfg: &AugmentConfig) -> Result<Sample> {
    let win = cfg.central_window(sample.width(), sample.height())?;
    sample.transform(win, Flip::Identity, cfg.out_width, cfg.out_height)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub id: String,
    pub animal_id: u32,
    pub split: Split,
    /// Directory written by [`Sample::save`].
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
}

/// One augmented sample, materialized on demand from its acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub acquisition: usize,
    pub flip: Flip,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub augment: AugmentConfig,
    pub acquisitions: Vec<AcquisitionRecord>,
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

impl DatasetManifest {
    /// Training split gets every augmented window, the test split one
    /// central crop per acquisition. `dims` gives each acquisition's size.
    pub fn build(
        augment: AugmentConfig,
        acquisitions: Vec<AcquisitionRecord>,
        dims: &[(usize, usize)],
    ) -> Result<Self> {
        if dims.len() != acquisitions.len() {
            return Err(Error::SizeMismatch {
                expected: acquisitions.len(),
                found: dims.len(),
            });
        }
        check_disjoint(&acquisitions)?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, (rec, &(w, h))) in acquisitions.iter().zip(dims).enumerate() {
            match rec.split {
                Split::Train => {
                    for (flip, win) in augment.windows(w, h)? {
                        train.push(SampleRef {
                            acquisition: i,
                            flip,
                            x: win.x,
                            y: win.y,
                        });
                    }
                }
                Split::Test => {
                    let win = augment.central_window(w, h)?;
                    test.push(SampleRef {
                        acquisition: i,
                        flip: Flip::Identity,
                        x: win.x,
                        y: win.y,
                    });
                }
            }
        }
        Ok(Self {
            augment,
            acquisitions,
            train,
            test,
        })
    }

    pub fn materialize(&self, r: &SampleRef, acquisition: &Sample) -> Result<Sample> {
        let win = Window {
            x: r.x,
            y: r.y,
            width: self.augment.crop,
            height: self.augment.crop,
        };
        acquisition.transform(win, r.flip, self.augment.out_width, self.augment.out_height)
    }

    /// Load acquisitions once and materialize one split.
    pub fn load_split(&self, split: Split, base: &Path) -> Result<Vec<Sample>> {
        let refs = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        let mut cache: Vec<Option<Sample>> = vec![None; self.acquisitions.len()];
        let mut out = Vec::with_capacity(refs.len());
        for r in refs {
            let rec = self.acquisitions.get(r.acquisition).ok_or_else(|| {
                Error::InvalidArgument(format!("no acquisition {}", r.acquisition))
            })?;
            if cache[r.acquisition].is_none() {
                cache[r.acquisition] = Some(Sample::load(&base.join(&rec.path))?);
            }
            out.push(self.materialize(r, cache[r.acquisition].as_ref().expect("cached"))?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = hypercube::read_file(path)?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
        check_disjoint(&m.acquisitions)?;
        Ok(m)
    }
}

/// No animal may appear in both splits.
pub fn check_disjoint(acquisitions: &[AcquisitionRecord]) -> Result<()> {
    for a in acquisitions.iter().filter(|a| a.split == Split::Train) {
        if acquisitions
            .iter()
            .any(|b| b.split == Split::Test && b.animal_id == a.animal_id)
        {
            return Err(Error::InvalidArgument(format!(
                "animal {} appears in both splits",
                a.animal_id
            )));
        }
    }
    Ok(())
}

/// Phantom suite layout: acquisitions are dealt round-robin over animals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub train_acquisitions: usize,
    pub train_animals: u32,
    pub test_acquisitions: usize,
    pub test_animals: u32,
    pub base: PhantomSpec,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            train_acquisitions: 12,
            train_animals: 4,
            test_acquisitions: 4,
            test_animals: 2,
            base: PhantomSpec::default(),
        }
    }
}

impl SuiteSpec {
    /// Per-acquisition phantom specs with derived seeds, in order: all
    /// training acquisitions, then all test acquisitions.
    pub fn phantoms(&self, seed: u64) -> Result<Vec<(Split, PhantomSpec)>> {
        if self.train_animals == 0 || (self.test_acquisitions > 0 && self.test_animals == 0) {
            return Err(Error::InvalidArgument(
                "each split needs at least one animal".into(),
            ));
        }
        let mut out = Vec::new();
        let mut k = 0u64;
        let mut push = |split, animal_id| {
            let mut spec = self.base.clone();
            spec.seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
            spec.animal_id = animal_id;
            k += 1;
            out.push((split, spec));
        };
        for i in 0..self.train_acquisitions {
            push(Split::Train, i as u32 % self.train_animals);
        }
        for i in 0..self.test_acquisitions {
            push(
                Split::Test,
                self.train_animals + i as u32 % self.test_animals,
            );
        }
        Ok(out)
    }
}
