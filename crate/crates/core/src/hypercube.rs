//! Hyperspectral cube container, the `OXC1` file format, RGB synthesis from a
//! camera spectral response and band-pick previews.
//!
//! Cube data is band-sequential: band-major, then row-major. Saturated
//! (specular) pixels carry NaN in every band.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, Planes};

pub const MAGIC: &str = "OXC1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    pub start_nm: f64,
    pub step_nm: f64,
    pub bands: usize,
}

impl Default for WavelengthGrid {
    /// 460-690 nm inclusive in 10 nm steps.
    fn default() -> Self {
        Self {
            start_nm: 460.0,
            step_nm: 10.0,
            bands: 24,
        }
    }
}

impl WavelengthGrid {
    pub fn new(start_nm: f64, step_nm: f64, bands: usize) -> Result<Self> {
        if !(step_nm > 0.0) || bands == 0 || !start_nm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "wavelength grid needs step > 0 and bands >= 1 (got step {step_nm}, bands {bands})"
            )));
        }
        Ok(Self {
            start_nm,
            step_nm,
            bands,
        })
    }

    pub fn wavelength(&self, band: usize) -> f64 {
        self.start_nm + band as f64 * self.step_nm
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        (0..self.bands).map(|b| self.wavelength(b)).collect()
    }

    /// Band index of an on-grid wavelength.
    pub fn band_of(&self, nm: f64) -> Result<usize> {
        let pos = (nm - self.start_nm) / self.step_nm;
        let idx = pos.round();
        if (pos - idx).abs() > 1e-6 || idx < 0.0 || idx as usize >= self.bands {
            return Err(Error::OffGrid(nm));
        }
        Ok(idx as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypercube {
    pub grid: WavelengthGrid,
    pub planes: Planes,
}

impl Hypercube {
    pub fn new(width: usize, height: usize, grid: WavelengthGrid, data: Vec<f32>) -> Result<Self> {
        let planes = Planes::from_vec(width, height, grid.bands, data)?;
        let cube = Self { grid, planes };
        cube.validate()?;
        Ok(cube)
    }

    pub fn filled(width: usize, height: usize, grid: WavelengthGrid, value: f32) -> Self {
        Self {
            grid,
            planes: Planes::filled(width, height, grid.bands, value),
        }
    }

    pub fn width(&self) -> usize {
        self.planes.width
    }

    pub fn height(&self) -> usize {
        self.planes.height
    }

    pub fn bands(&self) -> usize {
        self.grid.bands
    }

    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f32> {
        self.planes.pixel(x, y)
    }

    pub fn is_saturated(&self, x: usize, y: usize) -> bool {
        (0..self.bands()).any(|b| self.planes.get(b, x, y).is_nan())
    }

    fn validate(&self) -> Result<()> {
        if self.planes.channels != self.grid.bands {
            return Err(Error::BandMismatch {
                expected: self.grid.bands,
                found: self.planes.channels,
            });
        }
        if let Some(v) = self
            .planes
            .data
            .iter()
            .find(|v| !v.is_nan() && (!v.is_finite() || **v < 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "cube values must be finite and non-negative, found {v}"
            )));
        }
        Ok(())
    }
}

/// Header + little-endian f32 payload, shared by cubes, sparse cubes and
/// single-band maps.
pub(crate) fn encode_container(planes: &Planes, grid: &WavelengthGrid) -> Vec<u8> {
    let mut header = String::new();
    let _ = writeln!(header, "magic={MAGIC}");
    let _ = writeln!(header, "width={}", planes.width);
    let _ = writeln!(header, "height={}", planes.height);
    let _ = writeln!(header, "bands={}", planes.channels);
    let _ = writeln!(header, "start_nm={}", grid.start_nm);
    let _ = writeln!(header, "step_nm={}", grid.step_nm);
    header.push('\n');

    let mut bytes = header.into_bytes();
    bytes.reserve(planes.data.len() * 4);
    for v in &planes.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub(crate) fn decode_container(bytes: &[u8]) -> Result<(Planes, WavelengthGrid)> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::MalformedHeader("missing blank line terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    let payload = &bytes[end + 2..];

    let mut magic = None;
    let (mut width, mut height, mut bands) = (None, None, None);
    let (mut start, mut step) = (None, None);
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("line without '=': {line:?}")))?;
        let value = value.trim();
        let bad = |_| Error::MalformedHeader(format!("bad value for {key}: {value:?}"));
        match key.trim() {
            "magic" => magic = Some(value.to_string()),
            "width" => width = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "height" => height = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "bands" => bands = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "start_nm" => start = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "step_nm" => step = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            _ => {}
        }
    }
    if magic.as_deref() != Some(MAGIC) {
        return Err(Error::MalformedHeader(format!(
            "expected magic {MAGIC}, found {magic:?}"
        )));
    }
    let missing = |k: &str| Error::MalformedHeader(format!("missing key {k}"));
    let width = width.ok_or_else(|| missing("width"))?;
    let height = height.ok_or_else(|| missing("height"))?;
    let bands = bands.ok_or_else(|| missing("bands"))?;
    let grid = WavelengthGrid::new(
        start.ok_or_else(|| missing("start_nm"))?,
        step.ok_or_else(|| missing("step_nm"))?,
        bands,
    )?;

    let expected = width * height * bands * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Planes::from_vec(width, height, bands, data)?, grid))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn load_cube(path: &Path) -> Result<Hypercube> {
    let (planes, grid) = decode_container(&read_file(path)?)?;
    let cube = Hypercube { grid, planes };
    cube.validate()?;
    Ok(cube)
}

pub fn save_cube(cube: &Hypercube, path: &Path) -> Result<()> {
    fs::write(path, encode_container(&cube.planes, &cube.grid)).map_err(|e| Error::io(path, e))
}

/// Camera R/G/B sensitivity per band, with per-channel normalization so a
/// flat unit reflectance maps to (1, 1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResponse {
    weights: [Vec<f64>; 3],
    scale: [f64; 3],
}

impl SpectralResponse {
    pub fn new(weights: [Vec<f64>; 3]) -> Result<Self> {
        let bands = weights[0].len();
        if weights.iter().any(|row| row.len() != bands) {
            return Err(Error::InvalidArgument(
                "response rows differ in length".into(),
            ));
        }
        let mut scale = [0.0; 3];
        for (c, row) in weights.iter().enumerate() {
            if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "response channel {c} has a negative or non-finite weight"
                )));
            }
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "response channel {c} has no positive weight"
                )));
            }
            scale[c] = 1.0 / sum;
        }
        Ok(Self { weights, scale })
    }

    /// Gaussian channels centred at 460/540/620 nm with sigma 30 nm, sampled on `grid`.
    pub fn gaussian(grid: &WavelengthGrid) -> Self {
        let centres = [620.0, 540.0, 460.0];
        let sigma: f64 = 30.0;
        let weights = centres.map(|mu| {
            grid.wavelengths()
                .iter()
                .map(|l| (-(l - mu).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect::<Vec<_>>()
        });
        Self::new(weights).expect("gaussian response is positive")
    }

    /// CSV with columns `wavelength_nm,r,g,b`; one row per band of `grid`.
    pub fn from_csv(path: &Path, grid: &WavelengthGrid) -> Result<Self> {
        let rows = read_numeric_csv(path, 4)?;
        let mut weights = [
            vec![0.0; grid.bands],
            vec![0.0; grid.bands],
            vec![0.0; grid.bands],
        ];
        let mut seen = vec![false; grid.bands];
        for row in rows {
            let b = grid.band_of(row[0])?;
            for c in 0..3 {
                weights[c][b] = row[c + 1];
            }
            seen[b] = true;
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(Error::Csv(format!(
                "response CSV has no row for {} nm",
                grid.wavelength(b)
            )));
        }
        Self::new(weights)
    }

    pub fn bands(&self) -> usize {
        self.weights[0].len()
    }

    /// Normalized weight of `band` in `channel`.
    pub fn normalized(&self, channel: usize, band: usize) -> f64 {
        self.weights[channel][band] * self.scale[channel]
    }
}

/// Parse a headed CSV of numeric columns, requiring at least `min_cols` per row.
pub(crate) fn read_numeric_csv(path: &Path, min_cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Csv(format!("not a number: {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() < min_cols {
            return Err(Error::Csv(format!(
                "expected at least {min_cols} columns, found {}",
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Three-channel planar image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage(pub Planes);

impl RgbImage {
    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let p = &self.0;
        let mut bytes = Vec::with_capacity(p.plane_len() * 3);
        for y in 0..p.height {
            for x in 0..p.width {
                for c in 0..3 {
                    bytes.push(raster::to_byte(p.get(c, x, y)));
                }
            }
        }
        raster::write_rgb_png(path, p.width, p.height, &bytes)
    }
}

/// Linear projection of every pixel spectrum onto the normalized response,
/// without clamping. NaN in any band yields NaN in all channels.
pub fn project_rgb(cube: &Hypercube, response: &SpectralResponse) -> Result<Planes> {
    if response.bands() != cube.bands() {
        return Err(Error::BandMismatch {
            expected: cube.bands(),
            found: response.bands(),
        });
    }
    let (w, h) = (cube.width(), cube.height());
    let mut out = Planes::zeros(w, h, 3);
    let n = w * h;
    for c in 0..3 {
        let mut acc = vec![0.0f64; n];
        for b in 0..cube.bands() {
            let wt = response.normalized(c, b);
            for (a, v) in acc.iter_mut().zip(cube.planes.plane(b)) {
                *a += wt * f64::from(*v);
            }
        }
        for (o, a) in out.plane_mut(c).iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    Ok(out)
}

pub fn synthesize_rgb(cube: &Hypercube, response: &SpectralResponse) -> Result<RgbImage> {
    let mut planes = project_rgb(cube, response)?;
    for v in &mut planes.data {
        if !v.is_nan() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(RgbImage(planes))
}

pub const PREVIEW_WAVELENGTHS: [f64; 3] = [460.0, 520.0, 590.0];

/// Three-band false-colour preview built from on-grid wavelengths.
pub fn extract_bands(cube: &Hypercube, wavelengths: &[f64]) -> Result<RgbImage> {
    if wavelengths.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "preview needs exactly 3 wavelengths, got {}",
            wavelengths.len()
        )));
    }
    let mut out = Planes::zeros(cube.width(), cube.height(), 3);
    for (c, nm) in wavelengths.iter().enumerate() {
        let b = cube.grid.band_of(*nm)?;
        out.plane_mut(c).copy_from_slice(cube.planes.plane(b));
    }
    Ok(RgbImage(out))
}

/// Why a pixel is or is not used for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelCode {
    Effective,
    Saturated,
    LowCod,
    NonTissue,
}

impl PixelCode {
    pub fn gray_level(self) -> u8 {
        match self {
            PixelCode::Effective => 255,
            PixelCode::Saturated => 0,
            PixelCode::LowCod => 64,
            PixelCode::NonTissue => 128,
        }
    }

    pub fn from_gray_level(v: u8) -> Option<Self> {
        match v {
            255 => Some(PixelCode::Effective),
            0 => Some(PixelCode::Saturated),
            64 => Some(PixelCode::LowCod),
            128 => Some(PixelCode::NonTissue),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub effective: usize,
    pub saturated: usize,
    pub low_cod: usize,
    pub non_tissue: usize,
}

impl MaskCounts {
    pub fn total(&self) -> usize {
        self.effective + self.saturated + self.low_cod + self.non_tissue
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<PixelCode>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, code: PixelCode) -> Self {
        Self {
            width,
            height,
            codes: vec![code; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> PixelCode {
        self.codes[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, code: PixelCode) {
        self.codes[y * self.width + x] = code;
    }

    pub fn is_effective(&self, i: usize) -> bool {
        self.codes[i] == PixelCode::Effective
    }

    pub fn n_effective(&self) -> usize {
        self.codes
            .iter()
            .filter(|c| **c == PixelCode::Effective)
            .count()
    }

    pub fn counts(&self) -> MaskCounts {
        let mut counts = MaskCounts::default();
        for c in &self.codes {
            match c {
                PixelCode::Effective => counts.effective += 1,
                PixelCode::Saturated => counts.saturated += 1,
                PixelCode::LowCod => counts.low_cod += 1,
                PixelCode::NonTissue => counts.non_tissue += 1,
            }
        }
        counts
    }

    /// Pixel-wise intersection: effective only where both are effective,
    /// otherwise the first non-effective code.
    pub fn combine(&self, other: &PixelMask) -> Result<PixelMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ));
        }
        let codes = self
            .codes
            .iter()
            .zip(&other.codes)
            .map(|(a, b)| if *a != PixelCode::Effective { *a } else { *b })
            .collect();
        Ok(PixelMask {
            width: self.width,
            height: self.height,
            codes,
        })
    }

    /// Gray levels as a single-channel raster (for geometric transforms).
    pub fn to_planes(&self) -> Planes {
        let data = self
            .codes
            .iter()
            .map(|c| f32::from(c.gray_level()))
            .collect();
        Planes::from_vec(self.width, self.height, 1, data).expect("mask raster size")
    }

    pub fn from_planes(planes: &Planes) -> Result<Self> {
        let codes = planes
            .plane(0)
            .iter()
            .map(|v| {
                PixelCode::from_gray_level(*v as u8)
                    .filter(|_| v.fract() == 0.0)
                    .ok_or_else(|| Error::InvalidArgument(format!("{v} is not a mask code")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: planes.width,
            height: planes.height,
            codes,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.codes.iter().map(|c| c.gray_level()).collect();
        raster::write_gray_png(path, self.width, self.height, &bytes)
    }
}
