//! Modified Beer-Lambert oximetry.
//!
//! Attenuation is modelled as `A(λ) = c_HbO2·ε_HbO2(λ) + c_Hb·ε_Hb(λ) + offset`
//! with `A = -log10(I / I0)`. The inverse is an ordinary least-squares fit
//! against the design matrix `[ε_HbO2, ε_Hb, 1]`, and StO2 is the oxy
//! fraction of the fitted total haemoglobin. The fit's coefficient of
//! determination gates which pixels are trusted.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hypercube::{self, encode_container, Hypercube, PixelCode, PixelMask, WavelengthGrid};
use crate::raster::{self, Planes};

/// Pixels whose fit has CoD at or below this value are excluded.
pub const DEFAULT_COD_THRESHOLD: f64 = 0.85;

const REFERENCE_TABLE: &str = include_str!("../assets/chromophores_v1.csv");

#[derive(Clone, Debug, PartialEq)]
pub struct ChromophoreTable {
    pub grid: WavelengthGrid,
    pub eps_hbo2: Vec<f64>,
    pub eps_hb: Vec<f64>,
}

impl ChromophoreTable {
    pub fn new(grid: WavelengthGrid, eps_hbo2: Vec<f64>, eps_hb: Vec<f64>) -> Result<Self> {
        if eps_hbo2.len() != grid.bands || eps_hb.len() != grid.bands {
            return Err(Error::BandMismatch {
                expected: grid.bands,
                found: eps_hbo2.len().min(eps_hb.len()),
            });
        }
        if eps_hbo2
            .iter()
            .chain(&eps_hb)
            .any(|e| !(*e > 0.0 && e.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "extinction coefficients must be positive".into(),
            ));
        }
        Ok(Self {
            grid,
            eps_hbo2,
            eps_hb,
        })
    }

    /// Embedded reference table on the default 460-690 nm grid.
    pub fn reference() -> Self {
        let rows = parse_rows(REFERENCE_TABLE).expect("embedded table parses");
        Self::from_rows(&rows, &WavelengthGrid::default()).expect("embedded table covers grid")
    }

    /// CSV with columns `wavelength_nm,eps_hbo2,eps_hb`, restricted to `grid`.
    pub fn from_csv(path: &Path, grid: &WavelengthGrid) -> Result<Self> {
        let rows = hypercube::read_numeric_csv(path, 3)?;
        Self::from_rows(&rows, grid)
    }

    fn from_rows(rows: &[Vec<f64>], grid: &WavelengthGrid) -> Result<Self> {
        let mut oxy = vec![f64::NAN; grid.bands];
        let mut deoxy = vec![f64::NAN; grid.bands];
        for row in rows {
            if let Ok(b) = grid.band_of(row[0]) {
                oxy[b] = row[1];
                deoxy[b] = row[2];
            }
        }
        if let Some(b) = oxy.iter().position(|v| v.is_nan()) {
            return Err(Error::Csv(format!(
                "chromophore table has no entry for {} nm",
                grid.wavelength(b)
            )));
        }
        Self::new(*grid, oxy, deoxy)
    }

    pub fn bands(&self) -> usize {
        self.grid.bands
    }
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Csv(e.to_string()))?;
            r.iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Csv(format!("bad number {f:?}")))
                })
                .collect()
        })
        .collect()
}

/// Per-band white reference I0; the phantoms use a flat I0 = 1.
pub fn flat_white_reference(bands: usize) -> Vec<f64> {
    vec![1.0; bands]
}

pub fn load_white_reference(path: &Path, grid: &WavelengthGrid) -> Result<Vec<f64>> {
    let rows = hypercube::read_numeric_csv(path, 2)?;
    let mut out = vec![f64::NAN; grid.bands];
    for row in rows {
        out[grid.band_of(row[0])?] = row[1];
    }
    if out.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Csv(
            "white reference must be positive for every band".into(),
        ));
    }
    Ok(out)
}

/// Attenuation spectrum for a given saturation, total haemoglobin and offset.
pub fn forward_spectrum(
    sto2: f64,
    total_hb: f64,
    offset: f64,
    table: &ChromophoreTable,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&sto2) {
        return Err(Error::InvalidArgument(format!(
            "sto2 {sto2} outside [0, 1]"
        )));
    }
    if !(total_hb > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "total haemoglobin must be positive, got {total_hb}"
        )));
    }
    Ok(table
        .eps_hbo2
        .iter()
        .zip(&table.eps_hb)
        .map(|(ox, de)| total_hb * (sto2 * ox + (1.0 - sto2) * de) + offset)
        .collect())
}

/// `I(λ) = I0(λ)·10^(-A(λ))`.
pub fn reflectance(attenuation: &[f64], white_ref: &[f64]) -> Vec<f64> {
    attenuation
        .iter()
        .zip(white_ref)
        .map(|(a, i0)| i0 * 10f64.powf(-a))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OximetryFit {
    pub c_hbo2: f64,
    pub c_hb: f64,
    pub offset: f64,
    pub cod: f64,
}

impl OximetryFit {
    pub fn total(&self) -> f64 {
        self.c_hbo2 + self.c_hb
    }

    pub fn sto2(&self) -> Option<f64> {
        let total = self.total();
        (total > 0.0).then(|| self.c_hbo2 / total)
    }
}

/// Precomputed least-squares solver for one chromophore table: the
/// pseudo-inverse of the 3-column design matrix.
#[derive(Clone, Debug)]
pub struct Regressor {
    design: Vec<[f64; 3]>,
    pinv: [Vec<f64>; 3],
}

impl Regressor {
    pub fn new(table: &ChromophoreTable) -> Self {
        let design: Vec<[f64; 3]> = table
            .eps_hbo2
            .iter()
            .zip(&table.eps_hb)
            .map(|(o, d)| [*o, *d, 1.0])
            .collect();
        let mut gram = [[0.0; 3]; 3];
        for row in &design {
            for i in 0..3 {
                for j in 0..3 {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        let inv = invert3(&gram).expect("distinct extinction spectra give a regular design");
        let pinv = [0, 1, 2].map(|i| {
            design
                .iter()
                .map(|row| (0..3).map(|k| inv[i][k] * row[k]).sum())
                .collect()
        });
        Self { design, pinv }
    }

    pub fn bands(&self) -> usize {
        self.design.len()
    }

    /// Fit an attenuation spectrum. Concentrations are clamped at zero after
    /// fitting; CoD is that of the unclamped fit.
    pub fn fit_attenuation(&self, attenuation: &[f64]) -> OximetryFit {
        let coef: [f64; 3] = [0, 1, 2].map(|i| {
            self.pinv[i]
                .iter()
                .zip(attenuation)
                .map(|(p, a)| p * a)
                .sum::<f64>()
        });
        let n = attenuation.len() as f64;
        let mean = attenuation.iter().sum::<f64>() / n;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for (row, a) in self.design.iter().zip(attenuation) {
            let pred = row[0] * coef[0] + row[1] * coef[1] + row[2] * coef[2];
            ss_res += (a - pred).powi(2);
            ss_tot += (a - mean).powi(2);
        }
        let cod = if ss_tot > 0.0 {
            (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
        } else if ss_res <= f64::EPSILON {
            1.0
        } else {
            0.0
        };
        OximetryFit {
            c_hbo2: coef[0].max(0.0),
            c_hb: coef[1].max(0.0),
            offset: coef[2],
            cod,
        }
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    // Gauss-Jordan with partial pivoting.
    let mut a = *m;
    let mut inv = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for k in 0..3 {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for row in 0..3 {
            if row != col {
                let f = a[row][col];
                for k in 0..3 {
                    a[row][k] -= f * a[col][k];
                    inv[row][k] -= f * inv[col][k];
                }
            }
        }
    }
    Some(inv)
}

pub fn attenuation(intensity: &[f64], white_ref: &[f64]) -> Result<Vec<f64>> {
    if intensity.len() != white_ref.len() {
        return Err(Error::BandMismatch {
            expected: white_ref.len(),
            found: intensity.len(),
        });
    }
    intensity
        .iter()
        .zip(white_ref)
        .map(|(i, i0)| {
            if *i > 0.0 && *i0 > 0.0 && i.is_finite() && i0.is_finite() {
                Ok(-(i / i0).log10())
            } else {
                Err(Error::InvalidArgument(format!(
                    "intensity and reference must be finite and positive (got {i}, {i0})"
                )))
            }
        })
        .collect()
}

/// Fit one pixel spectrum against a white reference.
pub fn fit_pixel(
    intensity: &[f64],
    white_ref: &[f64],
    table: &ChromophoreTable,
) -> Result<OximetryFit> {
    if intensity.len() != table.bands() {
        return Err(Error::BandMismatch {
            expected: table.bands(),
            found: intensity.len(),
        });
    }
    let a = attenuation(intensity, white_ref)?;
    Ok(Regressor::new(table).fit_attenuation(&a))
}

/// Per-pixel StO2 with the reason code for every excluded pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct StO2Map {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub mask: PixelMask,
}

impl StO2Map {
    pub fn new(width: usize, height: usize, values: Vec<f32>, mask: PixelMask) -> Result<Self> {
        if values.len() != width * height || mask.width != width || mask.height != height {
            return Err(Error::dims(
                format!("{width}x{height}"),
                format!(
                    "{} values, {}x{} mask",
                    values.len(),
                    mask.width,
                    mask.height
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn n_effective(&self) -> usize {
        self.mask.n_effective()
    }

    pub fn to_planes(&self) -> Planes {
        Planes::from_vec(self.width, self.height, 1, self.values.clone()).expect("map size")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let grid = WavelengthGrid {
            start_nm: 0.0,
            step_nm: 1.0,
            bands: 1,
        };
        std::fs::write(path, encode_container(&self.to_planes(), &grid))
            .map_err(|e| crate::error::Error::io(path, e))
    }

    /// Load raw values; `mask` is supplied separately (maps do not embed it).
    pub fn load(path: &Path, mask: PixelMask) -> Result<Self> {
        let (planes, _) = hypercube::decode_container(&hypercube::read_file(path)?)?;
        if planes.channels != 1 {
            return Err(Error::BandMismatch {
                expected: 1,
                found: planes.channels,
            });
        }
        Self::new(planes.width, planes.height, planes.data, mask)
    }

    /// Colour preview; excluded pixels are drawn black.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 3);
        for (i, v) in self.values.iter().enumerate() {
            if self.mask.is_effective(i) {
                bytes.extend_from_slice(&colormap(*v));
            } else {
                bytes.extend_from_slice(&[0, 0, 0]);
            }
        }
        raster::write_rgb_png(path, self.width, self.height, &bytes)
    }
}

/// Fixed blue-cyan-yellow-red ramp over [0, 1].
pub fn colormap(v: f32) -> [u8; 3] {
    let t = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let channel = |centre: f32| raster::to_byte((1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0));
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Fit every pixel of a cube and classify it.
///
/// NaN anywhere in the spectrum marks the pixel saturated; a non-positive
/// intensity or zero fitted haemoglobin marks it non-tissue; CoD at or
/// below `cod_threshold` marks it low-CoD.
pub fn estimate_sto2_map(
    cube: &Hypercube,
    white_ref: &[f64],
    table: &ChromophoreTable,
    cod_threshold: f64,
) -> Result<StO2Map> {
    if cube.bands() != table.bands() {
        return Err(Error::BandMismatch {
            expected: table.bands(),
            found: cube.bands(),
        });
    }
    if white_ref.len() != table.bands() {
        return Err(Error::BandMismatch {
            expected: table.bands(),
            found: white_ref.len(),
        });
    }
    let regressor = Regressor::new(table);
    let (w, h) = (cube.width(), cube.height());
    let mut values = vec![0.0f32; w * h];
    let mut mask = PixelMask::new(w, h, PixelCode::Effective);
    let mut spectrum = vec![0.0f64; cube.bands()];
    for y in 0..h {
        for x in 0..w {
            for (b, s) in spectrum.iter_mut().enumerate() {
                *s = f64::from(cube.planes.get(b, x, y));
            }
            let i = y * w + x;
            if spectrum.iter().any(|v| v.is_nan()) {
                mask.codes[i] = PixelCode::Saturated;
                continue;
            }
            let Ok(a) = attenuation(&spectrum, white_ref) else {
                mask.codes[i] = PixelCode::NonTissue;
                continue;
            };
            let fit = regressor.fit_attenuation(&a);
            if fit.cod <= cod_threshold {
                mask.codes[i] = PixelCode::LowCod;
                continue;
            }
            match fit.sto2() {
                Some(s) if s.is_finite() => values[i] = s as f32,
                _ => mask.codes[i] = PixelCode::NonTissue,
            }
        }
    }
    StO2Map::new(w, h, values, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> ChromophoreTable {
        ChromophoreTable::reference()
    }

    /// Direct R² from residuals of a given coefficient vector.
    fn brute_force_r2(a: &[f64], t: &ChromophoreTable, coef: [f64; 3]) -> f64 {
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let mut res = 0.0;
        let mut tot = 0.0;
        for b in 0..a.len() {
            let p = coef[0] * t.eps_hbo2[b] + coef[1] * t.eps_hb[b] + coef[2];
            res += (a[b] - p) * (a[b] - p);
            tot += (a[b] - mean) * (a[b] - mean);
        }
        1.0 - res / tot
    }

    #[test]
    fn reference_table_covers_default_grid() {
        let t = table();
        assert_eq!(t.bands(), 24);
        assert!(t.eps_hbo2.iter().chain(&t.eps_hb).all(|e| *e > 0.0));
    }

    #[test]
    fn endpoints_are_pure_spectra() {
        let t = table();
        let oxy = forward_spectrum(1.0, 0.02, 0.1, &t).unwrap();
        let deoxy = forward_spectrum(0.0, 0.02, 0.1, &t).unwrap();
        for b in 0..24 {
            assert!((oxy[b] - (0.02 * t.eps_hbo2[b] + 0.1)).abs() < 1e-15);
            assert!((deoxy[b] - (0.02 * t.eps_hb[b] + 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        assert!(forward_spectrum(0.5, 0.0, 0.0, &table()).is_err());
        assert!(forward_spectrum(1.2, 0.01, 0.0, &table()).is_err());
    }

    #[test]
    fn exact_data_is_recovered() {
        let t = table();
        let a = forward_spectrum(0.7, 0.02, 0.1, &t).unwrap();
        let i = reflectance(&a, &flat_white_reference(24));
        let fit = fit_pixel(&i, &flat_white_reference(24), &t).unwrap();
        assert!((fit.cod - 1.0).abs() < 1e-9);
        assert!((fit.sto2().unwrap() - 0.7).abs() < 1e-6);
        assert!((fit.c_hbo2 - 0.014).abs() < 1e-6);
        assert!((fit.c_hb - 0.006).abs() < 1e-6);
        assert!((fit.offset - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_absorbance_has_no_haemoglobin() {
        let t = table();
        let white = flat_white_reference(24);
        let fit = fit_pixel(&white, &white, &t).unwrap();
        assert_eq!(fit.total(), 0.0);
        assert!(fit.sto2().is_none());

        let cube = Hypercube::filled(2, 2, WavelengthGrid::default(), 1.0);
        let map = estimate_sto2_map(&cube, &white, &t, DEFAULT_COD_THRESHOLD).unwrap();
        assert_eq!(map.n_effective(), 0);
    }

    #[test]
    fn non_positive_intensity_is_an_error() {
        let t = table();
        let mut i = vec![0.5; 24];
        i[3] = 0.0;
        assert!(fit_pixel(&i, &flat_white_reference(24), &t).is_err());
    }

    #[test]
    fn cod_matches_brute_force_r2() {
        let t = table();
        let reg = Regressor::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..2.0)).collect();
            // Unclamped coefficients for the oracle.
            let coef = [0, 1, 2].map(|i| reg.pinv[i].iter().zip(&a).map(|(p, v)| p * v).sum());
            let fit = reg.fit_attenuation(&a);
            let r2 = brute_force_r2(&a, &t, coef).clamp(0.0, 1.0);
            assert!((fit.cod - r2).abs() < 1e-10, "{} vs {}", fit.cod, r2);
        }
    }

    #[test]
    fn negative_coefficients_are_clamped() {
        let t = table();
        // Pure negative oxy contribution.
        let a: Vec<f64> = t.eps_hbo2.iter().map(|e| 1.0 - 0.01 * e).collect();
        let fit = Regressor::new(&t).fit_attenuation(&a);
        assert_eq!(fit.c_hbo2, 0.0);
        assert!(fit.cod > 0.99);
    }

    #[test]
    fn nan_pixel_is_saturated_others_unaffected() {
        let t = table();
        let a = forward_spectrum(0.6, 0.015, 0.05, &t).unwrap();
        let refl = reflectance(&a, &flat_white_reference(24));
        let mut cube = Hypercube::filled(3, 3, WavelengthGrid::default(), 0.0);
        for b in 0..24 {
            cube.planes.plane_mut(b).fill(refl[b] as f32);
        }
        cube.planes.set(7, 1, 2, f32::NAN);
        let map = estimate_sto2_map(&cube, &flat_white_reference(24), &t, 0.85).unwrap();
        assert_eq!(map.mask.get(1, 2), PixelCode::Saturated);
        assert_eq!(map.n_effective(), 8);
        for (i, v) in map.values.iter().enumerate() {
            if map.mask.is_effective(i) {
                assert!((f64::from(*v) - 0.6).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [128, 0, 0]);
    }
}
