//! Fibre-bundle sampling simulation.
//!
//! A bundle is modelled as circular cores of radius `r` on a hexagonal
//! lattice with pitch `d`, clipped to a circle of radius `R` around the
//! image centre. Each core averages the spectra it covers; the sparse
//! cube paints that average back over the core footprint.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{encode_container, Hypercube};
use crate::raster::{self, Planes};

/// Shortfall tolerated before a spot-count target is declared unreachable.
pub const SHORTFALL_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub n_spot_target: usize,
    /// Core radius in pixels.
    pub r: f64,
    /// Centre-to-centre spacing in pixels.
    pub d: f64,
    /// Bundle radius in pixels; `None` means half the image height.
    pub bundle_radius: Option<f64>,
}

impl BundleSpec {
    pub fn new(n_spot_target: usize, r: f64, d: f64) -> Result<Self> {
        let spec = Self {
            n_spot_target,
            r,
            d,
            bundle_radius: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The fibre configurations of the ablation (0 is the control group).
    pub fn preset(n_spot: usize) -> Result<Self> {
        match n_spot {
            0 => Ok(Self::empty()),
            121 => Self::new(121, 4.0, 16.0),
            171 => Self::new(171, 3.5, 14.0),
            300 => Self::new(300, 2.6, 10.0),
            other => Err(Error::InvalidArgument(format!(
                "no preset for {other} spots (known: 0, 121, 171, 300)"
            ))),
        }
    }

    pub const PRESETS: [usize; 4] = [0, 121, 171, 300];

    pub fn empty() -> Self {
        Self {
            n_spot_target: 0,
            r: 0.0,
            d: 0.0,
            bundle_radius: None,
        }
    }

    pub fn with_bundle_radius(mut self, radius: f64) -> Self {
        self.bundle_radius = Some(radius);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.n_spot_target == 0
    }

    /// Fill factor r/d.
    pub fn gamma(&self) -> f64 {
        if self.d > 0.0 {
            self.r / self.d
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        if !(self.r > 0.0 && self.d > 0.0 && self.r < self.d / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "fibre cores need 0 < r < d/2 (r = {}, d = {})",
                self.r, self.d
            )));
        }
        if let Some(radius) = self.bundle_radius {
            if !(radius >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bundle radius {radius} < 0"
                )));
            }
        }
        Ok(())
    }
}

/// Where the lattice is pinned relative to the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeAnchor {
    /// Image centre sits at the centroid of a lattice triangle.
    #[default]
    Centroid,
    /// A lattice point sits on the image centre.
    Centre,
    /// A lattice point sits on the image origin.
    Origin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Hexagonal lattice with horizontal pitch `d`, row pitch `d·√3/2` and odd
/// rows shifted by `d/2`, covering `[0, W] × [0, H]`.
pub fn generate_hex_grid(width: usize, height: usize, d: f64, anchor: LatticeAnchor) -> Vec<Point> {
    if width == 0 || height == 0 || !(d > 0.0) {
        return Vec::new();
    }
    let (w, h) = (width as f64, height as f64);
    let row_pitch = d * 3f64.sqrt() / 2.0;
    let (ox, oy) = match anchor {
        LatticeAnchor::Centre => (w / 2.0, h / 2.0),
        LatticeAnchor::Origin => (0.0, 0.0),
        // Triangle (0,0), (d,0), (d/2, row_pitch) has centroid (d/2, row_pitch/3).
        LatticeAnchor::Centroid => (w / 2.0 - d / 2.0, h / 2.0 - row_pitch / 3.0),
    };
    let j_min = ((0.0 - oy) / row_pitch).floor() as i64 - 1;
    let j_max = ((h - oy) / row_pitch).ceil() as i64 + 1;
    let mut points = Vec::new();
    for j in j_min..=j_max {
        let y = oy + j as f64 * row_pitch;
        if !(0.0..=h).contains(&y) {
            continue;
        }
        let shift = if j.rem_euclid(2) == 1 { d / 2.0 } else { 0.0 };
        let i_min = ((0.0 - ox - shift) / d).floor() as i64 - 1;
        let i_max = ((w - ox - shift) / d).ceil() as i64 + 1;
        for i in i_min..=i_max {
            let x = ox + shift + i as f64 * d;
            if (0.0..=w).contains(&x) {
                points.push(Point { x, y });
            }
        }
    }
    points
}

#[derive(Clone, Debug, PartialEq)]
pub struct FibreMask {
    pub width: usize,
    pub height: usize,
    pub r: f64,
    pub centres: Vec<Point>,
    /// Linear pixel indices (`y * width + x`) covered by each core.
    pub footprints: Vec<Vec<usize>>,
    /// Centres inside the bundle before trimming to the target count.
    pub untrimmed_count: usize,
}

impl FibreMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            r: 0.0,
            centres: Vec::new(),
            footprints: Vec::new(),
            untrimmed_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.centres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centres.is_empty()
    }

    /// Fibre id per pixel, if covered.
    pub fn owner_map(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; self.width * self.height];
        for (id, fp) in self.footprints.iter().enumerate() {
            for &p in fp {
                owners[p] = Some(id);
            }
        }
        owners
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fibre_id,cx,cy,r\n");
        for (i, c) in self.centres.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", c.x, c.y, self.r);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Cores white on black.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .owner_map()
            .iter()
            .map(|o| if o.is_some() { 255 } else { 0 })
            .collect();
        raster::write_gray_png(path, self.width, self.height, &bytes)
    }
}

fn footprint(centre: Point, r: f64, width: usize, height: usize) -> Vec<usize> {
    let x0 = (centre.x - r - 1.0).floor().max(0.0) as usize;
    let y0 = (centre.y - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((centre.x + r + 1.0).ceil().max(0.0) as usize).min(width);
    let y1 = ((centre.y + r + 1.0).ceil().max(0.0) as usize).min(height);
    let mut pixels = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - centre.x;
            let dy = y as f64 + 0.5 - centre.y;
            if (dx * dx + dy * dy).sqrt() < r {
                pixels.push(y * width + x);
            }
        }
    }
    pixels
}

/// Lattice centres inside the bundle circle, closest to the image centre first.
pub fn centres_in_bundle(
    spec: &BundleSpec,
    width: usize,
    height: usize,
    anchor: LatticeAnchor,
) -> Vec<Point> {
    let radius = spec.bundle_radius.unwrap_or(height as f64 / 2.0);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let key = |p: &Point| {
        let (dx, dy) = (p.x - cx, p.y - cy);
        ((dx * dx + dy * dy).sqrt(), dy.atan2(dx), p.x)
    };
    let mut kept: Vec<(f64, f64, f64, Point)> = generate_hex_grid(width, height, spec.d, anchor)
        .into_iter()
        .map(|p| {
            let (dist, angle, x) = key(&p);
            (dist, angle, x, p)
        })
        .filter(|(dist, ..)| *dist <= radius + 1e-9)
        .collect();
    // Distances equal up to rounding count as ties.
    kept.sort_by(|a, b| {
        let qa = (a.0 * 1e6).round() as i64;
        let qb = (b.0 * 1e6).round() as i64;
        qa.cmp(&qb)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    kept.into_iter().map(|(.., p)| p).collect()
}

/// Build the fibre mask for a bundle on a `width × height` image.
pub fn generate_mask(
    spec: &BundleSpec,
    width: usize,
    height: usize,
    anchor: LatticeAnchor,
) -> Result<FibreMask> {
    spec.validate()?;
    if spec.is_empty() {
        return Ok(FibreMask::empty(width, height));
    }
    let mut centres = centres_in_bundle(spec, width, height, anchor);
    let untrimmed_count = centres.len();
    let minimum = (spec.n_spot_target as f64 * (1.0 - SHORTFALL_TOLERANCE)).ceil() as usize;
    if untrimmed_count < minimum {
        return Err(Error::UnreachableTarget {
            target: spec.n_spot_target,
            available: untrimmed_count,
        });
    }
    centres.truncate(spec.n_spot_target);
    let footprints = centres
        .iter()
        .map(|c| footprint(*c, spec.r, width, height))
        .collect::<Vec<_>>();
    let mask = FibreMask {
        width,
        height,
        r: spec.r,
        centres,
        footprints,
        untrimmed_count,
    };
    debug_assert!(footprints_disjoint(&mask));
    Ok(mask)
}

fn footprints_disjoint(mask: &FibreMask) -> bool {
    let mut seen = vec![false; mask.width * mask.height];
    for fp in &mask.footprints {
        for &p in fp {
            if std::mem::replace(&mut seen[p], true) {
                return false;
            }
        }
    }
    true
}

/// Dense raster holding each fibre's mean spectrum over its footprint, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseHypercube(pub Hypercube);

impl SparseHypercube {
    pub fn cube(&self) -> &Hypercube {
        &self.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_container(&self.0.planes, &self.0.grid))
            .map_err(|e| Error::io(path, e))
    }
}

/// Average each fibre's footprint, skipping NaN pixels; a footprint with no
/// finite pixel emits NaN.
pub fn apply_mask(cube: &Hypercube, mask: &FibreMask) -> Result<SparseHypercube> {
    if cube.width() != mask.width || cube.height() != mask.height {
        return Err(Error::dims(
            format!("{}x{}", mask.width, mask.height),
            format!("{}x{}", cube.width(), cube.height()),
        ));
    }
    let mut out = Planes::zeros(cube.width(), cube.height(), cube.bands());
    for fp in &mask.footprints {
        let valid: Vec<usize> = fp
            .iter()
            .copied()
            .filter(|&p| (0..cube.bands()).all(|b| !cube.planes.plane(b)[p].is_nan()))
            .collect();
        for b in 0..cube.bands() {
            let src = cube.planes.plane(b);
            let mean = if valid.is_empty() {
                f32::NAN
            } else {
                (valid.iter().map(|&p| f64::from(src[p])).sum::<f64>() / valid.len() as f64) as f32
            };
            let dst = out.plane_mut(b);
            for &p in fp {
                dst[p] = mean;
            }
        }
    }
    Ok(SparseHypercube(Hypercube {
        grid: cube.grid,
        planes: out,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::WavelengthGrid;

    #[test]
    fn degenerate_grid_is_empty() {
        assert!(generate_hex_grid(0, 0, 10.0, LatticeAnchor::Centre).is_empty());
        assert!(generate_hex_grid(10, 0, 10.0, LatticeAnchor::Centroid).is_empty());
    }

    #[test]
    fn row_pitch_for_d10() {
        let pts = generate_hex_grid(256, 192, 10.0, LatticeAnchor::Centre);
        let mut ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        for pair in ys.windows(2) {
            assert!((pair[1] - pair[0] - 8.660254037844386).abs() < 1e-9);
        }
        assert!((8.660254037844386f64 - 8.660).abs() < 1e-3);
    }

    #[test]
    fn centre_anchor_hits_image_centre() {
        let pts = generate_hex_grid(256, 192, 16.0, LatticeAnchor::Centre);
        assert!(pts.iter().any(|p| p.x == 128.0 && p.y == 96.0));
        let origin = generate_hex_grid(256, 192, 16.0, LatticeAnchor::Origin);
        assert!(origin.iter().any(|p| p.x == 0.0 && p.y == 0.0));
    }

    #[test]
    fn presets_and_gamma() {
        assert_eq!(BundleSpec::preset(171).unwrap().gamma(), 0.25);
        assert_eq!(BundleSpec::preset(121).unwrap().gamma(), 0.25);
        assert!((BundleSpec::preset(300).unwrap().gamma() - 0.26).abs() < 1e-12);
        assert!(BundleSpec::preset(42).is_err());
        assert!(BundleSpec::new(10, 5.0, 10.0).is_err());
    }

    #[test]
    fn empty_spec_gives_empty_mask() {
        let m = generate_mask(&BundleSpec::empty(), 256, 192, LatticeAnchor::default()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn unreachable_target_errors() {
        let spec = BundleSpec::new(1000, 2.6, 10.0).unwrap();
        assert!(matches!(
            generate_mask(&spec, 256, 192, LatticeAnchor::default()),
            Err(Error::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn footprint_membership_is_strict() {
        // Centre on a pixel corner: the four adjacent pixel centres sit at
        // distance sqrt(0.5) and must be excluded when r equals it.
        let fp = footprint(Point { x: 5.0, y: 5.0 }, 0.5f64.sqrt(), 10, 10);
        assert!(fp.is_empty());
        let fp = footprint(Point { x: 5.0, y: 5.0 }, 0.71, 10, 10);
        assert_eq!(fp.len(), 4);
    }

    #[test]
    fn constant_cube_paints_constant_footprints() {
        let cube = Hypercube::filled(64, 48, WavelengthGrid::default(), 0.25);
        let spec = BundleSpec::new(10, 2.6, 10.0).unwrap();
        let mask = generate_mask(&spec, 64, 48, LatticeAnchor::default()).unwrap();
        let sparse = apply_mask(&cube, &mask).unwrap();
        let owners = mask.owner_map();
        for b in 0..24 {
            for (p, v) in sparse.0.planes.plane(b).iter().enumerate() {
                let expected = if owners[p].is_some() { 0.25 } else { 0.0 };
                assert_eq!(*v, expected);
            }
        }
    }

    #[test]
    fn all_nan_footprint_emits_nan() {
        let mut cube = Hypercube::filled(64, 48, WavelengthGrid::default(), 0.25);
        let spec = BundleSpec::new(7, 2.6, 10.0).unwrap();
        let mask = generate_mask(&spec, 64, 48, LatticeAnchor::default()).unwrap();
        for &p in &mask.footprints[0] {
            for b in 0..24 {
                cube.planes.plane_mut(b)[p] = f32::NAN;
            }
        }
        // One NaN pixel in another core is skipped.
        let q = mask.footprints[1][0];
        cube.planes.plane_mut(3)[q] = f32::NAN;
        let sparse = apply_mask(&cube, &mask).unwrap();
        assert!(sparse.0.planes.plane(0)[mask.footprints[0][0]].is_nan());
        assert_eq!(sparse.0.planes.plane(3)[q], 0.25);
    }

    #[test]
    fn mask_dimension_mismatch() {
        let cube = Hypercube::filled(10, 10, WavelengthGrid::default(), 0.25);
        let mask = FibreMask::empty(10, 11);
        assert!(apply_mask(&cube, &mask).is_err());
    }

    #[test]
    fn csv_export() {
        let spec = BundleSpec::new(2, 2.6, 10.0).unwrap();
        let m = generate_mask(&spec, 64, 48, LatticeAnchor::default()).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("fibre_id,cx,cy,r\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
