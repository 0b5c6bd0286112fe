//! Evaluation metrics on StO2 maps: masked SSIM, mean prediction error and
//! the fraction of high-accuracy pixels, plus aggregation across
//! acquisitions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::PixelMask;
use crate::oximetry::StO2Map;

/// Accuracy level for a "high-accuracy" pixel: `1 - |e| >= 0.95`.
pub const HAP_THRESHOLD: f64 = 0.95;

/// Slack on the inclusive p_HAP boundary for values stored as `f32`.
pub const HAP_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

fn check_dims(a: &StO2Map, b: &StO2Map) -> Result<PixelMask> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dims(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    a.mask.combine(&b.mask)
}

/// Valid-mode separable filter of a `w × h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * horiz[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean local SSIM over all fully-inside windows whose centre pixel is
/// effective in both maps. Inside a window, excluded pixels take the
/// window's (weighted) effective-pixel mean, so they add no variance.
pub fn ssim(a: &StO2Map, b: &StO2Map, params: &SsimParams) -> Result<f64> {
    let mask = check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = params.window;
    if w < k || h < k {
        return Err(Error::NoEffectivePixels);
    }
    let taps = params.taps();
    let m: Vec<f64> = mask
        .codes
        .iter()
        .enumerate()
        .map(|(i, _)| f64::from(u8::from(mask.is_effective(i))))
        .collect();
    let av: Vec<f64> = a.values.iter().map(|v| f64::from(*v)).collect();
    let bv: Vec<f64> = b.values.iter().map(|v| f64::from(*v)).collect();
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..w * h).map(|i| m[i] * f(i)).collect() };
    let s_w = filter_valid(&m, w, h, &taps);
    let s_a = filter_valid(&prod(&|i| av[i]), w, h, &taps);
    let s_b = filter_valid(&prod(&|i| bv[i]), w, h, &taps);
    let s_aa = filter_valid(&prod(&|i| av[i] * av[i]), w, h, &taps);
    let s_bb = filter_valid(&prod(&|i| bv[i] * bv[i]), w, h, &taps);
    let s_ab = filter_valid(&prod(&|i| av[i] * bv[i]), w, h, &taps);

    let (c1, c2) = (params.c1(), params.c2());
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let r = k / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for y in 0..oh {
        for x in 0..ow {
            if !mask.is_effective((y + r) * w + x + r) {
                continue;
            }
            let i = y * ow + x;
            let weight = s_w[i];
            let mu_a = s_a[i] / weight;
            let mu_b = s_b[i] / weight;
            let var_a = s_aa[i] - mu_a * mu_a * weight;
            let var_b = s_bb[i] - mu_b * mu_b * weight;
            let cov = s_ab[i] - mu_a * mu_b * weight;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoEffectivePixels);
    }
    Ok(total / count as f64)
}

/// Mean absolute StO2 difference over effective pixels.
pub fn mean_prediction_error(syn: &StO2Map, gt: &StO2Map) -> Result<f64> {
    let mask = check_dims(syn, gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..mask.codes.len() {
        if mask.is_effective(i) {
            sum += (f64::from(syn.values[i]) - f64::from(gt.values[i])).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoEffectivePixels);
    }
    Ok(sum / n as f64)
}

/// Fraction of effective pixels with `1 - |e| >= threshold` (inclusive).
pub fn p_hap(syn: &StO2Map, gt: &StO2Map, threshold: f64) -> Result<f64> {
    let mask = check_dims(syn, gt)?;
    let limit = 1.0 - threshold + HAP_SLACK;
    let (mut hits, mut n) = (0usize, 0usize);
    for i in 0..mask.codes.len() {
        if mask.is_effective(i) {
            n += 1;
            if (f64::from(syn.values[i]) - f64::from(gt.values[i])).abs() <= limit {
                hits += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoEffectivePixels);
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionMetrics {
    pub id: String,
    pub ssim: f64,
    pub e_bar: f64,
    pub p_hap: f64,
    pub n_effective: usize,
}

/// All three metrics for one predicted/ground-truth pair.
pub fn evaluate(
    id: &str,
    syn: &StO2Map,
    gt: &StO2Map,
    params: &SsimParams,
) -> Result<AcquisitionMetrics> {
    let mask = check_dims(syn, gt)?;
    Ok(AcquisitionMetrics {
        id: id.to_string(),
        ssim: ssim(syn, gt, params)?,
        e_bar: mean_prediction_error(syn, gt)?,
        p_hap: p_hap(syn, gt, HAP_THRESHOLD)?,
        n_effective: mask.n_effective(),
    })
}

/// Mean, population standard deviation and boxplot quartiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub iqr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("metric values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut scratch = values.to_vec();
        let q1 = quantile(&mut scratch, 0.25);
        let median = quantile(&mut scratch, 0.5);
        let q3 = quantile(&mut scratch, 0.75);
        Ok(Self {
            mean,
            std,
            min: quantile(&mut scratch, 0.0),
            q1,
            median,
            q3,
            max: quantile(&mut scratch, 1.0),
            iqr: q3 - q1,
        })
    }
}

/// Linear-interpolation quantile (`(n-1)·q` rank) via selection.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    let pos = (values.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_v, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_v = *lo_v;
    if frac == 0.0 || rest.is_empty() {
        return lo_v;
    }
    let hi_v = rest.iter().copied().fold(f64::INFINITY, f64::min);
    lo_v + frac * (hi_v - lo_v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<AcquisitionMetrics>,
    pub ssim: Summary,
    pub e_bar: Summary,
    pub p_hap: Summary,
    /// Per-frame generator forward time, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_ms: Option<f64>,
}

pub fn aggregate(rows: Vec<AcquisitionMetrics>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation rows"));
    }
    let col = |f: fn(&AcquisitionMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(EvalReport {
        ssim: Summary::of(&col(|r| r.ssim))?,
        e_bar: Summary::of(&col(|r| r.e_bar))?,
        p_hap: Summary::of(&col(|r| r.p_hap))?,
        rows,
        inference_ms: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("id,ssim,e_bar,p_hap,n_effective\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.id, r.ssim, r.e_bar, r.p_hap, r.n_effective
            );
        }
        out
    }

    /// One row per metric: quartiles for external boxplots.
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("metric,min,q1,median,q3,max,iqr,mean,std\n");
        for (name, s) in [
            ("ssim", &self.ssim),
            ("e_bar", &self.e_bar),
            ("p_hap", &self.p_hap),
        ] {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                s.min, s.q1, s.median, s.q3, s.max, s.iqr, s.mean, s.std
            );
        }
        out
    }

    /// Writes `report.json`, `report.csv` and `boxplot.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("report.json", self.to_json()),
            ("report.csv", self.rows_csv()),
            ("boxplot.csv", self.boxplot_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
