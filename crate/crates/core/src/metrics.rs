//! Image and intrinsic metrics plus JSON/CSV report plumbing.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::Serialize;
use serde_json::Value;

use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn mse(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n)
}

/// Peak 1.0; identical inputs give `+∞`.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gray(a: &Array3<f32>) -> Array2<f64> {
    let (h, w, c) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| (0..c).map(|k| a[[y, x, k]] as f64).sum::<f64>() / c as f64)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let rows = Array2::from_shape_fn((h, ow), |(y, x)| (0..k).map(|i| taps[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..k).map(|i| taps[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Mean SSIM of the channel-mean images, 11×11 Gaussian window (σ = 1.5),
/// valid windows only.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let (x, y) = (gray(a), gray(b));
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mx = filter_valid(&x, &taps);
    let my = filter_valid(&y, &taps);
    let sxx = filter_valid(&(&x * &x), &taps);
    let syy = filter_valid(&(&y * &y), &taps);
    let sxy = filter_valid(&(&x * &y), &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = sxx.as_slice().unwrap()[i] - ux * ux;
        let vy = syy.as_slice().unwrap()[i] - uy * uy;
        let cxy = sxy.as_slice().unwrap()[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

fn decode(e: &[f32]) -> [f64; 3] {
    [2.0 * e[0] as f64 - 1.0, 2.0 * e[1] as f64 - 1.0, 2.0 * e[2] as f64 - 1.0]
}

/// Mean angle in degrees between `[0, 1]`-encoded normal maps over `mask`
/// (all pixels when `None`). Returns 0 for an empty mask.
pub fn angular_error(pred: &Array3<f32>, gt: &Array3<f32>, mask: Option<&Array3<f32>>) -> Result<f64> {
    same_dims(pred, gt)?;
    let (h, w, c) = pred.dim();
    if c != 3 {
        return Err(Error::invalid("normal maps need 3 channels"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| m[[y, x, 0]] < 0.5) {
                continue;
            }
            let p = decode(&[pred[[y, x, 0]], pred[[y, x, 1]], pred[[y, x, 2]]]);
            let g = decode(&[gt[[y, x, 0]], gt[[y, x, 1]], gt[[y, x, 2]]]);
            let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = (dot / (np * ng).max(1e-12)).clamp(-1.0, 1.0);
            sum += cos.acos().to_degrees();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Root mean squared error over `mask` (all pixels when `None`).
pub fn rmse(pred: &Array3<f32>, gt: &Array3<f32>, mask: Option<&Array3<f32>>) -> Result<f64> {
    same_dims(pred, gt)?;
    let (h, w, c) = pred.dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| m[[y, x, 0]] < 0.5) {
                continue;
            }
            for k in 0..c {
                sum += (pred[[y, x, k]] as f64 - gt[[y, x, k]] as f64).powi(2);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { (sum / n as f64).sqrt() })
}

/// Perceptual proxy of one image pair, evaluated with the training loss.
pub fn perceptual_proxy(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    same_dims(a, b)?;
    let dev = candle_core::Device::Cpu;
    let ta = crate::clip::array_to_tensor(a, candle_core::DType::F64, &dev)?;
    let tb = crate::clip::array_to_tensor(b, candle_core::DType::F64, &dev)?;
    Ok(crate::train::loss_perceptual_proxy(&ta, &tb)?.to_scalar::<f64>()?)
}

/// Population variance, shifted by the first value so identical inputs give exactly 0.
pub fn variance(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return 0.0;
    };
    let n = values.len() as f64;
    let d: Vec<f64> = values.iter().map(|v| v - first).collect();
    let mean = d.iter().sum::<f64>() / n;
    d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub runs: usize,
    /// Variance across runs of each frame's PSNR.
    pub per_frame_psnr_variance: Vec<f64>,
    /// Variance across runs of the clip-mean PSNR.
    pub mean_psnr_variance: f64,
    /// Largest absolute pixel difference between any run and the first.
    pub max_pixel_deviation: f64,
}

/// Runs `render` `n_runs` times and measures the spread of its outputs.
pub fn variance_over_runs<F>(mut render: F, reference: &[Array3<f32>], n_runs: usize) -> Result<VarianceReport>
where
    F: FnMut(usize) -> Result<Vec<Array3<f32>>>,
{
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be >= 1"));
    }
    let mut first: Option<Vec<Array3<f32>>> = None;
    let mut per_frame: Vec<Vec<f64>> = vec![Vec::new(); reference.len()];
    let mut means = Vec::new();
    let mut dev = 0.0f64;
    for run in 0..n_runs {
        let out = render(run)?;
        if out.len() != reference.len() {
            return Err(Error::invalid("render returned a different frame count"));
        }
        let mut psnrs = Vec::new();
        for (i, (o, r)) in out.iter().zip(reference).enumerate() {
            let p = psnr(o, r)?;
            per_frame[i].push(p);
            psnrs.push(p);
        }
        means.push(psnrs.iter().sum::<f64>() / psnrs.len().max(1) as f64);
        match &first {
            None => first = Some(out),
            Some(f0) => {
                for (a, b) in f0.iter().zip(&out) {
                    for (x, y) in a.iter().zip(b) {
                        dev = dev.max((x - y).abs() as f64);
                    }
                }
            }
        }
    }
    Ok(VarianceReport {
        runs: n_runs,
        per_frame_psnr_variance: per_frame.iter().map(|v| variance(v)).collect(),
        mean_psnr_variance: variance(&means),
        max_pixel_deviation: dev,
    })
}

/// PSNR, SSIM and proxy per frame and on average.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub perceptual_proxy: Vec<f64>,
}

impl ImageScores {
    pub fn compute(pred: &[Array3<f32>], gt: &[Array3<f32>]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!("{} predicted frames vs {} reference frames", pred.len(), gt.len())));
        }
        let mut s = Self::default();
        for (p, g) in pred.iter().zip(gt) {
            s.psnr.push(psnr(p, g)?);
            s.ssim.push(ssim(p, g)?);
            s.perceptual_proxy.push(perceptual_proxy(p, g)?);
        }
        Ok(s)
    }

    /// Mean over the frames selected by `keep`.
    pub fn mean_where(&self, keep: impl Fn(usize) -> bool) -> BTreeMap<String, f64> {
        let idx: Vec<usize> = (0..self.psnr.len()).filter(|&i| keep(i)).collect();
        let avg = |v: &[f64]| {
            if idx.is_empty() {
                f64::NAN
            } else {
                idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64
            }
        };
        BTreeMap::from([
            ("psnr".to_string(), avg(&self.psnr)),
            ("ssim".to_string(), avg(&self.ssim)),
            ("perceptual_proxy".to_string(), avg(&self.perceptual_proxy)),
        ])
    }

    pub fn mean(&self) -> BTreeMap<String, f64> {
        self.mean_where(|_| true)
    }

    pub fn extend(&mut self, other: ImageScores) {
        self.psnr.extend(other.psnr);
        self.ssim.extend(other.ssim);
        self.perceptual_proxy.extend(other.perceptual_proxy);
    }
}

/// JSON number, or `"inf"`/`"-inf"`/`"nan"` for non-finite values.
pub fn metric_value(x: f64) -> Value {
    if x.is_finite() {
        serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
    } else if x.is_nan() {
        Value::String("nan".into())
    } else if x > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

fn csv_value(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

/// A table of labelled metric rows with free-form notes and run metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub title: String,
    pub rows: Vec<MetricRow>,
    pub notes: Vec<String>,
    pub metadata: BTreeMap<String, Value>,
}

impl MetricReport {
    pub fn new(title: &str) -> Self {
        Self {
            title: title.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, label: &str, metrics: BTreeMap<String, f64>) {
        self.rows.push(MetricRow {
            label: label.to_string(),
            metrics,
        });
    }

    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Union of metric names in first-seen order.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for r in &self.rows {
            for k in r.metrics.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = serde_json::Map::new();
                m.insert("label".into(), Value::String(r.label.clone()));
                for (k, v) in &r.metrics {
                    m.insert(k.clone(), metric_value(*v));
                }
                Value::Object(m)
            })
            .collect();
        serde_json::json!({
            "title": self.title,
            "rows": rows,
            "notes": self.notes,
            "metadata": self.metadata,
        })
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("label");
        for c in &cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.label.replace(',', ";"));
            for c in &cols {
                out.push(',');
                if let Some(v) = r.metrics.get(c) {
                    out.push_str(&csv_value(*v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain-text table followed by the notes.
    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(6);
        let mut out = format!("{}\n", self.title);
        out.push_str(&format!("{:<width$}", "method"));
        for c in &cols {
            out.push_str(&format!(" | {c:>16}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(width + cols.len() * 19));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<width$}", r.label));
            for c in &cols {
                let v = r.metrics.get(c).map_or("-".into(), |v| {
                    if v.is_finite() {
                        format!("{v:.4}")
                    } else {
                        csv_value(*v)
                    }
                });
                out.push_str(&format!(" | {v:>16}"));
            }
            out.push('\n');
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }

    /// Writes `{stem}.json`, `{stem}.csv` and `{stem}.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |ext: &str, body: String| {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("json", serde_json::to_string_pretty(&self.to_json())?)?;
        put("csv", self.to_csv())?;
        put("txt", self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Array3::<f32>::zeros((4, 4, 3));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Array3::<f32>::from_elem((4, 4, 3), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = Array3::<f32>::ones((4, 4, 3));
        assert_eq!(psnr(&a, &c).unwrap(), 0.0);
        assert!(psnr(&a, &Array3::zeros((4, 5, 3))).is_err());
        assert_eq!(metric_value(f64::INFINITY), Value::String("inf".into()));
    }

    #[test]
    fn ssim_basics() {
        let a = random(16, 16, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.mapv(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&random(10, 16, 2), &random(10, 16, 3)).is_err());
        let b = random(16, 16, 4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        for d in [1e-3f32, 1e-4] {
            let near = a.mapv(|v| v + d);
            assert!(1.0 - ssim(&a, &near).unwrap() < 1e-3);
        }
    }

    #[test]
    fn angular_closed_forms() {
        let up = Array3::from_shape_fn((2, 2, 3), |(_, _, k)| if k == 1 { 1.0f32 } else { 0.5 });
        let down = Array3::from_shape_fn((2, 2, 3), |(_, _, k)| if k == 1 { 0.0f32 } else { 0.5 });
        let side = Array3::from_shape_fn((2, 2, 3), |(_, _, k)| if k == 0 { 1.0f32 } else { 0.5 });
        assert!(angular_error(&up, &up, None).unwrap().abs() < 1e-6);
        assert!((angular_error(&up, &down, None).unwrap() - 180.0).abs() < 1e-6);
        assert!((angular_error(&up, &side, None).unwrap() - 90.0).abs() < 1e-6);
        let mut mask = Array3::<f32>::zeros((2, 2, 1));
        assert_eq!(angular_error(&up, &down, Some(&mask)).unwrap(), 0.0);
        mask[[0, 0, 0]] = 1.0;
        assert!((angular_error(&up, &down, Some(&mask)).unwrap() - 180.0).abs() < 1e-6);
    }

    #[test]
    fn rmse_and_variance() {
        let a = Array3::<f32>::zeros((2, 2, 1));
        let b = Array3::<f32>::from_elem((2, 2, 1), 0.5);
        assert!((rmse(&a, &b, None).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(variance(&[3.0]), 0.0);
        assert_eq!(variance(&[1.0, 3.0]), 1.0);
        assert_eq!(variance(&[15.257_f64.ln(); 10]), 0.0);
        let reference = vec![random(12, 12, 5)];
        let det = variance_over_runs(|_| Ok(vec![random(12, 12, 6)]), &reference, 10).unwrap();
        assert_eq!(det.mean_psnr_variance, 0.0);
        assert_eq!(det.max_pixel_deviation, 0.0);
        let noisy = variance_over_runs(|r| Ok(vec![random(12, 12, 100 + r as u64)]), &reference, 3).unwrap();
        assert!(noisy.mean_psnr_variance > 0.0);
        assert!(variance_over_runs(|_| Ok(vec![]), &reference, 0).is_err());
    }

    #[test]
    fn report_formats() {
        let mut r = MetricReport::new("t");
        r.push("a,b", BTreeMap::from([("psnr".to_string(), f64::INFINITY), ("ssim".to_string(), 0.5)]));
        r.notes.push("proxy".into());
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "label,psnr,ssim");
        assert!(csv.contains("a;b,inf,0.5"));
        assert_eq!(r.to_json()["rows"][0]["psnr"], "inf");
        assert!(r.to_text().contains("note: proxy"));
    }

    proptest! {
        #[test]
        fn metric_ranges(seed in 0u64..500) {
            let a = random(12, 12, seed);
            let b = random(12, 12, seed + 1000);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
            let ang = angular_error(&a, &b, None).unwrap();
            prop_assert!((0.0..=180.0).contains(&ang));
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
