//! MSE, PSNR and single-scale SSIM on unit-range images, plus report
//! aggregation and formatting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of unit-scale pixels.
pub const DATA_RANGE: f64 = 1.0;

/// Mean of squared differences over every pixel and channel, in f64.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "mse")?;
    if a.numel() == 0 {
        return Err(Error::dim("mse of empty images"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10·log10(max_val² / mse)`; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let radius = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - radius;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable Gaussian filter over the positions where the window fits entirely.
fn filter_valid(plane: &[f64], h: usize, w: usize, window: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| plane[y * w + x + k] * window[k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| rows[(y + k) * ow + x] * window[k]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let window = gaussian_window();
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &window);
    let mu_b = filter_valid(b, h, w, &window);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &window);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &window);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &window);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = aa[i] - ma * ma;
        let var_b = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// channels and images. Accepts `C×H×W` or `N×C×H×W`; only windows lying
/// fully inside the image contribute.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    let (planes, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [n, c, h, w] => (n * c, h, w),
        _ => return Err(Error::dim(format!("ssim expects C×H×W or N×C×H×W, found {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, found {h}×{w}"
        )));
    }
    if planes == 0 {
        return Err(Error::dim("ssim of empty images"));
    }
    let size = h * w;
    let to_f64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let total: f64 = (0..planes)
        .map(|p| {
            let range = p * size..(p + 1) * size;
            ssim_plane(&to_f64(&a.data()[range.clone()]), &to_f64(&b.data()[range]), h, w)
        })
        .sum();
    Ok(total / planes as f64)
}

/// Transfer timings attached to a report (seconds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferSummary {
    pub mean_latency_s: f64,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// dB; `+∞` for lossless reconstructions.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub n_images: usize,
    pub compression_ratio: Option<f64>,
    pub transfer: Option<TransferSummary>,
}

impl MetricsReport {
    /// Aggregates per-image `(mse, ssim)` pairs. MSE and SSIM are averaged;
    /// PSNR is derived from the mean MSE so the two always agree.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("cannot build a metrics report from zero images".into()));
        }
        let n = pairs.len() as f64;
        let mse = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let ssim = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        Ok(MetricsReport {
            psnr: psnr_from_mse(mse, DATA_RANGE),
            ssim,
            mse,
            n_images: pairs.len(),
            compression_ratio: None,
            transfer: None,
        })
    }

    pub fn compare(original: &Tensor, candidate: &Tensor) -> Result<Self> {
        Self::from_pairs(&[(mse(original, candidate)?, ssim(original, candidate)?)])
    }
}

/// Encodes and decodes each `3×H×W` image and averages the quality metrics.
pub fn evaluate_model(params: &ModelParams, images: &[Tensor]) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let pairs = images
        .iter()
        .map(|img| {
            let x = Tensor::stack(&[img])?;
            let d = model::decode(&model::encode(&x, params)?, params)?;
            Ok((mse(&x, &d)?, ssim(&x, &d)?))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_pairs(&pairs)
}

pub fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// A quality table with a leading label column: `label,psnr,ssim,mse` as
/// CSV or as aligned text.
#[derive(Clone, Debug)]
pub struct QualityTable {
    pub label: String,
    pub metric_names: [&'static str; 3],
    pub rows: Vec<(String, MetricsReport)>,
}

impl QualityTable {
    pub fn new(label: impl Into<String>) -> Self {
        Self::with_metric_names(label, ["psnr", "ssim", "mse"])
    }

    /// Same table with custom headers for the three metric columns.
    pub fn with_metric_names(label: impl Into<String>, metric_names: [&'static str; 3]) -> Self {
        QualityTable {
            label: label.into(),
            metric_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, key: impl Into<String>, report: MetricsReport) {
        self.rows.push((key.into(), report));
    }

    pub fn csv_header(&self) -> String {
        let [p, s, m] = self.metric_names;
        format!("{},{p},{s},{m}", self.label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.csv_header();
        s.push('\n');
        for (key, r) in &self.rows {
            let _ = writeln!(s, "{key},{},{},{}", format_metric(r.psnr), format_metric(r.ssim), format_metric(r.mse));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let key_width = self
            .rows
            .iter()
            .map(|(k, _)| k.len())
            .chain([self.label.len()])
            .max()
            .unwrap_or(0);
        let mut s = format!("{:<key_width$}  {:>10}  {:>8}  {:>10}\n", self.label, "PSNR", "SSIM", "MSE");
        for (key, r) in &self.rows {
            let psnr = if r.psnr.is_infinite() { "inf".to_string() } else { format!("{:.4}", r.psnr) };
            let _ = writeln!(s, "{key:<key_width$}  {psnr:>10}  {:>8.4}  {:>10.6}", r.ssim, r.mse);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn mse_values() {
        let a = random(&[3, 8, 8], 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&Tensor::full(&[3, 4, 4], 1.0), &Tensor::zeros(&[3, 4, 4])).unwrap(), 1.0);
    }

    #[test]
    fn psnr_values() {
        assert!((psnr_from_mse(0.0002, 1.0) - 36.9897).abs() < 1e-4);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let a = random(&[3, 4, 4], 2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random(&[3, 16, 16], 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        // Keep values away from mid-gray so the inverse has opposite structure.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..3 * 16 * 16)
            .map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 0.1 } else { 0.9 })
            .collect();
        let b = Tensor::new(vec![3, 16, 16], data).unwrap();
        let neg = Tensor::new(b.shape().to_vec(), b.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&b, &neg).unwrap() < 0.0);
        assert!(ssim(&Tensor::zeros(&[3, 8, 8]), &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn report_is_consistent() {
        let r = MetricsReport::from_pairs(&[(0.01, 0.9), (0.03, 0.8)]).unwrap();
        assert!((r.mse - 0.02).abs() < 1e-12);
        assert!((r.psnr - psnr_from_mse(0.02, 1.0)).abs() < 1e-6);
        assert!((r.ssim - 0.85).abs() < 1e-12);
        assert!(MetricsReport::from_pairs(&[]).is_err());
        assert!(evaluate_model(&crate::model::init_params(0), &[]).is_err());
    }

    #[test]
    fn table_formats() {
        let mut t = QualityTable::new("batch_size");
        t.push("8", MetricsReport::from_pairs(&[(0.0, 1.0)]).unwrap());
        let csv = t.to_csv();
        assert!(csv.starts_with("batch_size,psnr,ssim,mse\n8,inf,1.000000,0.000000"));
        assert!(t.to_text().contains("PSNR"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let a = random(&[3, 12, 14], seed);
            let b = random(&[3, 12, 14], seed.wrapping_add(1));
            let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab <= 1.0);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-8f64..1.0, m2 in 1e-8f64..1.0) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1, 1.0) > psnr_from_mse(m2, 1.0));
        }

        #[test]
        fn mse_invariant_under_shared_permutation(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = random(&[48], seed);
            let b = random(&[48], seed ^ 0xff);
            let mut order: Vec<usize> = (0..48).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pa = Tensor::new(vec![48], order.iter().map(|&i| a.data()[i]).collect()).unwrap();
            let pb = Tensor::new(vec![48], order.iter().map(|&i| b.data()[i]).collect()).unwrap();
            prop_assert!((mse(&a, &b).unwrap() - mse(&pa, &pb).unwrap()).abs() < 1e-12);
        }
    }
}
