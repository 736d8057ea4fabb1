//! Image-quality measures for albedo and shading predictions.
//!
//! * `mse` / `rmse`: plain, unaligned.
//! * `lmse`: local scale-invariant MSE. Over windows of size `window` placed
//!   every `stride` pixels, each prediction window is rescaled by the
//!   least-squares factor `<gt, pred> / <pred, pred>` (zero for an all-zero
//!   window); the summed residual energy is divided by the summed ground-truth
//!   energy of the same windows. Multi-channel inputs share one factor per
//!   window across channels.
//! * `ssim`: mean of the local SSIM map over valid 11x11 Gaussian windows
//!   (sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1), averaged over channels.
//! * `dssim = (1 - ssim) / 2`.

use crate::error::{Error, Result};
use crate::image_plane::ImagePlane;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    pred.ensure_same_shape(gt, "mse")?;
    let n = pred.data().len().max(1);
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum::<f64>()
        / n as f64)
}

pub fn rmse(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    Ok(mse(pred, gt)?.sqrt())
}

/// Window and stride for a `side`-pixel image: 20 and 10 at 256, scaled.
pub fn default_lmse_window(side: usize) -> (usize, usize) {
    let window = ((20.0 * side as f64 / 256.0).round() as usize).max(2);
    (window, (window / 2).max(1))
}

/// Summed-area table with a zero row/column, `(h + 1) x (w + 1)`.
struct Integral {
    w1: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let w1 = w + 1;
        let mut sums = vec![0.0; (h + 1) * w1];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + row;
            }
        }
        Self { w1, sums }
    }

    fn rect(&self, y: usize, x: usize, size: usize) -> f64 {
        let s = &self.sums;
        let w1 = self.w1;
        s[(y + size) * w1 + x + size] - s[y * w1 + x + size] - s[(y + size) * w1 + x] + s[y * w1 + x]
    }
}

pub fn lmse(pred: &ImagePlane, gt: &ImagePlane, window: usize, stride: usize) -> Result<f64> {
    pred.ensure_same_shape(gt, "lmse")?;
    let (h, w) = (gt.height(), gt.width());
    if window == 0 || stride == 0 || window > h.min(w) {
        return Err(Error::InvalidInput(format!(
            "lmse window {window} / stride {stride} invalid for {h}x{w}"
        )));
    }
    let c = gt.channels();
    let sum_over = |f: &dyn Fn(f64, f64) -> f64| {
        Integral::new(h, w, |y, x| {
            (0..c)
                .map(|ch| f(pred.get(ch, y, x) as f64, gt.get(ch, y, x) as f64))
                .sum()
        })
    };
    let pp = sum_over(&|p, _| p * p);
    let pg = sum_over(&|p, g| p * g);
    let gg = sum_over(&|_, g| g * g);

    let (mut err, mut energy) = (0.0, 0.0);
    for y in (0..=h - window).step_by(stride) {
        for x in (0..=w - window).step_by(stride) {
            let spp = pp.rect(y, x, window);
            let spg = pg.rect(y, x, window);
            let sgg = gg.rect(y, x, window);
            let alpha = if spp > 0.0 { spg / spp } else { 0.0 };
            err += (sgg - 2.0 * alpha * spg + alpha * alpha * spp).max(0.0);
            energy += sgg;
        }
    }
    Ok(if energy > 0.0 { err / energy } else { 0.0 })
}

/// LMSE with [`default_lmse_window`] parameters.
pub fn lmse_default(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    let (window, stride) = default_lmse_window(gt.height().min(gt.width()));
    lmse(pred, gt, window, stride)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h x w` field.
fn filter_valid(field: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * field[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    pred.ensure_same_shape(gt, "ssim")?;
    let (h, w) = (gt.height(), gt.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for ch in 0..gt.channels() {
        let a: Vec<f64> = pred.channel(ch).data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = gt.channel(ch).data().iter().map(|&v| v as f64).collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(&a, h, w, &taps);
        let mu_b = filter_valid(&b, h, w, &taps);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
        total += acc / n as f64;
    }
    Ok(total / gt.channels() as f64)
}

pub fn dssim(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    Ok((1.0 - ssim(pred, gt)?) / 2.0)
}

/// One row of a report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub mse: f64,
    pub rmse: f64,
    pub lmse: f64,
    pub ssim: f64,
    pub dssim: f64,
}

impl MetricRecord {
    pub fn compute(pred: &ImagePlane, gt: &ImagePlane) -> Result<Self> {
        let mse = mse(pred, gt)?;
        let ssim = ssim(pred, gt)?;
        Ok(Self {
            mse,
            rmse: mse.sqrt(),
            lmse: lmse_default(pred, gt)?,
            ssim,
            dssim: (1.0 - ssim) / 2.0,
        })
    }

    fn mean(rows: impl Iterator<Item = Self>) -> Self {
        let mut n = 0usize;
        let mut acc = [0.0; 5];
        for r in rows {
            n += 1;
            for (a, v) in acc.iter_mut().zip([r.mse, r.rmse, r.lmse, r.ssim, r.dssim]) {
                *a += v;
            }
        }
        let d = n.max(1) as f64;
        Self {
            mse: acc[0] / d,
            rmse: acc[1] / d,
            lmse: acc[2] / d,
            ssim: acc[3] / d,
            dssim: acc[4] / d,
        }
    }

    fn fields(&self) -> [f64; 5] {
        [self.mse, self.rmse, self.lmse, self.ssim, self.dssim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub stem: String,
    pub albedo: MetricRecord,
    pub shading: MetricRecord,
}

/// Per-image albedo and shading metrics with column means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "stem",
    "albedo_mse",
    "albedo_rmse",
    "albedo_lmse",
    "albedo_ssim",
    "albedo_dssim",
    "shading_mse",
    "shading_rmse",
    "shading_lmse",
    "shading_ssim",
    "shading_dssim",
];

impl MetricReport {
    pub fn push(
        &mut self,
        stem: impl Into<String>,
        albedo: (&ImagePlane, &ImagePlane),
        shading: (&ImagePlane, &ImagePlane),
    ) -> Result<()> {
        self.per_image.push(ImageMetrics {
            stem: stem.into(),
            albedo: MetricRecord::compute(albedo.0, albedo.1)?,
            shading: MetricRecord::compute(shading.0, shading.1)?,
        });
        Ok(())
    }

    pub fn aggregate(&self) -> (MetricRecord, MetricRecord) {
        (
            MetricRecord::mean(self.per_image.iter().map(|r| r.albedo)),
            MetricRecord::mean(self.per_image.iter().map(|r| r.shading)),
        )
    }

    /// CSV with [`REPORT_COLUMNS`] and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        let row = |stem: &str, a: &MetricRecord, b: &MetricRecord| {
            let vals: Vec<String> = a.fields().iter().chain(b.fields().iter()).map(|v| format!("{v:.8}")).collect();
            format!("{stem},{}\n", vals.join(","))
        };
        for r in &self.per_image {
            s.push_str(&row(&r.stem, &r.albedo, &r.shading));
        }
        let (a, b) = self.aggregate();
        s.push_str(&row("mean", &a, &b));
        s
    }

    pub fn to_table(&self) -> String {
        let (a, b) = self.aggregate();
        let mut s = format!("{} images\n", self.per_image.len());
        s.push_str(&format!("{:<8} {:>10} {:>10} {:>10} {:>10} {:>10}\n", "", "MSE", "RMSE", "LMSE", "SSIM", "DSSIM"));
        for (name, r) in [("albedo", a), ("shading", b)] {
            s.push_str(&format!(
                "{:<8} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>10.5}\n",
                name, r.mse, r.rmse, r.lmse, r.ssim, r.dssim
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: usize, side: usize, v: f32) -> ImagePlane {
        ImagePlane::filled(c, side, side, v)
    }

    #[test]
    fn mse_hand_values() {
        let a = constant(1, 4, 0.0);
        let b = constant(1, 4, 1.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
        let c = constant(1, 4, 0.1);
        assert!((mse(&c, &a).unwrap() - 0.01).abs() < 1e-9);
        assert!(mse(&a, &constant(3, 4, 0.0)).is_err());
    }

    #[test]
    fn lmse_hand_values() {
        let gt = ImagePlane::from_fn(1, 16, 16, |_, y, x| 0.1 + 0.05 * ((x * 7 + y * 3) % 11) as f32);
        for c in [0.1f32, 1.0, 7.3] {
            assert!(lmse(&gt.map(|v| v * c), &gt, 8, 4).unwrap() < 1e-12);
        }
        let zero = constant(1, 16, 0.0);
        assert!((lmse(&zero, &gt, 8, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!(lmse(&gt, &gt, 17, 4).is_err());
        assert!(lmse(&gt, &gt, 8, 0).is_err());
    }

    #[test]
    fn lmse_default_window_scales() {
        assert_eq!(default_lmse_window(256), (20, 10));
        assert_eq!(default_lmse_window(64), (5, 2));
    }

    #[test]
    fn ssim_hand_values() {
        let a = ImagePlane::from_fn(3, 16, 16, |c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(dssim(&a, &a).unwrap(), 0.0);
        let z = constant(1, 16, 0.0);
        let o = constant(1, 16, 1.0);
        let c1 = 1e-4;
        assert!((ssim(&z, &o).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&constant(1, 8, 0.0), &constant(1, 8, 0.0)).is_err());
    }

    #[test]
    fn report_rows_are_consistent() {
        let gt = ImagePlane::from_fn(1, 16, 16, |_, y, x| (y * 16 + x) as f32 / 256.0);
        let pred = gt.map(|v| (v + 0.05).min(1.0));
        let mut r = MetricReport::default();
        r.push("a", (&pred, &gt), (&pred, &gt)).unwrap();
        r.push("b", (&gt, &gt), (&gt, &gt)).unwrap();
        let row = &r.per_image[0].albedo;
        assert_eq!(row.rmse, row.mse.sqrt());
        assert_eq!(row.dssim, (1.0 - row.ssim) / 2.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("stem,albedo_mse"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
