//! Reconstruction quality: SSIM with a uniform 7-wide window over the 3D
//! volume, and PSNR, both for a data range of 255.

use crate::data::Volume;
use crate::error::{Error, Result};

pub const DATA_RANGE: f64 = 255.0;
pub const WINDOW: usize = 7;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Inclusive prefix sums over a `(d, h, w)` grid, padded by one on each
/// axis, so any box sum is eight lookups.
struct BoxSums {
    h: usize,
    w: usize,
    table: Vec<f64>,
}

impl BoxSums {
    fn new(values: impl Fn(usize) -> f64, [d, h, w]: [usize; 3]) -> Self {
        let (hp, wp) = (h + 1, w + 1);
        let mut table = vec![0.0; (d + 1) * hp * wp];
        for z in 0..d {
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += values((z * h + y) * w + x);
                    let i = ((z + 1) * hp + y + 1) * wp + x + 1;
                    table[i] = row + table[i - wp] + table[i - hp * wp] - table[i - hp * wp - wp];
                }
            }
        }
        Self { h, w, table }
    }

    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.table[(z * (self.h + 1) + y) * (self.w + 1) + x]
    }

    /// Sum over `[z0, z1) x [y0, y1) x [x0, x1)`.
    fn sum(&self, [z0, y0, x0]: [usize; 3], [z1, y1, x1]: [usize; 3]) -> f64 {
        self.at(z1, y1, x1) - self.at(z0, y1, x1) - self.at(z1, y0, x1) - self.at(z1, y1, x0)
            + self.at(z0, y0, x1)
            + self.at(z0, y1, x0)
            + self.at(z1, y0, x0)
            - self.at(z0, y0, x0)
    }
}

/// Mean SSIM over every window of size `win` that lies fully inside the
/// grid (the edge crop), averaged over channels.
fn ssim_windows(a: &Volume, b: &Volume, win: [usize; 3]) -> Result<f64> {
    check_shapes(a, b)?;
    let [d, h, w, c] = a.shape();
    let dims = [d, h, w];
    if dims.iter().zip(&win).any(|(&n, &k)| n < k) {
        return Err(Error::Shape(format!(
            "SSIM needs every axis >= {} voxels, got {:?}",
            WINDOW,
            a.shape()
        )));
    }
    let np = win.iter().product::<usize>() as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (K1 * DATA_RANGE).powi(2);
    let c2 = (K2 * DATA_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (xa, xb) = (a.data(), b.data());
        let idx = |i: usize| i * c + ch;
        let sx = BoxSums::new(|i| xa[idx(i)], dims);
        let sy = BoxSums::new(|i| xb[idx(i)], dims);
        let sxx = BoxSums::new(|i| xa[idx(i)] * xa[idx(i)], dims);
        let syy = BoxSums::new(|i| xb[idx(i)] * xb[idx(i)], dims);
        let sxy = BoxSums::new(|i| xa[idx(i)] * xb[idx(i)], dims);
        for z in 0..=d - win[0] {
            for y in 0..=h - win[1] {
                for x in 0..=w - win[2] {
                    let lo = [z, y, x];
                    let hi = [z + win[0], y + win[1], x + win[2]];
                    let ux = sx.sum(lo, hi) / np;
                    let uy = sy.sum(lo, hi) / np;
                    let vx = cov_norm * (sxx.sum(lo, hi) / np - ux * ux);
                    let vy = cov_norm * (syy.sum(lo, hi) / np - uy * uy);
                    let vxy = cov_norm * (sxy.sum(lo, hi) / np - ux * uy);
                    let num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2);
                    let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Volumetric SSIM with 7x7x7 windows.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    if a == b {
        check_shapes(a, b)?;
        if a.shape()[..3].iter().any(|&n| n < WINDOW) {
            return Err(Error::Shape(format!("SSIM needs every axis >= {WINDOW} voxels")));
        }
        return Ok(1.0);
    }
    ssim_windows(a, b, [WINDOW, WINDOW, WINDOW])
}

/// Mean of 2D SSIM (7x7 windows) over the axial slices `y[:, h, :]`.
pub fn ssim_axial_slices(a: &Volume, b: &Volume) -> Result<f64> {
    ssim_windows(a, b, [WINDOW, 1, WINDOW])
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(255^2 / MSE)`; `+inf` for identical volumes.
pub fn psnr(a: &Volume, b: &Volume) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    pub ssim: f64,
    pub psnr: f64,
}

/// Per-case SSIM / PSNR with population mean and standard deviation
/// (`ddof = 0`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn push(&mut self, case: impl Into<String>, reference: &Volume, estimate: &Volume) -> Result<()> {
        self.cases.push(CaseMetrics {
            case: case.into(),
            ssim: ssim(reference, estimate)?,
            psnr: psnr(reference, estimate)?,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn ssim_mean_std(&self) -> (f64, f64) {
        mean_std(self.cases.iter().map(|c| c.ssim))
    }

    pub fn psnr_mean_std(&self) -> (f64, f64) {
        mean_std(self.cases.iter().map(|c| c.psnr))
    }

    /// Per-case rows, tab-separated, with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("case\tssim\tpsnr_db\n");
        for c in &self.cases {
            out.push_str(&format!("{}\t{:.6}\t{:.4}\n", c.case, c.ssim, c.psnr));
        }
        out
    }

    /// `label<TAB>ssim_mean (ssim_std)<TAB>psnr_mean (psnr_std)`.
    pub fn summary_line(&self, label: &str) -> String {
        let (sm, ss) = self.ssim_mean_std();
        let (pm, ps) = self.psnr_mean_std();
        format!("{label}\t{sm:.3} ({ss:.4})\t{pm:.1} ({ps:.2})")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_closed_forms() {
        let a = Volume::constant([8, 8, 8, 1], 0.0);
        let b = Volume::constant([8, 8, 8, 1], 255.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let s = ssim(&a, &b).unwrap();
        assert!((s - c1 / (255.0 * 255.0 + c1)).abs() < 1e-15);
        assert!((s - 1.0e-4).abs() < 1e-6);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(255.0 * 255.0 / 10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn small_volumes_are_rejected() {
        let a = Volume::constant([6, 8, 8, 1], 1.0);
        assert!(ssim(&a, &a.clamped()).is_err());
        let b = Volume::constant([8, 8, 8, 1], 1.0);
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn summary_formatting() {
        let mut r = MetricReport::default();
        r.cases.push(CaseMetrics { case: "a".into(), ssim: 0.9, psnr: 24.0 });
        r.cases.push(CaseMetrics { case: "b".into(), ssim: 0.8, psnr: 26.0 });
        assert_eq!(r.summary_line("biplanar"), "biplanar\t0.850 (0.0500)\t25.0 (1.00)");
        assert!(r.to_tsv().starts_with("case\tssim\tpsnr_db\n"));
    }
}
