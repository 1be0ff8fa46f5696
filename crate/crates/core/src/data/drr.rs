use super::io::Image;
use super::{Plane, Projection, Volume};
use crate::error::{Error, Result};
use crate::projection::{project_depth, project_width};
use crate::tensor::Tensor;

/// Coronal (depth-averaged) and sagittal (width-averaged) DRRs of a volume.
pub fn make_drr_pair(y: &Volume) -> (Projection, Projection) {
    (project_depth(y), project_width(y))
}

/// Intensity statistics of a DRR population, used to map external
/// radiographs onto the DRR intensity scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrrStats {
    pub p01: f64,
    pub p50: f64,
    pub p99: f64,
}

/// Percentile with linear interpolation between order statistics.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted_pixels<'a>(images: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut all: Vec<f64> = images.into_iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    all
}

impl DrrStats {
    /// Pooled 1st, 50th and 99th percentiles over every pixel.
    pub fn from_projections(drrs: &[Projection]) -> Result<Self> {
        let all = sorted_pixels(drrs.iter().map(|p| p.data()));
        if all.is_empty() {
            return Err(Error::InvalidParam("DRR statistics of an empty population".into()));
        }
        Ok(Self {
            p01: percentile(&all, 1.0),
            p50: percentile(&all, 50.0),
            p99: percentile(&all, 99.0),
        })
    }
}

/// Box-filter resampling weights mapping `n` input cells onto `m` output
/// cells; each row lists `(input index, weight)` with weights summing to 1.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut row = Vec::new();
            let mut j = a.floor() as usize;
            while (j as f64) < b && j < n {
                let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((j, overlap / scale));
                }
                j += 1;
            }
            row
        })
        .collect()
}

/// Area-averaging resample of a row-major `(rows, cols)` image.
pub(crate) fn area_resample(data: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let rw = area_weights(rows, out_rows);
    let cw = area_weights(cols, out_cols);
    let mut tmp = vec![0.0; rows * out_cols];
    for r in 0..rows {
        for (oc, ws) in cw.iter().enumerate() {
            tmp[r * out_cols + oc] = ws.iter().map(|&(c, wt)| wt * data[r * cols + c]).sum();
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for (or, ws) in rw.iter().enumerate() {
        for oc in 0..out_cols {
            out[or * out_cols + oc] = ws.iter().map(|&(r, wt)| wt * tmp[r * out_cols + oc]).sum();
        }
    }
    out
}

/// Brings an external grayscale radiograph onto the DRR scale: area-average
/// down to `shape`, then map its 1st/99th percentiles linearly onto those of
/// the DRR population. A flat image (equal percentiles) becomes the
/// population median everywhere.
pub fn rescale_external_cxr(img: &Image, shape: [usize; 2], stats: &DrrStats) -> Result<Projection> {
    if img.channels != 1 {
        return Err(Error::Format(format!(
            "external radiograph must be grayscale, got {} channels",
            img.channels
        )));
    }
    if shape.contains(&0) || img.rows == 0 || img.cols == 0 {
        return Err(Error::Shape(format!("cannot resample {}x{} to {shape:?}", img.rows, img.cols)));
    }
    let small = area_resample(&img.data, img.rows, img.cols, shape[0], shape[1]);
    let sorted = sorted_pixels([small.as_slice()]);
    let (q01, q99) = (percentile(&sorted, 1.0), percentile(&sorted, 99.0));
    let mapped: Vec<f64> = if q99 - q01 <= f64::EPSILON * q99.abs().max(1.0) {
        vec![stats.p50; small.len()]
    } else {
        let gain = (stats.p99 - stats.p01) / (q99 - q01);
        small.iter().map(|v| ((v - q01) * gain + stats.p01).clamp(0.0, 255.0)).collect()
    };
    Projection::new(Tensor::new(&shape, mapped)?, Plane::Coronal)
}
