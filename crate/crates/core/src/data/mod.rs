//! Volumes, projections and the dataset plumbing around them: CT windowing,
//! synthetic phantoms, DRR synthesis, external radiograph rescaling, and the
//! on-disk formats (VOL3 volumes, binary PGM images, TSV manifests).

mod drr;
mod io;
mod phantom;

pub use drr::{make_drr_pair, rescale_external_cxr, DrrStats};
pub use io::{
    Image, load_image, load_manifest, load_volume, save_image, save_manifest, save_slice_sheet, save_volume,
    split_for_seed, ManifestEntry, Split, VOL3_HEADER_LEN, VOL3_MAGIC, VOL3_VERSION,
};
pub use phantom::{generate_phantom, PhantomSpec};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lung window: `clip(255/1600 * (hu + 1000), 0, 255)`.
pub fn window_ct(hu: &Tensor) -> Tensor {
    hu.map(|v| (255.0 * (v + 1000.0) / 1600.0).clamp(0.0, 255.0))
}

/// Intensity volume `(D, H, W, C)` on the 0-255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    t: Tensor,
}

impl Volume {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("a volume needs 4 axes, got {:?}", t.shape())));
        }
        Ok(Self { t })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&shape, data)?)
    }

    pub fn constant(shape: [usize; 4], value: f64) -> Self {
        Self {
            t: Tensor::full(&shape, value),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.t.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    pub fn data(&self) -> &[f64] {
        self.t.data()
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn at(&self, d: usize, h: usize, w: usize, c: usize) -> f64 {
        let [_, hh, ww, cc] = self.shape();
        self.t.data()[((d * hh + h) * ww + w) * cc + c]
    }

    /// Copy with every voxel clipped to `[0, 255]`.
    pub fn clamped(&self) -> Volume {
        Volume {
            t: self.t.map(|v| v.clamp(0.0, 255.0)),
        }
    }

    /// Mid-plane slice of channel 0: axial `y[:, H/2, :]` as `(D, W)`,
    /// coronal `y[D/2]` as `(H, W)`, sagittal `y[:, :, W/2]` as `(D, H)`.
    pub fn mid_slice(&self, view: View) -> Tensor {
        let [d, h, w, _] = self.shape();
        let (rows, cols, f): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = match view {
            View::Axial => (d, w, Box::new(|r, c| self.at(r, h / 2, c, 0))),
            View::Coronal => (h, w, Box::new(|r, c| self.at(d / 2, r, c, 0))),
            View::Sagittal => (d, h, Box::new(|r, c| self.at(r, c, w / 2, 0))),
        };
        let data = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Tensor::from_raw(&[rows, cols], data)
    }
}

/// Anatomical slice orientation used for exported slice sheets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Coronal, View::Sagittal, View::Axial];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }
}

/// Projection plane: coronal images average over depth, sagittal images
/// over width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    Coronal,
    Sagittal,
}

impl Plane {
    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coronal" | "depth" => Ok(Plane::Coronal),
            "sagittal" | "width" => Ok(Plane::Sagittal),
            _ => Err(Error::Config(format!("unknown plane `{s}`"))),
        }
    }
}

/// 2D image on the 0-255 scale tagged with its plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pixels: Tensor,
    plane: Plane,
}

impl Projection {
    pub fn new(pixels: Tensor, plane: Plane) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(Error::Shape(format!("a projection needs 2 axes, got {:?}", pixels.shape())));
        }
        Ok(Self { pixels, plane })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.pixels.shape()[0], self.pixels.shape()[1]]
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Projection) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let n = self.data().len() as f64;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n)
    }
}
