//! Averaging projections from volumes to 2D images. `P_d` averages over the
//! depth axis and gives an `(H, W)` coronal image; `P_w` averages over the
//! width axis and gives a `(D, H)` sagittal image. Multi-channel volumes are
//! also averaged over channels.
//!
//! The eager functions evaluate the same graph the solver differentiates, so
//! DRRs made here match the solver's operator bit for bit.

use crate::data::{Plane, Projection, Volume};
use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

/// A differentiable volume-to-image map.
pub trait Projector: Send + Sync {
    fn plane(&self) -> Plane;

    /// Image shape for a `(D, H, W, C)` volume.
    fn output_shape(&self, volume: [usize; 4]) -> [usize; 2];

    /// Appends the projection of the volume node `y` to `g`.
    fn build(&self, g: &mut Graph, y: NodeId) -> Result<NodeId>;

    /// Transpose of the (linear) map applied to an image.
    fn adjoint(&self, x: &Tensor, volume: [usize; 4]) -> Result<Tensor>;

    fn project(&self, y: &Volume) -> Result<Projection> {
        let mut g = Graph::new();
        let yi = g.input("y", &y.shape())?;
        let out = self.build(&mut g, yi)?;
        let b: Bindings = [("y".to_string(), y.tensor().clone())].into_iter().collect();
        Projection::new(g.forward_eval(&b)?.get(out).clone(), self.plane())
    }
}

fn volume_shape(g: &Graph, y: NodeId) -> Result<[usize; 4]> {
    match *g.shape(y) {
        [d, h, w, c] => Ok([d, h, w, c]),
        ref s => Err(Error::Shape(format!("projection of a non-volume {s:?}"))),
    }
}

/// `P_d`: mean over depth (and channels).
#[derive(Clone, Copy, Debug, Default)]
pub struct DepthAverage;

/// `P_w`: mean over width (and channels).
#[derive(Clone, Copy, Debug, Default)]
pub struct WidthAverage;

impl Projector for DepthAverage {
    fn plane(&self) -> Plane {
        Plane::Coronal
    }

    fn output_shape(&self, [_, h, w, _]: [usize; 4]) -> [usize; 2] {
        [h, w]
    }

    fn build(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        volume_shape(g, y)?;
        g.mean(y, &[0, 3])
    }

    fn adjoint(&self, x: &Tensor, [d, h, w, c]: [usize; 4]) -> Result<Tensor> {
        if x.shape() != [h, w] {
            return Err(Error::Shape(format!("adjoint of {:?} into ({d},{h},{w},{c})", x.shape())));
        }
        let k = 1.0 / (d * c) as f64;
        let mut out = Vec::with_capacity(d * h * w * c);
        for _ in 0..d {
            for &v in x.data() {
                out.extend(std::iter::repeat_n(v * k, c));
            }
        }
        Tensor::new(&[d, h, w, c], out)
    }
}

impl Projector for WidthAverage {
    fn plane(&self) -> Plane {
        Plane::Sagittal
    }

    fn output_shape(&self, [d, h, _, _]: [usize; 4]) -> [usize; 2] {
        [d, h]
    }

    fn build(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        volume_shape(g, y)?;
        g.mean(y, &[2, 3])
    }

    fn adjoint(&self, x: &Tensor, [d, h, w, c]: [usize; 4]) -> Result<Tensor> {
        if x.shape() != [d, h] {
            return Err(Error::Shape(format!("adjoint of {:?} into ({d},{h},{w},{c})", x.shape())));
        }
        let k = 1.0 / (w * c) as f64;
        let mut out = Vec::with_capacity(d * h * w * c);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v * k, w * c));
        }
        Tensor::new(&[d, h, w, c], out)
    }
}

/// Projector for a plane.
pub fn projector(plane: Plane) -> &'static dyn Projector {
    match plane {
        Plane::Coronal => &DepthAverage,
        Plane::Sagittal => &WidthAverage,
    }
}

pub fn project_depth(y: &Volume) -> Projection {
    DepthAverage.project(y).expect("a volume always projects")
}

pub fn project_width(y: &Volume) -> Projection {
    WidthAverage.project(y).expect("a volume always projects")
}
