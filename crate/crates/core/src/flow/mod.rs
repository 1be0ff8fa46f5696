//! Invertible layers of the multi-scale flow. Every layer can add itself to a
//! [`Graph`] in either direction and reports the log-determinant of the
//! Jacobian of the map it builds.
//!
//! Direction convention: [`Direction::Forward`] maps data towards the latent
//! space (the encoder); [`Direction::Inverse`] maps latents back to data. The
//! log-determinant returned for the inverse direction is the negation of the
//! forward one.

mod actnorm;
mod coupling;
mod invconv;
mod prior;
mod squeeze;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

pub use actnorm::ActNorm;
pub use coupling::{AffineCoupling, SCALE_OFFSET, SCALE_SHIFT};
pub use invconv::{InvConv1x1x1, SINGULARITY_FLOOR};
pub use prior::{SplitPrior, TopPrior};
pub use squeeze::{squeeze3d, Squeeze};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Eager result of applying a layer: output value and its log-determinant.
#[derive(Clone, Debug)]
pub struct LayerIO {
    pub value: Tensor,
    pub logdet: f64,
}

/// Graph handles produced when a layer is built. `logdet` is `None` for
/// volume-preserving layers.
#[derive(Clone, Copy, Debug)]
pub struct Flowed {
    pub value: NodeId,
    pub logdet: Option<NodeId>,
}

pub trait FlowLayer {
    fn name(&self) -> &str;

    fn params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn build(&self, g: &mut Graph, x: NodeId, dir: Direction) -> Result<Flowed>;

    /// Builds a one-layer graph and evaluates it.
    fn apply(&self, x: &Tensor, dir: Direction) -> Result<LayerIO> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        let out = self.build(&mut g, xi, dir)?;
        let mut bindings = bindings_for(self.params());
        bindings.insert("x".into(), x.clone());
        let vals = g.forward_eval(&bindings)?;
        Ok(LayerIO {
            value: vals.get(out.value).clone(),
            logdet: out.logdet.map_or(0.0, |id| vals.get(id).item()),
        })
    }
}

pub(crate) fn bindings_for(params: Vec<(String, &Tensor)>) -> Bindings {
    params.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

pub(crate) fn param_input(g: &mut Graph, name: &str, t: &Tensor) -> Result<NodeId> {
    g.input(name, t.shape())
}

/// Log-density of `z` under a diagonal Gaussian. `None` for the mean and
/// log-scale means the standard normal.
pub fn gaussian_log_prob(
    g: &mut Graph,
    z: NodeId,
    mean: Option<NodeId>,
    logs: Option<NodeId>,
) -> Result<NodeId> {
    let dim = g.shape(z).iter().product::<usize>() as f64;
    let constant = -0.5 * dim * (2.0 * PI).ln();
    let centered = match mean {
        Some(m) => g.sub(z, m)?,
        None => z,
    };
    let lp = match logs {
        None => {
            let q = g.squared_norm(centered);
            g.mul_scalar(q, -0.5)
        }
        Some(ls) => {
            let sq = g.square(centered);
            let neg2 = g.mul_scalar(ls, -2.0);
            let inv_var = g.exp(neg2);
            let scaled = g.mul(sq, inv_var)?;
            let q = g.sum_all(scaled);
            let half_q = g.mul_scalar(q, -0.5);
            let sum_logs = g.sum_all(ls);
            g.sub(half_q, sum_logs)?
        }
    };
    Ok(g.add_scalar(lp, constant))
}

/// Standard-normal log-density, `-(dim/2) ln(2 pi) - |z|^2 / 2`.
pub fn standard_normal_log_prob(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_raw(shape, data)
}
