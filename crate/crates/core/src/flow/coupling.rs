use rand::Rng;

use super::{normal_tensor, param_input, Direction, FlowLayer, Flowed};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Scale is `sigmoid(h - SCALE_SHIFT) + SCALE_OFFSET`, bounded to (0.6, 1.6).
pub const SCALE_SHIFT: f64 = 0.1;
pub const SCALE_OFFSET: f64 = 0.6;

/// Affine coupling: the first half of the channels passes through unchanged
/// and conditions a small convolutional network that scales and shifts the
/// second half.
///
/// The network is conv3 -> relu -> conv1 -> relu -> conv3; its last layer
/// emits `C` channels, the first `C/2` being scale logits and the rest the
/// shift.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    name: String,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl AffineCoupling {
    /// He-initialised hidden layers and a zero output layer.
    pub fn new(name: &str, channels: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "affine coupling needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(Self {
            name: name.to_string(),
            w1: normal_tensor(rng, &[3, 3, 3, half, width], (2.0 / (27 * half) as f64).sqrt()),
            b1: Tensor::zeros(&[width]),
            w2: normal_tensor(rng, &[1, 1, 1, width, width], (2.0 / width as f64).sqrt()),
            b2: Tensor::zeros(&[width]),
            w3: Tensor::zeros(&[3, 3, 3, width, channels]),
            b3: Tensor::zeros(&[channels]),
        })
    }

    pub fn channels(&self) -> usize {
        self.b3.len()
    }

    /// Zeroes the output layer and biases the scale logits so that the layer
    /// is the identity map (scale 1, shift 0).
    pub fn set_identity(&mut self) {
        let c = self.channels();
        let logit = (0.4f64 / 0.6).ln() + SCALE_SHIFT;
        let mut b3 = vec![0.0; c];
        b3[..c / 2].iter_mut().for_each(|b| *b = logit);
        self.w3 = Tensor::zeros(self.w3.shape());
        self.b3 = Tensor::from_raw(&[c], b3);
    }

    /// Sets every output-layer weight and bias to the given constants.
    pub fn set_output_layer(&mut self, weight: f64, scale_bias: f64, shift_bias: f64) {
        let c = self.channels();
        self.w3 = Tensor::full(self.w3.shape(), weight);
        let b3 = (0..c)
            .map(|i| if i < c / 2 { scale_bias } else { shift_bias })
            .collect();
        self.b3 = Tensor::from_raw(&[c], b3);
    }

    fn names(&self) -> [String; 6] {
        ["w1", "b1", "w2", "b2", "w3", "b3"].map(|f| format!("{}.{f}", self.name))
    }

    /// Scale and shift nodes computed from the conditioning half.
    fn scale_shift(&self, g: &mut Graph, cond: NodeId) -> Result<(NodeId, NodeId)> {
        let names = self.names();
        let tensors = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3];
        let mut p = Vec::with_capacity(6);
        for (n, t) in names.iter().zip(tensors) {
            p.push(param_input(g, n, t)?);
        }
        let h = g.conv3d(cond, p[0], Some(p[1]))?;
        let h = g.relu(h);
        let h = g.conv3d(h, p[2], Some(p[3]))?;
        let h = g.relu(h);
        let out = g.conv3d(h, p[4], Some(p[5]))?;
        let half = self.channels() / 2;
        let logits = g.slice_channels(out, 0, half)?;
        let shift = g.slice_channels(out, half, 2 * half)?;
        let shifted = g.add_scalar(logits, -SCALE_SHIFT);
        let sig = g.sigmoid(shifted);
        let scale = g.add_scalar(sig, SCALE_OFFSET);
        Ok((scale, shift))
    }
}

impl FlowLayer for AffineCoupling {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let tensors = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3];
        self.names().into_iter().zip(tensors).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = self.names();
        let tensors = [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ];
        names.into_iter().zip(tensors).collect()
    }

    fn build(&self, g: &mut Graph, x: NodeId, dir: Direction) -> Result<Flowed> {
        let shape = g.shape(x).to_vec();
        let c = self.channels();
        if shape.len() != 4 || shape[3] != c {
            return Err(Error::Shape(format!(
                "coupling `{}` with {c} channels applied to {shape:?}",
                self.name
            )));
        }
        let prev = g.set_scope(&self.name);
        let half = c / 2;
        let cond = g.slice_channels(x, 0, half)?;
        let rest = g.slice_channels(x, half, c)?;
        let (scale, shift) = self.scale_shift(g, cond)?;
        let log_scale = g.ln(scale);
        let sum_log = g.sum_all(log_scale);
        let (transformed, logdet) = match dir {
            Direction::Forward => {
                let scaled = g.mul(rest, scale)?;
                (g.add(scaled, shift)?, sum_log)
            }
            Direction::Inverse => {
                let unshifted = g.sub(rest, shift)?;
                (g.div(unshifted, scale)?, g.neg(sum_log))
            }
        };
        let value = g.concat_channels(&[cond, transformed])?;
        g.set_scope(&prev);
        Ok(Flowed {
            value,
            logdet: Some(logdet),
        })
    }
}
