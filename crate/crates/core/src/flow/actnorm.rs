use super::{param_input, Direction, FlowLayer, Flowed};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Per-channel affine normalisation `y = s * (x + b)` with data-dependent
/// initialisation. The scale is stored as `log s`, so it is always positive
/// once initialised.
#[derive(Clone, Debug)]
pub struct ActNorm {
    name: String,
    logs: Tensor,
    bias: Tensor,
    initialized: bool,
}

impl ActNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            logs: Tensor::zeros(&[channels]),
            bias: Tensor::zeros(&[channels]),
            initialized: false,
        }
    }

    /// An initialised layer with explicit scale and bias.
    pub fn with_params(name: &str, scale: &[f64], bias: &[f64]) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::Shape(format!(
                "actnorm scale has {} channels, bias {}",
                scale.len(),
                bias.len()
            )));
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidParam(format!("actnorm scale {s} is not positive")));
        }
        let c = scale.len();
        Ok(Self {
            name: name.to_string(),
            logs: Tensor::new(&[c], scale.iter().map(|s| s.ln()).collect())?,
            bias: Tensor::new(&[c], bias.to_vec())?,
            initialized: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.logs.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn scale(&self) -> Vec<f64> {
        self.logs.data().iter().map(|l| l.exp()).collect()
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.data()
    }

    /// Sets bias and scale so that the batch has zero mean and unit variance
    /// per channel after the layer.
    pub fn initialize(&mut self, batch: &[&Tensor]) -> Result<()> {
        let c = self.channels();
        let mut count = 0usize;
        let mut sum = vec![0.0; c];
        for x in batch {
            if x.shape().last() != Some(&c) {
                return Err(Error::Shape(format!(
                    "actnorm `{}` expects {c} channels, got {:?}",
                    self.name,
                    x.shape()
                )));
            }
            for row in x.data().chunks_exact(c) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidParam("actnorm initialisation on an empty batch".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; c];
        for x in batch {
            for row in x.data().chunks_exact(c) {
                for ((v, m), x) in var.iter_mut().zip(&mean).zip(row) {
                    *v += (x - m).powi(2);
                }
            }
        }
        let logs: Vec<f64> = var
            .iter()
            .map(|v| -0.5 * (v / count as f64 + 1e-12).ln())
            .collect();
        self.bias = Tensor::new(&[c], mean.iter().map(|m| -m).collect())?;
        self.logs = Tensor::new(&[c], logs)?;
        self.initialized = true;
        Ok(())
    }
}

impl FlowLayer for ActNorm {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.logs", self.name), &self.logs),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.logs", self.name), &mut self.logs),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }

    fn build(&self, g: &mut Graph, x: NodeId, dir: Direction) -> Result<Flowed> {
        if !self.initialized {
            return Err(Error::Uninitialized(format!("actnorm `{}`", self.name)));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.channels() {
            return Err(Error::Shape(format!(
                "actnorm `{}` with {} channels applied to {shape:?}",
                self.name,
                self.channels()
            )));
        }
        let prev = g.set_scope(&self.name);
        let logs = param_input(g, &format!("{}.logs", self.name), &self.logs)?;
        let bias = param_input(g, &format!("{}.bias", self.name), &self.bias)?;
        let bias_b = g.broadcast_to(bias, &shape)?;
        let spatial = (shape[0] * shape[1] * shape[2]) as f64;
        let sum_logs = g.sum_all(logs);
        let (value, logdet) = match dir {
            Direction::Forward => {
                let scale = g.exp(logs);
                let scale_b = g.broadcast_to(scale, &shape)?;
                let shifted = g.add(x, bias_b)?;
                (g.mul(shifted, scale_b)?, g.mul_scalar(sum_logs, spatial))
            }
            Direction::Inverse => {
                let neg = g.neg(logs);
                let inv_scale = g.exp(neg);
                let inv_b = g.broadcast_to(inv_scale, &shape)?;
                let unscaled = g.mul(x, inv_b)?;
                (g.sub(unscaled, bias_b)?, g.mul_scalar(sum_logs, -spatial))
            }
        };
        g.set_scope(&prev);
        Ok(Flowed {
            value,
            logdet: Some(logdet),
        })
    }
}
