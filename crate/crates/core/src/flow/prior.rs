use super::{bindings_for, gaussian_log_prob, param_input};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Factors out half of the channels at the end of a level and scores them
/// under a Gaussian.
///
/// When `conditional`, the mean and log-scale come from a zero-initialised
/// 3x3x3 convolution of the kept half; otherwise the prior is the standard
/// normal.
#[derive(Clone, Debug)]
pub struct SplitPrior {
    name: String,
    channels: usize,
    conditional: bool,
    weight: Tensor,
    bias: Tensor,
}

/// Graph handles produced by [`SplitPrior::build_split`].
#[derive(Clone, Copy, Debug)]
pub struct SplitNodes {
    pub kept: NodeId,
    pub z: NodeId,
    pub logp: NodeId,
}

impl SplitPrior {
    pub fn new(name: &str, channels: usize, conditional: bool) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Shape(format!("split needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(Self {
            name: name.to_string(),
            channels,
            conditional,
            weight: Tensor::zeros(&[3, 3, 3, half, channels]),
            bias: Tensor::zeros(&[channels]),
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        if !self.conditional {
            return Vec::new();
        }
        vec![
            (format!("{}.weight", self.name), &self.weight),
            (format!("{}.bias", self.name), &self.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        if !self.conditional {
            return Vec::new();
        }
        vec![
            (format!("{}.weight", self.name), &mut self.weight),
            (format!("{}.bias", self.name), &mut self.bias),
        ]
    }

    /// Mean and log-scale nodes of the prior over the factored half.
    pub fn build_prior(&self, g: &mut Graph, kept: NodeId) -> Result<(Option<NodeId>, Option<NodeId>)> {
        if !self.conditional {
            return Ok((None, None));
        }
        let w = param_input(g, &format!("{}.weight", self.name), &self.weight)?;
        let b = param_input(g, &format!("{}.bias", self.name), &self.bias)?;
        let h = g.conv3d(kept, w, Some(b))?;
        let half = self.channels / 2;
        let mean = g.slice_channels(h, 0, half)?;
        let logs = g.slice_channels(h, half, self.channels)?;
        Ok((Some(mean), Some(logs)))
    }

    fn check(&self, g: &Graph, x: NodeId) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[3] != self.channels {
            return Err(Error::Shape(format!(
                "split `{}` with {} channels applied to {s:?}",
                self.name, self.channels
            )));
        }
        Ok(())
    }

    pub fn build_split(&self, g: &mut Graph, x: NodeId) -> Result<SplitNodes> {
        self.check(g, x)?;
        let prev = g.set_scope(&self.name);
        let half = self.channels / 2;
        let kept = g.slice_channels(x, 0, half)?;
        let z = g.slice_channels(x, half, self.channels)?;
        let (mean, logs) = self.build_prior(g, kept)?;
        let logp = gaussian_log_prob(g, z, mean, logs)?;
        g.set_scope(&prev);
        Ok(SplitNodes { kept, z, logp })
    }

    /// Re-attaches `z` to the kept half; also returns the log-density of `z`.
    pub fn build_merge(&self, g: &mut Graph, kept: NodeId, z: NodeId) -> Result<(NodeId, NodeId)> {
        let prev = g.set_scope(&self.name);
        let merged = g.concat_channels(&[kept, z])?;
        self.check(g, merged)?;
        let (mean, logs) = self.build_prior(g, kept)?;
        let logp = gaussian_log_prob(g, z, mean, logs)?;
        g.set_scope(&prev);
        Ok((merged, logp))
    }

    /// Eager split into `(kept, z, log p(z | kept))`.
    pub fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor, f64)> {
        let mut g = Graph::new();
        let xi = g.input("x", x.shape())?;
        let nodes = self.build_split(&mut g, xi)?;
        let mut b = bindings_for(self.params());
        b.insert("x".into(), x.clone());
        let v = g.forward_eval(&b)?;
        Ok((v.get(nodes.kept).clone(), v.get(nodes.z).clone(), v.get(nodes.logp).item()))
    }

    pub fn merge(&self, kept: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let k = g.input("kept", kept.shape())?;
        let zi = g.input("z", z.shape())?;
        let (m, _) = self.build_merge(&mut g, k, zi)?;
        let mut b = bindings_for(self.params());
        b.insert("kept".into(), kept.clone());
        b.insert("z".into(), z.clone());
        Ok(g.forward_eval(&b)?.get(m).clone())
    }

    /// Prior mean and log-scale tensors for the factored half given `kept`.
    pub fn prior_params(&self, kept: &Tensor) -> Result<(Tensor, Tensor)> {
        if !self.conditional {
            let mut shape = kept.shape().to_vec();
            *shape.last_mut().unwrap() = self.channels / 2;
            return Ok((Tensor::zeros(&shape), Tensor::zeros(&shape)));
        }
        let mut g = Graph::new();
        let k = g.input("kept", kept.shape())?;
        let (mean, logs) = self.build_prior(&mut g, k)?;
        let mut b = bindings_for(self.params());
        b.insert("kept".into(), kept.clone());
        let v = g.forward_eval(&b)?;
        Ok((v.get(mean.unwrap()).clone(), v.get(logs.unwrap()).clone()))
    }
}

/// Prior over the top-level latent: a learned per-element Gaussian
/// (zero-initialised, so it starts as the standard normal) or the fixed
/// standard normal.
#[derive(Clone, Debug)]
pub struct TopPrior {
    name: String,
    learned: bool,
    mean: Tensor,
    logs: Tensor,
}

impl TopPrior {
    pub fn new(name: &str, shape: &[usize], learned: bool) -> Self {
        Self {
            name: name.to_string(),
            learned,
            mean: Tensor::zeros(shape),
            logs: Tensor::zeros(shape),
        }
    }

    /// A learned prior with explicit mean and log-scale.
    pub fn with_params(name: &str, mean: Tensor, logs: Tensor) -> Result<Self> {
        if mean.shape() != logs.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", mean.shape(), logs.shape())));
        }
        Ok(Self {
            name: name.to_string(),
            learned: true,
            mean,
            logs,
        })
    }

    pub fn is_learned(&self) -> bool {
        self.learned
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn logs(&self) -> &Tensor {
        &self.logs
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        if !self.learned {
            return Vec::new();
        }
        vec![
            (format!("{}.mean", self.name), &self.mean),
            (format!("{}.logs", self.name), &self.logs),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        if !self.learned {
            return Vec::new();
        }
        vec![
            (format!("{}.mean", self.name), &mut self.mean),
            (format!("{}.logs", self.name), &mut self.logs),
        ]
    }

    pub fn build_log_prob(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        if g.shape(z) != self.mean.shape() {
            return Err(Error::Shape(format!(
                "top latent {:?}, prior {:?}",
                g.shape(z),
                self.mean.shape()
            )));
        }
        let prev = g.set_scope(&self.name);
        let out = if self.learned {
            let m = param_input(g, &format!("{}.mean", self.name), &self.mean)?;
            let s = param_input(g, &format!("{}.logs", self.name), &self.logs)?;
            gaussian_log_prob(g, z, Some(m), Some(s))
        } else {
            gaussian_log_prob(g, z, None, None)
        };
        g.set_scope(&prev);
        out
    }

    pub fn log_prob(&self, z: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let zi = g.input("z", z.shape())?;
        let lp = self.build_log_prob(&mut g, zi)?;
        let mut b = bindings_for(self.params());
        b.insert("z".into(), z.clone());
        Ok(g.forward_eval(&b)?.get(lp).item())
    }
}
