//! The multi-scale flow `y = g(z_1, .., z_L)`: `L` levels of
//! squeeze, `K` steps of (actnorm, invertible 1x1x1 convolution, affine
//! coupling), then a split that factors out half of the channels. The last
//! level has no split; its output is the top latent `z_L`.
//!
//! The model works on volumes in flow space (`x = v / 256 - 0.5` for voxel
//! values `v` on the 0-255 scale, see [`to_flow_space`]). Log-densities are
//! in nats over flow space; [`bits_per_dim`] converts them to bits per voxel
//! on the 0-255 scale.

mod checkpoint;
mod config;

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{
    bindings_for, normal_tensor, ActNorm, AffineCoupling, Direction, FlowLayer,
    InvConv1x1x1, SplitPrior, Squeeze, TopPrior,
};
use crate::tensor::{Bindings, Graph, NodeId, Tensor, Values};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

/// Name of the graph input that carries the volume.
pub const VOLUME_INPUT: &str = "y";

/// Name of the graph input carrying latent `z_j` (1-based `j`).
pub fn latent_input(j: usize) -> String {
    format!("z{j}")
}

/// Maps voxel values on the 0-255 scale to flow space.
pub fn to_flow_space(v: &Tensor) -> Tensor {
    v.map(|x| x / 256.0 - 0.5)
}

/// Inverse of [`to_flow_space`].
pub fn from_flow_space(x: &Tensor) -> Tensor {
    x.map(|x| (x + 0.5) * 256.0)
}

/// Bits per dimension of a flow-space log-density, expressed on the 0-255
/// scale.
pub fn bits_per_dim(log_prob: f64, dim: usize) -> f64 {
    -log_prob / (dim as f64 * LN_2) + 8.0
}

/// Latents `z_1 .. z_L`, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub levels: Vec<Tensor>,
}

impl LatentStack {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            levels: config.latent_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().map(Tensor::len).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.dims().iter().sum()
    }

    pub fn top(&self) -> &Tensor {
        self.levels.last().expect("empty latent stack")
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = config.latent_shapes();
        if want.len() != self.levels.len()
            || want.iter().zip(&self.levels).any(|(s, z)| z.shape() != s.as_slice())
        {
            return Err(Error::Shape(format!(
                "latent shapes {:?} do not match the model ({want:?})",
                self.levels.iter().map(|z| z.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

/// One flow step: actnorm, invertible 1x1x1 convolution, affine coupling.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1x1,
    pub coupling: AffineCoupling,
}

impl FlowStep {
    fn layers(&self) -> [&dyn FlowLayer; 3] {
        [&self.actnorm, &self.invconv, &self.coupling]
    }

    fn build(&self, g: &mut Graph, mut x: NodeId, dir: Direction, logdets: &mut Vec<NodeId>) -> Result<NodeId> {
        let mut layers = self.layers();
        if dir == Direction::Inverse {
            layers.reverse();
        }
        for layer in layers {
            let out = layer.build(g, x, dir)?;
            logdets.extend(out.logdet);
            x = out.value;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub steps: Vec<FlowStep>,
    /// `None` at the top level.
    pub split: Option<SplitPrior>,
}

/// Graph handles of an encoder built by [`FlowModel::build_encode`].
#[derive(Clone, Debug)]
pub struct EncodeNodes {
    pub latents: Vec<NodeId>,
    /// Per-level `log p(z_j)`.
    pub latent_log_probs: Vec<NodeId>,
    /// `log |det dz/dy|`.
    pub logdet: NodeId,
    pub log_prob: NodeId,
}

/// Graph handles of a decoder built by [`FlowModel::build_decode`].
#[derive(Clone, Debug)]
pub struct DecodeNodes {
    pub volume: NodeId,
    pub latent_log_probs: Vec<NodeId>,
    /// `log |det dz/dy|` at the decoded volume (the encoder's log-det).
    pub logdet: NodeId,
    /// `log p(y)` of the decoded volume.
    pub log_prob: NodeId,
    /// `log p(z_L)` under the top prior alone.
    pub top_log_prob: NodeId,
}

/// Log-density of a volume, raw and per dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogProb {
    pub nats: f64,
    pub bits_per_dim: f64,
}

/// The trainable bijection. Cloning yields an independent copy.
#[derive(Clone, Debug)]
pub struct FlowModel {
    config: ModelConfig,
    levels: Vec<Level>,
    top: TopPrior,
}

/// Adds scalar nodes left to right; zero when empty.
fn sum_scalars(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

impl FlowModel {
    /// Fresh model: random orthogonal 1x1x1 convolutions, He-initialised
    /// coupling hidden layers, zero coupling outputs and zero prior heads.
    /// Actnorm layers stay uninitialised until [`FlowModel::initialize`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.level_shapes();
        let mut levels = Vec::with_capacity(config.levels);
        for (l, shape) in shapes.iter().enumerate() {
            let c = shape[3];
            let mut steps = Vec::with_capacity(config.depth);
            for k in 0..config.depth {
                let prefix = format!("l{l}.s{k}");
                steps.push(FlowStep {
                    actnorm: ActNorm::new(&format!("{prefix}.actnorm"), c),
                    invconv: InvConv1x1x1::random(&format!("{prefix}.invconv"), c, &mut rng),
                    coupling: AffineCoupling::new(&format!("{prefix}.coupling"), c, config.width, &mut rng)?,
                });
            }
            let split = if l + 1 < config.levels {
                Some(SplitPrior::new(&format!("l{l}.split"), c, config.learn_split_prior)?)
            } else {
                None
            };
            levels.push(Level { steps, split });
        }
        let top_shape = *config.latent_shapes().last().unwrap();
        let top = TopPrior::new("top", &top_shape, config.learn_top);
        Ok(Self { config, levels, top })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Level] {
        &mut self.levels
    }

    pub fn top_prior(&self) -> &TopPrior {
        &self.top
    }

    pub fn is_initialized(&self) -> bool {
        self.levels
            .iter()
            .flat_map(|l| &l.steps)
            .all(|s| s.actnorm.is_initialized())
    }

    /// Parameters in declared order: level by level, step by step (actnorm,
    /// invconv, coupling), then the split prior, then the top prior.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for level in &self.levels {
            for step in &level.steps {
                out.extend(step.actnorm.params());
                out.extend(step.invconv.params());
                out.extend(step.coupling.params());
            }
            if let Some(split) = &level.split {
                out.extend(split.params());
            }
        }
        out.extend(self.top.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for level in &mut self.levels {
            for step in &mut level.steps {
                out.extend(step.actnorm.params_mut());
                out.extend(step.invconv.params_mut());
                out.extend(step.coupling.params_mut());
            }
            if let Some(split) = &mut level.split {
                out.extend(split.params_mut());
            }
        }
        out.extend(self.top.params_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every parameter bound by name, ready to extend with graph inputs.
    pub fn bindings(&self) -> Bindings {
        bindings_for(self.params())
    }

    /// FNV-1a hash of every parameter bit pattern in declared order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.params() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub(crate) fn mark_initialized(&mut self) {
        for step in self.levels.iter_mut().flat_map(|l| &mut l.steps) {
            step.actnorm.mark_initialized();
        }
    }

    /// Adds Gaussian noise of standard deviation `std` to every parameter
    /// except the 1x1x1 convolutions and marks the model initialised. Gives
    /// a generic non-trivial bijection for tests and diagnostics.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.params_mut() {
            if name.ends_with("invconv.weight") {
                continue;
            }
            let noise = normal_tensor(&mut rng, t.shape(), std);
            *t = t.zip_map(&noise, |a, b| a + b).expect("same shape");
        }
        self.mark_initialized();
    }

    fn check_volume(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.input_shape {
            return Err(Error::Shape(format!(
                "volume {shape:?} does not match the model input {:?}",
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Squeeze plus the flow steps of level `l`, data to latent direction.
    fn build_level_forward(&self, g: &mut Graph, l: usize, x: NodeId, logdets: &mut Vec<NodeId>) -> Result<NodeId> {
        let mut x = Squeeze.build(g, x, Direction::Forward)?.value;
        for step in &self.levels[l].steps {
            x = step.build(g, x, Direction::Forward, logdets)?;
        }
        Ok(x)
    }

    /// Inverse flow steps of level `l` followed by the unsqueeze.
    fn build_level_inverse(&self, g: &mut Graph, l: usize, x: NodeId, logdets: &mut Vec<NodeId>) -> Result<NodeId> {
        let mut x = x;
        for step in self.levels[l].steps.iter().rev() {
            x = step.build(g, x, Direction::Inverse, logdets)?;
        }
        Ok(Squeeze.build(g, x, Direction::Inverse)?.value)
    }

    /// Builds the encoder `y -> (z_1 .. z_L)` with its log-det and `log p(y)`.
    pub fn build_encode(&self, g: &mut Graph, y: NodeId) -> Result<EncodeNodes> {
        self.check_volume(g.shape(y))?;
        let mut logdets = Vec::new();
        let mut latents = Vec::new();
        let mut logps = Vec::new();
        let mut x = y;
        for l in 0..self.levels.len() {
            x = self.build_level_forward(g, l, x, &mut logdets)?;
            match &self.levels[l].split {
                Some(split) => {
                    let nodes = split.build_split(g, x)?;
                    latents.push(nodes.z);
                    logps.push(nodes.logp);
                    x = nodes.kept;
                }
                None => {
                    latents.push(x);
                    logps.push(self.top.build_log_prob(g, x)?);
                }
            }
        }
        let logdet = sum_scalars(g, &logdets)?;
        let total_lp = sum_scalars(g, &logps)?;
        let log_prob = g.add(total_lp, logdet)?;
        Ok(EncodeNodes {
            latents,
            latent_log_probs: logps,
            logdet,
            log_prob,
        })
    }

    /// Declares latent inputs `z1 .. zL` and builds the decoder on them.
    pub fn build_decode_inputs(&self, g: &mut Graph) -> Result<(Vec<NodeId>, DecodeNodes)> {
        let ids = self
            .config
            .latent_shapes()
            .iter()
            .enumerate()
            .map(|(j, s)| g.input(&latent_input(j + 1), s))
            .collect::<Result<Vec<_>>>()?;
        let nodes = self.build_decode(g, &ids)?;
        Ok((ids, nodes))
    }

    /// Builds the decoder `(z_1 .. z_L) -> y` with `log p(y)` of the result.
    pub fn build_decode(&self, g: &mut Graph, latents: &[NodeId]) -> Result<DecodeNodes> {
        let shapes = self.config.latent_shapes();
        if latents.len() != shapes.len()
            || latents.iter().zip(&shapes).any(|(&z, s)| g.shape(z) != s.as_slice())
        {
            return Err(Error::Shape(format!(
                "decoder expects latents of shapes {shapes:?}"
            )));
        }
        let top = self.levels.len() - 1;
        let mut inv_logdets = Vec::new();
        let mut logps = vec![None; self.levels.len()];
        let top_log_prob = self.top.build_log_prob(g, latents[top])?;
        logps[top] = Some(top_log_prob);
        let mut x = latents[top];
        for l in (0..self.levels.len()).rev() {
            if let Some(split) = &self.levels[l].split {
                let (merged, lp) = split.build_merge(g, x, latents[l])?;
                logps[l] = Some(lp);
                x = merged;
            }
            x = self.build_level_inverse(g, l, x, &mut inv_logdets)?;
        }
        // Accumulate in the encoder's order so both paths agree bit for bit.
        inv_logdets.reverse();
        let inv_logdet = sum_scalars(g, &inv_logdets)?;
        let logdet = g.neg(inv_logdet);
        let logps: Vec<NodeId> = logps.into_iter().map(Option::unwrap).collect();
        let total_lp = sum_scalars(g, &logps)?;
        let log_prob = g.add(total_lp, logdet)?;
        Ok(DecodeNodes {
            volume: x,
            latent_log_probs: logps,
            logdet,
            log_prob,
            top_log_prob,
        })
    }

    fn eval_encode(&self, y: &Tensor) -> Result<(Values, EncodeNodes)> {
        let mut g = Graph::new();
        let yi = g.input(VOLUME_INPUT, y.shape())?;
        let nodes = self.build_encode(&mut g, yi)?;
        let mut b = self.bindings();
        b.insert(VOLUME_INPUT.into(), y.clone());
        Ok((g.forward_eval(&b)?, nodes))
    }

    /// `y -> (z_1 .. z_L)` and `log |det dz/dy|`.
    pub fn encode(&self, y: &Tensor) -> Result<(LatentStack, f64)> {
        let (v, nodes) = self.eval_encode(y)?;
        let levels = nodes.latents.iter().map(|&z| v.get(z).clone()).collect();
        Ok((LatentStack { levels }, v.get(nodes.logdet).item()))
    }

    pub fn decode(&self, z: &LatentStack) -> Result<Tensor> {
        z.check(&self.config)?;
        let mut g = Graph::new();
        let (_, nodes) = self.build_decode_inputs(&mut g)?;
        let mut b = self.bindings();
        for (j, t) in z.levels.iter().enumerate() {
            b.insert(latent_input(j + 1), t.clone());
        }
        Ok(g.forward_eval(&b)?.get(nodes.volume).clone())
    }

    /// `log p(y) = sum_j log p(z_j) + log |det dz/dy|`.
    pub fn log_prob_volume(&self, y: &Tensor) -> Result<LogProb> {
        let (v, nodes) = self.eval_encode(y)?;
        let nats = v.get(nodes.log_prob).item();
        Ok(LogProb {
            nats,
            bits_per_dim: bits_per_dim(nats, self.config.dim()),
        })
    }

    /// Per-level `log p(z_j)` under the model's priors (the split priors are
    /// conditioned on the coarser levels, so the whole stack is needed).
    pub fn latent_log_probs(&self, z: &LatentStack) -> Result<Vec<f64>> {
        z.check(&self.config)?;
        let mut g = Graph::new();
        let (_, nodes) = self.build_decode_inputs(&mut g)?;
        let mut b = self.bindings();
        for (j, t) in z.levels.iter().enumerate() {
            b.insert(latent_input(j + 1), t.clone());
        }
        let v = g.forward_eval(&b)?;
        Ok(nodes.latent_log_probs.iter().map(|&id| v.get(id).item()).collect())
    }

    /// `log p(z_L)` under the top prior.
    pub fn log_prob_top(&self, z_top: &Tensor) -> Result<f64> {
        self.top.log_prob(z_top)
    }

    /// Draws `z_j ~ N(mean, (T sigma)^2)` top-down and decodes.
    pub fn sample(&self, temperature: f64, seed: u64) -> Result<Tensor> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidParam(format!(
                "temperature must be finite and >= 0, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |mean: &Tensor, logs: &Tensor| -> Tensor {
            let eps = normal_tensor(&mut rng, mean.shape(), 1.0);
            let sd = logs.map(|s| temperature * s.exp());
            let noise = sd.zip_map(&eps, |a, b| a * b).expect("same shape");
            mean.zip_map(&noise, |a, b| a + b).expect("same shape")
        };
        let shapes = self.config.latent_shapes();
        let top = self.levels.len() - 1;
        let mut g = Graph::new();
        let mut b = self.bindings();
        let mut values = Values::default();
        let z_top = draw(self.top.mean(), self.top.logs());
        b.insert(latent_input(top + 1), z_top);
        let mut x = g.input(&latent_input(top + 1), &shapes[top])?;
        let mut logdets = Vec::new();
        for l in (0..self.levels.len()).rev() {
            if let Some(split) = &self.levels[l].split {
                g.resume_eval(&mut values, &b)?;
                let (mean, logs) = split.prior_params(values.get(x))?;
                let name = latent_input(l + 1);
                b.insert(name.clone(), draw(&mean, &logs));
                let z = g.input(&name, &shapes[l])?;
                x = g.concat_channels(&[x, z])?;
            }
            x = self.build_level_inverse(&mut g, l, x, &mut logdets)?;
        }
        g.resume_eval(&mut values, &b)?;
        Ok(values.get(x).clone())
    }

    /// Data-dependent actnorm initialisation: runs the batch through the
    /// encoder layer by layer, initialising each actnorm from the statistics
    /// of its input over the whole batch. Already initialised layers are
    /// kept.
    pub fn initialize(&mut self, batch: &[Tensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidParam("actnorm initialisation on an empty batch".into()));
        }
        for y in batch {
            self.check_volume(y.shape())?;
        }
        struct Lane {
            g: Graph,
            values: Values,
            x: NodeId,
            bindings: Bindings,
        }
        let mut lanes: Vec<Lane> = batch
            .iter()
            .map(|y| {
                let mut g = Graph::new();
                let x = g.input(VOLUME_INPUT, y.shape())?;
                let bindings: Bindings = [(VOLUME_INPUT.to_string(), y.clone())].into_iter().collect();
                Ok(Lane { g, values: Values::default(), x, bindings })
            })
            .collect::<Result<_>>()?;
        let mut sink = Vec::new();
        for l in 0..self.levels.len() {
            for lane in &mut lanes {
                lane.x = Squeeze.build(&mut lane.g, lane.x, Direction::Forward)?.value;
            }
            for k in 0..self.levels[l].steps.len() {
                if !self.levels[l].steps[k].actnorm.is_initialized() {
                    let mut inputs = Vec::with_capacity(lanes.len());
                    for lane in &mut lanes {
                        lane.g.resume_eval(&mut lane.values, &lane.bindings)?;
                        inputs.push(lane.values.get(lane.x).clone());
                    }
                    let refs: Vec<&Tensor> = inputs.iter().collect();
                    self.levels[l].steps[k].actnorm.initialize(&refs)?;
                }
                let step = &self.levels[l].steps[k];
                let params = bindings_for(step.layers().iter().flat_map(|layer| layer.params()).collect());
                for lane in &mut lanes {
                    lane.bindings.extend(params.iter().map(|(n, t)| (n.clone(), t.clone())));
                    lane.x = step.build(&mut lane.g, lane.x, Direction::Forward, &mut sink)?;
                }
            }
            if let Some(split) = &self.levels[l].split {
                for lane in &mut lanes {
                    lane.x = split.build_split(&mut lane.g, lane.x)?.kept;
                    lane.bindings.extend(split.params().into_iter().map(|(n, t)| (n, t.clone())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
