//! Maximum-likelihood training: minimise the mean negative log-likelihood
//! of (dequantised) training volumes with adaptive moments, a linear
//! warmup and global-norm gradient clipping.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::glow::{bits_per_dim, save_checkpoint, to_flow_space, FlowModel, VOLUME_INPUT};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `(first epoch, batch size)` pairs sorted by epoch; each size holds
    /// until the next entry. Epochs count from 0.
    pub batch_schedule: Vec<(usize, usize)>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs of linear learning-rate ramp; 0 disables it.
    pub warmup_epochs: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Add `U[0, 1)` noise to the 0-255 voxels before scoring.
    pub dequantize: bool,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_schedule: vec![(0, 8)],
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_epochs: 2.0,
            clip_norm: Some(50.0),
            dequantize: true,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// The long schedule: batch 16 for 1000 epochs, 4 for ten more, then 1
    /// for the last 30.
    pub fn long_schedule() -> Self {
        Self {
            epochs: 1040,
            batch_schedule: vec![(0, 16), (1000, 4), (1010, 1)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_schedule.is_empty() || self.batch_schedule[0].0 != 0 {
            return bad("batch schedule must start at epoch 0".into());
        }
        if self.batch_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("batch schedule epochs must increase".into());
        }
        if self.batch_schedule.iter().any(|&(_, b)| b == 0) {
            return bad("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("moment settings out of range".into());
        }
        if !(self.warmup_epochs >= 0.0) {
            return bad(format!("warmup must be >= 0, got {}", self.warmup_epochs));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn batch_size(&self, epoch: usize) -> usize {
        self.batch_schedule
            .iter()
            .rev()
            .find(|&&(start, _)| start <= epoch)
            .map_or(1, |&(_, b)| b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative log-likelihood in nats (flow space).
    pub mean_nll: f64,
    pub bits_per_dim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// [`FlowModel::checksum`] after the last epoch.
    pub checksum: u64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\tmean_nll\tbits_per_dim\tseconds";

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.epochs {
            out.push_str(&format!("{}\t{}\t{}\t{:.3}\n", r.epoch, r.mean_nll, r.bits_per_dim, r.seconds));
        }
        out
    }

    /// Equality of everything except wall-clock time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.checksum == other.checksum
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.mean_nll.to_bits() == b.mean_nll.to_bits()
                    && a.bits_per_dim.to_bits() == b.bits_per_dim.to_bits()
            })
    }
}

/// Negative log-likelihood of one flow-space volume and its gradient with
/// respect to every parameter.
fn sample_nll_grad(model: &FlowModel, x: &Tensor, names: &[&str]) -> Result<(f64, HashMap<String, Tensor>)> {
    let mut g = Graph::new();
    let yi = g.input(VOLUME_INPUT, x.shape())?;
    let enc = model.build_encode(&mut g, yi)?;
    let nll = g.neg(enc.log_prob);
    let mut b = model.bindings();
    b.insert(VOLUME_INPUT.into(), x.clone());
    let values = g.forward_eval(&b)?;
    let loss = values.get(nll).item();
    if !loss.is_finite() {
        let layer = g
            .first_non_finite(&values)
            .map_or_else(|| "unknown".to_string(), |id| g.scope_of(id).to_string());
        return Err(Error::NonFiniteLoss { layer });
    }
    let grads = g.backward_wrt(&values, nll, names)?.into_map();
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).to_string();
        return Err(Error::NonFiniteLoss { layer });
    }
    Ok((loss, grads))
}

/// Mean NLL of a batch of flow-space volumes and its parameter gradient.
/// Samples run in parallel; the reduction follows batch order.
pub fn nll_loss_and_grad(model: &FlowModel, batch: &[Tensor]) -> Result<(f64, HashMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("NLL of an empty batch".into()));
    }
    let params = model.params();
    let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    let per_sample: Vec<(f64, HashMap<String, Tensor>)> = batch
        .par_iter()
        .map(|x| sample_nll_grad(model, x, &names))
        .collect::<Result<_>>()?;
    let m = batch.len() as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / m;
    let mut total = HashMap::with_capacity(params.len());
    for (name, t) in &params {
        let mut acc = vec![0.0; t.len()];
        for (_, grads) in &per_sample {
            if let Some(gt) = grads.get(name) {
                acc.iter_mut().zip(gt.data()).for_each(|(a, g)| *a += g);
            }
        }
        acc.iter_mut().for_each(|a| *a /= m);
        total.insert(name.clone(), Tensor::new(t.shape(), acc)?);
    }
    Ok((loss, total))
}

/// `(1/M) sum_i -log p(x_i)` over flow-space volumes.
pub fn nll_loss(model: &FlowModel, batch: &[Tensor]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("NLL of an empty batch".into()));
    }
    let lps = batch
        .par_iter()
        .map(|x| model.log_prob_volume(x).map(|lp| lp.nats))
        .collect::<Result<Vec<_>>>()?;
    Ok(-lps.iter().sum::<f64>() / batch.len() as f64)
}

/// Adaptive-moment optimiser state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn step(&mut self, model: &mut FlowModel, grads: &HashMap<String, Tensor>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, p) in model.params_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; p.len()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}

fn clip(grads: &mut HashMap<String, Tensor>, names: &[String], max_norm: f64) -> f64 {
    let norm = names
        .iter()
        .filter_map(|n| grads.get(n))
        .map(Tensor::squared_norm)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            *t = t.map(|v| v * k);
        }
    }
    norm
}

/// Trains with a per-epoch callback (called after each epoch with its
/// record and the current model).
pub fn train_with(
    model: &mut FlowModel,
    data: &[Volume],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &FlowModel) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParam("training set is empty".into()));
    }
    let input = model.config().input_shape;
    if let Some(v) = data.iter().find(|v| v.shape() != input) {
        return Err(Error::Shape(format!("training volume {:?}, model input {input:?}", v.shape())));
    }
    let dim = model.config().dim();
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let bs = cfg.batch_size(epoch);
        let batches: Vec<&[usize]> = order.chunks(bs).collect();
        let mut nll_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<Tensor> = idx
                .iter()
                .map(|&i| {
                    let v = data[i].tensor();
                    let noisy = if cfg.dequantize {
                        let noise: Vec<f64> = (0..v.len()).map(|_| rng.random::<f64>()).collect();
                        Tensor::new(v.shape(), v.data().iter().zip(&noise).map(|(a, b)| a + b).collect())?
                    } else {
                        v.clone()
                    };
                    Ok(to_flow_space(&noisy))
                })
                .collect::<Result<_>>()?;
            if !model.is_initialized() {
                model.initialize(&batch)?;
            }
            let (loss, mut grads) = nll_loss_and_grad(model, &batch)?;
            nll_sum += loss * batch.len() as f64;
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, &names, c);
            }
            let progress = epoch as f64 + (bi + 1) as f64 / batches.len() as f64;
            let ramp = if cfg.warmup_epochs > 0.0 { (progress / cfg.warmup_epochs).min(1.0) } else { 1.0 };
            adam.step(model, &grads, cfg.learning_rate * ramp, cfg)?;
        }
        let mean_nll = nll_sum / data.len() as f64;
        let record = EpochRecord {
            epoch,
            mean_nll,
            bits_per_dim: bits_per_dim(-mean_nll, dim),
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(path) = &cfg.checkpoint_path {
            let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if due || epoch + 1 == cfg.epochs {
                save_checkpoint(model, path)?;
            }
        }
        on_epoch(&record, model)?;
        records.push(record);
    }
    Ok(TrainReport {
        epochs: records,
        checksum: model.checksum(),
    })
}

pub fn train(model: &mut FlowModel, data: &[Volume], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_, _| Ok(()))
}
