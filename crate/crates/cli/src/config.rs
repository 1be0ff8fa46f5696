//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then the `--config` file, then
//! `X2CT_<KEY>` environment variables, then command-line flags. Unknown keys
//! are rejected at every layer. [`RunConfig::resolved`] renders the final
//! values in a form [`RunConfig::apply_text`] reads back.

use std::path::PathBuf;

use volflow::data::PhantomSpec;
use volflow::solver::StepMode;
use volflow::{Error, ModelConfig, ReconConfig, Result, TrainConfig};

pub const ENV_PREFIX: &str = "X2CT_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Uniplanar,
    Biplanar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub levels: usize,
    pub depth: usize,
    pub width: usize,
    pub grid: [usize; 3],
    pub learn_top: bool,
    pub learn_split_prior: bool,

    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub checkpoint: PathBuf,

    pub phantom_count: u64,
    pub phantom_first_seed: u64,
    pub phantom_smoothing: f64,
    pub phantom_nodules: (usize, usize),

    /// Training volumes taken from the manifest; 0 means all.
    pub train_count: usize,
    pub epochs: usize,
    pub batch_schedule: Vec<(usize, usize)>,
    pub learning_rate: f64,
    pub warmup_epochs: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub dequantize: bool,
    pub checkpoint_every: usize,

    pub sample_count: usize,
    pub temperature: f64,

    pub mode: Mode,
    pub lambda_d: f64,
    pub lambda_w: f64,
    pub lambda_l: f64,
    pub log_p0: f64,
    /// Likelihood targets for family mode; empty for a single run.
    pub logp0_list: Vec<f64>,
    pub alpha: f64,
    pub max_iters: usize,
    pub mse_threshold: f64,
    pub step_mode: StepMode,
    /// Read `alpha` and the targets as 32^3 / 2048-dimensional reference
    /// values and rescale them to the model.
    pub recon_scale: bool,

    /// Ground-truth VOL3 volume; its DRRs become the inputs.
    pub target: Option<PathBuf>,
    /// Coronal / sagittal PGM inputs, used when no target is given.
    pub coronal: Option<PathBuf>,
    pub sagittal: Option<PathBuf>,
    /// Rescale the coronal image onto the training DRR intensity scale.
    pub cxr_rescale: bool,

    /// Test cases evaluated; 0 means all.
    pub eval_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let train = TrainConfig::default();
        let recon = ReconConfig::default();
        let phantom = PhantomSpec::default();
        Self {
            seed: 0,
            levels: model.levels,
            depth: model.depth,
            width: model.width,
            grid: [16, 16, 16],
            learn_top: model.learn_top,
            learn_split_prior: model.learn_split_prior,
            data_dir: "data".into(),
            out: "out".into(),
            checkpoint: "model.flw3".into(),
            phantom_count: 250,
            phantom_first_seed: 0,
            phantom_smoothing: phantom.smoothing,
            phantom_nodules: phantom.nodule_count,
            train_count: 0,
            epochs: train.epochs,
            batch_schedule: train.batch_schedule,
            learning_rate: train.learning_rate,
            warmup_epochs: train.warmup_epochs,
            clip_norm: train.clip_norm.unwrap_or(0.0),
            dequantize: train.dequantize,
            checkpoint_every: train.checkpoint_every,
            sample_count: 4,
            temperature: 0.7,
            mode: Mode::Biplanar,
            lambda_d: recon.lambda_d,
            lambda_w: recon.lambda_w,
            lambda_l: recon.lambda_l,
            log_p0: recon.log_p0,
            logp0_list: Vec::new(),
            alpha: recon.alpha,
            max_iters: recon.max_iters,
            mse_threshold: recon.mse_threshold,
            step_mode: recon.step_mode,
            recon_scale: true,
            target: None,
            coronal: None,
            sagittal: None,
            cxr_rescale: false,
            eval_count: 0,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::resolved`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "levels",
    "depth",
    "width",
    "grid",
    "learn_top",
    "learn_split_prior",
    "data_dir",
    "out",
    "checkpoint",
    "phantom_count",
    "phantom_first_seed",
    "phantom_smoothing",
    "phantom_nodules",
    "train_count",
    "epochs",
    "batch_schedule",
    "learning_rate",
    "warmup_epochs",
    "clip_norm",
    "dequantize",
    "checkpoint_every",
    "sample_count",
    "temperature",
    "mode",
    "lambda_d",
    "lambda_w",
    "lambda_l",
    "log_p0",
    "logp0_list",
    "alpha",
    "max_iters",
    "mse_threshold",
    "step_mode",
    "recon_scale",
    "target",
    "coronal",
    "sagittal",
    "cxr_rescale",
    "eval_count",
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key} = {value}`: expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "a finite number"))
    }
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = num(key, value, "an unsigned integer")?,
            "levels" => self.levels = num(key, value, "a positive integer")?,
            "depth" => self.depth = num(key, value, "a positive integer")?,
            "width" => self.width = num(key, value, "a positive integer")?,
            "grid" => {
                let dims = list(value, |s| num::<usize>(key, s, "grid sizes"))?;
                self.grid = match dims.as_slice() {
                    [n] => [*n; 3],
                    [d, h, w] => [*d, *h, *w],
                    _ => return Err(bad(key, value, "N or D,H,W")),
                };
            }
            "learn_top" => self.learn_top = boolean(key, value)?,
            "learn_split_prior" => self.learn_split_prior = boolean(key, value)?,
            "data_dir" => self.data_dir = value.into(),
            "out" => self.out = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "phantom_count" => self.phantom_count = num(key, value, "an unsigned integer")?,
            "phantom_first_seed" => self.phantom_first_seed = num(key, value, "an unsigned integer")?,
            "phantom_smoothing" => self.phantom_smoothing = float(key, value)?,
            "phantom_nodules" => {
                let n = list(value, |s| num::<usize>(key, s, "nodule counts"))?;
                self.phantom_nodules = match n.as_slice() {
                    [k] => (*k, *k),
                    [lo, hi] => (*lo, *hi),
                    _ => return Err(bad(key, value, "N or MIN,MAX")),
                };
            }
            "train_count" => self.train_count = num(key, value, "an unsigned integer")?,
            "epochs" => self.epochs = num(key, value, "an unsigned integer")?,
            "batch_schedule" => {
                self.batch_schedule = list(value, |s| {
                    let (e, b) = s.split_once(':').ok_or_else(|| bad(key, value, "EPOCH:BATCH,..."))?;
                    Ok((num(key, e.trim(), "EPOCH:BATCH")?, num(key, b.trim(), "EPOCH:BATCH")?))
                })?;
            }
            "learning_rate" => self.learning_rate = float(key, value)?,
            "warmup_epochs" => self.warmup_epochs = float(key, value)?,
            "clip_norm" => self.clip_norm = float(key, value)?,
            "dequantize" => self.dequantize = boolean(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value, "an unsigned integer")?,
            "sample_count" => self.sample_count = num(key, value, "an unsigned integer")?,
            "temperature" => self.temperature = float(key, value)?,
            "mode" => {
                self.mode = match value {
                    "uniplanar" => Mode::Uniplanar,
                    "biplanar" => Mode::Biplanar,
                    _ => return Err(bad(key, value, "uniplanar or biplanar")),
                }
            }
            "lambda_d" => self.lambda_d = float(key, value)?,
            "lambda_w" => self.lambda_w = float(key, value)?,
            "lambda_l" => self.lambda_l = float(key, value)?,
            "log_p0" => self.log_p0 = float(key, value)?,
            "logp0_list" => self.logp0_list = list(value, |s| float(key, s))?,
            "alpha" => self.alpha = float(key, value)?,
            "max_iters" => self.max_iters = num(key, value, "an unsigned integer")?,
            "mse_threshold" => self.mse_threshold = float(key, value)?,
            "step_mode" => {
                self.step_mode = match value {
                    "gradient" => StepMode::Gradient,
                    "adaptive" => StepMode::Adaptive,
                    _ => return Err(bad(key, value, "gradient or adaptive")),
                }
            }
            "recon_scale" => self.recon_scale = boolean(key, value)?,
            "target" => self.target = optional_path(value),
            "coronal" => self.coronal = optional_path(value),
            "sagittal" => self.sagittal = optional_path(value),
            "cxr_rescale" => self.cxr_rescale = boolean(key, value)?,
            "eval_count" => self.eval_count = num(key, value, "an unsigned integer")?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, strip(&e))))?;
        }
        Ok(())
    }

    /// Applies every `X2CT_<KEY>` variable from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, value) in vars {
            let key = name[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("environment {name}: {}", strip(&e))))?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let [d, h, w] = self.grid;
        let cfg = ModelConfig {
            levels: self.levels,
            depth: self.depth,
            width: self.width,
            input_shape: [d, h, w, 1],
            learn_top: self.learn_top,
            learn_split_prior: self.learn_split_prior,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn phantom(&self) -> Result<PhantomSpec> {
        let spec = PhantomSpec {
            shape: self.grid,
            smoothing: self.phantom_smoothing,
            nodule_count: self.phantom_nodules,
            ..PhantomSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_schedule: self.batch_schedule.clone(),
            learning_rate: self.learning_rate,
            warmup_epochs: self.warmup_epochs,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            dequantize: self.dequantize,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Solver settings for the configured mode, rescaled to `model` when
    /// `recon_scale` is set.
    pub fn recon(&self, model: &ModelConfig) -> Result<ReconConfig> {
        let cfg = ReconConfig {
            lambda_d: self.lambda_d,
            lambda_w: match self.mode {
                Mode::Uniplanar => 0.0,
                Mode::Biplanar => self.lambda_w,
            },
            lambda_l: self.lambda_l,
            log_p0: self.log_p0,
            alpha: self.alpha,
            max_iters: self.max_iters,
            mse_threshold: self.mse_threshold,
            step_mode: self.step_mode,
        };
        let cfg = if self.recon_scale { cfg.scaled_to(model) } else { cfg };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Family targets as the solver sees them.
    pub fn family_targets(&self, model: &ModelConfig) -> Vec<f64> {
        self.logp0_list
            .iter()
            .map(|&t| if self.recon_scale { volflow::solver::scale_target(t, model.top_dim()) } else { t })
            .collect()
    }

    pub fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "levels" => self.levels.to_string(),
            "depth" => self.depth.to_string(),
            "width" => self.width.to_string(),
            "grid" => join(&self.grid),
            "learn_top" => self.learn_top.to_string(),
            "learn_split_prior" => self.learn_split_prior.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out" => self.out.display().to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            "phantom_count" => self.phantom_count.to_string(),
            "phantom_first_seed" => self.phantom_first_seed.to_string(),
            "phantom_smoothing" => self.phantom_smoothing.to_string(),
            "phantom_nodules" => format!("{},{}", self.phantom_nodules.0, self.phantom_nodules.1),
            "train_count" => self.train_count.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_schedule" => {
                let items: Vec<String> = self.batch_schedule.iter().map(|(e, b)| format!("{e}:{b}")).collect();
                items.join(",")
            }
            "learning_rate" => self.learning_rate.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "dequantize" => self.dequantize.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "sample_count" => self.sample_count.to_string(),
            "temperature" => self.temperature.to_string(),
            "mode" => match self.mode {
                Mode::Uniplanar => "uniplanar".into(),
                Mode::Biplanar => "biplanar".into(),
            },
            "lambda_d" => self.lambda_d.to_string(),
            "lambda_w" => self.lambda_w.to_string(),
            "lambda_l" => self.lambda_l.to_string(),
            "log_p0" => self.log_p0.to_string(),
            "logp0_list" => join(&self.logp0_list),
            "alpha" => self.alpha.to_string(),
            "max_iters" => self.max_iters.to_string(),
            "mse_threshold" => self.mse_threshold.to_string(),
            "step_mode" => match self.step_mode {
                StepMode::Gradient => "gradient".into(),
                StepMode::Adaptive => "adaptive".into(),
            },
            "recon_scale" => self.recon_scale.to_string(),
            "target" => show_path(&self.target),
            "coronal" => show_path(&self.coronal),
            "sagittal" => show_path(&self.sagittal),
            "cxr_rescale" => self.cxr_rescale.to_string(),
            "eval_count" => self.eval_count.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }

    /// Every key with its final value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value(k))).collect()
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
