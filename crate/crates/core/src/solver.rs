//! Projection-consistent reconstruction by descent in the deepest latent.
//!
//! The loss is `L = l_d C_d + l_w C_w + l_l C_l` with
//! `C_d = |P_d(y) - x_d|^2 / (H W)`, `C_w = |P_w(y) - x_w|^2 / (D H)` (both on
//! the 0-255 scale) and `C_l = (log p(z_L) - log p_0)^2`, where
//! `y = g(z_1, .., z_L)`. Only `z_L` moves; shallower latents stay at zero.
//! `log p(z_L)` is taken under the top prior alone.

use rayon::prelude::*;

use crate::data::{Projection, Volume};
use crate::error::{Error, Result};
use crate::glow::{latent_input, FlowModel, LatentStack, ModelConfig};
use crate::projection::{DepthAverage, Projector, WidthAverage};
use crate::tensor::{Bindings, Graph, NodeId, Tensor, Values};

/// How the iterate moves along the negative gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepMode {
    /// `z <- z - alpha * grad`.
    Gradient,
    /// Same direction, step chosen by backtracking: start from the last
    /// accepted step times 1.25 (capped at `alpha`) and halve until the loss
    /// decreases sufficiently (Armijo).
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub lambda_d: f64,
    pub lambda_w: f64,
    pub lambda_l: f64,
    /// Target `log p(z_L)` in nats.
    pub log_p0: f64,
    pub alpha: f64,
    pub max_iters: usize,
    /// Per-pixel MSE every active plane must reach.
    pub mse_threshold: f64,
    pub step_mode: StepMode,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_w: 1.0,
            lambda_l: 0.01,
            log_p0: -7000.0,
            alpha: 0.2,
            max_iters: 5000,
            mse_threshold: 9.0,
            step_mode: StepMode::Gradient,
        }
    }
}

impl ReconConfig {
    /// Coronal image only, no likelihood targeting.
    pub fn uniplanar() -> Self {
        Self {
            lambda_w: 0.0,
            lambda_l: 0.0,
            ..Self::default()
        }
    }

    /// Coronal and sagittal images, no likelihood targeting.
    pub fn biplanar() -> Self {
        Self {
            lambda_l: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_w", self.lambda_w),
            ("lambda_l", self.lambda_l),
            ("mse_threshold", self.mse_threshold),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and > 0, got {}", self.alpha));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !self.log_p0.is_finite() {
            return bad(format!("log_p0 must be finite, got {}", self.log_p0));
        }
        Ok(())
    }

    /// Rescales `alpha` and `log_p0` from the 32^3 reference model to
    /// `model` (identity for the full-size configuration).
    pub fn scaled_to(&self, model: &ModelConfig) -> Self {
        Self {
            alpha: scale_step(self.alpha, model.dim()),
            log_p0: scale_target(self.log_p0, model.top_dim()),
            ..self.clone()
        }
    }

    pub fn biplanar_active(&self) -> bool {
        self.lambda_w > 0.0
    }
}

/// Input dimension (a 32^3 volume) the default step size refers to.
pub const REFERENCE_DIM: usize = 32 * 32 * 32;
/// Top-latent dimension the likelihood targets refer to.
pub const REFERENCE_TOP_DIM: usize = 2048;

/// Scales a target quoted for a 2048-dimensional top latent to a top latent
/// of `top_dim` dimensions.
pub fn scale_target(log_p0: f64, top_dim: usize) -> f64 {
    log_p0 * top_dim as f64 / REFERENCE_TOP_DIM as f64
}

/// Scales a step size quoted for 32^3 volumes to volumes of `dim` voxels.
/// The projection terms average over `dim` voxels, so their curvature with
/// respect to the volume grows like `1 / dim`; the step shrinks with it.
pub fn scale_step(alpha: f64, dim: usize) -> f64 {
    alpha * dim as f64 / REFERENCE_DIM as f64
}

/// One row of the optimisation trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub iter: usize,
    pub loss: f64,
    pub c_d: f64,
    pub c_w: f64,
    pub c_l: f64,
    pub log_p_top: f64,
    pub log_p_y: f64,
}

pub const TRAJECTORY_HEADER: &str = "iter\tloss\tC_d\tC_w\tC_l\tlogp_zL\tlogp_y";

pub fn trajectory_tsv(records: &[TrajectoryRecord]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.iter, r.loss, r.c_d, r.c_w, r.c_l, r.log_p_top, r.log_p_y
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    /// Decoded volume on the 0-255 scale (not clipped).
    pub volume: Volume,
    pub latents: LatentStack,
    pub mse_d: f64,
    /// `None` for uniplanar runs.
    pub mse_w: Option<f64>,
    /// Gradient steps taken.
    pub iterations: usize,
    pub converged: bool,
    pub log_p_top: f64,
    pub log_p_y: f64,
    /// Step size at the end (halved once after a rejected step).
    pub alpha: f64,
    pub trajectory: Vec<TrajectoryRecord>,
}

/// Loss value and its parts at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    pub c_d: f64,
    pub c_w: f64,
    pub c_l: f64,
    pub log_p_top: f64,
    pub log_p_y: f64,
}

/// The loss graph, built once per problem.
struct Objective {
    g: Graph,
    bindings: Bindings,
    top_name: String,
    volume: NodeId,
    loss: NodeId,
    c_d: NodeId,
    c_w: Option<NodeId>,
    c_l: NodeId,
    top_lp: NodeId,
    log_p_y: NodeId,
}

fn squared_error(g: &mut Graph, p: NodeId, target: &Projection) -> Result<NodeId> {
    if g.shape(p) != target.pixels().shape() {
        return Err(Error::Shape(format!(
            "{} image is {:?}, the model projects to {:?}",
            target.plane(),
            target.shape(),
            g.shape(p)
        )));
    }
    let n = target.data().len() as f64;
    let t = g.constant(target.pixels().clone());
    let diff = g.sub(p, t)?;
    let sq = g.squared_norm(diff);
    Ok(g.mul_scalar(sq, 1.0 / n))
}

impl Objective {
    fn new(model: &FlowModel, x_d: &Projection, x_w: Option<&Projection>, cfg: &ReconConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.biplanar_active() && x_w.is_none() {
            return Err(Error::InvalidParam("lambda_w > 0 needs a sagittal image".into()));
        }
        let mut g = Graph::new();
        let (_, dec) = model.build_decode_inputs(&mut g)?;
        // Flow space back to the 0-255 scale.
        let shifted = g.add_scalar(dec.volume, 0.5);
        let volume = g.mul_scalar(shifted, 256.0);
        let pd = DepthAverage.build(&mut g, volume)?;
        let c_d = squared_error(&mut g, pd, x_d)?;
        let mut loss = g.mul_scalar(c_d, cfg.lambda_d);
        let c_w = match x_w {
            Some(x_w) if cfg.biplanar_active() => {
                let pw = WidthAverage.build(&mut g, volume)?;
                let c_w = squared_error(&mut g, pw, x_w)?;
                let term = g.mul_scalar(c_w, cfg.lambda_w);
                loss = g.add(loss, term)?;
                Some(c_w)
            }
            _ => None,
        };
        let gap = g.add_scalar(dec.top_log_prob, -cfg.log_p0);
        let c_l = g.square(gap);
        if cfg.lambda_l > 0.0 {
            let term = g.mul_scalar(c_l, cfg.lambda_l);
            loss = g.add(loss, term)?;
        }
        let mut bindings = model.bindings();
        for (j, s) in model.config().latent_shapes().iter().enumerate() {
            bindings.insert(latent_input(j + 1), Tensor::zeros(s));
        }
        Ok(Self {
            g,
            bindings,
            top_name: latent_input(model.config().levels),
            volume,
            loss,
            c_d,
            c_w,
            c_l,
            top_lp: dec.top_log_prob,
            log_p_y: dec.log_prob,
        })
    }

    fn eval(&mut self, z_top: &Tensor) -> Result<Values> {
        self.bindings.insert(self.top_name.clone(), z_top.clone());
        self.g.forward_eval(&self.bindings)
    }

    fn breakdown(&self, v: &Values) -> LossBreakdown {
        LossBreakdown {
            loss: v.get(self.loss).item(),
            c_d: v.get(self.c_d).item(),
            c_w: self.c_w.map_or(0.0, |id| v.get(id).item()),
            c_l: v.get(self.c_l).item(),
            log_p_top: v.get(self.top_lp).item(),
            log_p_y: v.get(self.log_p_y).item(),
        }
    }

    fn gradient(&self, v: &Values) -> Result<Tensor> {
        let grads = self.g.backward_wrt(v, self.loss, &[&self.top_name])?;
        Ok(grads.get(&self.top_name).expect("loss depends on the top latent").clone())
    }
}

/// Loss and its components at an arbitrary latent stack.
pub fn recon_loss(
    model: &FlowModel,
    z: &LatentStack,
    x_d: &Projection,
    x_w: Option<&Projection>,
    cfg: &ReconConfig,
) -> Result<LossBreakdown> {
    let mut obj = Objective::new(model, x_d, x_w, cfg)?;
    if z.levels.len() != model.config().levels {
        return Err(Error::Shape("latent stack depth does not match the model".into()));
    }
    for (j, t) in z.levels.iter().enumerate() {
        obj.bindings.insert(latent_input(j + 1), t.clone());
    }
    let v = obj.g.forward_eval(&obj.bindings)?;
    Ok(obj.breakdown(&v))
}

/// Gradient of [`recon_loss`] with respect to `z_L`.
pub fn recon_loss_gradient(
    model: &FlowModel,
    z: &LatentStack,
    x_d: &Projection,
    x_w: Option<&Projection>,
    cfg: &ReconConfig,
) -> Result<Tensor> {
    let mut obj = Objective::new(model, x_d, x_w, cfg)?;
    for (j, t) in z.levels.iter().enumerate() {
        obj.bindings.insert(latent_input(j + 1), t.clone());
    }
    let v = obj.g.forward_eval(&obj.bindings)?;
    obj.gradient(&v)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &FlowModel,
    obj: &Objective,
    values: &Values,
    z: Tensor,
    iterations: usize,
    converged: bool,
    alpha: f64,
    trajectory: Vec<TrajectoryRecord>,
) -> Result<ReconResult> {
    let b = obj.breakdown(values);
    let mut latents = LatentStack::zeros(model.config());
    *latents.levels.last_mut().unwrap() = z;
    Ok(ReconResult {
        volume: Volume::new(values.get(obj.volume).clone())?,
        latents,
        mse_d: b.c_d,
        mse_w: obj.c_w.map(|_| b.c_w),
        iterations,
        converged,
        log_p_top: b.log_p_top,
        log_p_y: b.log_p_y,
        alpha,
        trajectory,
    })
}

/// Sufficient-decrease constant of the backtracking line search.
const ARMIJO_C: f64 = 1e-4;

fn descend(z: &Tensor, grad: &Tensor, step: f64) -> Tensor {
    // Non-finite entries are caught by the next evaluation.
    Tensor::from_raw(z.shape(), z.data().iter().zip(grad.data()).map(|(z, g)| z - step * g).collect())
}

/// Recovers a volume whose projections match `x_d` (and `x_w` when
/// `lambda_w > 0`). Starts from all-zero latents and stops once every active
/// plane's MSE is at most the threshold or after `max_iters` steps.
pub fn reconstruct(
    model: &FlowModel,
    x_d: &Projection,
    x_w: Option<&Projection>,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    let mut obj = Objective::new(model, x_d, x_w, cfg)?;
    let top_shape = *model.config().latent_shapes().last().unwrap();
    let mut z = Tensor::zeros(&top_shape);
    let mut values = obj.eval(&z)?;
    let mut prev: Option<(Tensor, Values)> = None;
    let mut alpha = cfg.alpha;
    let mut last_step = cfg.alpha;
    let mut failures = 0;
    let mut trajectory = Vec::new();
    let mut steps = 0usize;
    loop {
        let b = obj.breakdown(&values);
        let grad = if b.loss.is_finite() { Some(obj.gradient(&values)?) } else { None };
        let Some(grad) = grad.filter(Tensor::is_finite) else {
            failures += 1;
            if let (1, Some((pz, pv))) = (failures, prev.take()) {
                // Reject the step that led here and retry at half the step.
                alpha *= 0.5;
                last_step = alpha;
                z = pz;
                values = pv;
                steps -= 1;
                trajectory.pop();
                continue;
            }
            let reason = if b.loss.is_finite() { "non-finite gradient" } else { "non-finite loss" };
            return Err(Error::Diverged {
                iteration: steps,
                reason: reason.into(),
                trajectory,
            });
        };
        trajectory.push(TrajectoryRecord {
            iter: steps,
            loss: b.loss,
            c_d: b.c_d,
            c_w: b.c_w,
            c_l: b.c_l,
            log_p_top: b.log_p_top,
            log_p_y: b.log_p_y,
        });
        let converged = b.c_d <= cfg.mse_threshold && (obj.c_w.is_none() || b.c_w <= cfg.mse_threshold);
        if converged || steps == cfg.max_iters {
            return finish(model, &obj, &values, z, steps, converged, last_step, trajectory);
        }
        let (next, next_values) = match cfg.step_mode {
            StepMode::Gradient => {
                let next = descend(&z, &grad, alpha);
                let v = obj.eval(&next)?;
                (next, v)
            }
            StepMode::Adaptive => {
                let gg = grad.squared_norm();
                let mut step = (last_step * 1.25).min(alpha);
                loop {
                    let next = descend(&z, &grad, step);
                    let v = obj.eval(&next)?;
                    let loss = v.get(obj.loss).item();
                    if loss.is_finite() && loss <= b.loss - ARMIJO_C * step * gg {
                        last_step = step;
                        break (next, v);
                    }
                    step *= 0.5;
                    if step < alpha * 1e-12 {
                        // No descent left along the gradient.
                        return finish(model, &obj, &values, z, steps, false, step, trajectory);
                    }
                }
            }
        };
        prev = Some((std::mem::replace(&mut z, next), std::mem::replace(&mut values, next_values)));
        steps += 1;
    }
}

/// One independent reconstruction per likelihood target, in the given
/// order, run in parallel. A failing target does not affect the others.
pub fn reconstruct_family(
    model: &FlowModel,
    x_d: &Projection,
    x_w: Option<&Projection>,
    base: &ReconConfig,
    targets: &[f64],
) -> Result<Vec<Result<ReconResult>>> {
    if targets.is_empty() {
        return Err(Error::InvalidParam("likelihood family needs at least one target".into()));
    }
    if !(base.lambda_l > 0.0) {
        return Err(Error::InvalidParam("likelihood family needs lambda_l > 0".into()));
    }
    base.validate()?;
    Ok(targets
        .par_iter()
        .map(|&log_p0| {
            let cfg = ReconConfig { log_p0, ..base.clone() };
            reconstruct(model, x_d, x_w, &cfg)
        })
        .collect())
}
