//! Optimal-transport conditional flow matching.
//!
//! The probability path between a noise draw `x0` and a data point `x1` is the
//! straight line `x_t = (1 - (1 - sigma_min) t) x0 + t x1`, whose velocity
//! `x1 - (1 - sigma_min) x0` is constant in `t`. A network is regressed onto
//! that velocity and sampling integrates the learned field with Euler steps.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Path and sampler settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Residual noise scale at `t = 1`.
    pub sigma_min: f64,
    /// Euler steps used when integrating from `t = 0` to `t = 1`.
    pub num_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-5,
            num_steps: 1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "sigma_min must lie in [0, 1), got {}",
                self.sigma_min
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn noise_keep(&self) -> f64 {
        1.0 - self.sigma_min
    }
}

/// One training draw: endpoints, per-item times, interpolant and target.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    /// One time per leading (batch) index of the latents.
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub v_t: Tensor,
}

impl FlowSample {
    /// Draws noise and times for a batch of targets `x1` (leading dim = batch).
    pub fn draw<R: Rng>(x1: &Tensor, rng: &mut R, cfg: &FlowConfig) -> Result<Self> {
        let x0 = crate::rng::standard_normal(x1.shape().clone(), rng, x1.device(), x1.dtype())?;
        let t: Vec<f64> = (0..x1.dim(0)?).map(|_| sample_time(rng)).collect();
        Self::from_parts(x0, x1.clone(), t, cfg)
    }

    pub fn from_parts(x0: Tensor, x1: Tensor, t: Vec<f64>, cfg: &FlowConfig) -> Result<Self> {
        let x_t = conditional_path_batched(&x0, &x1, &t, cfg)?;
        let v_t = target_velocity(&x0, &x1, cfg)?;
        Ok(Self { x0, x1, t, x_t, v_t })
    }
}

/// Uniform draw on `[0, 1)`.
pub fn sample_time<R: Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

fn ensure_same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, a.dims(), b.dims()));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::InvalidInput(format!(
            "{context}: dtype {:?} vs {:?}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - (1 - sigma_min) t) x0 + t x1`, with a single `t` for the whole tensor.
pub fn conditional_path(x0: &Tensor, x1: &Tensor, t: f64, cfg: &FlowConfig) -> Result<Tensor> {
    ensure_same_shape(x0, x1, "conditional_path")?;
    check_time(t)?;
    let a = 1.0 - cfg.noise_keep() * t;
    Ok(((x0 * a)? + (x1 * t)?)?)
}

/// Batched variant: `t[i]` applies to `x0[i]`, `x1[i]`.
pub fn conditional_path_batched(
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    cfg: &FlowConfig,
) -> Result<Tensor> {
    ensure_same_shape(x0, x1, "conditional_path")?;
    let b = x0.dim(0)?;
    if t.len() != b {
        return Err(Error::shape("conditional_path times", &[t.len()], &[b]));
    }
    for &ti in t {
        check_time(ti)?;
    }
    let mut coef_shape = vec![1usize; x0.rank()];
    coef_shape[0] = b;
    let a: Vec<f64> = t.iter().map(|ti| 1.0 - cfg.noise_keep() * ti).collect();
    let a = Tensor::from_vec(a, coef_shape.clone(), x0.device())?.to_dtype(x0.dtype())?;
    let tt = Tensor::from_vec(t.to_vec(), coef_shape, x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + x1.broadcast_mul(&tt)?)?)
}

/// `x1 - (1 - sigma_min) x0`; independent of time.
pub fn target_velocity(x0: &Tensor, x1: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    ensure_same_shape(x0, x1, "target_velocity")?;
    Ok((x1 - (x0 * cfg.noise_keep())?)?)
}

/// Mean squared error over every element; differentiable scalar tensor.
pub fn fm_loss(u_pred: &Tensor, v_target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(u_pred, v_target, "fm_loss")?;
    Ok((u_pred - v_target)?.sqr()?.mean_all()?)
}

/// Per-leading-index mean squared error, used for time-binned diagnostics.
pub fn fm_loss_per_item(u_pred: &Tensor, v_target: &Tensor) -> Result<Vec<f64>> {
    ensure_same_shape(u_pred, v_target, "fm_loss")?;
    let b = u_pred.dim(0)?;
    let per = (u_pred - v_target)?
        .sqr()?
        .reshape((b, ()))?
        .mean(1)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    Ok(per)
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Integrates `dx/dt = velocity(x, t)` from `t = 0` to `t = 1` with
/// `cfg.num_steps` forward-Euler steps.
pub fn euler_integrate<F>(mut velocity: F, x0: &Tensor, cfg: &FlowConfig) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    cfg.validate()?;
    let dt = 1.0 / cfg.num_steps as f64;
    let mut x = x0.clone();
    for step in 0..cfg.num_steps {
        let t = step as f64 * dt;
        let v = velocity(&x, t)?;
        if v.dims() != x.dims() {
            return Err(Error::shape("euler_integrate velocity", v.dims(), x.dims()));
        }
        if !all_finite(&v)? {
            return Err(Error::NonFiniteVelocity { step });
        }
        x = (x + (v * dt)?)?;
    }
    Ok(x)
}
