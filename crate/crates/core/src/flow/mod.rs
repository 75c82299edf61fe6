//! Rectified flow over masked pitch sequences: time sampling, interpolation,
//! the masked flow-matching loss, guided velocities and midpoint sampling.

pub mod train;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::net::{backward, forward, forward_with_cache, DropFlags, NetInput, Parameters, Real};
use crate::signal::{Mask, ModelSequence, TrainingExample};
use crate::{Error, Result};

pub use train::{lr_at, run_training, train_step, AdamW, TraceRow, TrainConfig, TrainState};

/// Maps `u ∈ [0, 1]` to flow time, biased toward small `t`.
pub fn cosmap(u: f64) -> f64 {
    1.0 - (PI * u / 2.0).cos()
}

pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    cosmap(rng.gen::<f64>())
}

/// `(1 - t) x0 + t x1`, elementwise.
pub fn interpolate<T: Real>(x0: &[T], x1: &[T], t: T) -> Result<Vec<T>> {
    if x0.len() != x1.len() {
        return Err(Error::LengthMismatch(format!(
            "noise has {} frames, data has {}",
            x0.len(),
            x1.len()
        )));
    }
    let s = T::one() - t;
    Ok(x0.iter().zip(x1).map(|(&a, &b)| s * a + t * b).collect())
}

/// Frame-aligned conditions for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, T> {
    pub y: &'a [u8],
    pub x_ctx: &'a [T],
    pub u: &'a [bool],
}

/// Anything that maps `(x_t, t, conditions)` to a velocity per frame.
pub trait VelocityField<T: Real> {
    fn velocity(&self, x_t: &[T], t: T, cond: &Conditioning<'_, T>, drop: DropFlags) -> Result<Vec<T>>;
}

impl<T: Real> VelocityField<T> for Parameters<T> {
    fn velocity(&self, x_t: &[T], t: T, cond: &Conditioning<'_, T>, drop: DropFlags) -> Result<Vec<T>> {
        forward(
            self,
            &NetInput {
                x_t,
                t,
                y: cond.y,
                x_ctx: cond.x_ctx,
                u: cond.u,
                drop,
            },
        )
    }
}

/// Random quantities of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw<T> {
    pub eps: Vec<T>,
    pub t: T,
    pub drop: DropFlags,
}

/// Draws noise, time and independent condition drops. With `force_drop_u`
/// the voicing flag is still drawn, so the stream layout does not depend on
/// the training phase.
pub fn draw_flow<T: Real, R: Rng + ?Sized>(n: usize, p_drop: f64, force_drop_u: bool, rng: &mut R) -> FlowDraw<T> {
    let eps = (0..n)
        .map(|_| T::lit(StandardNormal.sample(&mut *rng)))
        .collect();
    let t = T::lit(sample_t(rng));
    let drop_y = rng.gen_bool(p_drop);
    let drop_ctx = rng.gen_bool(p_drop);
    let drop_u = rng.gen_bool(p_drop) || force_drop_u;
    FlowDraw {
        eps,
        t,
        drop: DropFlags {
            drop_y,
            drop_ctx,
            drop_u,
        },
    }
}

/// Network inputs and regression target for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms<T> {
    pub x_t: Vec<T>,
    pub x_ctx: Vec<T>,
    pub target: Vec<T>,
}

pub fn loss_terms<T: Real>(example: &TrainingExample, draw: &FlowDraw<T>) -> Result<LossTerms<T>> {
    let n = example.seq.len();
    if draw.eps.len() != n || example.mask.len() != n {
        return Err(Error::LengthMismatch(format!(
            "example has {n} frames, noise {} and mask {}",
            draw.eps.len(),
            example.mask.len()
        )));
    }
    let x1: Vec<T> = example.seq.x.iter().map(|&v| T::lit(v)).collect();
    let x_t = interpolate(&draw.eps, &x1, draw.t)?;
    let x_ctx = x1
        .iter()
        .zip(&example.mask.m)
        .map(|(&v, &m)| if m { T::zero() } else { v })
        .collect();
    let target = x1.iter().zip(&draw.eps).map(|(&x, &e)| x - e).collect();
    Ok(LossTerms { x_t, x_ctx, target })
}

/// Mean squared error over masked frames; zero when nothing is masked.
pub fn masked_mse<T: Real>(v: &[T], target: &[T], mask: &Mask) -> T {
    let count = mask.count();
    if count == 0 {
        return T::zero();
    }
    let sum: T = v
        .iter()
        .zip(target)
        .zip(&mask.m)
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a - b) * (a - b))
        .sum();
    sum / T::from_usize(count).expect("count")
}

/// Gradient of [`masked_mse`] with respect to `v`; exactly zero off the mask.
pub fn masked_mse_grad<T: Real>(v: &[T], target: &[T], mask: &Mask) -> Vec<T> {
    let count = mask.count();
    if count == 0 {
        return vec![T::zero(); v.len()];
    }
    let k = T::lit(2.0) / T::from_usize(count).expect("count");
    v.iter()
        .zip(target)
        .zip(&mask.m)
        .map(|((&a, &b), &m)| if m { k * (a - b) } else { T::zero() })
        .collect()
}

/// Flow-matching loss of `field` on one example with fixed random draws.
pub fn flow_loss_with<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    example: &TrainingExample,
    draw: &FlowDraw<T>,
) -> Result<T> {
    if example.mask.count() == 0 {
        return Ok(T::zero());
    }
    let terms = loss_terms(example, draw)?;
    let cond = Conditioning {
        y: &example.seq.y,
        x_ctx: &terms.x_ctx,
        u: &example.seq.u,
    };
    let v = field.velocity(&terms.x_t, draw.t, &cond, draw.drop)?;
    Ok(masked_mse(&v, &terms.target, &example.mask))
}

/// Draws `(ε, t, drops)` and evaluates the loss.
pub fn flow_loss<T: Real, F: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    example: &TrainingExample,
    p_drop: f64,
    rng: &mut R,
) -> Result<T> {
    let draw = draw_flow(example.seq.len(), p_drop, false, rng);
    flow_loss_with(field, example, &draw)
}

/// Loss plus parameter gradients, accumulated into `grads`.
pub fn flow_loss_and_grad<T: Real>(
    params: &Parameters<T>,
    example: &TrainingExample,
    draw: &FlowDraw<T>,
    grads: &mut [T],
) -> Result<T> {
    if example.mask.count() == 0 {
        return Ok(T::zero());
    }
    let terms = loss_terms(example, draw)?;
    let input = NetInput {
        x_t: &terms.x_t,
        t: draw.t,
        y: &example.seq.y,
        x_ctx: &terms.x_ctx,
        u: &example.seq.u,
        drop: draw.drop,
    };
    let (v, cache) = forward_with_cache(params, &input)?;
    let loss = masked_mse(&v, &terms.target, &example.mask);
    let d_out = masked_mse_grad(&v, &terms.target, &example.mask);
    backward(params, &input, &cache, &d_out, grads);
    Ok(loss)
}

/// Guided velocity `(1 - α) v(∅) + α v(cond)`: two evaluations, one with
/// every condition dropped. Written so that `α = 0` and `α = 1` reproduce
/// the unconditional and conditional velocities exactly.
pub fn guided_velocity<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    x_t: &[T],
    t: T,
    cond: &Conditioning<'_, T>,
    cond_drop: DropFlags,
    alpha: T,
) -> Result<Vec<T>> {
    if !(alpha >= T::zero()) {
        return Err(Error::InvalidArgument("guidance scale must be non-negative".into()));
    }
    let v_uncond = field.velocity(x_t, t, cond, DropFlags::ALL)?;
    let v_cond = field.velocity(x_t, t, cond, cond_drop)?;
    Ok(combine_guidance(&v_uncond, &v_cond, alpha))
}

pub fn combine_guidance<T: Real>(v_uncond: &[T], v_cond: &[T], alpha: T) -> Vec<T> {
    let s = T::one() - alpha;
    v_uncond
        .iter()
        .zip(v_cond)
        .map(|(&a, &b)| s * a + alpha * b)
        .collect()
}

/// Fixed-step explicit midpoint integration from `t = 0` to `t = 1`.
pub fn integrate_midpoint<T: Real, F>(mut field: F, x0: &[T], n_steps: usize) -> Result<Vec<T>>
where
    F: FnMut(&[T], T) -> Result<Vec<T>>,
{
    if n_steps == 0 {
        return Err(Error::InvalidArgument("solver needs at least one step".into()));
    }
    let h = T::one() / T::from_usize(n_steps).expect("steps");
    let half = h * T::lit(0.5);
    let mut x = x0.to_vec();
    for k in 0..n_steps {
        let t = T::from_usize(k).expect("step") * h;
        let v1 = field(&x, t)?;
        let mid: Vec<T> = x.iter().zip(&v1).map(|(&a, &b)| a + half * b).collect();
        let v2 = field(&mid, t + half)?;
        for (a, &b) in x.iter_mut().zip(&v2) {
            *a += h * b;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "solver state became non-finite at frame {i} after step {} of {n_steps} (t = {:.4})",
                k + 1,
                (t + h).f64()
            )));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub cfg_scale: f64,
    pub solver: Solver,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 16,
            cfg_scale: 1.25,
            solver: Solver::Midpoint,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("sampler.n_steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::InvalidArgument("sampler.cfg_scale must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// Infills the masked frames of `seq`. Context frames of the result are the
/// input values, bit for bit. `use_unvoiced = false` feeds the null voicing
/// embedding, for models trained without it.
pub fn generate<R: Rng + ?Sized>(
    params: &Parameters<f32>,
    seq: &ModelSequence,
    mask: &Mask,
    use_unvoiced: bool,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sampler.validate()?;
    seq.validate()?;
    let n = seq.len();
    if mask.len() != n {
        return Err(Error::LengthMismatch(format!("sequence has {n} frames, mask has {}", mask.len())));
    }
    if n > params.config.max_len {
        return Err(Error::OutOfRange(format!(
            "{n} frames exceed the model's {}-frame budget",
            params.config.max_len
        )));
    }
    if mask.count() == 0 {
        return Err(Error::InvalidArgument("nothing to generate: mask is empty".into()));
    }
    let x_ctx: Vec<f32> = seq
        .x
        .iter()
        .zip(&mask.m)
        .map(|(&v, &m)| if m { 0.0 } else { v as f32 })
        .collect();
    let cond = Conditioning {
        y: &seq.y,
        x_ctx: &x_ctx,
        u: &seq.u,
    };
    let cond_drop = DropFlags {
        drop_u: !use_unvoiced,
        ..DropFlags::NONE
    };
    let alpha = sampler.cfg_scale as f32;
    let x0: Vec<f32> = (0..n)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    let x1 = integrate_midpoint(
        |x, t| guided_velocity(params, x, t, &cond, cond_drop, alpha),
        &x0,
        sampler.n_steps,
    )?;
    Ok(x1
        .iter()
        .zip(&seq.x)
        .zip(&mask.m)
        .map(|((&g, &c), &m)| if m { f64::from(g) } else { c })
        .collect())
}
