//! Rectified-flow primitives.
//!
//! Time runs from `t = 0` (data) to `t = 1` (noise). A sample on the straight
//! path between a data point `x0` and a noise draw `x1` is
//! `x_t = (1 - t)·x0 + t·x1`, and the conditional velocity along that path is
//! the constant `x1 - x0`. Sampling integrates the learned field backwards
//! from `t = 1` to `t = 0` with forward Euler on the uniform grid `t_i = i/T`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};

/// The uniform schedule `t_i = i/T`, `i = 0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig {
                field: "steps",
                reason: "must be positive".into(),
            });
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `t_i = i/T`.
    pub fn t(&self, i: usize) -> f64 {
        assert!(i <= self.steps, "time index {i} beyond {} steps", self.steps);
        i as f64 / self.steps as f64
    }

    /// All `T + 1` times in increasing order.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.t(i)).collect()
    }
}

/// A data/noise pair and a time on the straight path between them.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: LatentGrid,
    pub x1: LatentGrid,
    pub t: f64,
}

impl FlowSample {
    pub fn new(x0: LatentGrid, x1: LatentGrid, t: f64) -> Result<Self> {
        x0.ensure_same_shape(&x1)?;
        Ok(Self { x0, x1, t })
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t, range: "[0, 1]" })
    }
}

/// Checks `t ∈ (0, 1]`, the domain of every `1/t` velocity formula.
pub(crate) fn check_positive_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t, range: "(0, 1]" })
    }
}

/// `x_t = (1 - t)·x0 + t·x1`.
pub fn interpolate(sample: &FlowSample) -> Result<LatentGrid> {
    check_unit_time(sample.t)?;
    let t = sample.t;
    sample.x0.lincomb(1.0 - t, &sample.x1, t)
}

/// The conditional velocity `x1 - x0`; it does not depend on `t`.
pub fn conditional_velocity(sample: &FlowSample) -> Result<LatentGrid> {
    sample.x1.sub(&sample.x0)
}

/// One Euler step from `t_from` down to `t_to`: `x - (t_from - t_to)·v`.
pub fn euler_step(x_t: &LatentGrid, v: &LatentGrid, t_from: f64, t_to: f64) -> Result<LatentGrid> {
    if t_to >= t_from {
        return Err(Error::StepDirection { t_from, t_to });
    }
    let dt = t_from - t_to;
    x_t.lincomb(1.0, v, -dt)
}

/// What a velocity model is conditioned on: the source latent and an edit
/// instruction code. Code `0` is the null ("no edit") instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub source: LatentGrid,
    pub instruction: u8,
}

impl Condition {
    pub fn new(source: LatentGrid, instruction: u8) -> Self {
        Self {
            source,
            instruction,
        }
    }

    /// The same source under the null instruction.
    pub fn null(&self) -> Self {
        Self {
            source: self.source.clone(),
            instruction: 0,
        }
    }
}

/// A conditional velocity field `v(x_t, t, condition)`.
pub trait VelocityModel {
    fn velocity(&self, x_t: &LatentGrid, t: f64, condition: &Condition) -> Result<LatentGrid>;
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn velocity(&self, x_t: &LatentGrid, t: f64, condition: &Condition) -> Result<LatentGrid> {
        (**self).velocity(x_t, t, condition)
    }
}

impl<M: VelocityModel + ?Sized> VelocityModel for Box<M> {
    fn velocity(&self, x_t: &LatentGrid, t: f64, condition: &Condition) -> Result<LatentGrid> {
        (**self).velocity(x_t, t, condition)
    }
}

/// Flow-matching loss: the batch mean of `‖v(x_t, t) - (x1 - x0)‖²`.
pub fn fm_loss<M: VelocityModel + ?Sized>(
    model: &M,
    batch: &[FlowSample],
    condition: &Condition,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for sample in batch {
        let x_t = interpolate(sample)?;
        let target = conditional_velocity(sample)?;
        let predicted = model.velocity(&x_t, sample.t, condition)?;
        total += predicted.sub(&target)?.norm_sq();
    }
    Ok(total / batch.len() as f64)
}

/// The noise generator used everywhere in the crate: ChaCha20 seeded with
/// `seed_from_u64`, mapped to normals by `rand_distr::StandardNormal`.
pub fn noise_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derives the seed of sub-stream `index` from a base seed, so one
/// invocation-level seed can feed many independent trajectories.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut rng = noise_rng(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Draws a grid of i.i.d. standard normals from `rng`.
pub fn standard_normal_from<R: rand::Rng + ?Sized>(shape: Shape, rng: &mut R) -> LatentGrid {
    LatentGrid::from_fn(shape, |_, _, _| StandardNormal.sample(rng))
}

/// The seeded starting noise `x_1` of a trajectory.
pub fn standard_normal(shape: Shape, seed: u64) -> LatentGrid {
    standard_normal_from(shape, &mut noise_rng(seed))
}
