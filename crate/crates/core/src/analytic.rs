//! Closed-form velocity fields and a synthetic edit-task generator.
//!
//! A point-mass data distribution at `μ` has the exact marginal velocity
//! `(x_t - μ)/t`. Used as an edit model it lets every property of the
//! intervention sampler be checked against exact arithmetic, without
//! training anything.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{check_positive_time, Condition, VelocityModel};
use crate::grid::{LatentGrid, Mask, Shape};

/// The flow that transports any noise draw onto a single target point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassFlow {
    pub target: LatentGrid,
}

impl PointMassFlow {
    pub fn new(target: LatentGrid) -> Self {
        Self { target }
    }
}

/// `(x_t - target)/t` for `t ∈ (0, 1]`.
pub fn point_mass_velocity(flow: &PointMassFlow, x_t: &LatentGrid, t: f64) -> Result<LatentGrid> {
    check_positive_time(t)?;
    flow.target.ensure_same_shape(x_t)?;
    x_t.zip_map(&flow.target, |x, mu| (x - mu) / t)
}

impl VelocityModel for PointMassFlow {
    fn velocity(&self, x_t: &LatentGrid, t: f64, _: &Condition) -> Result<LatentGrid> {
        point_mass_velocity(self, x_t, t)
    }
}

/// Isotropic Gaussian data `N(mean, sigma²·I)` under standard-normal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFlow {
    mean: LatentGrid,
    sigma: f64,
}

impl GaussianFlow {
    pub fn new(mean: LatentGrid, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "sigma",
                reason: format!("must be positive and finite, got {sigma}"),
            });
        }
        Ok(Self { mean, sigma })
    }

    pub fn mean(&self) -> &LatentGrid {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Posterior-mean velocity `E[x1 - x0 | x_t]` of the straight-path coupling.
///
/// With `x0 ~ N(μ, σ²)` and `x1 ~ N(0, 1)` per element, `x_t` and `x1 - x0`
/// are jointly Gaussian, so
/// `E[x1 - x0 | x_t] = -μ + k·(x_t - (1 - t)·μ)` with
/// `k = (t - (1 - t)·σ²) / ((1 - t)²·σ² + t²)`.
pub fn gaussian_velocity(flow: &GaussianFlow, x_t: &LatentGrid, t: f64) -> Result<LatentGrid> {
    check_positive_time(t)?;
    flow.mean.ensure_same_shape(x_t)?;
    let s2 = flow.sigma * flow.sigma;
    let u = 1.0 - t;
    let k = (t - u * s2) / (u * u * s2 + t * t);
    x_t.zip_map(&flow.mean, |x, mu| -mu + k * (x - u * mu))
}

impl VelocityModel for GaussianFlow {
    fn velocity(&self, x_t: &LatentGrid, t: f64, _: &Condition) -> Result<LatentGrid> {
        gaussian_velocity(self, x_t, t)
    }
}

/// The parametric edits of the synthetic task suite. The discriminant is the
/// instruction code fed to conditional models; `Identity` doubles as the null
/// condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Instruction {
    Identity = 0,
    BrightenDisk = 1,
    DarkenDisk = 2,
    StripeIntensity = 3,
    BackgroundShift = 4,
    GammaRemap = 5,
}

impl Instruction {
    /// Number of instruction codes, including the null code.
    pub const VOCAB: usize = 6;

    pub const ALL: [Instruction; Self::VOCAB] = [
        Instruction::Identity,
        Instruction::BrightenDisk,
        Instruction::DarkenDisk,
        Instruction::StripeIntensity,
        Instruction::BackgroundShift,
        Instruction::GammaRemap,
    ];

    // Cycle order of the suite generator: any five consecutive tasks cover
    // recolor, attribute, background, style and identity edits.
    const SUITE_CYCLE: [Instruction; Self::VOCAB] = [
        Instruction::BrightenDisk,
        Instruction::StripeIntensity,
        Instruction::BackgroundShift,
        Instruction::GammaRemap,
        Instruction::Identity,
        Instruction::DarkenDisk,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(Error::UnknownInstruction {
                code,
                vocab: Self::VOCAB,
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Instruction::Identity => "identity",
            Instruction::BrightenDisk => "brighten_disk",
            Instruction::DarkenDisk => "darken_disk",
            Instruction::StripeIntensity => "stripe_intensity",
            Instruction::BackgroundShift => "background_shift",
            Instruction::GammaRemap => "gamma_remap",
        }
    }
}

const DISK_DELTA: f64 = 0.3;
const STRIPE_DELTA: f64 = 0.25;
const BACKGROUND_DELTA: f64 = 0.25;
const GAMMA: f64 = 0.5;

/// One synthetic image: a flat background, horizontal stripes, and a disk
/// drawn on top. Intensities are per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub background: Vec<f64>,
    pub stripe: Vec<f64>,
    pub disk: Vec<f64>,
    pub stripe_period: usize,
    pub stripe_phase: usize,
    pub disk_center: (f64, f64),
    pub disk_radius: f64,
}

impl Scene {
    pub fn random<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let (h, w) = (shape.height, shape.width);
        let mut background = Vec::with_capacity(shape.channels);
        let mut stripe = Vec::with_capacity(shape.channels);
        let mut disk = Vec::with_capacity(shape.channels);
        for _ in 0..shape.channels {
            let b = rng.random_range(0.25..0.40);
            background.push(b);
            stripe.push(b + rng.random_range(0.12..0.20));
            disk.push(b + rng.random_range(0.15..0.25));
        }
        let stripe_period = if h >= 4 { 4 } else { 2 };
        let stripe_phase = rng.random_range(0..stripe_period.min(h));
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let disk_radius = h.min(w) as f64 * rng.random_range(0.2..0.3);
        Self {
            shape,
            background,
            stripe,
            disk,
            stripe_period,
            stripe_phase,
            disk_center: (cy, cx),
            disk_radius,
        }
    }

    fn in_disk(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.disk_center.0;
        let dx = x as f64 - self.disk_center.1;
        dy * dy + dx * dx <= self.disk_radius * self.disk_radius
    }

    fn in_stripe(&self, y: usize, x: usize) -> bool {
        y % self.stripe_period == self.stripe_phase && !self.in_disk(y, x)
    }

    /// Pixels covered by the disk (all channels).
    pub fn disk_mask(&self) -> Mask {
        Mask::from_fn(self.shape, |_, y, x| self.in_disk(y, x))
    }

    /// Visible stripe pixels (not under the disk).
    pub fn stripe_mask(&self) -> Mask {
        Mask::from_fn(self.shape, |_, y, x| self.in_stripe(y, x))
    }

    /// Pixels that are neither disk nor stripe.
    pub fn background_mask(&self) -> Mask {
        Mask::from_fn(self.shape, |_, y, x| {
            !self.in_disk(y, x) && !self.in_stripe(y, x)
        })
    }

    pub fn render(&self) -> LatentGrid {
        LatentGrid::from_fn(self.shape, |c, y, x| {
            if self.in_disk(y, x) {
                self.disk[c]
            } else if self.in_stripe(y, x) {
                self.stripe[c]
            } else {
                self.background[c]
            }
        })
    }

    /// Applies `instruction` to the rendered scene, clamped to `[0, 1]`.
    pub fn edit(&self, instruction: Instruction) -> LatentGrid {
        let base = self.render();
        let edited = match instruction {
            Instruction::Identity => base,
            Instruction::GammaRemap => base.map(|v| v.powf(GAMMA)),
            _ => LatentGrid::from_fn(self.shape, |c, y, x| {
                let v = base.get(c, y, x);
                let delta = match instruction {
                    Instruction::BrightenDisk if self.in_disk(y, x) => DISK_DELTA,
                    Instruction::DarkenDisk if self.in_disk(y, x) => -DISK_DELTA,
                    Instruction::StripeIntensity if self.in_stripe(y, x) => STRIPE_DELTA,
                    Instruction::BackgroundShift
                        if !self.in_disk(y, x) && !self.in_stripe(y, x) =>
                    {
                        BACKGROUND_DELTA
                    }
                    _ => 0.0,
                };
                v + delta
            }),
        };
        edited.clamp(0.0, 1.0)
    }
}

/// A source image, an edit instruction, the fully edited ground truth and
/// the region the edit touches.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTask {
    pub id: String,
    pub instruction: Instruction,
    pub x_orig: LatentGrid,
    pub x_edit: LatentGrid,
    /// True exactly where `x_edit != x_orig`.
    pub gt_mask: Mask,
}

impl EditTask {
    /// Builds a task and derives its ground-truth mask. `x_orig` must lie in
    /// `[0, 1]`.
    pub fn new(
        id: impl Into<String>,
        instruction: Instruction,
        x_orig: LatentGrid,
        x_edit: LatentGrid,
    ) -> Result<Self> {
        x_orig.ensure_same_shape(&x_edit)?;
        if let Some(index) = x_orig
            .as_slice()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidConfig {
                field: "x_orig",
                reason: format!("value at index {index} outside [0, 1]"),
            });
        }
        let diff = x_edit.sub(&x_orig)?;
        let gt_mask = Mask::from_grid(&diff, |d| d.abs() > 0.0);
        Ok(Self {
            id: id.into(),
            instruction,
            x_orig,
            x_edit,
            gt_mask,
        })
    }

    pub fn shape(&self) -> Shape {
        self.x_orig.shape()
    }

    /// The conditioning a model sees for this task.
    pub fn condition(&self) -> Condition {
        Condition::new(self.x_orig.clone(), self.instruction.code())
    }

    /// The complement of the ground-truth mask.
    pub fn preserve_mask(&self) -> Mask {
        self.gt_mask.complement()
    }
}

/// Scenes and instructions behind [`make_task_suite`], in suite order.
pub fn make_scene_suite(seed: u64, count: usize, shape: Shape) -> Result<Vec<(Scene, Instruction)>> {
    shape.ensure_nondegenerate()?;
    if count == 0 {
        return Err(Error::InvalidConfig {
            field: "count",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let instruction = Instruction::SUITE_CYCLE[i % Instruction::VOCAB];
            (Scene::random(shape, &mut rng), instruction)
        })
        .collect())
}

/// A deterministic suite of `count` synthetic edit tasks.
pub fn make_task_suite(seed: u64, count: usize, shape: Shape) -> Result<Vec<EditTask>> {
    make_scene_suite(seed, count, shape)?
        .into_iter()
        .enumerate()
        .map(|(i, (scene, instruction))| {
            EditTask::new(
                format!("task-{i:04}-{}", instruction.name()),
                instruction,
                scene.render(),
                scene.edit(instruction),
            )
        })
        .collect()
}

/// The exact edit model of a task: a point mass at its ground-truth edit.
pub fn analytic_edit_model(task: &EditTask) -> PointMassFlow {
    PointMassFlow::new(task.x_edit.clone())
}

/// The exact reconstruction model of a task: a point mass at its source.
pub fn analytic_null_model(task: &EditTask) -> PointMassFlow {
    PointMassFlow::new(task.x_orig.clone())
}
