//! Velocity-field intervention sampling.
//!
//! At every step the model's predicted velocity `v_pred` is compared with the
//! keep velocity `v_keep = (x_t - x_orig)/t`, the velocity that would carry
//! the current state straight back onto the source. Their element-wise
//! agreement
//!
//! ```text
//! S = |v_keep| / (|v_keep| + |v_pred - v_keep| + ε)
//! ```
//!
//! splits the grid into a preservation region (`S ≥ τ`) and an editing region
//! (`S < τ`). During the first `N` of `T` steps the preservation region follows
//! `v_keep` exactly and the editing region follows the blend
//! `(1 - α)·v_keep + α·v_pred`. Later steps use `v_pred` unchanged.
//!
//! With `α = 1` the blend is plain replacement; `α ∈ [0, 1]` interpolates the
//! edit strength and values outside that range extrapolate it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{check_positive_time, euler_step, standard_normal, Condition, TimeGrid, VelocityModel};
use crate::grid::{LatentGrid, Mask};

/// Default denominator stabilizer of the similarity map.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Knobs of one intervention trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    /// Sampling steps `T`.
    pub steps: usize,
    /// Number of initial steps `N` that are intervened on.
    pub intervene: usize,
    /// Similarity threshold `τ`.
    pub tau: f64,
    /// Blending coefficient `α`.
    pub alpha: f64,
    pub epsilon: f64,
    /// Seed of the starting noise `x_1`.
    pub seed: u64,
}

impl Default for InterventionConfig {
    /// `T = 6`, `N = 1`, `τ = 0.4`, `α = 1`.
    fn default() -> Self {
        Self {
            steps: 6,
            intervene: 1,
            tau: 0.4,
            alpha: 1.0,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.steps == 0 {
            return invalid("steps", "must be positive".into());
        }
        if self.intervene > self.steps {
            return invalid(
                "intervene",
                format!("must not exceed steps ({} > {})", self.intervene, self.steps),
            );
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return invalid("tau", format!("must lie in [0, 1], got {}", self.tau));
        }
        if !self.alpha.is_finite() {
            return invalid("alpha", format!("must be finite, got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return invalid("epsilon", format!("must be positive, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Whether step `i` (counting down from `T` to 1) is intervened on.
    pub fn intervenes_at(&self, i: usize) -> bool {
        i + self.intervene > self.steps
    }
}

/// Element-wise similarity between keep and predicted velocities, in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap(LatentGrid);

impl SimilarityMap {
    pub fn values(&self) -> &LatentGrid {
        &self.0
    }

    pub fn into_grid(self) -> LatentGrid {
        self.0
    }
}

/// The preservation (`high`) and editing (`low`) regions of a similarity map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub high: Mask,
    pub low: Mask,
}

/// Everything a sampling run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T + 1` states, `states[0] = x_1` (noise) down to `states[T] = x_0`.
    pub states: Vec<LatentGrid>,
    /// One map per intervened step, in sampling order.
    pub similarity_maps: Vec<SimilarityMap>,
    pub masks: Vec<MaskPair>,
    pub config: InterventionConfig,
}

impl Trajectory {
    /// The final state `x_0`, i.e. the decoded edit.
    pub fn output(&self) -> &LatentGrid {
        self.states.last().expect("trajectory has at least two states")
    }
}

/// `v_keep = (x_t - x_orig)/t`.
pub fn keep_velocity(x_t: &LatentGrid, x_orig: &LatentGrid, t: f64) -> Result<LatentGrid> {
    check_positive_time(t)?;
    x_t.zip_map(x_orig, |x, o| (x - o) / t)
}

/// `v_diff = v_pred - v_keep`.
pub fn diff_velocity(v_pred: &LatentGrid, v_keep: &LatentGrid) -> Result<LatentGrid> {
    v_pred.sub(v_keep)
}

/// `|v_keep| / (|v_keep| + |v_keep - v_pred| + ε)`, element-wise.
pub fn similarity(v_keep: &LatentGrid, v_pred: &LatentGrid, epsilon: f64) -> Result<SimilarityMap> {
    let s = v_keep.zip_map(v_pred, |keep, pred| {
        let k = keep.abs();
        k / (k + (pred - keep).abs() + epsilon)
    })?;
    Ok(SimilarityMap(s))
}

/// `high = S ≥ τ`, `low = S < τ`. Ties go to the preservation region.
pub fn partition(s: &SimilarityMap, tau: f64) -> MaskPair {
    let high = Mask::from_grid(&s.0, |v| v >= tau);
    let low = high.complement();
    MaskPair { high, low }
}

/// `(1 - α)·v_keep + α·v_pred`.
pub fn blend(v_keep: &LatentGrid, v_pred: &LatentGrid, alpha: f64) -> Result<LatentGrid> {
    v_keep.lincomb(1.0 - alpha, v_pred, alpha)
}

/// `v_keep` on the high mask, [`blend`] on the low mask.
pub fn apply_intervention(
    v_keep: &LatentGrid,
    v_pred: &LatentGrid,
    masks: &MaskPair,
    alpha: f64,
) -> Result<LatentGrid> {
    masks.high.ensure_shape(v_keep.shape())?;
    masks.low.ensure_shape(v_keep.shape())?;
    let blended = blend(v_keep, v_pred, alpha)?;
    let data = (0..v_keep.len())
        .map(|i| if masks.high[i] { v_keep[i] } else { blended[i] })
        .collect();
    LatentGrid::new(v_keep.shape(), data)
}

fn predict<M: VelocityModel + ?Sized>(
    model: &M,
    x: &LatentGrid,
    t: f64,
    step: usize,
    condition: &Condition,
) -> Result<LatentGrid> {
    let v = model.velocity(x, t, condition)?;
    x.ensure_same_shape(&v)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteVelocity { step, t });
    }
    Ok(v)
}

/// Runs the intervention sampler from the seeded noise `x_1 ~ N(0, I)`.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    x_orig: &LatentGrid,
    condition: &Condition,
    config: &InterventionConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let x1 = standard_normal(x_orig.shape(), config.seed);
    sample_from(model, x_orig, condition, config, x1)
}

/// [`sample`] starting from an explicit `x_1`.
pub fn sample_from<M: VelocityModel + ?Sized>(
    model: &M,
    x_orig: &LatentGrid,
    condition: &Condition,
    config: &InterventionConfig,
    x1: LatentGrid,
) -> Result<Trajectory> {
    config.validate()?;
    x1.ensure_same_shape(x_orig)?;
    let grid = TimeGrid::uniform(config.steps)?;
    let mut states = Vec::with_capacity(config.steps + 1);
    let mut similarity_maps = Vec::with_capacity(config.intervene);
    let mut masks = Vec::with_capacity(config.intervene);
    states.push(x1);

    for i in (1..=config.steps).rev() {
        let (t, t_next) = (grid.t(i), grid.t(i - 1));
        let x = states.last().expect("non-empty");
        let v_pred = predict(model, x, t, i, condition)?;
        let v_final = if config.intervenes_at(i) {
            let v_keep = keep_velocity(x, x_orig, t)?;
            let s = similarity(&v_keep, &v_pred, config.epsilon)?;
            let pair = partition(&s, config.tau);
            let v = apply_intervention(&v_keep, &v_pred, &pair, config.alpha)?;
            similarity_maps.push(s);
            masks.push(pair);
            v
        } else {
            v_pred
        };
        let next = euler_step(x, &v_final, t, t_next)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteVelocity { step: i, t });
        }
        states.push(next);
    }

    Ok(Trajectory {
        states,
        similarity_maps,
        masks,
        config: *config,
    })
}

/// The plain Euler rectified-flow sampler, with no intervention code path.
/// Returns the `T + 1` states from `x_1` down to `x_0`.
pub fn sample_baseline<M: VelocityModel + ?Sized>(
    model: &M,
    condition: &Condition,
    steps: usize,
    seed: u64,
) -> Result<Vec<LatentGrid>> {
    let grid = TimeGrid::uniform(steps)?;
    let mut x = standard_normal(condition.source.shape(), seed);
    let mut states = vec![x.clone()];
    for i in (1..=steps).rev() {
        let v = predict(model, &x, grid.t(i), i, condition)?;
        x = euler_step(&x, &v, grid.t(i), grid.t(i - 1))?;
        states.push(x.clone());
    }
    Ok(states)
}

/// The similarity map and masks recorded at intervention step `step_index`
/// (0 is the first, noisiest step).
pub fn mask_snapshot(traj: &Trajectory, step_index: usize) -> Result<(&MaskPair, &SimilarityMap)> {
    let recorded = traj.masks.len();
    match (traj.masks.get(step_index), traj.similarity_maps.get(step_index)) {
        (Some(m), Some(s)) => Ok((m, s)),
        _ => Err(Error::StepIndexOutOfRange {
            index: step_index,
            recorded,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{analytic_edit_model, make_task_suite, Instruction};
    use crate::grid::Shape;

    fn line(values: &[f64]) -> LatentGrid {
        LatentGrid::new(Shape::new(1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn keep_velocity_examples() {
        let v = keep_velocity(&line(&[0.8]), &line(&[0.2]), 0.5).unwrap();
        assert!((v[0] - 1.2).abs() < 1e-15);
        assert_eq!(
            keep_velocity(&line(&[0.3, 0.1]), &line(&[0.3, 0.1]), 0.7).unwrap(),
            line(&[0.0, 0.0])
        );
        let x = line(&[1.3, -0.4]);
        let o = line(&[0.2, 0.9]);
        let a = keep_velocity(&x, &o, 0.6).unwrap();
        let b = keep_velocity(&x, &o, 0.3).unwrap();
        assert!(b.max_abs_diff(&a.scale(2.0)).unwrap() < 1e-14);
        assert!(keep_velocity(&x, &o, 0.0).is_err());
        assert!(keep_velocity(&x, &line(&[0.0]), 0.5).is_err());
    }

    #[test]
    fn diff_velocity_examples() {
        assert_eq!(diff_velocity(&line(&[3.0]), &line(&[1.0])).unwrap(), line(&[2.0]));
        let k = line(&[0.5, -2.0]);
        assert_eq!(diff_velocity(&k, &k).unwrap(), line(&[0.0, 0.0]));
        let d = line(&[0.25, 4.0]);
        assert_eq!(diff_velocity(&k.add(&d).unwrap(), &k).unwrap(), d);
    }

    #[test]
    fn similarity_examples() {
        let s = similarity(&line(&[2.0]), &line(&[2.0]), 1e-8).unwrap();
        assert!((s.values()[0] - 1.0).abs() < 1e-7);
        let s = similarity(&line(&[1.0]), &line(&[3.0]), 1e-8).unwrap();
        assert!((s.values()[0] - 1.0 / 3.0).abs() < 1e-8);
        let s = similarity(&line(&[0.0]), &line(&[5.0]), 1e-8).unwrap();
        assert!(s.values()[0] < 1e-7);
    }

    #[test]
    fn partition_examples() {
        let s = SimilarityMap(line(&[0.9, 0.3]));
        let m = partition(&s, 0.4);
        assert_eq!(m.high.as_slice(), &[true, false]);
        assert_eq!(m.low.as_slice(), &[false, true]);
        assert!(partition(&s, 0.0).high.all());
        let below_one = SimilarityMap(line(&[0.999, 0.0, 0.5]));
        assert!(partition(&below_one, 1.0).low.all());
        // tie goes to the preservation side
        assert!(partition(&SimilarityMap(line(&[0.4])), 0.4).high.all());
    }

    #[test]
    fn blend_examples() {
        let k = line(&[1.0, -3.0]);
        let p = line(&[2.0, 5.0]);
        assert_eq!(blend(&k, &p, 1.0).unwrap(), p);
        assert_eq!(blend(&k, &p, 0.0).unwrap(), k);
        assert_eq!(blend(&line(&[1.0]), &line(&[2.0]), -1.0).unwrap(), line(&[0.0]));
    }

    #[test]
    fn intervention_examples() {
        let k = line(&[1.0, 1.0]);
        let p = line(&[1.0, 5.0]);
        let masks = partition(&SimilarityMap(line(&[1.0, 0.3])), 0.4);
        assert_eq!(apply_intervention(&k, &p, &masks, 0.5).unwrap(), line(&[1.0, 3.0]));
        // α = 1 is plain replacement
        assert_eq!(apply_intervention(&k, &p, &masks, 1.0).unwrap(), line(&[1.0, 5.0]));
        let all_high = MaskPair {
            high: Mask::filled(k.shape(), true),
            low: Mask::filled(k.shape(), false),
        };
        for alpha in [-1.0, 0.3, 2.0] {
            assert_eq!(apply_intervention(&k, &p, &all_high, alpha).unwrap(), k);
        }
    }

    #[test]
    fn config_validation_names_the_field() {
        let field = |c: InterventionConfig| match c.validate() {
            Err(Error::InvalidConfig { field, .. }) => field,
            other => panic!("expected invalid config, got {other:?}"),
        };
        let base = InterventionConfig::default();
        assert!(base.validate().is_ok());
        assert_eq!(field(InterventionConfig { steps: 0, ..base }), "steps");
        assert_eq!(field(InterventionConfig { intervene: 7, ..base }), "intervene");
        assert_eq!(field(InterventionConfig { tau: 1.5, ..base }), "tau");
        assert_eq!(field(InterventionConfig { epsilon: 0.0, ..base }), "epsilon");
        assert_eq!(field(InterventionConfig { alpha: f64::NAN, ..base }), "alpha");
    }

    #[test]
    fn gating_counts_initial_steps() {
        let c = InterventionConfig {
            steps: 6,
            intervene: 2,
            ..Default::default()
        };
        let gated: Vec<usize> = (1..=6).rev().filter(|&i| c.intervenes_at(i)).collect();
        assert_eq!(gated, vec![6, 5]);
        // the index rule agrees with t_i > 1 - N/T on the uniform grid
        for n in 0..=6 {
            let c = InterventionConfig { intervene: n, ..c };
            for i in 1..=6 {
                let t = i as f64 / 6.0;
                assert_eq!(c.intervenes_at(i), t > 1.0 - n as f64 / 6.0 + 1e-12, "N={n} i={i}");
            }
        }
    }

    #[test]
    fn trajectory_bookkeeping_and_snapshots() {
        let task = &make_task_suite(1, 1, Shape::new(1, 16, 16)).unwrap()[0];
        let config = InterventionConfig {
            steps: 5,
            intervene: 3,
            ..Default::default()
        };
        let traj = sample(&analytic_edit_model(task), &task.x_orig, &task.condition(), &config)
            .unwrap();
        assert_eq!(traj.states.len(), 6);
        assert_eq!(traj.similarity_maps.len(), 3);
        assert_eq!(traj.states[0], standard_normal(task.shape(), config.seed));
        assert!(mask_snapshot(&traj, 2).is_ok());
        assert!(matches!(
            mask_snapshot(&traj, 3),
            Err(Error::StepIndexOutOfRange { index: 3, recorded: 3 })
        ));
    }

    #[test]
    fn identity_task_keeps_everything() {
        let tasks = make_task_suite(2, 6, Shape::new(1, 16, 16)).unwrap();
        let task = tasks
            .iter()
            .find(|t| t.instruction == Instruction::Identity)
            .unwrap();
        let config = InterventionConfig {
            steps: 6,
            intervene: 6,
            tau: 0.9,
            ..Default::default()
        };
        let traj = sample(&analytic_edit_model(task), &task.x_orig, &task.condition(), &config)
            .unwrap();
        for k in 0..6 {
            let (masks, _) = mask_snapshot(&traj, k).unwrap();
            assert!(masks.low.none(), "step {k}");
        }
    }

    struct Exploding;

    impl VelocityModel for Exploding {
        fn velocity(&self, x: &LatentGrid, t: f64, _: &Condition) -> Result<LatentGrid> {
            Ok(if t < 0.5 { x.map(|_| f64::INFINITY) } else { x.clone() })
        }
    }

    #[test]
    fn non_finite_velocity_names_the_step() {
        let x_orig = line(&[0.5, 0.5]);
        let cond = Condition::new(x_orig.clone(), 0);
        let config = InterventionConfig {
            steps: 4,
            intervene: 0,
            ..Default::default()
        };
        assert_eq!(
            sample(&Exploding, &x_orig, &cond, &config).unwrap_err(),
            Error::NonFiniteVelocity { step: 1, t: 0.25 }
        );
    }
}
