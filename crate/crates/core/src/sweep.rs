//! Strength sweeps: one trajectory per edit strength, sharing the noise seed.

use crate::analytic::EditTask;
use crate::error::{Error, Result};
use crate::flow::VelocityModel;
use crate::grid::LatentGrid;
use crate::metrics::StrengthSweep;
use crate::sampler::{sample, sample_baseline, InterventionConfig, Trajectory};
use crate::toy::CfgModel;

/// Guidance scales of the classifier-free-guidance comparison sweep.
pub const CFG_SCALES: [f64; 5] = [1.0, 2.5, 4.0, 5.5, 7.0];

/// Checks a strength list: finite, pairwise distinct and, unless
/// `allow_extrapolation`, inside `(0, 1]`.
pub fn validate_strengths(strengths: &[f64], allow_extrapolation: bool) -> Result<()> {
    let bad = |reason: String| {
        Err(Error::InvalidConfig {
            field: "strengths",
            reason,
        })
    };
    if strengths.is_empty() {
        return bad("at least one strength is required".into());
    }
    for (i, &a) in strengths.iter().enumerate() {
        if !a.is_finite() {
            return bad(format!("strength {a} is not finite"));
        }
        if strengths[..i].contains(&a) {
            return bad(format!("strength {a} appears twice"));
        }
        if !allow_extrapolation && !(a > 0.0 && a <= 1.0) {
            return bad(format!(
                "strength {a} lies outside (0, 1]; pass the extrapolation flag to allow it"
            ));
        }
    }
    Ok(())
}

/// Runs the intervention sampler once per strength (the `alpha` of `config`
/// is replaced) and collects the outputs behind the source image.
pub fn alpha_sweep<M: VelocityModel + ?Sized>(
    model: &M,
    task: &EditTask,
    config: &InterventionConfig,
    strengths: &[f64],
) -> Result<(Vec<Trajectory>, StrengthSweep)> {
    let condition = task.condition();
    let trajectories = strengths
        .iter()
        .map(|&alpha| {
            let c = InterventionConfig { alpha, ..*config };
            sample(model, &task.x_orig, &condition, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = vec![task.x_orig.clone()];
    images.extend(trajectories.iter().map(|t| t.output().clone()));
    let sweep = StrengthSweep::new(strengths.to_vec(), images, task.preserve_mask())?;
    Ok((trajectories, sweep))
}

/// Plain sampling under classifier-free guidance, once per scale.
pub fn cfg_sweep<M: VelocityModel + Copy>(
    model: M,
    task: &EditTask,
    steps: usize,
    seed: u64,
    scales: &[f64],
) -> Result<StrengthSweep> {
    let condition = task.condition();
    let mut images = vec![task.x_orig.clone()];
    for &scale in scales {
        let guided = CfgModel { model, scale };
        let states = sample_baseline(&guided, &condition, steps, seed)?;
        images.push(states.last().cloned().unwrap_or_else(|| LatentGrid::zeros(task.shape())));
    }
    StrengthSweep::new(scales.to_vec(), images, task.preserve_mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{analytic_edit_model, make_task_suite};
    use crate::grid::Shape;
    use crate::metrics::{default_strengths, delta_smooth, Distance};

    #[test]
    fn strength_validation() {
        assert!(validate_strengths(&default_strengths(), false).is_ok());
        assert!(validate_strengths(&[-1.0, 2.0], false).is_err());
        assert!(validate_strengths(&[-1.0, 2.0], true).is_ok());
        assert!(validate_strengths(&[0.5, 0.5], true).is_err());
        assert!(validate_strengths(&[], true).is_err());
        assert!(matches!(
            validate_strengths(&[f64::NAN], true),
            Err(Error::InvalidConfig { field: "strengths", .. })
        ));
    }

    #[test]
    fn analytic_full_blend_sweep_is_collinear() {
        let task = &make_task_suite(2, 1, Shape::new(1, 8, 8)).unwrap()[0];
        let model = analytic_edit_model(task);
        let config = InterventionConfig {
            intervene: 6,
            tau: 1.0,
            ..InterventionConfig::default()
        };
        let (trajectories, sweep) = alpha_sweep(&model, task, &config, &default_strengths()).unwrap();
        assert_eq!(trajectories.len(), 5);
        assert!(trajectories.iter().all(|t| t.config.seed == config.seed));
        assert!(delta_smooth(&sweep, &Distance::L2).unwrap() < 1e-9);
    }
}
