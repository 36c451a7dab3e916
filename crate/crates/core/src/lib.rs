//! Training-free editing of rectified-flow samples by intervening on the
//! velocity field.
//!
//! At each intervened sampling step the model's predicted velocity is compared
//! with the *keep* velocity that would carry the current state straight back
//! to the source image. Where the two agree the keep velocity is used as is;
//! elsewhere the edit is applied through a blend whose weight `alpha` sets the
//! edit strength.
//!
//! ```
//! use velomask::{make_task_suite, analytic_edit_model, sample, InterventionConfig, Shape};
//!
//! let task = &make_task_suite(0, 1, Shape::new(1, 8, 8)).unwrap()[0];
//! let model = analytic_edit_model(task);
//! let config = InterventionConfig { intervene: 0, ..InterventionConfig::default() };
//! let traj = sample(&model, &task.x_orig, &task.condition(), &config).unwrap();
//! assert!(traj.output().max_abs_diff(&task.x_edit).unwrap() < 1e-9);
//! ```
//!
//! The modules:
//!
//! * [`grid`]: shaped `f64` tensors and boolean masks.
//! * [`flow`]: interpolation, conditional velocities, Euler steps, the
//!   flow-matching loss and the [`VelocityModel`] trait.
//! * [`analytic`]: closed-form velocity fields and the synthetic edit suite.
//! * [`sampler`]: the intervention sampler.
//! * [`metrics`]: preservation, smoothness and adherence scores.
//! * [`sweep`]: strength and guidance-scale sweeps.
//! * [`toy`]: a small trainable conditional velocity network.

pub mod analytic;
pub mod error;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod sampler;
pub mod sweep;
pub mod toy;

pub use analytic::{
    analytic_edit_model, analytic_null_model, gaussian_velocity, make_scene_suite,
    make_task_suite, point_mass_velocity, EditTask, GaussianFlow, Instruction, PointMassFlow,
    Scene,
};
pub use error::{Error, Result};
pub use flow::{
    conditional_velocity, euler_step, fm_loss, interpolate, noise_rng, split_seed, standard_normal,
    standard_normal_from, Condition, FlowSample, TimeGrid, VelocityModel,
};
pub use grid::{LatentGrid, Mask, Shape};
pub use metrics::{
    default_strengths, delta_smooth, dir_score, masked_distance, psnr, report, ssim, Distance,
    DistanceFn, MetricReport, Norm, SsimConstants, StrengthSweep,
};
pub use sampler::{
    apply_intervention, blend, diff_velocity, keep_velocity, mask_snapshot, partition, sample,
    sample_baseline, sample_from, similarity, InterventionConfig, MaskPair, SimilarityMap,
    Trajectory, DEFAULT_EPSILON,
};
pub use toy::{
    backward, cfg_velocity, load_model, save_model, train, CfgModel, ToyVelocityNet,
    TrainConfig, TrainOutcome, TrainingExample,
};
pub use sweep::{alpha_sweep, cfg_sweep, validate_strengths, CFG_SCALES};

// The guide's listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/flows.md")]
    mod flows {}
    #[doc = include_str!("../../../book/src/sampler.md")]
    mod sampler {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/toy.md")]
    mod toy {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
