//! Consistency and continuity metrics for edit trajectories.
//!
//! * Background preservation: [`psnr`], [`ssim`] and [`masked_distance`],
//!   evaluated on the region an edit should leave alone.
//! * Continuity: [`delta_smooth`], the largest normalized triangle-inequality
//!   slack over consecutive image triples of a strength sweep.
//! * Adherence: [`dir_score`], per-strength similarity to the edit direction
//!   divided by the strength, averaged.
//!
//! Distances and similarities are pluggable so learned perceptual metrics can
//! be dropped in; the built-ins work directly on grids.

use crate::analytic::EditTask;
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Mask};

/// A distance between two images.
pub trait DistanceFn {
    fn distance(&self, a: &LatentGrid, b: &LatentGrid) -> f64;
}

impl<F: Fn(&LatentGrid, &LatentGrid) -> f64> DistanceFn for F {
    fn distance(&self, a: &LatentGrid, b: &LatentGrid) -> f64 {
        self(a, b)
    }
}

/// Built-in grid distances. Shapes are assumed equal; see [`StrengthSweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    /// Euclidean norm of the difference.
    L2,
    /// Sum of absolute differences.
    L1,
    /// Mean absolute difference.
    MeanAbs,
}

impl DistanceFn for Distance {
    fn distance(&self, a: &LatentGrid, b: &LatentGrid) -> f64 {
        let diffs = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y);
        match self {
            Distance::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            Distance::L1 => diffs.map(f64::abs).sum(),
            Distance::MeanAbs => diffs.map(f64::abs).sum::<f64>() / a.len() as f64,
        }
    }
}

/// The strengths evaluated by default: five uniform levels in `[0.2, 1]`.
pub fn default_strengths() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

/// Images produced at increasing edit strengths, preceded by the source.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthSweep {
    strengths: Vec<f64>,
    images: Vec<LatentGrid>,
    mask: Mask,
}

impl StrengthSweep {
    /// `images[0]` is the source; `images[i]` was produced at `strengths[i-1]`.
    /// `mask` marks the region that should be preserved.
    pub fn new(strengths: Vec<f64>, images: Vec<LatentGrid>, mask: Mask) -> Result<Self> {
        if images.len() != strengths.len() + 1 {
            return Err(Error::InvalidConfig {
                field: "images",
                reason: format!(
                    "expected {} images (source + one per strength), got {}",
                    strengths.len() + 1,
                    images.len()
                ),
            });
        }
        let shape = images[0].shape();
        for image in &images {
            image.ensure_same_shape(&images[0])?;
        }
        mask.ensure_shape(shape)?;
        Ok(Self {
            strengths,
            images,
            mask,
        })
    }

    pub fn strengths(&self) -> &[f64] {
        &self.strengths
    }

    pub fn images(&self) -> &[LatentGrid] {
        &self.images
    }

    pub fn source(&self) -> &LatentGrid {
        &self.images[0]
    }

    /// The edited images, one per strength.
    pub fn edited(&self) -> &[LatentGrid] {
        &self.images[1..]
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }
}

/// `10·log10(peak²/MSE)`, or `+∞` for identical grids.
pub fn psnr(a: &LatentGrid, b: &LatentGrid, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "peak",
            reason: format!("must be positive, got {peak}"),
        });
    }
    let mse = a.sub(b)?.norm_sq() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// SSIM stabilizers derived from the data range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    /// `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`.
    pub fn for_peak(peak: f64) -> Self {
        Self {
            c1: (0.01 * peak).powi(2),
            c2: (0.03 * peak).powi(2),
        }
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::for_peak(1.0)
    }
}

/// Structural similarity from a single window covering the whole grid.
pub fn ssim(a: &LatentGrid, b: &LatentGrid, constants: SsimConstants) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.len() as f64;
    let mean_a = a.as_slice().iter().sum::<f64>() / n;
    let mean_b = b.as_slice().iter().sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    let (var_a, var_b, cov) = (var_a / n, var_b / n, cov / n);
    let SsimConstants { c1, c2 } = constants;
    Ok(((2.0 * mean_a * mean_b + c1) * (2.0 * cov + c2))
        / ((mean_a * mean_a + mean_b * mean_b + c1) * (var_a + var_b + c2)))
}

/// Which mean a [`masked_distance`] takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    /// Mean absolute difference.
    L1,
    /// Root mean square difference.
    L2,
}

/// Mean absolute (L1) or root-mean-square (L2) difference over the masked
/// elements only.
pub fn masked_distance(a: &LatentGrid, b: &LatentGrid, mask: &Mask, norm: Norm) -> Result<f64> {
    let diff = a.sub(b)?.select(mask)?;
    let n = diff.len() as f64;
    Ok(match norm {
        Norm::L1 => diff.as_slice().iter().map(|d| d.abs()).sum::<f64>() / n,
        Norm::L2 => (diff.norm_sq() / n).sqrt(),
    })
}

/// The triangular defect of a sequence of images:
///
/// ```text
/// max_i (d(x_i, x_{i+1}) + d(x_{i+1}, x_{i+2}) - d(x_i, x_{i+2})) / d(x_i, x_{i+2})
/// ```
///
/// Zero when consecutive triples are metrically collinear.
pub fn delta_smooth_images(images: &[LatentGrid], d: &dyn DistanceFn) -> Result<f64> {
    if images.len() < 3 {
        return Err(Error::TooFewImages {
            needed: 3,
            found: images.len(),
        });
    }
    let mut worst = f64::NEG_INFINITY;
    for (index, w) in images.windows(3).enumerate() {
        let span = d.distance(&w[0], &w[2]);
        if span == 0.0 {
            return Err(Error::ZeroDenominator { index });
        }
        let defect = (d.distance(&w[0], &w[1]) + d.distance(&w[1], &w[2]) - span) / span;
        worst = worst.max(defect);
    }
    Ok(worst)
}

/// [`delta_smooth_images`] over a sweep (source first).
pub fn delta_smooth(sweep: &StrengthSweep, d: &dyn DistanceFn) -> Result<f64> {
    delta_smooth_images(sweep.images(), d)
}

fn check_strengths(strengths: &[f64]) -> Result<()> {
    if strengths.is_empty() {
        return Err(Error::TooFewImages {
            needed: 2,
            found: 1,
        });
    }
    match strengths.iter().position(|&a| a == 0.0) {
        Some(index) => Err(Error::ZeroStrength { index }),
        None => Ok(()),
    }
}

/// `mean_i sim(x_{α_i}, x) / α_i`.
pub fn dir_score(
    sweep: &StrengthSweep,
    sim: &dyn Fn(&LatentGrid, &LatentGrid) -> f64,
) -> Result<f64> {
    check_strengths(sweep.strengths())?;
    let total: f64 = sweep
        .edited()
        .iter()
        .zip(sweep.strengths())
        .map(|(image, &alpha)| sim(image, sweep.source()) / alpha)
        .sum();
    Ok(total / sweep.strengths().len() as f64)
}

/// `mean_i sim(x_{α_i}, x)`, without the division by strength.
pub fn dir_score_mean(
    sweep: &StrengthSweep,
    sim: &dyn Fn(&LatentGrid, &LatentGrid) -> f64,
) -> Result<f64> {
    check_strengths(sweep.strengths())?;
    let total: f64 = sweep
        .edited()
        .iter()
        .map(|image| sim(image, sweep.source()))
        .sum();
    Ok(total / sweep.strengths().len() as f64)
}

/// Cosine between `a` and `b` restricted to `mask`; `0` when either vector
/// vanishes on the mask.
pub fn masked_cosine(a: &LatentGrid, b: &LatentGrid, mask: &Mask) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        if mask[i] {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// The default adherence similarity for a task: cosine between the applied
/// change `x_α - x` and the full edit `x_edit - x` on the edit region.
pub fn edit_direction_similarity(task: &EditTask) -> impl Fn(&LatentGrid, &LatentGrid) -> f64 + '_ {
    move |edited: &LatentGrid, source: &LatentGrid| {
        let applied = edited.sub(source).expect("sweep shapes checked");
        let full = task.x_edit.sub(source).expect("sweep shapes checked");
        masked_cosine(&applied, &full, &task.gt_mask)
    }
}

/// All metrics of one strength sweep. Each aggregate is reported separately
/// so one undefined metric does not hide the others.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub delta_smooth: Result<f64>,
    pub dir_score: Result<f64>,
    /// Preserved-region L1 to the source, uniform mean over strengths.
    pub masked_l1: Result<f64>,
    /// Preserved-region RMS to the source, uniform mean over strengths.
    pub masked_l2: Result<f64>,
    /// Preserved-region PSNR per strength (peak 1).
    pub psnr: Result<Vec<f64>>,
    /// Preserved-region global SSIM per strength (peak 1).
    pub ssim: Result<Vec<f64>>,
}

fn mean_over_strengths(sweep: &StrengthSweep, f: impl Fn(&LatentGrid) -> Result<f64>) -> Result<f64> {
    let values = sweep.edited().iter().map(f).collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::TooFewImages {
            needed: 2,
            found: 1,
        });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Evaluates every metric of `sweep`, which must have been produced from
/// `task`. `d` is the distance used by the smoothness score.
pub fn report(task: &EditTask, sweep: &StrengthSweep, d: &dyn DistanceFn) -> Result<MetricReport> {
    sweep.source().ensure_same_shape(&task.x_orig)?;
    let source = sweep.source();
    let keep = sweep.mask();
    let sim = edit_direction_similarity(task);
    let per_strength = |f: &dyn Fn(&LatentGrid, &LatentGrid) -> Result<f64>| {
        let src = source.select(keep)?;
        sweep
            .edited()
            .iter()
            .map(|image| f(&image.select(keep)?, &src))
            .collect::<Result<Vec<f64>>>()
    };
    Ok(MetricReport {
        delta_smooth: delta_smooth(sweep, d),
        dir_score: dir_score(sweep, &sim),
        masked_l1: mean_over_strengths(sweep, |x| masked_distance(x, source, keep, Norm::L1)),
        masked_l2: mean_over_strengths(sweep, |x| masked_distance(x, source, keep, Norm::L2)),
        psnr: per_strength(&|a, b| psnr(a, b, 1.0)),
        ssim: per_strength(&|a, b| ssim(a, b, SsimConstants::default())),
    })
}
