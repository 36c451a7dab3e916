//! Parameter ablations over a task suite.

use serde::Serialize;
use velomask::{
    alpha_sweep, report, split_seed, Distance, EditTask, InterventionConfig, VelocityModel,
};

use crate::files::Real;

/// The sampler parameter an ablation varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    Tau,
    N,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Tau => "tau",
            AblationParam::N => "n",
        }
    }

    /// The grid used when none is given.
    pub fn default_values(self, steps: usize) -> Vec<f64> {
        match self {
            AblationParam::Tau => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            AblationParam::N => (1..=steps).map(|n| n as f64).collect(),
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &InterventionConfig, value: f64) -> Result<InterventionConfig, String> {
        match self {
            AblationParam::Tau => Ok(InterventionConfig { tau: value, ..*base }),
            AblationParam::N => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(format!("invalid n value {value}: must be a non-negative integer"));
                }
                Ok(InterventionConfig {
                    intervene: value as usize,
                    ..*base
                })
            }
        }
    }
}

/// Suite means of one grid value. Each mean is over the tasks on which the
/// metric is defined; `undefined` counts the (task, metric) pairs skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: f64,
    pub delta_smooth: Option<f64>,
    pub dir_score: Option<f64>,
    pub masked_l1: Option<f64>,
    pub masked_l2: Option<f64>,
    pub psnr: Option<Real>,
    pub ssim: Option<f64>,
    pub tasks: usize,
    pub undefined: usize,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, value: velomask::Result<f64>, undefined: &mut usize) {
        match value {
            Ok(v) => {
                self.sum += v;
                self.count += 1;
            }
            Err(_) => *undefined += 1,
        }
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs a strength sweep for every task at every grid value. Task `i` uses
/// the noise seed `split_seed(base.seed, i)` at all grid values.
pub fn ablate<F, M>(
    model_for: F,
    tasks: &[EditTask],
    param: AblationParam,
    values: &[f64],
    base: &InterventionConfig,
    strengths: &[f64],
) -> Result<Vec<AblationRow>, crate::CliError>
where
    F: Fn(&EditTask) -> Result<M, crate::CliError>,
    M: VelocityModel,
{
    use crate::CliError::Usage;
    if values.len() < 2 {
        return Err(Usage("an ablation needs at least 2 grid values".into()));
    }
    if tasks.len() < 10 {
        return Err(Usage(format!(
            "an ablation needs at least 10 tasks, got {}",
            tasks.len()
        )));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let config = param.apply(base, value).map_err(Usage)?;
        config.validate()?;
        let (mut ds, mut dir, mut l1, mut l2, mut psnr, mut ssim) = Default::default();
        let mut undefined = 0;
        for (i, task) in tasks.iter().enumerate() {
            let model = model_for(task)?;
            let c = InterventionConfig {
                seed: split_seed(base.seed, i as u64),
                ..config
            };
            let (_, sweep) = alpha_sweep(&model, task, &c, strengths)?;
            let r = report(task, &sweep, &Distance::L2)?;
            Mean::push(&mut ds, r.delta_smooth, &mut undefined);
            Mean::push(&mut dir, r.dir_score, &mut undefined);
            Mean::push(&mut l1, r.masked_l1, &mut undefined);
            Mean::push(&mut l2, r.masked_l2, &mut undefined);
            Mean::push(&mut psnr, r.psnr.map(|v| mean(&v)), &mut undefined);
            Mean::push(&mut ssim, r.ssim.map(|v| mean(&v)), &mut undefined);
        }
        rows.push(AblationRow {
            value,
            delta_smooth: ds.get(),
            dir_score: dir.get(),
            masked_l1: l1.get(),
            masked_l2: l2.get(),
            psnr: psnr.get().map(Real),
            ssim: ssim.get(),
            tasks: tasks.len(),
            undefined,
        });
    }
    Ok(rows)
}

/// Writes rows as CSV with a header. Missing values are empty cells and
/// infinities are `inf`.
pub fn write_csv<W: std::io::Write>(param: AblationParam, rows: &[AblationRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        param.name(),
        "delta_smooth",
        "dir_score",
        "masked_l1",
        "masked_l2",
        "psnr",
        "ssim",
        "tasks",
        "undefined",
    ])?;
    let cell = |v: Option<f64>| v.map(format_real).unwrap_or_default();
    for r in rows {
        w.write_record([
            format_real(r.value),
            cell(r.delta_smooth),
            cell(r.dir_score),
            cell(r.masked_l1),
            cell(r.masked_l2),
            cell(r.psnr.map(|p| p.0)),
            cell(r.ssim),
            r.tasks.to_string(),
            r.undefined.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal, with `inf`/`-inf`/`nan` spelled out.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use velomask::{analytic_edit_model, default_strengths, make_task_suite, PointMassFlow, Shape};

    fn analytic(task: &EditTask) -> Result<PointMassFlow, crate::CliError> {
        Ok(analytic_edit_model(task))
    }

    #[test]
    fn grids_and_application() {
        assert_eq!(AblationParam::Tau.default_values(6).len(), 6);
        assert_eq!(AblationParam::N.default_values(6), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let base = InterventionConfig::default();
        assert_eq!(AblationParam::N.apply(&base, 3.0).unwrap().intervene, 3);
        assert!(AblationParam::N.apply(&base, 2.5).is_err());
        assert_eq!(AblationParam::Tau.apply(&base, 0.25).unwrap().tau, 0.25);
    }

    #[test]
    fn analytic_tau_ablation_is_well_formed() {
        let tasks = make_task_suite(5, 12, Shape::new(1, 8, 8)).unwrap();
        let values = AblationParam::Tau.default_values(6);
        let base = InterventionConfig::default();
        let rows = ablate(analytic, &tasks, AblationParam::Tau, &values, &base, &default_strengths()).unwrap();
        assert_eq!(rows.len(), 6);
        // tau = 0 keeps every coordinate on the first step: the minimum
        // preserved-region error of the table
        let l1: Vec<f64> = rows.iter().map(|r| r.masked_l1.unwrap()).collect();
        assert!(l1.iter().all(|&v| v >= l1[0]));
        let mut csv = Vec::new();
        write_csv(AblationParam::Tau, &rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("tau,delta_smooth,dir_score,masked_l1"));
    }

    #[test]
    fn ablation_preconditions() {
        let tasks = make_task_suite(5, 9, Shape::new(1, 4, 4)).unwrap();
        let base = InterventionConfig::default();
        let err = ablate(analytic, &tasks, AblationParam::Tau, &[0.0, 1.0], &base, &[1.0]);
        assert!(matches!(err, Err(crate::CliError::Usage(m)) if m.contains("10 tasks")));
        let tasks = make_task_suite(5, 10, Shape::new(1, 4, 4)).unwrap();
        let err = ablate(analytic, &tasks, AblationParam::Tau, &[0.0], &base, &[1.0]);
        assert!(err.is_err());
        let err = ablate(analytic, &tasks, AblationParam::Tau, &[0.0, 1.5], &base, &[1.0]);
        assert!(matches!(err, Err(crate::CliError::Usage(m)) if m.contains("tau")));
    }

    #[test]
    fn reals_format_for_csv() {
        assert_eq!(format_real(0.1), "0.1");
        assert_eq!(format_real(f64::INFINITY), "inf");
        assert_eq!(format_real(1.0), "1.0");
    }
}
