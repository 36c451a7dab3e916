//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use velomask::toy::{self, ToyVelocityNet, TrainConfig};
use velomask::{
    alpha_sweep, default_strengths, make_task_suite, report, sample, sample_baseline,
    validate_strengths, Distance, EditTask, Instruction, InterventionConfig, LatentGrid,
    PointMassFlow, StrengthSweep, Trajectory, VelocityModel,
};

use crate::ablation::{self, AblationParam};
use crate::files::{
    artifact, create_dir, load_task, load_task_dir, to_json, write_file, ConfigEcho, IndexEntry,
    MetricsJson, ReportFile, TaskFile, INDEX_FILE,
};
use crate::{pgm, CliError, Command, ModelArgs, SamplerArgs};

/// Either the exact per-task point-mass model or a trained network.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Analytic,
    Toy(ToyVelocityNet),
}

/// The velocity model used for one task.
pub enum TaskModel<'a> {
    Analytic(PointMassFlow),
    Toy(&'a ToyVelocityNet),
}

impl VelocityModel for TaskModel<'_> {
    fn velocity(
        &self,
        x_t: &LatentGrid,
        t: f64,
        condition: &velomask::Condition,
    ) -> velomask::Result<LatentGrid> {
        match self {
            TaskModel::Analytic(m) => m.velocity(x_t, t, condition),
            TaskModel::Toy(net) => net.velocity(x_t, t, condition),
        }
    }
}

impl ModelSource {
    pub fn load(args: &ModelArgs) -> Result<Self, CliError> {
        match (&args.model, args.analytic) {
            (_, true) => Ok(ModelSource::Analytic),
            (Some(path), false) => toy::load_model(path)
                .map(ModelSource::Toy)
                .map_err(|e| CliError::Runtime(format!("loading model {}: {e}", path.display()))),
            (None, false) => Err(CliError::Usage("pass --model FILE or --analytic".into())),
        }
    }

    /// The model for `task`, after checking that a network fits its grid.
    pub fn for_task<'a>(&'a self, task: &EditTask) -> Result<TaskModel<'a>, CliError> {
        match self {
            ModelSource::Analytic => Ok(TaskModel::Analytic(velomask::analytic_edit_model(task))),
            ModelSource::Toy(net) => {
                if net.shape() != task.shape() {
                    return Err(CliError::Runtime(format!(
                        "model expects {} grids but task {} is {}",
                        net.shape(),
                        task.id,
                        task.shape()
                    )));
                }
                Ok(TaskModel::Toy(net))
            }
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenTasks(a) => gen_tasks(a.seed, a.count, a.shape, &a.out),
        Command::Train(a) => train(&a),
        Command::Edit(a) => edit(&a),
        Command::Baseline(a) => baseline(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Serve(a) => crate::server::serve_blocking(&a),
    }
}

pub fn gen_tasks(seed: u64, count: usize, shape: velomask::Shape, out: &Path) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("invalid count: must be at least 1".into()));
    }
    let tasks = make_task_suite(seed, count, shape)?;
    create_dir(out)?;
    let mut index = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let file = format!("{}.json", task.id);
        write_file(&out.join(&file), to_json(&TaskFile::from_task(task)))?;
        write_file(&out.join(format!("{}.orig.pgm", task.id)), pgm::encode(&task.x_orig))?;
        write_file(&out.join(format!("{}.edit.pgm", task.id)), pgm::encode(&task.x_edit))?;
        index.push(IndexEntry {
            id: task.id.clone(),
            instruction: task.instruction.name().to_owned(),
            file,
        });
    }
    write_file(&out.join(INDEX_FILE), to_json(&index))?;
    println!("wrote {} tasks to {}", tasks.len(), out.display());
    Ok(())
}

fn train(a: &crate::TrainArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        iterations: a.iterations,
        seed: a.seed,
        null_fraction: a.null_fraction,
    };
    config.validate()?;
    let tasks = load_task_dir(&a.tasks)?;
    let shape = match tasks.first() {
        Some(t) => t.shape(),
        None => return Err(CliError::Usage(format!("no tasks in {}", a.tasks.display()))),
    };
    if let Some(t) = tasks.iter().find(|t| t.shape() != shape) {
        return Err(CliError::Runtime(format!("task {} has shape {}, expected {shape}", t.id, t.shape())));
    }
    let net = ToyVelocityNet::new(shape, Instruction::VOCAB, velomask::split_seed(a.seed, 0))?;
    let outcome = toy::train(net, &tasks, &config)?;
    create_dir(&a.out)?;
    toy::save_model(&outcome.net, a.out.join("model.vfm"))
        .map_err(|e| CliError::Runtime(format!("writing model: {e}")))?;
    write_file(&a.out.join("loss.csv"), loss_csv(&outcome.losses)?)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} iterations, final minibatch loss {last}", outcome.losses.len());
    Ok(())
}

/// The loss curve as CSV: `iteration,loss`.
pub fn loss_csv(losses: &[f64]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Runtime(format!("writing loss curve: {e}"));
    w.write_record(["iteration", "loss"]).map_err(fail)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), ablation::format_real(*l)]).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// The intervention config described by sampler flags.
pub fn intervention_config(s: &SamplerArgs, default_tau: f64, alpha: f64) -> Result<InterventionConfig, CliError> {
    let config = InterventionConfig {
        steps: s.steps,
        intervene: s.intervene,
        tau: s.tau.unwrap_or(default_tau),
        alpha,
        epsilon: s.epsilon,
        seed: s.seed,
    };
    config.validate()?;
    Ok(config)
}

/// Default τ for single edits (consistency-oriented).
pub const EDIT_TAU: f64 = 0.4;
/// Default τ for sweeps and ablations over N (continuity-oriented).
pub const SWEEP_TAU: f64 = 0.8;

/// Metrics of a single edit, treated as a one-strength sweep.
pub fn single_edit_metrics(task: &EditTask, output: &LatentGrid, alpha: f64, errors: &mut Vec<String>) -> Result<MetricsJson, CliError> {
    let sweep = StrengthSweep::new(vec![alpha], vec![task.x_orig.clone(), output.clone()], task.preserve_mask())?;
    let r = report(task, &sweep, &Distance::L2)?;
    Ok(MetricsJson::from_report(&r, errors))
}

fn write_trajectory_maps(traj: &Trajectory, out: &Path, prefix: &str, paths: &mut Vec<String>) -> Result<(), CliError> {
    for (k, (s, masks)) in traj.similarity_maps.iter().zip(&traj.masks).enumerate() {
        let (name, path) = artifact(out, format!("{prefix}similarity_step{}.pgm", k + 1));
        write_file(&path, pgm::encode(s.values()))?;
        paths.push(name);
        let (name, path) = artifact(out, format!("{prefix}mask_high_step{}.pgm", k + 1));
        write_file(&path, pgm::encode_mask(&masks.high))?;
        paths.push(name);
    }
    Ok(())
}

fn edit(a: &crate::EditArgs) -> Result<(), CliError> {
    let config = intervention_config(&a.sampler, EDIT_TAU, a.alpha)?;
    let source = ModelSource::load(&a.model)?;
    let task = load_task(&a.task)?;
    let model = source.for_task(&task)?;
    let traj = sample(&model, &task.x_orig, &task.condition(), &config)?;
    create_dir(&a.out)?;
    let mut paths = Vec::new();
    let (name, path) = artifact(&a.out, "edit.pgm".into());
    write_file(&path, pgm::encode(traj.output()))?;
    paths.push(name);
    write_trajectory_maps(&traj, &a.out, "", &mut paths)?;
    let mut errors = Vec::new();
    let metrics = single_edit_metrics(&task, traj.output(), config.alpha, &mut errors)?;
    let report = ReportFile {
        task_id: task.id.clone(),
        config: config.into(),
        strengths: vec![config.alpha],
        metrics,
        errors,
        artifact_paths: paths,
    };
    write_file(&a.out.join("report.json"), to_json(&report))?;
    println!("wrote edit of {} to {}", task.id, a.out.display());
    Ok(())
}

fn baseline(a: &crate::BaselineArgs) -> Result<(), CliError> {
    if a.steps == 0 {
        return Err(CliError::Usage("invalid steps: must be positive".into()));
    }
    let source = ModelSource::load(&a.model)?;
    let task = load_task(&a.task)?;
    let model = source.for_task(&task)?;
    let states = sample_baseline(&model, &task.condition(), a.steps, a.seed)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("baseline.pgm"), pgm::encode(states.last().expect("T + 1 states")))?;
    println!("wrote baseline sample of {} to {}", task.id, a.out.display());
    Ok(())
}

/// Resolves and validates a strength list.
pub fn strengths_or_default(given: Option<&[f64]>, allow_extrapolation: bool) -> Result<Vec<f64>, CliError> {
    let strengths = given.map(<[f64]>::to_vec).unwrap_or_else(default_strengths);
    validate_strengths(&strengths, allow_extrapolation)?;
    Ok(strengths)
}

fn sweep(a: &crate::SweepArgs) -> Result<(), CliError> {
    let strengths = strengths_or_default(a.strengths.as_deref(), a.allow_extrapolation)?;
    let config = intervention_config(&a.sampler, SWEEP_TAU, strengths[0])?;
    let source = ModelSource::load(&a.model)?;
    let task = load_task(&a.task)?;
    let model = source.for_task(&task)?;
    let (trajectories, sweep) = alpha_sweep(&model, &task, &config, &strengths)?;
    let r = report(&task, &sweep, &Distance::L2)?;

    create_dir(&a.out)?;
    let mut paths = Vec::new();
    for (i, image) in sweep.edited().iter().enumerate() {
        let (name, path) = artifact(&a.out, format!("alpha_{i}.pgm"));
        write_file(&path, pgm::encode(image))?;
        paths.push(name);
    }
    for (i, traj) in trajectories.iter().enumerate() {
        write_trajectory_maps(traj, &a.out, &format!("alpha_{i}_"), &mut paths)?;
    }
    let (name, path) = artifact(&a.out, "metrics.csv".into());
    write_file(&path, per_strength_csv(&task, &sweep)?)?;
    paths.push(name);

    let mut errors = Vec::new();
    let metrics = MetricsJson::from_report(&r, &mut errors);
    let report = ReportFile {
        task_id: task.id.clone(),
        config: ConfigEcho { alpha: None, ..config.into() },
        strengths,
        metrics,
        errors,
        artifact_paths: paths,
    };
    write_file(&a.out.join("report.json"), to_json(&report))?;
    println!("wrote sweep of {} to {}", task.id, a.out.display());
    Ok(())
}

/// Per-strength preservation and adherence values of a sweep.
pub fn per_strength_csv(task: &EditTask, sweep: &StrengthSweep) -> Result<Vec<u8>, CliError> {
    use velomask::metrics::{edit_direction_similarity, masked_distance, psnr, ssim, Norm, SsimConstants};
    let fail = |e: csv::Error| CliError::Runtime(format!("writing metrics csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "masked_l1", "masked_l2", "psnr", "ssim", "sim"]).map_err(fail)?;
    let keep = sweep.mask();
    let sim = edit_direction_similarity(task);
    let cell = |v: velomask::Result<f64>| v.map(ablation::format_real).unwrap_or_default();
    let src = sweep.source();
    for (&alpha, image) in sweep.strengths().iter().zip(sweep.edited()) {
        let kept = |f: &dyn Fn(&LatentGrid, &LatentGrid) -> velomask::Result<f64>| {
            f(&image.select(keep)?, &src.select(keep)?)
        };
        w.write_record([
            ablation::format_real(alpha),
            cell(masked_distance(image, src, keep, Norm::L1)),
            cell(masked_distance(image, src, keep, Norm::L2)),
            cell(kept(&|a, b| psnr(a, b, 1.0))),
            cell(kept(&|a, b| ssim(a, b, SsimConstants::default()))),
            ablation::format_real(sim(image, src)),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn ablate(a: &crate::AblateArgs) -> Result<(), CliError> {
    let strengths = strengths_or_default(a.strengths.as_deref(), false)?;
    let default_tau = match a.param {
        AblationParam::Tau => EDIT_TAU,
        AblationParam::N => SWEEP_TAU,
    };
    let base = intervention_config(&a.sampler, default_tau, strengths[0])?;
    let values = a.values.clone().unwrap_or_else(|| a.param.default_values(base.steps));
    let source = ModelSource::load(&a.model)?;
    let tasks = load_task_dir(&a.tasks)?;
    let rows = ablation::ablate(|task| source.for_task(task), &tasks, a.param, &values, &base, &strengths)?;
    create_dir(&a.out)?;
    let mut csv = Vec::new();
    ablation::write_csv(a.param, &rows, &mut csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&a.out.join(format!("ablation_{}.csv", a.param.name())), csv)?;
    let mut stdout = std::io::stdout().lock();
    for r in &rows {
        let _ = writeln!(
            stdout,
            "{}={}: masked_l1 {:?} dir_score {:?}",
            a.param.name(),
            r.value,
            r.masked_l1,
            r.dir_score
        );
    }
    Ok(())
}
