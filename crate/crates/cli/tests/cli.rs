use std::fs;
use std::path::{Path, PathBuf};

use velomask_cli::files::{load_index, ReportFile};
use velomask_cli::{run, EXIT_OK, EXIT_USAGE};

fn velomask(args: &[&str]) -> i32 {
    run(std::iter::once("velomask").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates `count` 8x8 tasks and returns the directory.
fn tasks(root: &Path, count: usize) -> PathBuf {
    let dir = root.join("tasks");
    let code = velomask(&["gen-tasks", "--seed", "4", "--count", &count.to_string(), "--shape", "1x8x8", "--out", s(&dir)]);
    assert_eq!(code, EXIT_OK);
    dir
}

fn first_task(dir: &Path) -> PathBuf {
    dir.join(&load_index(dir).unwrap()[0].file)
}

fn first_id(dir: &Path) -> String {
    load_index(dir).unwrap()[0].id.clone()
}

fn read_report(path: &Path) -> ReportFile {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_tasks_writes_files_and_index() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 5);
    let index = load_index(&dir).unwrap();
    assert_eq!(index.len(), 5);
    for e in &index {
        for ext in ["json", "orig.pgm", "edit.pgm"] {
            assert!(dir.join(format!("{}.{ext}", e.id)).is_file());
        }
    }
    assert_eq!(fs::read_dir(&dir).unwrap().count(), 16);
}

#[test]
fn gen_tasks_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (tasks(a.path(), 4), tasks(b.path(), 4));
    let mut names: Vec<_> = fs::read_dir(&da).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        assert_eq!(fs::read(da.join(&name)).unwrap(), fs::read(db.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn zero_count_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    assert_eq!(velomask(&["gen-tasks", "--count", "0", "--out", s(&out)]), EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 1);
    let task = first_task(&dir);
    let out = tmp.path().join("e");
    assert_eq!(velomask(&["edit", "--task", s(&task), "--analytic", "--tau", "1.5", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(velomask(&["edit", "--task", s(&task), "--analytic", "--intervene", "7", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(velomask(&["edit", "--task", s(&task), "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(velomask(&["frobnicate"]), EXIT_USAGE);
}

#[test]
fn full_keep_edit_reproduces_the_source_image() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 2);
    let out = tmp.path().join("e");
    let code = velomask(&[
        "edit", "--task", s(&first_task(&dir)), "--analytic", "--tau", "0", "--intervene", "6", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let id = first_id(&dir);
    assert_eq!(fs::read(out.join("edit.pgm")).unwrap(), fs::read(dir.join(format!("{id}.orig.pgm"))).unwrap());
    let report = read_report(&out.join("report.json"));
    assert_eq!(report.task_id, id);
    assert!(report.metrics.masked_l1.unwrap() < 1e-9);
    // six steps, each with a similarity map and a mask
    assert_eq!(report.artifact_paths.len(), 1 + 2 * 6);
    for p in &report.artifact_paths {
        assert!(out.join(p).is_file(), "{p}");
    }
}

#[test]
fn zero_alpha_full_threshold_edit_reproduces_the_source() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 1);
    let out = tmp.path().join("e");
    let code = velomask(&[
        "edit", "--task", s(&first_task(&dir)), "--analytic", "--tau", "1", "--alpha", "0", "--intervene", "6", "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let id = first_id(&dir);
    assert_eq!(fs::read(out.join("edit.pgm")).unwrap(), fs::read(dir.join(format!("{id}.orig.pgm"))).unwrap());
}

#[test]
fn unintervened_edit_matches_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 1);
    let task = first_task(&dir);
    let (e, b) = (tmp.path().join("e"), tmp.path().join("b"));
    assert_eq!(velomask(&["edit", "--task", s(&task), "--analytic", "--intervene", "0", "--seed", "9", "--out", s(&e)]), EXIT_OK);
    assert_eq!(velomask(&["baseline", "--task", s(&task), "--analytic", "--seed", "9", "--out", s(&b)]), EXIT_OK);
    assert_eq!(fs::read(e.join("edit.pgm")).unwrap(), fs::read(b.join("baseline.pgm")).unwrap());
}

#[test]
fn analytic_full_sweep_is_smooth() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 1);
    let out = tmp.path().join("s");
    let code = velomask(&["sweep", "--task", s(&first_task(&dir)), "--analytic", "--intervene", "6", "--tau", "1", "--out", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let report = read_report(&out.join("report.json"));
    assert_eq!(report.strengths, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(report.config.alpha, None);
    assert!(report.metrics.delta_smooth.unwrap() < 1e-9);
    for i in 0..5 {
        assert!(out.join(format!("alpha_{i}.pgm")).is_file());
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn extrapolated_strengths_need_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 1);
    let task = first_task(&dir);
    let out = tmp.path().join("s");
    let args = ["sweep", "--task", s(&task), "--analytic", "--strengths", "0.5,1.5,-0.5", "--out", s(&out)];
    assert_eq!(velomask(&args), EXIT_USAGE);
    let mut args = args.to_vec();
    args.push("--allow-extrapolation");
    assert_eq!(velomask(&args), EXIT_OK);
    assert_eq!(read_report(&out.join("report.json")).strengths, vec![0.5, 1.5, -0.5]);
}

#[test]
fn ablations_write_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 10);
    let out = tmp.path().join("a");
    assert_eq!(velomask(&["ablate", "--param", "tau", "--tasks", s(&dir), "--analytic", "--out", s(&out)]), EXIT_OK);
    assert_eq!(velomask(&["ablate", "--param", "n", "--tasks", s(&dir), "--analytic", "--out", s(&out)]), EXIT_OK);
    for name in ["tau", "n"] {
        let text = fs::read_to_string(out.join(format!("ablation_{name}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 7, "{name}");
        assert!(text.starts_with(&format!("{name},")));
    }
    let few = tasks(&tmp.path().join("few"), 9);
    assert_eq!(velomask(&["ablate", "--param", "tau", "--tasks", s(&few), "--analytic", "--out", s(&out)]), EXIT_USAGE);
}

#[test]
fn train_writes_a_loadable_model_and_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tasks(tmp.path(), 6);
    let out = tmp.path().join("m");
    let args = [
        "train", "--tasks", s(&dir), "--learning-rate", "0.003", "--batch-size", "4", "--iterations", "20", "--seed",
        "1", "--null-fraction", "0.2", "--out", s(&out),
    ];
    assert_eq!(velomask(&args), EXIT_OK);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);
    let net = velomask::load_model(out.join("model.vfm")).unwrap();
    assert_eq!(net.shape(), velomask::Shape::new(1, 8, 8));

    let e = tmp.path().join("e");
    let model = out.join("model.vfm");
    assert_eq!(velomask(&["edit", "--task", s(&first_task(&dir)), "--model", s(&model), "--out", s(&e)]), EXIT_OK);

    // a model of another grid size is refused
    let wide = tmp.path().join("wide");
    assert_eq!(velomask(&["gen-tasks", "--count", "1", "--shape", "1x4x4", "--out", s(&wide)]), EXIT_OK);
    let code = velomask(&["edit", "--task", s(&first_task(&wide)), "--model", s(&model), "--out", s(&e)]);
    assert_eq!(code, velomask_cli::EXIT_RUNTIME);
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().to_owned(), fs::read(&p).unwrap())).collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn every_subcommand_is_deterministic() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let root = tmp.path();
            let dir = tasks(root, 10);
            let task = first_task(&dir);
            let m = root.join("m");
            let model = m.join("model.vfm");
            let cmds: Vec<Vec<String>> = vec![
                vec!["train", "--tasks", s(&dir), "--learning-rate", "0.003", "--batch-size", "4", "--iterations", "10",
                    "--seed", "2", "--null-fraction", "0.2", "--out", s(&m)].into_iter().map(String::from).collect(),
                vec!["edit", "--task", s(&task), "--model", s(&model), "--seed", "3", "--out", s(&root.join("e"))]
                    .into_iter().map(String::from).collect(),
                vec!["baseline", "--task", s(&task), "--model", s(&model), "--seed", "3", "--out", s(&root.join("b"))]
                    .into_iter().map(String::from).collect(),
                vec!["sweep", "--task", s(&task), "--model", s(&model), "--out", s(&root.join("s"))]
                    .into_iter().map(String::from).collect(),
                vec!["ablate", "--param", "n", "--tasks", s(&dir), "--model", s(&model), "--out", s(&root.join("a"))]
                    .into_iter().map(String::from).collect(),
            ];
            for c in &cmds {
                let args: Vec<&str> = c.iter().map(String::as_str).collect();
                assert_eq!(velomask(&args), EXIT_OK, "{args:?}");
            }
            snapshot(root)
        })
        .collect();
    assert!(runs[0].len() > 20);
    assert_eq!(runs[0], runs[1]);
}
