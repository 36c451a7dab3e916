//! On-disk formats: task JSON, the task index and report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use velomask::{EditTask, Instruction, InterventionConfig, LatentGrid, MetricReport, Shape};

use crate::CliError;

/// A task as stored on disk. Grids are flat row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub id: String,
    pub instruction: String,
    pub instruction_code: u8,
    pub shape: Shape,
    pub x_orig: Vec<f64>,
    pub x_edit: Vec<f64>,
}

impl TaskFile {
    pub fn from_task(task: &EditTask) -> Self {
        Self {
            id: task.id.clone(),
            instruction: task.instruction.name().to_owned(),
            instruction_code: task.instruction.code(),
            shape: task.shape(),
            x_orig: task.x_orig.as_slice().to_vec(),
            x_edit: task.x_edit.as_slice().to_vec(),
        }
    }

    pub fn into_task(self) -> velomask::Result<EditTask> {
        let instruction = Instruction::from_code(self.instruction_code)?;
        EditTask::new(
            self.id,
            instruction,
            LatentGrid::new(self.shape, self.x_orig)?,
            LatentGrid::new(self.shape, self.x_edit)?,
        )
    }
}

/// One row of `index.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub instruction: String,
    pub file: String,
}

pub const INDEX_FILE: &str = "index.json";

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
}

pub fn load_task(path: &Path) -> Result<EditTask, CliError> {
    let bytes = read_file(path)?;
    let file: TaskFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Runtime(format!("parsing task {}: {e}", path.display())))?;
    file.into_task()
        .map_err(|e| CliError::Runtime(format!("invalid task {}: {e}", path.display())))
}

/// Reads `index.json` of a task directory; a directory without one holds no
/// tasks.
pub fn load_index(dir: &Path) -> Result<Vec<IndexEntry>, CliError> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| CliError::Runtime(format!("parsing {}: {e}", path.display())))
}

/// Loads every task listed in a directory's index, in index order.
pub fn load_task_dir(dir: &Path) -> Result<Vec<EditTask>, CliError> {
    load_index(dir)?
        .iter()
        .map(|entry| load_task(&dir.join(&entry.file)))
        .collect()
}

/// A real number that may be infinite. JSON has no infinities, so they are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let x = self.0;
        if x.is_finite() {
            s.serialize_f64(x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(x) => Ok(Real(x)),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(Real(f64::INFINITY)),
                "-inf" => Ok(Real(f64::NEG_INFINITY)),
                "nan" => Ok(Real(f64::NAN)),
                other => Err(de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

/// The sampler settings echoed into a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "N")]
    pub intervene: usize,
    pub tau: f64,
    /// `null` in sweeps, where the strengths list takes its place.
    pub alpha: Option<f64>,
    pub epsilon: f64,
    pub seed: u64,
}

impl From<InterventionConfig> for ConfigEcho {
    fn from(c: InterventionConfig) -> Self {
        Self {
            steps: c.steps,
            intervene: c.intervene,
            tau: c.tau,
            alpha: Some(c.alpha),
            epsilon: c.epsilon,
            seed: c.seed,
        }
    }
}

/// Metrics of a report. Undefined values are `null`, with the reason in the
/// report's `errors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub delta_smooth: Option<f64>,
    pub dir_score: Option<f64>,
    pub masked_l1: Option<f64>,
    pub masked_l2: Option<f64>,
    pub psnr: Option<Vec<Real>>,
    pub ssim: Option<Vec<f64>>,
}

impl MetricsJson {
    /// Converts a metric report, collecting the error of each undefined
    /// metric into `errors`.
    pub fn from_report(report: &MetricReport, errors: &mut Vec<String>) -> Self {
        fn keep<T: Clone>(
            name: &str,
            value: &velomask::Result<T>,
            errors: &mut Vec<String>,
        ) -> Option<T> {
            match value {
                Ok(v) => Some(v.clone()),
                Err(e) => {
                    errors.push(format!("{name}: {e}"));
                    None
                }
            }
        }
        Self {
            delta_smooth: keep("delta_smooth", &report.delta_smooth, errors),
            dir_score: keep("dir_score", &report.dir_score, errors),
            masked_l1: keep("masked_l1", &report.masked_l1, errors),
            masked_l2: keep("masked_l2", &report.masked_l2, errors),
            psnr: keep("psnr", &report.psnr, errors).map(|v| v.into_iter().map(Real).collect()),
            ssim: keep("ssim", &report.ssim, errors),
        }
    }
}

/// The JSON report written by `edit` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub task_id: String,
    pub config: ConfigEcho,
    pub strengths: Vec<f64>,
    pub metrics: MetricsJson,
    pub errors: Vec<String>,
    /// Paths relative to the report's directory.
    pub artifact_paths: Vec<String>,
}

/// `dir/name`, as a relative artifact name plus the full path.
pub fn artifact(dir: &Path, name: String) -> (String, PathBuf) {
    let path = dir.join(&name);
    (name, path)
}
