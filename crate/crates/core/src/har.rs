//! Human activity recognition study on the UCI smartphone dataset.
//!
//! Each of the 30 subjects is one binary task (dynamic = 1, static = 0) over
//! the 561 engineered features. The UCI release splits by subject, so the
//! loader pools both splits and holds out a fixed share of every subject's
//! windows for testing.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GeoErmError, Result};
use crate::harness::{fit_method, mean_sd, Method};
use crate::objective::{Hyperparams, LossKind, TaskData};
use crate::synthdata::{fmt_float, sub_seed, write_file};

pub const HAR_FEATURES: usize = 561;
pub const HAR_SUBJECTS: u32 = 30;
const SD_FLOOR: f64 = 1e-8;

/// Activity codes: 1 walking, 2 upstairs, 3 downstairs, 4 sitting, 5 standing, 6 laying.
pub fn activity_label(code: u32) -> Option<f64> {
    match code {
        4 | 6 => Some(0.0),
        1 | 2 | 3 | 5 => Some(1.0),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub id: u32,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
}

impl SubjectData {
    pub fn rows(&self) -> usize {
        self.x_train.nrows() + self.x_test.nrows()
    }

    pub fn train_task(&self) -> Result<TaskData> {
        TaskData::new(self.x_train.clone(), self.y_train.clone(), LossKind::Classification)
    }
}

/// One record per subject, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct HarDataset {
    pub subjects: Vec<SubjectData>,
}

impl HarDataset {
    pub fn total_rows(&self) -> usize {
        self.subjects.iter().map(SubjectData::rows).sum()
    }

    pub fn features(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.x_train.ncols())
    }
}

/// How each subject's pooled windows are divided.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

const SPLITS: [&str; 2] = ["train", "test"];

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(GeoErmError::MissingData { path })
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| GeoErmError::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

fn ingest(file: &Path, line: usize, message: impl Into<String>) -> GeoErmError {
    GeoErmError::Ingest {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_ints(path: &Path, lines: &[String]) -> Result<Vec<u32>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| ingest(path, i + 1, format!("expected an integer, found '{}'", l.trim())))
        })
        .collect()
}

/// Reads the UCI layout under `dir` and splits every subject with `split`.
pub fn load_har(dir: &Path) -> Result<HarDataset> {
    load_har_split(dir, SplitSpec::default())
}

pub fn load_har_split(dir: &Path, split: SplitSpec) -> Result<HarDataset> {
    if !dir.is_dir() {
        return Err(GeoErmError::MissingData { path: dir.to_path_buf() });
    }
    if !(split.test_fraction > 0.0 && split.test_fraction < 1.0) {
        return Err(GeoErmError::Config(format!(
            "test fraction {} must lie in (0, 1)",
            split.test_fraction
        )));
    }
    let mut per_subject: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); HAR_SUBJECTS as usize];
    for name in SPLITS {
        let x_path = require(dir.join(name).join(format!("X_{name}.txt")))?;
        let y_path = require(dir.join(name).join(format!("y_{name}.txt")))?;
        let s_path = require(dir.join(name).join(format!("subject_{name}.txt")))?;
        let x_lines = read_lines(&x_path)?;
        let codes = parse_ints(&y_path, &read_lines(&y_path)?)?;
        let subjects = parse_ints(&s_path, &read_lines(&s_path)?)?;
        for (path, len) in [(&y_path, codes.len()), (&s_path, subjects.len())] {
            if len != x_lines.len() {
                return Err(ingest(
                    path,
                    len.min(x_lines.len()) + 1,
                    format!("{len} rows, but {} has {}", x_path.display(), x_lines.len()),
                ));
            }
        }
        for (i, line) in x_lines.iter().enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ingest(&x_path, i + 1, format!("non-numeric feature: {e}")))?;
            if row.len() != HAR_FEATURES {
                return Err(ingest(
                    &x_path,
                    i + 1,
                    format!("expected {HAR_FEATURES} features, found {}", row.len()),
                ));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(ingest(&x_path, i + 1, format!("non-finite feature {v}")));
            }
            let label = activity_label(codes[i])
                .ok_or_else(|| ingest(&y_path, i + 1, format!("unknown activity code {}", codes[i])))?;
            let subject = subjects[i];
            if !(1..=HAR_SUBJECTS).contains(&subject) {
                return Err(ingest(&s_path, i + 1, format!("subject id {subject} outside 1–{HAR_SUBJECTS}")));
            }
            per_subject[(subject - 1) as usize].push((row, label));
        }
    }

    let mut subjects = Vec::new();
    for (k, rows) in per_subject.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let id = k as u32 + 1;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(split.seed, u64::from(id))));
        let n_test = ((rows.len() as f64 * split.test_fraction).round() as usize).clamp(1, rows.len().max(2) - 1);
        let (test_idx, train_idx) = order.split_at(n_test.min(rows.len()));
        let mut train_idx = train_idx.to_vec();
        let mut test_idx = test_idx.to_vec();
        // keep file order within each part
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let build = |idx: &[usize]| {
            let x = DMatrix::from_fn(idx.len(), HAR_FEATURES, |i, j| rows[idx[i]].0[j]);
            let y = DVector::from_fn(idx.len(), |i, _| rows[idx[i]].1);
            (x, y)
        };
        let (x_train, y_train) = build(&train_idx);
        let (x_test, y_test) = build(&test_idx);
        subjects.push(SubjectData {
            id,
            x_train,
            y_train,
            x_test,
            y_test,
        });
    }
    if subjects.is_empty() {
        return Err(ingest(&dir.join("train").join("X_train.txt"), 1, "no rows found"));
    }
    Ok(HarDataset { subjects })
}

/// Per-feature (mean, sd) of `x`, with sd floored at 1e−8.
pub fn column_stats(x: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(SD_FLOOR))
        })
        .collect()
}

fn apply_stats(x: &DMatrix<f64>, stats: &[(f64, f64)]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - stats[j].0) / stats[j].1)
}

/// Standardizes every subject with its own training-split statistics
/// (population sd); the test split gets the same transform.
pub fn standardize_per_subject(ds: &HarDataset) -> HarDataset {
    HarDataset {
        subjects: ds
            .subjects
            .iter()
            .map(|s| {
                let stats = column_stats(&s.x_train);
                SubjectData {
                    id: s.id,
                    x_train: apply_stats(&s.x_train, &stats),
                    y_train: s.y_train.clone(),
                    x_test: apply_stats(&s.x_test, &stats),
                    y_test: s.y_test.clone(),
                }
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HarMethod {
    Model(Method),
    /// Always predicts the dynamic class.
    AlwaysDynamic,
}

impl HarMethod {
    pub fn name(self) -> &'static str {
        match self {
            HarMethod::Model(m) => m.name(),
            HarMethod::AlwaysDynamic => "AlwaysDynamic",
        }
    }

    fn depends_on_rank(self) -> bool {
        matches!(
            self,
            HarMethod::Model(Method::GeoERM | Method::PlainERM | Method::NaiveOrtho)
        )
    }
}

impl std::str::FromStr for HarMethod {
    type Err = GeoErmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alwaysdynamic" | "constant" => Ok(HarMethod::AlwaysDynamic),
            _ => s.parse().map(HarMethod::Model),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarSpec {
    pub methods: Vec<HarMethod>,
    pub r_values: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for HarSpec {
    fn default() -> Self {
        HarSpec {
            methods: vec![
                HarMethod::Model(Method::GeoERM),
                HarMethod::Model(Method::SingleTask),
                HarMethod::Model(Method::Pooled),
                HarMethod::AlwaysDynamic,
            ],
            r_values: vec![5, 10, 15],
            replications: 10,
            seed: 0,
            alpha: 0.01,
            iterations: 500,
        }
    }
}

impl HarSpec {
    /// λ = √(r(p + ln T)), γ = √(p + ln T) for the dataset's p and T.
    pub fn hyperparams(&self, r: usize, p: usize, tasks: usize) -> Hyperparams {
        let base = p as f64 + (tasks as f64).ln();
        Hyperparams {
            alpha: self.alpha,
            iterations: self.iterations,
            ..Hyperparams::with_weights((r as f64 * base).sqrt(), base.sqrt())
        }
    }
}

/// Test-set misclassification (percent) of every subject in one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarRun {
    pub method: String,
    pub r: usize,
    pub replication: usize,
    pub failed: bool,
    pub subject_errors: Vec<f64>,
}

impl HarRun {
    pub fn mean_error(&self) -> f64 {
        self.subject_errors.iter().sum::<f64>() / self.subject_errors.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarReportRow {
    pub method: String,
    pub r: usize,
    /// Mean over replications of the subject-averaged error, in percent.
    pub mean_error_pct: f64,
    /// Sample sd of the subject-averaged error across replications.
    pub sd_error_pct: f64,
    pub replications: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarReport {
    pub rows: Vec<HarReportRow>,
    pub runs: Vec<HarRun>,
}

impl HarReport {
    pub fn get(&self, method: &str, r: usize) -> Option<&HarReportRow> {
        self.rows.iter().find(|row| row.method == method && row.r == r)
    }
}

/// Percentage of `y` missed by thresholding σ(xᵀβ) at 0.5.
pub fn classification_error(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let logits = x * beta;
    let wrong = logits
        .iter()
        .zip(y.iter())
        .filter(|(z, y)| f64::from(u8::from(**z >= 0.0)) != **y)
        .count();
    100.0 * wrong as f64 / y.len() as f64
}

fn evaluate(ds: &HarDataset, method: HarMethod, r: usize, rep: usize, spec: &HarSpec, tasks: &[TaskData]) -> HarRun {
    let errors = match method {
        HarMethod::AlwaysDynamic => Some(
            ds.subjects
                .iter()
                .map(|s| 100.0 * s.y_test.iter().filter(|&&y| y == 0.0).count() as f64 / s.y_test.len() as f64)
                .collect(),
        ),
        HarMethod::Model(m) => {
            let hp = spec.hyperparams(r, ds.features(), tasks.len());
            let init = sub_seed(sub_seed(spec.seed, rep as u64), r as u64);
            fit_method(m, tasks, r, &hp, init).ok().map(|betas| {
                ds.subjects
                    .iter()
                    .zip(&betas)
                    .map(|(s, b)| classification_error(&s.x_test, &s.y_test, b))
                    .collect()
            })
        }
    };
    let errors: Option<Vec<f64>> = errors.filter(|e: &Vec<f64>| e.iter().all(|v| v.is_finite()));
    HarRun {
        method: method.name().to_string(),
        r,
        replication: rep,
        failed: errors.is_none(),
        subject_errors: errors.unwrap_or_default(),
    }
}

/// Fits every method at every rank. Rank- and seed-free methods are fitted
/// once and shared across cells.
pub fn run_har(ds: &HarDataset, spec: &HarSpec) -> Result<HarReport> {
    if spec.replications == 0 || spec.r_values.is_empty() || spec.methods.is_empty() {
        return Err(GeoErmError::Config(
            "HAR run needs at least one method, rank and replication".into(),
        ));
    }
    if let Some(&r) = spec.r_values.iter().find(|&&r| r == 0 || r > ds.features()) {
        return Err(GeoErmError::Config(format!("rank {r} outside 1–{}", ds.features())));
    }
    let tasks: Vec<TaskData> = ds.subjects.iter().map(SubjectData::train_task).collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for &method in &spec.methods {
        for &r in &spec.r_values {
            for rep in 0..spec.replications {
                cells.push((method, r, rep));
            }
        }
    }
    let fixed: Vec<(HarMethod, HarRun)> = spec
        .methods
        .par_iter()
        .filter(|m| !m.depends_on_rank())
        .map(|&m| (m, evaluate(ds, m, spec.r_values[0], 0, spec, &tasks)))
        .collect();
    let runs: Vec<HarRun> = cells
        .par_iter()
        .map(|&(method, r, rep)| match fixed.iter().find(|(m, _)| *m == method) {
            Some((_, run)) => HarRun {
                r,
                replication: rep,
                ..run.clone()
            },
            None => evaluate(ds, method, r, rep, spec, &tasks),
        })
        .collect();

    let mut rows = Vec::new();
    for &method in &spec.methods {
        for &r in &spec.r_values {
            let group: Vec<&HarRun> = runs.iter().filter(|x| x.method == method.name() && x.r == r).collect();
            let means: Vec<f64> = group.iter().filter(|x| !x.failed).map(|x| x.mean_error()).collect();
            let (mean, sd) = mean_sd(&means);
            rows.push(HarReportRow {
                method: method.name().to_string(),
                r,
                mean_error_pct: mean,
                sd_error_pct: sd,
                replications: means.len(),
                failed: group.len() - means.len(),
            });
        }
    }
    Ok(HarReport { rows, runs })
}

/// Writes `har_report.csv` (one row per method and rank) and `har_table.csv`
/// (methods × ranks, "mean (sd)" cells).
pub fn write_har_report(report: &HarReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GeoErmError::io(dir, e))?;
    let mut long = String::from("method,r,mean_error_pct,sd_error_pct,replications,failed\n");
    for row in &report.rows {
        let num = |v: f64| if v.is_finite() { fmt_float(v) } else { String::new() };
        long.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method,
            row.r,
            num(row.mean_error_pct),
            num(row.sd_error_pct),
            row.replications,
            row.failed
        ));
    }
    write_file(&dir.join("har_report.csv"), long.as_bytes())?;

    let mut ranks: Vec<usize> = report.rows.iter().map(|r| r.r).collect();
    ranks.sort_unstable();
    ranks.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for row in &report.rows {
        if !methods.contains(&row.method.as_str()) {
            methods.push(&row.method);
        }
    }
    let mut table = String::from("method");
    for r in &ranks {
        table.push_str(&format!(",r={r}"));
    }
    table.push('\n');
    for m in methods {
        table.push_str(m);
        for &r in &ranks {
            match report.get(m, r) {
                Some(row) if row.mean_error_pct.is_finite() => {
                    table.push_str(&format!(",{:.2} ({:.2})", row.mean_error_pct, row.sd_error_pct))
                }
                _ => table.push_str(",failed"),
            }
        }
        table.push('\n');
    }
    write_file(&dir.join("har_table.csv"), table.as_bytes())
}
