//! Sweep runner, aggregation, CSV/SVG emission and the invariant self-check.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{naive_ortho_fit, plain_erm_fit, pooled_fit, single_task_fit};
use crate::error::{GeoErmError, Result};
use crate::manifold::{
    gaussian_matrix, manifold_dim, orthonormality_residual, polar_retract, polar_retract_svd, project_tangent,
    random_stiefel, tangent_basis_rank, StiefelPoint, TangentVector,
};
use crate::objective::{ambient, Hyperparams, LossKind, PenaltyNorm, TaskData};
use crate::solver::{geoerm_fit, prox_l2, step1};
use crate::synthdata::{
    fmt_float, gen_outlier_task, gen_perturbation, gen_suite, max_error, rng_for, sub_seed, write_file,
    ExperimentConfig,
};

/// Stream index reserved for optimizer initialization within a replication.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    GeoERM,
    SingleTask,
    Pooled,
    PlainERM,
    NaiveOrtho,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::GeoERM,
        Method::SingleTask,
        Method::Pooled,
        Method::PlainERM,
        Method::NaiveOrtho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GeoERM => "GeoERM",
            Method::SingleTask => "SingleTask",
            Method::Pooled => "Pooled",
            Method::PlainERM => "PlainERM",
            Method::NaiveOrtho => "NaiveOrtho",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GeoErmError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .or(match key.as_str() {
                "single" => Some(Method::SingleTask),
                "plain" | "erm" => Some(Method::PlainERM),
                "naive" => Some(Method::NaiveOrtho),
                _ => None,
            })
            .ok_or_else(|| GeoErmError::Config(format!("unknown method '{s}'")))
    }
}

/// Coefficient estimates of every task under `method`. Optimizer-based
/// methods draw their initialization from `init_seed`.
pub fn fit_method(method: Method, data: &[TaskData], r: usize, hp: &Hyperparams, init_seed: u64) -> Result<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    Ok(match method {
        Method::GeoERM => geoerm_fit(data, r, hp, &mut rng)?.betas().to_vec(),
        Method::PlainERM => plain_erm_fit(data, r, hp, &mut rng)?.betas().to_vec(),
        Method::NaiveOrtho => naive_ortho_fit(data, r, hp, &mut rng)?.betas().to_vec(),
        Method::SingleTask => data
            .iter()
            .map(|t| single_task_fit(t).map(|f| f.beta))
            .collect::<Result<_>>()?,
        Method::Pooled => vec![pooled_fit(data)?.beta; data.len()],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "h")]
    H,
    #[serde(rename = "n")]
    N,
    #[serde(rename = "T")]
    T,
    #[serde(rename = "p")]
    P,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::H => "h",
            Axis::N => "n",
            Axis::T => "T",
            Axis::P => "p",
        }
    }

    /// `base` with the swept field set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= 1e9 {
                Ok(value as usize)
            } else {
                Err(GeoErmError::Config(format!(
                    "axis {} needs positive integer values, got {value}",
                    self.name()
                )))
            }
        };
        let mut cfg = base.clone();
        match self {
            Axis::H => cfg.h = value,
            Axis::N => cfg.n = count()?,
            Axis::T => cfg.tasks = count()?,
            Axis::P => cfg.p = count()?,
        }
        Ok(cfg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = GeoErmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "h" => Ok(Axis::H),
            "n" => Ok(Axis::N),
            "T" | "t" => Ok(Axis::T),
            "p" => Ok(Axis::P),
            other => Err(GeoErmError::Config(format!("unknown axis '{other}' (expected h, n, T or p)"))),
        }
    }
}

/// A sweep over one axis. `fixed.seed` is the base seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub fixed: ExperimentConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: Axis::H,
            values: vec![0.1, 0.5, 0.9],
            replications: 10,
            methods: vec![Method::GeoERM, Method::SingleTask, Method::Pooled],
            fixed: ExperimentConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(GeoErmError::Config("sweep needs at least one axis value".into()));
        }
        if !self.values.windows(2).all(|w| w[0] < w[1]) {
            return Err(GeoErmError::Config(format!(
                "axis values must be strictly increasing, got {:?}",
                self.values
            )));
        }
        if self.replications == 0 {
            return Err(GeoErmError::Config("replications must be ≥ 1".into()));
        }
        if self.methods.is_empty() {
            return Err(GeoErmError::Config("at least one method is required".into()));
        }
        for &v in &self.values {
            self.axis.apply(&self.fixed, v)?.validate()?;
        }
        Ok(())
    }

    /// Suite seed of replication `rep`; shared across axis values.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        sub_seed(self.fixed.seed, rep as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub axis: String,
    pub value: f64,
    pub replication: usize,
    pub seed: u64,
    /// NaN when `failed`.
    pub error: f64,
    pub failed: bool,
    pub wall_time_s: Option<f64>,
}

/// Runs every (value, replication, method) cell; replications run in
/// parallel, rows come back in that nested order.
pub fn run_sweep(spec: &SweepSpec, timings: bool) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let cells: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.replications).map(move |rep| (v, rep)))
        .collect();
    let rows: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(value, rep)| run_cell(spec, value, rep, timings))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn run_cell(spec: &SweepSpec, value: f64, rep: usize, timings: bool) -> Result<Vec<ResultRow>> {
    let mut cfg = spec.axis.apply(&spec.fixed, value)?;
    cfg.seed = spec.replication_seed(rep);
    let hp = cfg.hyperparams();
    let suite = gen_suite(&cfg);
    let init_seed = sub_seed(cfg.seed, INIT_STREAM);
    Ok(spec
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let error = match &suite {
                Ok((data, truth)) => fit_method(method, data, cfg.r, &hp, init_seed)
                    .and_then(|betas| max_error(&betas, truth))
                    .ok()
                    .filter(|e| e.is_finite()),
                Err(_) => None,
            };
            ResultRow {
                method: method.name().to_string(),
                axis: spec.axis.name().to_string(),
                value,
                replication: rep,
                seed: cfg.seed,
                error: error.unwrap_or(f64::NAN),
                failed: error.is_none(),
                wall_time_s: timings.then(|| start.elapsed().as_secs_f64()),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub axis: String,
    pub value: f64,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single replication.
    pub sd: f64,
    /// Successful replications.
    pub count: usize,
    pub failed: usize,
}

/// Mean ± sample sd per (method, value), in order of first appearance.
pub fn aggregate(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, String, f64, Vec<f64>, usize)> = Vec::new();
    for row in rows {
        let idx = match groups
            .iter()
            .position(|g| g.0 == row.method && g.1 == row.axis && g.2 == row.value)
        {
            Some(i) => i,
            None => {
                groups.push((row.method.clone(), row.axis.clone(), row.value, Vec::new(), 0));
                groups.len() - 1
            }
        };
        if row.failed {
            groups[idx].4 += 1;
        } else {
            groups[idx].3.push(row.error);
        }
    }
    groups
        .into_iter()
        .map(|(method, axis, value, errors, failed)| {
            let (mean, sd) = mean_sd(&errors);
            SummaryRow {
                method,
                axis,
                value,
                mean,
                sd,
                count: errors.len(),
                failed,
            }
        })
        .collect()
}

/// Welford's running mean and sample sd.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let sd = if xs.len() > 1 { (m2 / (xs.len() - 1) as f64).sqrt() } else { 0.0 };
    (mean, sd)
}

pub const ROW_HEADER: [&str; 8] = ["method", "axis", "value", "replication", "seed", "error", "failed", "wall_time_s"];
pub const SUMMARY_HEADER: [&str; 7] = ["method", "axis", "value", "mean", "sd", "count", "failed"];

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| GeoErmError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn finite_or_empty(v: f64) -> String {
    if v.is_finite() {
        fmt_float(v)
    } else {
        String::new()
    }
}

pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(ROW_HEADER)?;
    for row in rows {
        w.write_record([
            row.method.clone(),
            row.axis.clone(),
            fmt_float(row.value),
            row.replication.to_string(),
            row.seed.to_string(),
            finite_or_empty(row.error),
            u8::from(row.failed).to_string(),
            row.wall_time_s.map(fmt_float).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| GeoErmError::io(path, e))
}

pub fn emit_summary_csv(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for row in summary {
        w.write_record([
            row.method.clone(),
            row.axis.clone(),
            fmt_float(row.value),
            finite_or_empty(row.mean),
            finite_or_empty(row.sd),
            row.count.to_string(),
            row.failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| GeoErmError::io(path, e))
}

/// Parses a file written by [`emit_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(ROW_HEADER) {
        return Err(GeoErmError::Ingest {
            file: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |field: &str| GeoErmError::Ingest {
            file: path.to_path_buf(),
            line: i + 2,
            message: format!("cannot parse {field}"),
        };
        let float = |k: usize, name: &str| -> Result<Option<f64>> {
            match &record[k] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(name)),
            }
        };
        rows.push(ResultRow {
            method: record[0].to_string(),
            axis: record[1].to_string(),
            value: float(2, "value")?.ok_or_else(|| bad("value"))?,
            replication: record[3].parse().map_err(|_| bad("replication"))?,
            seed: record[4].parse().map_err(|_| bad("seed"))?,
            error: float(5, "error")?.unwrap_or(f64::NAN),
            failed: &record[6] == "1",
            wall_time_s: float(7, "wall_time_s")?,
        });
    }
    Ok(rows)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Mean error per method against the axis value, with a shaded ±1 sd band.
pub fn render_svg(summary: &[SummaryRow]) -> Result<String> {
    let points: Vec<&SummaryRow> = summary.iter().filter(|s| s.mean.is_finite()).collect();
    if points.is_empty() {
        return Err(GeoErmError::Config("nothing to plot".into()));
    }
    let mut methods: Vec<&str> = Vec::new();
    for s in &points {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let xs = points.iter().map(|s| s.value);
    let (mut x0, mut x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let y0 = points.iter().map(|s| (s.mean - s.sd).max(0.0)).fold(f64::INFINITY, f64::min);
    let mut y1 = points.iter().map(|s| s.mean + s.sd).fold(f64::NEG_INFINITY, f64::max);
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = ((y0 - pad).max(0.0), y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let axis_name = &points[0].axis;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!("<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">Maximum error vs {} (mean, band = ±1 sd)</text>\n",
        (left + w - right) / 2.0,
        xml_escape(axis_name)
    ));
    let (bx, by) = (px(x0), py(y0));
    svg.push_str(&format!(
        "<line x1=\"{bx:.1}\" y1=\"{by:.1}\" x2=\"{:.1}\" y2=\"{by:.1}\" stroke=\"black\"/>\n",
        px(x1)
    ));
    svg.push_str(&format!(
        "<line x1=\"{bx:.1}\" y1=\"{by:.1}\" x2=\"{bx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        py(y1)
    ));
    for k in 0..=4 {
        let xv = x0 + (x1 - x0) * k as f64 / 4.0;
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            px(xv),
            by + 16.0,
            tick(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            bx - 6.0,
            py(yv) + 4.0,
            tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (left + w - right) / 2.0,
        h - 12.0,
        xml_escape(axis_name)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">max error</text>\n",
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    ));

    for (i, method) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let series: Vec<&&SummaryRow> = points.iter().filter(|s| s.method == *method).collect();
        let upper: Vec<String> = series
            .iter()
            .map(|s| format!("{:.2},{:.2}", px(s.value), py(s.mean + s.sd)))
            .collect();
        let lower: Vec<String> = series
            .iter()
            .rev()
            .map(|s| format!("{:.2},{:.2}", px(s.value), py((s.mean - s.sd).max(y0))))
            .collect();
        svg.push_str(&format!(
            "<polygon points=\"{} {}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            upper.join(" "),
            lower.join(" ")
        ));
        let line: Vec<String> = series
            .iter()
            .map(|s| format!("{:.2},{:.2}", px(s.value), py(s.mean)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            line.join(" ")
        ));
        let ly = top + 20.0 * i as f64 + 10.0;
        let lx = w - right + 12.0;
        svg.push_str(&format!(
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"14\" height=\"4\" fill=\"{color}\"/>\n",
            ly - 2.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            lx + 20.0,
            ly + 4.0,
            xml_escape(method)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

pub fn emit_plot(summary: &[SummaryRow], path: &Path) -> Result<()> {
    write_file(path, render_svg(summary)?.as_bytes())
}

/// Resolved inputs and outputs of a run, written as `run_manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, outputs: Vec<String>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_file(&dir.join("run_manifest.json"), format!("{json}\n").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.entries.push(CheckEntry { name, passed, detail });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {}: {}", if e.passed { "PASS" } else { "FAIL" }, e.name, e.detail)?;
        }
        let failed = self.entries.iter().filter(|e| !e.passed).count();
        write!(f, "{} checks, {failed} failed", self.entries.len())
    }
}

/// A retraction under test: returns the raw p×r matrix it produced.
pub type Retraction = fn(&StiefelPoint, &TangentVector) -> Result<DMatrix<f64>>;

fn library_retraction(a: &StiefelPoint, h: &TangentVector) -> Result<DMatrix<f64>> {
    polar_retract(a, h).map(StiefelPoint::into_matrix)
}

/// Runs the invariant suites at small dimensions.
pub fn self_check() -> CheckReport {
    self_check_with(library_retraction)
}

pub fn self_check_with(retract: Retraction) -> CheckReport {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E1F);
    check_manifold(&mut report, retract, &mut rng);
    check_gradients(&mut report, &mut rng);
    check_descent(&mut report);
    check_step2(&mut report);
    check_synthdata(&mut report, &mut rng);
    report
}

fn record(report: &mut CheckReport, name: &'static str, result: Result<(bool, String)>) {
    match result {
        Ok((passed, detail)) => report.push(name, passed, detail),
        Err(e) => report.push(name, false, format!("error: {e}")),
    }
}

fn check_manifold(report: &mut CheckReport, retract: Retraction, rng: &mut ChaCha8Rng) {
    let mut worst_ortho: f64 = 0.0;
    let mut worst_agree: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    let mut worst_adj: f64 = 0.0;
    let outcome: Result<()> = (|| {
        for _ in 0..200 {
            let p = rng.random_range(1..=12);
            let r = rng.random_range(1..=p);
            let a = random_stiefel(p, r, rng)?;
            let scale = 10f64.powf(rng.random_range(-3.0..1.0));
            let h = project_tangent(&a, &(gaussian_matrix(p, r, rng) * scale))?;
            let out = retract(&a, &h)?;
            worst_ortho = worst_ortho.max(orthonormality_residual(&out));
            let svd = polar_retract_svd(&a, &h)?;
            worst_agree = worst_agree.max((&out - svd.matrix()).norm());

            let g = gaussian_matrix(p, r, rng);
            let k = gaussian_matrix(p, r, rng);
            let pg = project_tangent(&a, &g)?;
            let ppg = project_tangent(&a, pg.matrix())?;
            worst_idem = worst_idem.max((ppg.matrix() - pg.matrix()).norm());
            let pk = project_tangent(&a, &k)?;
            worst_adj = worst_adj.max((pg.matrix().dot(&k) - g.dot(pk.matrix())).abs());
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        report.push("retraction orthonormality", false, format!("error: {e}"));
        return;
    }
    report.push(
        "retraction orthonormality",
        worst_ortho <= 1e-8,
        format!("max ‖RᵀR − I‖_F = {worst_ortho:.2e} (tol 1e-8)"),
    );
    report.push(
        "retraction matches SVD polar factor",
        worst_agree <= 1e-9,
        format!("max difference {worst_agree:.2e} (tol 1e-9)"),
    );
    report.push(
        "projection idempotent",
        worst_idem <= 1e-10,
        format!("max ‖P(P(G)) − P(G)‖_F = {worst_idem:.2e} (tol 1e-10)"),
    );
    report.push(
        "projection self-adjoint",
        worst_adj <= 1e-10,
        format!("max |⟨P(G), K⟩ − ⟨G, P(K)⟩| = {worst_adj:.2e} (tol 1e-10)"),
    );
    let dims: Result<(bool, String)> = (|| {
        let mut ok = true;
        let mut parts = Vec::new();
        for (p, r) in [(3, 2), (5, 3), (8, 4)] {
            let rank = tangent_basis_rank(&random_stiefel(p, r, rng)?)?;
            let dim = manifold_dim(p, r)?;
            ok &= rank == dim;
            parts.push(format!("({p},{r}): rank {rank} dim {dim}"));
        }
        Ok((ok, parts.join(", ")))
    })();
    record(report, "tangent space dimension", dims);
}

fn central_difference(x: &DMatrix<f64>, f: &dyn Fn(&DMatrix<f64>) -> Result<f64>) -> Result<DMatrix<f64>> {
    const STEP: f64 = 1e-6;
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus[k] += STEP;
        let mut minus = x.clone();
        minus[k] -= STEP;
        out[k] = (f(&plus)? - f(&minus)?) / (2.0 * STEP);
    }
    Ok(out)
}

fn random_task(kind: LossKind, n: usize, p: usize, rng: &mut ChaCha8Rng) -> Result<TaskData> {
    let x = gaussian_matrix(n, p, rng);
    let y = DVector::from_fn(n, |_, _| match kind {
        LossKind::Regression => 2.0 * rng.random::<f64>() - 1.0,
        LossKind::Classification => f64::from(u8::from(rng.random_bool(0.5))),
    });
    TaskData::new(x, y, kind)
}

fn check_gradients(report: &mut CheckReport, rng: &mut ChaCha8Rng) {
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(1e-12);
    let losses: Result<(bool, String)> = (|| {
        let mut worst: f64 = 0.0;
        for point in 0..10 {
            let kind = if point % 2 == 0 { LossKind::Regression } else { LossKind::Classification };
            let task = random_task(kind, 12, 5, rng)?;
            let a = random_stiefel(5, 2, rng)?;
            let abar = random_stiefel(5, 2, rng)?;
            let theta = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let hp = Hyperparams::with_weights(0.0, 0.0);
            let analytic = ambient::grad_a(&task, a.matrix(), &theta, abar.matrix(), &hp)?;
            let numeric = central_difference(a.matrix(), &|m| ambient::task_objective(&task, m, &theta, abar.matrix(), &hp))?;
            worst = worst.max(rel(&analytic, &numeric));
        }
        Ok((worst <= 1e-5, format!("max relative error {worst:.2e} (tol 1e-5)")))
    })();
    record(report, "loss gradients vs finite differences", losses);

    let penalty: Result<(bool, String)> = (|| {
        let mut worst: f64 = 0.0;
        for point in 0..10 {
            let norm = if point % 2 == 0 { PenaltyNorm::Spectral } else { PenaltyNorm::Frobenius };
            let task = random_task(LossKind::Regression, 8, 6, rng)?;
            let a = random_stiefel(6, 2, rng)?;
            let abar = random_stiefel(6, 2, rng)?;
            let theta = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let hp = Hyperparams {
                penalty_norm: norm,
                penalty_smoothing: 1e-3,
                ..Hyperparams::with_weights(2.0, 0.0)
            };
            let analytic = ambient::grad_a(&task, a.matrix(), &theta, abar.matrix(), &hp)?;
            let numeric = central_difference(a.matrix(), &|m| ambient::task_objective(&task, m, &theta, abar.matrix(), &hp))?;
            worst = worst.max(rel(&analytic, &numeric));
            let analytic = ambient::grad_abar(std::slice::from_ref(&task), std::slice::from_ref(a.matrix()), abar.matrix(), &hp)?;
            let numeric = central_difference(abar.matrix(), &|m| ambient::task_objective(&task, a.matrix(), &theta, m, &hp))?;
            worst = worst.max(rel(&analytic, &numeric));
        }
        Ok((worst <= 1e-4, format!("max relative error {worst:.2e} (tol 1e-4)")))
    })();
    record(report, "penalty gradients vs finite differences", penalty);
}

fn check_descent(report: &mut CheckReport) {
    let outcome: Result<(bool, String)> = (|| {
        let cfg = ExperimentConfig {
            tasks: 3,
            n: 40,
            p: 10,
            r: 2,
            h: 0.3,
            eps: 0.0,
            seed: 3,
            ..ExperimentConfig::default()
        };
        let (data, _) = gen_suite(&cfg)?;
        let hp = Hyperparams {
            alpha: 1e-3,
            iterations: 100,
            penalty_smoothing: 1e-3,
            ..cfg.hyperparams().plain_gradient()
        };
        let out = step1(&data, cfg.r, &hp, &mut rng_for(3, INIT_STREAM))?;
        let mut prev = out.initial_objective;
        let mut worst_rise = f64::NEG_INFINITY;
        for &f in &out.objective_history {
            worst_rise = worst_rise.max(f - prev);
            prev = f;
        }
        Ok((
            worst_rise <= 1e-10,
            format!("largest per-step change {worst_rise:.2e} over {} steps (tol 1e-10)", hp.iterations),
        ))
    })();
    record(report, "plain-gradient descent", outcome);
}

fn check_step2(report: &mut CheckReport) {
    let v = DVector::from_vec(vec![0.7]);
    let center = DVector::from_vec(vec![0.1]);
    let tau = 0.25;
    let got = prox_l2(&v, &center, tau)[0];
    let (mut best, mut best_val) = (0.0, f64::INFINITY);
    for k in 0..=200_000 {
        let b = -1.0 + 2.0 * k as f64 / 200_000.0;
        let val = 0.5 * (b - v[0]).powi(2) + tau * (b - center[0]).abs();
        if val < best_val {
            best_val = val;
            best = b;
        }
    }
    report.push(
        "prox matches grid minimization",
        (got - best).abs() <= 1e-5,
        format!("prox {got:.8}, grid {best:.8}"),
    );
}

fn check_synthdata(report: &mut CheckReport, rng: &mut ChaCha8Rng) {
    let mut draws: Vec<f64> = (0..70).flat_map(|_| gen_perturbation(30, 5, 0.5, rng).iter().copied().collect::<Vec<_>>()).collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = (x + 0.5).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    report.push(
        "perturbation uniform (KS, 1%)",
        ks < 1.628 / n.sqrt(),
        format!("D = {ks:.4}, critical {:.4}", 1.628 / n.sqrt()),
    );

    let outcome: Result<(bool, String)> = (|| {
        let cfg = ExperimentConfig {
            tasks: 2,
            n: 50_000,
            p: 2,
            r: 1,
            eps: 0.5,
            seed: 17,
            ..ExperimentConfig::default()
        };
        let (data, truth) = gen_suite(&cfg)?;
        let resid = data[0].y() - data[0].x() * &truth.beta_true[0];
        let noise_var = resid.norm_squared() / resid.len() as f64;
        let (outlier, _) = gen_outlier_task(&cfg, rng)?;
        let feature_var = outlier.x().norm_squared() / outlier.x().len() as f64;
        Ok((
            (noise_var - 1.0).abs() <= 0.05 && (feature_var - 2.0).abs() <= 0.1,
            format!("noise variance {noise_var:.4}, outlier feature variance {feature_var:.4}"),
        ))
    })();
    record(report, "generator moments", outcome);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, value: f64, error: f64) -> ResultRow {
        ResultRow {
            method: method.into(),
            axis: "h".into(),
            value,
            replication: 0,
            seed: 0,
            error,
            failed: !error.is_finite(),
            wall_time_s: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[row("A", 0.1, 2.5)]);
        assert_eq!((s[0].mean, s[0].sd, s[0].count), (2.5, 0.0, 1));
        let s = aggregate(&[row("A", 0.1, 1.0), row("A", 0.1, 3.0)]);
        assert_eq!(s[0].mean, 2.0);
        assert!((s[0].sd - 2f64.sqrt()).abs() <= 1e-15);
    }

    #[test]
    fn failed_rows_are_counted_not_averaged() {
        let s = aggregate(&[row("A", 0.1, 1.0), row("A", 0.1, f64::NAN), row("B", 0.1, 4.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].mean, s[0].count, s[0].failed), (1.0, 1, 1));
        assert_eq!(s[1].method, "B");
    }

    #[test]
    fn method_and_axis_parsing() {
        assert_eq!("geoerm".parse::<Method>().unwrap(), Method::GeoERM);
        assert_eq!("naive-ortho".parse::<Method>().unwrap(), Method::NaiveOrtho);
        assert_eq!("single".parse::<Method>().unwrap(), Method::SingleTask);
        assert!("pERM".parse::<Method>().is_err());
        assert_eq!("T".parse::<Axis>().unwrap(), Axis::T);
        assert!(Axis::N.apply(&ExperimentConfig::default(), 10.5).is_err());
        assert_eq!(Axis::P.apply(&ExperimentConfig::default(), 40.0).unwrap().p, 40);
    }

    #[test]
    fn spec_validation() {
        let base = SweepSpec::default();
        assert!(base.validate().is_ok());
        assert!(SweepSpec { values: vec![0.5, 0.1], ..base.clone() }.validate().is_err());
        assert!(SweepSpec { values: vec![], ..base.clone() }.validate().is_err());
        assert!(SweepSpec { replications: 0, ..base.clone() }.validate().is_err());
        assert!(SweepSpec { axis: Axis::P, values: vec![3.0], ..base }.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec: SweepSpec =
            serde_json::from_str(r#"{"axis": "T", "values": [5, 10], "methods": ["GeoERM", "Pooled"], "fixed": {"p": 8, "r": 2}}"#)
                .unwrap();
        assert_eq!(spec.axis, Axis::T);
        assert_eq!(spec.fixed.p, 8);
        assert_eq!(spec.replications, 10);
        let back: SweepSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn tick_labels() {
        assert_eq!(tick(0.5), "0.5");
        assert_eq!(tick(2.0), "2");
        assert_eq!(tick(-0.0), "0");
    }
}
