//! Synthetic multi-task suites with heterogeneous and outlier tasks.
//!
//! Regular tasks perturb a shared basis: A_t = qf(A_center + ΔA), ΔA entries
//! ~ U(−h, h), θ_t ~ U(−H, H)^r, β_t = A_t θ_t and x ~ N(0, I_p). Outlier
//! tasks ignore the basis: β_t ~ U(−3, 3)^p and x ~ N(0, 2·I_p). Responses are
//! y = Xβ + ε with ε ~ N(0, I) or y ~ Bernoulli(σ(Xβ)).
//!
//! Every task draws from its own stream derived from the suite seed, so
//! growing T leaves earlier tasks untouched.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GeoErmError, Result};
use crate::manifold::{gaussian_matrix, orthonormalize_qr, thin_svd, StiefelPoint};
use crate::objective::{sigmoid, Hyperparams, LossKind, TaskData};

const OUTLIER_COEF_RANGE: f64 = 3.0;
const OUTLIER_FEATURE_VAR: f64 = 2.0;
const MAX_PERTURBATION_RETRIES: usize = 10;

/// Everything needed to regenerate a synthetic suite and fit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of tasks T.
    #[serde(alias = "T")]
    pub tasks: usize,
    /// Samples per task.
    pub n: usize,
    pub p: usize,
    pub r: usize,
    /// Heterogeneity: half-width of the uniform basis perturbation.
    pub h: f64,
    /// Coefficient range H for θ ~ U(−H, H).
    #[serde(alias = "H")]
    pub coef_range: f64,
    /// Outlier fraction ε.
    pub eps: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Defaults to √(r(p + ln T)) when absent.
    pub lambda: Option<f64>,
    /// Defaults to √(p + ln T) when absent.
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub iterations: usize,
    /// Penalty smoothing μ.
    pub mu: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tasks: 10,
            n: 100,
            p: 30,
            r: 5,
            h: 0.5,
            coef_range: 2.0,
            eps: 0.1,
            seed: 0,
            loss: LossKind::Regression,
            lambda: None,
            gamma: None,
            alpha: 0.01,
            iterations: 500,
            mu: 1e-3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GeoErmError::Config(m));
        if self.tasks == 0 || self.n == 0 || self.p == 0 || self.r == 0 {
            return bad(format!(
                "T, n, p, r must be ≥ 1 (got T = {}, n = {}, p = {}, r = {})",
                self.tasks, self.n, self.p, self.r
            ));
        }
        if self.r > self.p {
            return bad(format!("r = {} exceeds p = {}", self.r, self.p));
        }
        if !(self.eps >= 0.0 && self.eps < 1.0) {
            return bad(format!("eps = {} must lie in [0, 1)", self.eps));
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return bad(format!("h = {} must be finite and ≥ 0", self.h));
        }
        if !(self.coef_range >= 0.0 && self.coef_range.is_finite()) {
            return bad(format!("H = {} must be finite and ≥ 0", self.coef_range));
        }
        self.hyperparams().validate()
    }

    /// |S^c| = ⌈ε·T⌉.
    pub fn outlier_count(&self) -> usize {
        // guard against 0.1·30 = 3.0000000000000004
        ((self.eps * self.tasks as f64) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let (lambda, gamma) = hyperparam_defaults(self);
        Hyperparams {
            lambda: self.lambda.unwrap_or(lambda),
            gamma: self.gamma.unwrap_or(gamma),
            alpha: self.alpha,
            iterations: self.iterations,
            penalty_smoothing: self.mu,
            ..Hyperparams::default()
        }
    }
}

/// λ = √(r(p + ln T)), γ = √(p + ln T).
pub fn hyperparam_defaults(cfg: &ExperimentConfig) -> (f64, f64) {
    let base = cfg.p as f64 + (cfg.tasks as f64).ln();
    ((cfg.r as f64 * base).sqrt(), base.sqrt())
}

/// Ground truth of a generated suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub center: StiefelPoint,
    pub beta_true: Vec<DVector<f64>>,
    /// Representation of each regular task; `None` for outliers.
    pub a_true: Vec<Option<StiefelPoint>>,
    /// Regular task indices S.
    pub regular: Vec<usize>,
    /// Outlier task indices S^c.
    pub outliers: Vec<usize>,
    pub config: ExperimentConfig,
}

impl SyntheticTruth {
    pub fn is_outlier(&self, t: usize) -> bool {
        self.outliers.contains(&t)
    }
}

/// SplitMix64 finalizer applied to `seed` and `index`.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index))
}

pub fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, index))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * half_width
}

/// Top-r left singular vectors of a p×p standard Gaussian matrix, with the
/// largest-magnitude entry of each column made positive.
pub fn gen_center<R: Rng + ?Sized>(p: usize, r: usize, rng: &mut R) -> Result<StiefelPoint> {
    if r == 0 || r > p {
        return Err(GeoErmError::Dimension(format!("need 1 ≤ r ≤ p, got p = {p}, r = {r}")));
    }
    let g = gaussian_matrix(p, p, rng);
    let svd = thin_svd(&g)?;
    let mut out = svd.u.columns(0, r).into_owned();
    for mut col in out.column_iter_mut() {
        let lead = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    StiefelPoint::new(out)
}

fn responses<R: Rng + ?Sized>(x: &DMatrix<f64>, beta: &DVector<f64>, kind: LossKind, rng: &mut R) -> DVector<f64> {
    let mean = x * beta;
    match kind {
        LossKind::Regression => mean.map(|m| m + rng.sample::<f64, _>(StandardNormal)),
        LossKind::Classification => mean.map(|z| if rng.random::<f64>() < sigmoid(z) { 1.0 } else { 0.0 }),
    }
}

/// ΔA with i.i.d. U(−h, h) entries.
pub fn gen_perturbation<R: Rng + ?Sized>(p: usize, r: usize, h: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(p, r, |_, _| uniform(rng, h))
}

/// A regular task: perturbed, re-orthonormalized basis and uniform θ.
pub fn gen_regular_task<R: Rng + ?Sized>(
    center: &StiefelPoint,
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<(TaskData, DVector<f64>, StiefelPoint)> {
    let (p, r) = (center.p(), center.r());
    let mut basis = None;
    for _ in 0..MAX_PERTURBATION_RETRIES {
        let delta = gen_perturbation(p, r, cfg.h, rng);
        if let Some(q) = orthonormalize_qr(&(center.matrix() + delta)) {
            basis = Some(q);
            break;
        }
    }
    let a = StiefelPoint::new(basis.ok_or_else(|| {
        GeoErmError::Config(format!(
            "perturbed basis was rank deficient {MAX_PERTURBATION_RETRIES} times"
        ))
    })?)?;
    let theta = DVector::from_fn(r, |_, _| uniform(rng, cfg.coef_range));
    let beta = a.matrix() * theta;
    let x = gaussian_matrix(cfg.n, p, rng);
    let y = responses(&x, &beta, cfg.loss, rng);
    Ok((TaskData::new(x, y, cfg.loss)?, beta, a))
}

/// An outlier task: β ~ U(−3, 3)^p, features with variance 2.
pub fn gen_outlier_task<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<(TaskData, DVector<f64>)> {
    let beta = DVector::from_fn(cfg.p, |_, _| uniform(rng, OUTLIER_COEF_RANGE));
    let x = gaussian_matrix(cfg.n, cfg.p, rng) * OUTLIER_FEATURE_VAR.sqrt();
    let y = responses(&x, &beta, cfg.loss, rng);
    Ok((TaskData::new(x, y, cfg.loss)?, beta))
}

/// Generates all T tasks; the last ⌈εT⌉ indices are outliers.
pub fn gen_suite(cfg: &ExperimentConfig) -> Result<(Vec<TaskData>, SyntheticTruth)> {
    cfg.validate()?;
    let center = gen_center(cfg.p, cfg.r, &mut rng_for(cfg.seed, 0))?;
    let regular_count = cfg.tasks - cfg.outlier_count();
    let mut data = Vec::with_capacity(cfg.tasks);
    let mut beta_true = Vec::with_capacity(cfg.tasks);
    let mut a_true = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut rng = rng_for(cfg.seed, t as u64 + 1);
        if t < regular_count {
            let (task, beta, a) = gen_regular_task(&center, cfg, &mut rng)?;
            data.push(task);
            beta_true.push(beta);
            a_true.push(Some(a));
        } else {
            let (task, beta) = gen_outlier_task(cfg, &mut rng)?;
            data.push(task);
            beta_true.push(beta);
            a_true.push(None);
        }
    }
    let truth = SyntheticTruth {
        center,
        beta_true,
        a_true,
        regular: (0..regular_count).collect(),
        outliers: (regular_count..cfg.tasks).collect(),
        config: cfg.clone(),
    };
    Ok((data, truth))
}

/// max over regular tasks t ∈ S of ‖β̂_t − β_t‖₂.
pub fn max_error(beta_hat: &[DVector<f64>], truth: &SyntheticTruth) -> Result<f64> {
    if beta_hat.len() != truth.beta_true.len() {
        return Err(GeoErmError::Dimension(format!(
            "{} estimates for {} tasks",
            beta_hat.len(),
            truth.beta_true.len()
        )));
    }
    if truth.regular.is_empty() {
        return Err(GeoErmError::Config("no regular tasks to evaluate".into()));
    }
    Ok(truth
        .regular
        .iter()
        .map(|&t| (&beta_hat[t] - &truth.beta_true[t]).norm())
        .fold(0.0, f64::max))
}

pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `task_<t>.csv`, `truth.csv` and `config.json` into `dir`.
pub fn write_suite(dir: &Path, data: &[TaskData], truth: &SyntheticTruth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GeoErmError::io(dir, e))?;
    let p = truth.config.p;
    for (t, task) in data.iter().enumerate() {
        let mut out = String::new();
        let header: Vec<String> = (0..p).map(|j| format!("x_{j}")).chain(["y".to_string()]).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..task.n() {
            let row: Vec<String> = (0..p)
                .map(|j| fmt_float(task.x()[(i, j)]))
                .chain([fmt_float(task.y()[i])])
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        write_file(&dir.join(format!("task_{t}.csv")), out.as_bytes())?;
    }

    let mut out = String::from("t,is_outlier");
    for j in 0..p {
        out.push_str(&format!(",beta_{j}"));
    }
    out.push('\n');
    for (t, beta) in truth.beta_true.iter().enumerate() {
        out.push_str(&format!("{t},{}", u8::from(truth.is_outlier(t))));
        for v in beta.iter() {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    write_file(&dir.join("truth.csv"), out.as_bytes())?;
    let json = serde_json::to_string_pretty(&truth.config)?;
    write_file(&dir.join("config.json"), format!("{json}\n").as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| GeoErmError::io(path, e))?;
    f.write_all(bytes).map_err(|e| GeoErmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparam_formula() {
        let cfg = ExperimentConfig {
            p: 50,
            r: 5,
            tasks: 50,
            ..ExperimentConfig::default()
        };
        let (l, g) = hyperparam_defaults(&cfg);
        assert!((l - 16.4183).abs() < 1e-4, "{l}");
        assert!((g - 7.3425).abs() < 1e-4, "{g}");

        let one = ExperimentConfig { tasks: 1, ..cfg.clone() };
        assert!((hyperparam_defaults(&one).0 - 250f64.sqrt()).abs() <= 1e-12);
        let rank1 = ExperimentConfig { r: 1, ..cfg };
        let (l, g) = hyperparam_defaults(&rank1);
        assert_eq!(l, g);
    }

    #[test]
    fn outlier_counts() {
        let cfg = |tasks, eps| ExperimentConfig {
            tasks,
            eps,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg(50, 0.1).outlier_count(), 5);
        assert_eq!(cfg(30, 0.1).outlier_count(), 3);
        assert_eq!(cfg(10, 0.1).outlier_count(), 1);
        assert_eq!(cfg(7, 0.1).outlier_count(), 1);
        assert_eq!(cfg(50, 0.0).outlier_count(), 0);
    }

    #[test]
    fn max_error_examples() {
        let cfg = ExperimentConfig {
            tasks: 3,
            n: 5,
            p: 4,
            r: 2,
            eps: 0.3,
            ..ExperimentConfig::default()
        };
        let (_, truth) = gen_suite(&cfg).unwrap();
        assert_eq!(truth.outliers, vec![2]);
        let mut est = truth.beta_true.clone();
        assert_eq!(max_error(&est, &truth).unwrap(), 0.0);
        est[2] += DVector::from_element(4, 100.0);
        assert_eq!(max_error(&est, &truth).unwrap(), 0.0);
        est[1][0] += 3.0;
        est[1][1] += 4.0;
        assert!((max_error(&est, &truth).unwrap() - 5.0).abs() <= 1e-12);

        let mut none = truth.clone();
        none.regular.clear();
        assert!(max_error(&est, &none).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig { r: 40, ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig { eps: 1.0, ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig { tasks: 0, ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_accepts_paper_names() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"T": 50, "H": 2.0, "loss": "linear"}"#).unwrap();
        assert_eq!(cfg.tasks, 50);
        assert_eq!(cfg.loss, LossKind::Regression);
    }
}
