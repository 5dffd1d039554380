//! Comparison methods: per-task and pooled ERM, factorized ERM without the
//! subspace penalty, and the Euclidean-step-then-orthogonalize variant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GeoErmError, Result};
use crate::objective::{lipschitz_bound, loss_and_gradient, Hyperparams, LossKind, TaskData};
use crate::solver::{finish_with_step2, step1, step1_observed, FitResult, IterationReport, ManifoldStep};

const RIDGE: f64 = 1e-8;
const LOGISTIC_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITER: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    SingleTask,
    Pooled,
    PlainERM,
    NaiveOrtho,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::SingleTask,
        BaselineKind::Pooled,
        BaselineKind::PlainERM,
        BaselineKind::NaiveOrtho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SingleTask => "SingleTask",
            BaselineKind::Pooled => "Pooled",
            BaselineKind::PlainERM => "PlainERM",
            BaselineKind::NaiveOrtho => "NaiveOrtho",
        }
    }
}

/// A directly fitted coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineFit {
    pub beta: DVector<f64>,
    /// False when logistic descent hit the iteration cap; `beta` is then the
    /// best iterate seen.
    pub converged: bool,
    pub iterations: usize,
}

/// Least squares (XᵀX + 1e−8·I)⁻¹Xᵀy, or logistic ERM by gradient descent.
pub fn single_task_fit(task: &TaskData) -> Result<BaselineFit> {
    match task.kind() {
        LossKind::Regression => {
            let x = task.x();
            let mut gram = x.tr_mul(x);
            for i in 0..gram.nrows() {
                gram[(i, i)] += RIDGE;
            }
            let rhs = x.tr_mul(task.y());
            let chol = gram.cholesky().ok_or(GeoErmError::NotPositiveDefinite {
                min_eigenvalue: f64::NAN,
            })?;
            Ok(BaselineFit {
                beta: chol.solve(&rhs),
                converged: true,
                iterations: 0,
            })
        }
        LossKind::Classification => logistic_descent(task),
    }
}

fn logistic_descent(task: &TaskData) -> Result<BaselineFit> {
    let step = 1.0 / lipschitz_bound(task).max(f64::MIN_POSITIVE);
    let mut beta = DVector::zeros(task.p());
    let (mut best_loss, mut grad) = loss_and_gradient(task, &beta)?;
    let mut best = beta.clone();
    for iteration in 0..LOGISTIC_MAX_ITER {
        if grad.norm() <= LOGISTIC_TOL {
            return Ok(BaselineFit {
                beta,
                converged: true,
                iterations: iteration,
            });
        }
        beta -= &grad * step;
        let (loss, g) = loss_and_gradient(task, &beta)?;
        if !loss.is_finite() {
            return Err(GeoErmError::Divergence {
                iteration,
                what: "logistic loss",
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from(&beta);
        }
        grad = g;
    }
    let converged = grad.norm() <= LOGISTIC_TOL;
    Ok(BaselineFit {
        beta: if converged { beta } else { best },
        converged,
        iterations: LOGISTIC_MAX_ITER,
    })
}

/// One fit on the row-concatenation of all tasks.
pub fn pooled_fit(tasks: &[TaskData]) -> Result<BaselineFit> {
    let first = tasks
        .first()
        .ok_or_else(|| GeoErmError::Config("at least one task is required".into()))?;
    let (p, kind) = (first.p(), first.kind());
    let mut rows = 0;
    for (t, task) in tasks.iter().enumerate() {
        if task.p() != p {
            return Err(GeoErmError::Dimension(format!(
                "task {t} has {} features, task 0 has {p}",
                task.p()
            )));
        }
        if task.kind() != kind {
            return Err(GeoErmError::KindMismatch {
                expected: kind.name(),
                found: task.kind().name(),
            });
        }
        rows += task.n();
    }
    let mut x = DMatrix::zeros(rows, p);
    let mut y = DVector::zeros(rows);
    let mut at = 0;
    for task in tasks {
        x.rows_mut(at, task.n()).copy_from(task.x());
        y.rows_mut(at, task.n()).copy_from(task.y());
        at += task.n();
    }
    single_task_fit(&TaskData::new(x, y, kind)?)
}

/// Step 1 with λ = 0 and β̂ = Âθ̂; the penalty is never evaluated.
pub fn plain_erm_fit<R: Rng + ?Sized>(data: &[TaskData], r: usize, hp: &Hyperparams, rng: &mut R) -> Result<FitResult> {
    let hp = Hyperparams { lambda: 0.0, ..hp.clone() };
    let out = step1(data, r, &hp, rng)?;
    let mut state = out.state;
    state.beta = Some(state.anchors());
    Ok(FitResult {
        state,
        initial_objective: out.initial_objective,
        objective_history: out.objective_history,
        grad_norm_history: out.grad_norm_history,
        step2_converged: Vec::new(),
    })
}

/// Step 1 with ambient updates re-orthogonalized by the SVD projection, then
/// the usual Step 2.
pub fn naive_ortho_fit<R: Rng + ?Sized>(data: &[TaskData], r: usize, hp: &Hyperparams, rng: &mut R) -> Result<FitResult> {
    naive_ortho_observed(data, r, hp, rng, &mut |_| {})
}

pub fn naive_ortho_observed<R: Rng + ?Sized>(
    data: &[TaskData],
    r: usize,
    hp: &Hyperparams,
    rng: &mut R,
    observer: &mut dyn FnMut(&IterationReport<'_>),
) -> Result<FitResult> {
    let out = step1_observed(data, r, hp, rng, ManifoldStep::NaiveOrthogonalization, observer)?;
    finish_with_step2(data, out, hp.gamma)
}
