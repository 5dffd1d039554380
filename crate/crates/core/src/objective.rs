//! Task losses, the subspace-alignment penalty and their Euclidean gradients.
//!
//! The Step 1 objective is
//!
//! ```text
//! Σ_t [ f_t(A_t θ_t) + (λ/√n_t) · ‖A_t A_tᵀ − Ā Āᵀ‖ ]
//! ```
//!
//! with f_t the least-squares loss (1/2n)‖y − Xβ‖² or the logistic negative
//! log-likelihood (1/n) Σ [−y xᵀβ + log(1 + e^{xᵀβ})].
//!
//! The penalty norm is the spectral norm by default, smoothed as
//! `√(‖D‖₂² + μ²) − μ` during optimization. Functions taking [`StiefelPoint`]s
//! delegate to the [`ambient`] module, which evaluates the same expressions on
//! arbitrary p×r matrices (the Euclidean extension used for gradient checks).

use std::cell::Cell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{GeoErmError, Result};
use crate::manifold::StiefelPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(alias = "linear")]
    Regression,
    #[serde(alias = "logistic")]
    Classification,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Regression => "regression",
            LossKind::Classification => "classification",
        }
    }
}

/// One task's design matrix, responses and loss kind.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    x: DMatrix<f64>,
    y: DVector<f64>,
    kind: LossKind,
}

impl TaskData {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, kind: LossKind) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GeoErmError::Dimension(format!(
                "design has {} rows but response has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(GeoErmError::Dimension("empty task".into()));
        }
        if kind == LossKind::Classification {
            if let Some((row, &value)) = y.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
                return Err(GeoErmError::InvalidLabel { row, value });
            }
        }
        Ok(TaskData { x, y, kind })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyNorm {
    Spectral,
    Frobenius,
}

/// How a parameter block is moved along its (Riemannian) gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Adam,
    /// Plain gradient step, α·∇.
    #[serde(alias = "sgd")]
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Alignment penalty weight λ.
    pub lambda: f64,
    /// Step 2 shrinkage weight γ.
    pub gamma: f64,
    /// Step size α.
    pub alpha: f64,
    pub iterations: usize,
    /// μ in √(‖D‖² + μ²) − μ.
    pub penalty_smoothing: f64,
    pub penalty_norm: PenaltyNorm,
    /// Update rule for A^(t) and Ā.
    pub manifold_optimizer: UpdateRule,
    pub theta_optimizer: UpdateRule,
    /// Re-project the Adam direction onto the tangent space before retracting.
    pub adam_reproject: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 0.0,
            gamma: 0.0,
            alpha: 0.01,
            iterations: 500,
            penalty_smoothing: 1e-3,
            penalty_norm: PenaltyNorm::Spectral,
            manifold_optimizer: UpdateRule::Adam,
            theta_optimizer: UpdateRule::Adam,
            adam_reproject: true,
        }
    }
}

impl Hyperparams {
    pub fn with_weights(lambda: f64, gamma: f64) -> Self {
        Hyperparams {
            lambda,
            gamma,
            ..Hyperparams::default()
        }
    }

    /// Plain Riemannian gradient descent for every block (no Adam).
    pub fn plain_gradient(mut self) -> Self {
        self.manifold_optimizer = UpdateRule::Gradient;
        self.theta_optimizer = UpdateRule::Gradient;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GeoErmError::Config(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and ≥ 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and ≥ 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and ≥ 0");
        }
        if self.iterations == 0 {
            return bad("iterations must be > 0");
        }
        if !(self.penalty_smoothing >= 0.0 && self.penalty_smoothing.is_finite()) {
            return bad("penalty_smoothing must be finite and ≥ 0");
        }
        Ok(())
    }
}

/// Full parameter set: per-task A^(t), θ^(t), the shared center Ā and,
/// once Step 2 has run, the refined β^(t).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub a: Vec<StiefelPoint>,
    pub theta: Vec<DVector<f64>>,
    pub abar: StiefelPoint,
    pub beta: Option<Vec<DVector<f64>>>,
}

impl ModelState {
    pub fn new(a: Vec<StiefelPoint>, theta: Vec<DVector<f64>>, abar: StiefelPoint) -> Result<Self> {
        let state = ModelState {
            a,
            theta,
            abar,
            beta: None,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn task_count(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.len() != self.theta.len() {
            return Err(GeoErmError::Dimension(format!(
                "{} representations but {} coefficient vectors",
                self.a.len(),
                self.theta.len()
            )));
        }
        let (p, r) = (self.abar.p(), self.abar.r());
        for (t, (a, theta)) in self.a.iter().zip(&self.theta).enumerate() {
            if a.p() != p || a.r() != r || theta.len() != r {
                return Err(GeoErmError::Dimension(format!(
                    "task {t}: representation {}×{} / θ of length {} vs center {p}×{r}",
                    a.p(),
                    a.r(),
                    theta.len()
                )));
            }
        }
        if let Some(beta) = &self.beta {
            if beta.len() != self.a.len() || beta.iter().any(|b| b.len() != p) {
                return Err(GeoErmError::Dimension("β list does not match tasks".into()));
            }
        }
        Ok(())
    }

    /// β^(t) = A^(t)θ^(t) for every task.
    pub fn anchors(&self) -> Vec<DVector<f64>> {
        self.a
            .iter()
            .zip(&self.theta)
            .map(|(a, theta)| a.matrix() * theta)
            .collect()
    }
}

thread_local! {
    static PENALTY_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of penalty evaluations performed on the current thread.
pub fn penalty_evaluations() -> u64 {
    PENALTY_EVALS.with(|c| c.get())
}

/// β = A·θ.
pub fn beta_of(a: &StiefelPoint, theta: &DVector<f64>) -> Result<DVector<f64>> {
    if theta.len() != a.r() {
        return Err(GeoErmError::Dimension(format!(
            "θ has length {}, representation has {} columns",
            theta.len(),
            a.r()
        )));
    }
    Ok(a.matrix() * theta)
}

/// (1/2n)·‖y − Xβ‖².
pub fn linear_loss(task: &TaskData, beta: &DVector<f64>) -> Result<f64> {
    expect_kind(task, LossKind::Regression)?;
    check_beta(task, beta)?;
    let resid = task.x() * beta - task.y();
    Ok(resid.norm_squared() / (2.0 * task.n() as f64))
}

/// (1/n)·Σ [−y_i·x_iᵀβ + log(1 + e^{x_iᵀβ})], evaluated without overflow.
pub fn logistic_loss(task: &TaskData, beta: &DVector<f64>) -> Result<f64> {
    expect_kind(task, LossKind::Classification)?;
    check_beta(task, beta)?;
    let logits = task.x() * beta;
    let total: f64 = logits
        .iter()
        .zip(task.y().iter())
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum();
    Ok(total / task.n() as f64)
}

/// The task's own loss, dispatched on its kind.
pub fn task_loss(task: &TaskData, beta: &DVector<f64>) -> Result<f64> {
    match task.kind() {
        LossKind::Regression => linear_loss(task, beta),
        LossKind::Classification => logistic_loss(task, beta),
    }
}

/// ∇_β f = (1/n)·Xᵀ(ŷ − y), with ŷ = Xβ or σ(Xβ).
pub fn loss_gradient(task: &TaskData, beta: &DVector<f64>) -> Result<DVector<f64>> {
    check_beta(task, beta)?;
    let mut fitted = task.x() * beta;
    if task.kind() == LossKind::Classification {
        fitted.apply(|z| *z = sigmoid(*z));
    }
    let resid = fitted - task.y();
    Ok(task.x().tr_mul(&resid) / task.n() as f64)
}

/// Loss value and ∇_β f from a single pass over the design.
pub fn loss_and_gradient(task: &TaskData, beta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    check_beta(task, beta)?;
    let n = task.n() as f64;
    let logits = task.x() * beta;
    let (value, resid) = match task.kind() {
        LossKind::Regression => {
            let resid = logits - task.y();
            (resid.norm_squared() / (2.0 * n), resid)
        }
        LossKind::Classification => {
            let value = logits
                .iter()
                .zip(task.y().iter())
                .map(|(&z, &y)| softplus(z) - y * z)
                .sum::<f64>()
                / n;
            (value, logits.map(sigmoid) - task.y())
        }
    };
    Ok((value, task.x().tr_mul(&resid) / n))
}

/// Upper bound on the Lipschitz constant of ∇_β f: λ_max(XᵀX)/n for
/// least squares and λ_max(XᵀX)/(4n) for the logistic loss.
pub fn lipschitz_bound(task: &TaskData) -> f64 {
    let x = task.x();
    let mut v = DVector::from_element(task.p(), 1.0 / (task.p() as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let w = x.tr_mul(&(x * &v));
        let next = w.norm();
        if next == 0.0 {
            break;
        }
        v = w / next;
        let done = (next - estimate).abs() <= 1e-10 * next;
        estimate = next;
        if done {
            break;
        }
    }
    // power iteration approaches from below
    let bound = (estimate * 1.01).max(f64::MIN_POSITIVE) / task.n() as f64;
    match task.kind() {
        LossKind::Regression => bound,
        LossKind::Classification => bound / 4.0,
    }
}

/// log(1 + e^z).
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smoothed spectral-norm distance between the projectors AAᵀ and ĀĀᵀ.
pub fn penalty(a: &StiefelPoint, abar: &StiefelPoint, mu: f64) -> Result<f64> {
    penalty_with_norm(a, abar, mu, PenaltyNorm::Spectral)
}

pub fn penalty_with_norm(a: &StiefelPoint, abar: &StiefelPoint, mu: f64, norm: PenaltyNorm) -> Result<f64> {
    Ok(ambient::penalty(a.matrix(), abar.matrix(), mu, norm)?.value)
}

/// Σ_t [f_t(A_tθ_t) + (λ/√n_t)·penalty(A_t, Ā, μ)] with μ from `hp`.
pub fn step1_objective(state: &ModelState, data: &[TaskData], hp: &Hyperparams) -> Result<f64> {
    step1_objective_smoothed(state, data, hp, hp.penalty_smoothing)
}

/// [`step1_objective`] with an explicit smoothing μ (μ = 0 gives the exact norm).
pub fn step1_objective_smoothed(state: &ModelState, data: &[TaskData], hp: &Hyperparams, mu: f64) -> Result<f64> {
    check_tasks(state, data)?;
    let hp = Hyperparams {
        penalty_smoothing: mu,
        ..hp.clone()
    };
    let mut total = 0.0;
    for (t, task) in data.iter().enumerate() {
        total += ambient::task_objective(task, state.a[t].matrix(), &state.theta[t], state.abar.matrix(), &hp)?;
    }
    Ok(total)
}

/// ∇_θ f_t(Aθ) = Aᵀ·∇_β f_t.
pub fn grad_theta(task: &TaskData, a: &StiefelPoint, theta: &DVector<f64>) -> Result<DVector<f64>> {
    ambient::grad_theta(task, a.matrix(), theta)
}

/// Euclidean gradient of one task's Step 1 term with respect to A^(t).
pub fn grad_a_euclid(
    task: &TaskData,
    a: &StiefelPoint,
    theta: &DVector<f64>,
    abar: &StiefelPoint,
    hp: &Hyperparams,
) -> Result<DMatrix<f64>> {
    ambient::grad_a(task, a.matrix(), theta, abar.matrix(), hp)
}

/// Euclidean gradient of the summed penalty with respect to Ā.
pub fn grad_abar_euclid(state: &ModelState, data: &[TaskData], hp: &Hyperparams) -> Result<DMatrix<f64>> {
    check_tasks(state, data)?;
    let a: Vec<DMatrix<f64>> = state.a.iter().map(|a| a.matrix().clone()).collect();
    ambient::grad_abar(data, &a, state.abar.matrix(), hp)
}

fn check_tasks(state: &ModelState, data: &[TaskData]) -> Result<()> {
    state.validate()?;
    if state.task_count() != data.len() {
        return Err(GeoErmError::Dimension(format!(
            "state has {} tasks, data has {}",
            state.task_count(),
            data.len()
        )));
    }
    Ok(())
}

fn expect_kind(task: &TaskData, expected: LossKind) -> Result<()> {
    if task.kind() != expected {
        return Err(GeoErmError::KindMismatch {
            expected: expected.name(),
            found: task.kind().name(),
        });
    }
    Ok(())
}

fn check_beta(task: &TaskData, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != task.p() {
        return Err(GeoErmError::Dimension(format!(
            "β has length {}, task has {} features",
            beta.len(),
            task.p()
        )));
    }
    Ok(())
}

/// Evaluation of the objective on arbitrary (not necessarily orthonormal)
/// p×r matrices, i.e. the Euclidean extension f̄.
pub mod ambient {
    use super::*;

    /// Eigenvalue ties within this are treated as a single top eigenspace.
    pub const TIE_TOL: f64 = 1e-9;
    /// D = 0 convention threshold for the raw norm.
    pub const ZERO_NORM: f64 = 1e-12;

    const EIGEN_MAX_ITER: usize = 10_000;

    /// Penalty value together with the (sub)gradient of the smoothed norm with
    /// respect to D, stored in factored form.
    #[derive(Clone, Debug)]
    pub struct PenaltyEval {
        /// Unsmoothed norm ‖D‖.
        pub norm: f64,
        /// √(‖D‖² + μ²) − μ.
        pub value: f64,
        direction: Direction,
    }

    #[derive(Clone, Debug)]
    enum Direction {
        Zero,
        /// Σ_i w_i v_i v_iᵀ over the top-magnitude eigenvectors of D.
        Spectral(Vec<(f64, DVector<f64>)>),
        /// c·D.
        Frobenius(f64),
    }

    impl PenaltyEval {
        /// Applies the derivative of the smoothed norm w.r.t. D to `b`, i.e. G·b.
        pub fn apply(&self, a: &DMatrix<f64>, abar: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
            match &self.direction {
                Direction::Zero => DMatrix::zeros(b.nrows(), b.ncols()),
                Direction::Spectral(terms) => {
                    let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                    for (w, v) in terms {
                        let vtb = b.tr_mul(v).transpose();
                        out += v * vtb * *w;
                    }
                    out
                }
                Direction::Frobenius(c) => (a * a.tr_mul(b) - abar * abar.tr_mul(b)) * *c,
            }
        }

        pub fn is_zero(&self) -> bool {
            matches!(self.direction, Direction::Zero)
        }
    }

    /// Evaluates ‖AAᵀ − ĀĀᵀ‖ without forming the p×p matrix.
    ///
    /// D lives in span[A Ā], so with the thin QR [A Ā] = Q·R it equals
    /// Q·(R_A R_Aᵀ − R_Ā R_Āᵀ)·Qᵀ and its spectrum is that of the small
    /// symmetric core. For orthonormal A and Ā the nonzero eigenvalues come in
    /// ± pairs, so the top eigenvalue magnitude is always shared by two
    /// eigenvectors; tied eigenvectors are averaged with their signs.
    pub fn penalty(a: &DMatrix<f64>, abar: &DMatrix<f64>, mu: f64, norm: PenaltyNorm) -> Result<PenaltyEval> {
        if a.shape() != abar.shape() {
            return Err(GeoErmError::Dimension(format!(
                "penalty arguments {}×{} and {}×{} differ",
                a.nrows(),
                a.ncols(),
                abar.nrows(),
                abar.ncols()
            )));
        }
        PENALTY_EVALS.with(|c| c.set(c.get() + 1));
        match norm {
            PenaltyNorm::Spectral => spectral(a, abar, mu),
            PenaltyNorm::Frobenius => frobenius(a, abar, mu),
        }
    }

    fn smooth(norm: f64, mu: f64) -> (f64, f64) {
        if mu == 0.0 {
            return (norm, 1.0);
        }
        let root = (norm * norm + mu * mu).sqrt();
        // (√(s² + μ²) − μ, d/ds), written to avoid cancellation for small s
        (norm * norm / (root + mu), norm / root)
    }

    /// Thin QR [A Ā] = Q·R and the symmetric core C with D = Q·C·Qᵀ.
    fn core(a: &DMatrix<f64>, abar: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (p, r) = a.shape();
        let mut stacked = DMatrix::zeros(p, 2 * r);
        stacked.columns_mut(0, r).copy_from(a);
        stacked.columns_mut(r, r).copy_from(abar);
        let qr = stacked.qr();
        let q = qr.q();
        let rr = qr.r();
        let ra = rr.columns(0, r);
        let rb = rr.columns(r, r);
        let core = ra * ra.transpose() - rb * rb.transpose();
        Ok((q, crate::manifold::sym(&core)?.into_matrix()))
    }

    fn spectral(a: &DMatrix<f64>, abar: &DMatrix<f64>, mu: f64) -> Result<PenaltyEval> {
        let (q, core) = core(a, abar)?;
        let eig = SymmetricEigen::try_new(core, f64::EPSILON, EIGEN_MAX_ITER).ok_or(GeoErmError::Convergence {
            what: "penalty eigendecomposition",
            iterations: EIGEN_MAX_ITER,
        })?;
        let norm = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
        let (value, slope) = smooth(norm, mu);
        if norm < ZERO_NORM {
            return Ok(PenaltyEval {
                norm,
                value,
                direction: Direction::Zero,
            });
        }
        let top: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i].abs() >= norm - TIE_TOL)
            .collect();
        let weight = slope / top.len() as f64;
        let terms = top
            .into_iter()
            .map(|i| {
                let v = &q * eig.eigenvectors.column(i);
                (weight * eig.eigenvalues[i].signum(), v)
            })
            .collect();
        Ok(PenaltyEval {
            norm,
            value,
            direction: Direction::Spectral(terms),
        })
    }

    fn frobenius(a: &DMatrix<f64>, abar: &DMatrix<f64>, mu: f64) -> Result<PenaltyEval> {
        // Q has orthonormal columns, so ‖D‖_F = ‖C‖_F; expanding ‖D‖_F² in
        // traces instead cancels to ~1e-8 when the spans coincide.
        let (_, core) = core(a, abar)?;
        let norm = core.norm();
        let sq = norm * norm;
        let (value, _) = smooth(norm, mu);
        let root = (sq + mu * mu).sqrt();
        let direction = if root < ZERO_NORM {
            Direction::Zero
        } else {
            Direction::Frobenius(1.0 / root)
        };
        Ok(PenaltyEval { norm, value, direction })
    }

    pub fn penalty_weight(task: &TaskData, hp: &Hyperparams) -> f64 {
        hp.lambda / (task.n() as f64).sqrt()
    }

    /// f_t(Aθ) + (λ/√n)·penalty(A, Ā); the penalty is skipped when λ = 0.
    pub fn task_objective(
        task: &TaskData,
        a: &DMatrix<f64>,
        theta: &DVector<f64>,
        abar: &DMatrix<f64>,
        hp: &Hyperparams,
    ) -> Result<f64> {
        let beta = beta(a, theta)?;
        let mut total = task_loss(task, &beta)?;
        if hp.lambda != 0.0 {
            total += penalty_weight(task, hp) * penalty(a, abar, hp.penalty_smoothing, hp.penalty_norm)?.value;
        }
        Ok(total)
    }

    pub fn beta(a: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if a.ncols() != theta.len() {
            return Err(GeoErmError::Dimension(format!(
                "θ has length {}, representation has {} columns",
                theta.len(),
                a.ncols()
            )));
        }
        Ok(a * theta)
    }

    pub fn grad_theta(task: &TaskData, a: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let g = loss_gradient(task, &beta(a, theta)?)?;
        Ok(a.tr_mul(&g))
    }

    pub fn grad_a(
        task: &TaskData,
        a: &DMatrix<f64>,
        theta: &DVector<f64>,
        abar: &DMatrix<f64>,
        hp: &Hyperparams,
    ) -> Result<DMatrix<f64>> {
        let g = loss_gradient(task, &beta(a, theta)?)?;
        let mut out = &g * theta.transpose();
        if hp.lambda != 0.0 {
            let eval = penalty(a, abar, hp.penalty_smoothing, hp.penalty_norm)?;
            out += eval.apply(a, abar, a) * (2.0 * penalty_weight(task, hp));
        }
        Ok(out)
    }

    pub fn grad_abar(data: &[TaskData], a: &[DMatrix<f64>], abar: &DMatrix<f64>, hp: &Hyperparams) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(abar.nrows(), abar.ncols());
        if hp.lambda == 0.0 {
            return Ok(out);
        }
        for (task, a) in data.iter().zip(a) {
            let eval = penalty(a, abar, hp.penalty_smoothing, hp.penalty_norm)?;
            out -= eval.apply(a, abar, abar) * (2.0 * penalty_weight(task, hp));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{gaussian_matrix, random_stiefel};
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn regression_task(n: usize, p: usize, rng: &mut ChaCha8Rng) -> TaskData {
        let x = gaussian_matrix(n, p, rng);
        let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        TaskData::new(x, y, LossKind::Regression).unwrap()
    }

    fn classification_task(n: usize, p: usize, rng: &mut ChaCha8Rng) -> TaskData {
        let x = gaussian_matrix(n, p, rng);
        let y = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        TaskData::new(x, y, LossKind::Classification).unwrap()
    }

    #[test]
    fn task_data_validation() {
        assert!(TaskData::new(DMatrix::zeros(3, 2), DVector::zeros(2), LossKind::Regression).is_err());
        let err = TaskData::new(DMatrix::zeros(2, 2), dvector![0.0, 0.5], LossKind::Classification).unwrap_err();
        assert!(matches!(err, GeoErmError::InvalidLabel { row: 1, .. }));
    }

    #[test]
    fn beta_of_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_stiefel(6, 3, &mut rng).unwrap();
        assert_eq!(beta_of(&a, &DVector::zeros(3)).unwrap(), DVector::zeros(6));

        let canon = StiefelPoint::canonical(5, 2).unwrap();
        assert_eq!(beta_of(&canon, &dvector![1.5, -2.0]).unwrap(), dvector![1.5, -2.0, 0.0, 0.0, 0.0]);

        let theta = dvector![0.3, -1.2, 2.0];
        assert!((beta_of(&a, &theta).unwrap().norm() - theta.norm()).abs() <= 1e-10);
        assert!(beta_of(&a, &dvector![1.0]).is_err());
    }

    #[test]
    fn linear_loss_examples() {
        let task = TaskData::new(DMatrix::identity(2, 2), dvector![1.0, 0.0], LossKind::Regression).unwrap();
        assert_eq!(linear_loss(&task, &dvector![0.0, 0.0]).unwrap(), 0.25);
        assert_eq!(linear_loss(&task, &dvector![1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(logistic_loss(&task, &dvector![0.0, 0.0]), Err(GeoErmError::KindMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = regression_task(17, 4, &mut rng);
        let beta = dvector![0.5, -1.0, 2.0, 0.1];
        let naive: f64 = (0..17)
            .map(|i| {
                let pred: f64 = (0..4).map(|j| task.x()[(i, j)] * beta[j]).sum();
                (task.y()[i] - pred).powi(2)
            })
            .sum::<f64>()
            / 34.0;
        assert!((linear_loss(&task, &beta).unwrap() - naive).abs() <= 1e-12);
    }

    #[test]
    fn logistic_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let task = classification_task(20, 3, &mut rng);
        let l0 = logistic_loss(&task, &DVector::zeros(3)).unwrap();
        assert!((l0 - std::f64::consts::LN_2).abs() <= 1e-15);

        let beta = dvector![0.4, -0.7, 1.1];
        let naive: f64 = (0..20)
            .map(|i| {
                let z: f64 = (0..3).map(|j| task.x()[(i, j)] * beta[j]).sum();
                -task.y()[i] * z + (1.0 + z.exp()).ln()
            })
            .sum::<f64>()
            / 20.0;
        assert!((logistic_loss(&task, &beta).unwrap() - naive).abs() <= 1e-12);

        // saturated logits: x·β = 40 with y = 1
        let sat = TaskData::new(DMatrix::from_element(4, 1, 1.0), DVector::from_element(4, 1.0), LossKind::Classification)
            .unwrap();
        let l = logistic_loss(&sat, &dvector![40.0]).unwrap();
        assert!(l >= 0.0 && l <= 1e-15);
        let huge = logistic_loss(&sat, &dvector![-1e4]).unwrap();
        assert!(huge.is_finite() && (huge - 1e4).abs() < 1e-6);
    }

    #[test]
    fn penalty_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_stiefel(7, 2, &mut rng).unwrap();
        assert!(penalty(&a, &a, 0.0).unwrap().abs() <= 1e-12);
        assert!(penalty(&a, &a, 1e-3).unwrap().abs() <= 1e-12);

        let e1 = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let e2 = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert!((penalty(&e1, &e2, 0.0).unwrap() - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn penalty_matches_full_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_stiefel(12, 3, &mut rng).unwrap();
            let b = random_stiefel(12, 3, &mut rng).unwrap();
            let d = a.matrix() * a.matrix().transpose() - b.matrix() * b.matrix().transpose();
            let sigma = d.singular_values().max();
            assert!((penalty(&a, &b, 0.0).unwrap() - sigma).abs() <= 1e-8);
            let fro = penalty_with_norm(&a, &b, 0.0, PenaltyNorm::Frobenius).unwrap();
            assert!((fro - d.norm()).abs() <= 1e-10);
        }
    }

    #[test]
    fn penalty_symmetry_and_projector_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_stiefel(10, 3, &mut rng).unwrap();
        let b = random_stiefel(10, 3, &mut rng).unwrap();
        let q = random_stiefel(3, 3, &mut rng).unwrap();
        let aq = StiefelPoint::new(a.matrix() * q.matrix()).unwrap();
        for mu in [0.0, 1e-3] {
            let ab = penalty(&a, &b, mu).unwrap();
            assert!((ab - penalty(&b, &a, mu).unwrap()).abs() <= 1e-14);
            assert!((ab - penalty(&aq, &b, mu).unwrap()).abs() <= 1e-10);
        }
    }

    #[test]
    fn grad_theta_zero_residual_and_balanced_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_stiefel(4, 2, &mut rng).unwrap();
        let theta = dvector![1.0, -0.5];
        let x = gaussian_matrix(10, 4, &mut rng);
        let y = &x * (a.matrix() * &theta);
        let task = TaskData::new(x, y, LossKind::Regression).unwrap();
        assert!(grad_theta(&task, &a, &theta).unwrap().norm() <= 1e-12);

        let task = classification_task(10, 4, &mut rng);
        let half = DVector::from_element(10, 0.5);
        let expected = a.matrix().transpose() * task.x().transpose() * (half - task.y()) / 10.0;
        let got = grad_theta(&task, &a, &DVector::zeros(2)).unwrap();
        assert!((got - expected).norm() <= 1e-14);
    }

    #[test]
    fn grad_a_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_stiefel(5, 2, &mut rng).unwrap();
        let theta = dvector![0.7, 0.2];
        let x = gaussian_matrix(8, 5, &mut rng);
        let y = &x * (a.matrix() * &theta);
        let task = TaskData::new(x, y, LossKind::Regression).unwrap();
        let hp0 = Hyperparams::with_weights(0.0, 0.0);
        let other = random_stiefel(5, 2, &mut rng).unwrap();
        assert!(grad_a_euclid(&task, &a, &theta, &other, &hp0).unwrap().norm() <= 1e-12);

        let hp = Hyperparams::with_weights(3.0, 0.0);
        assert!(grad_a_euclid(&task, &a, &theta, &a, &hp).unwrap().norm() <= 1e-12);

        let state = ModelState::new(vec![a.clone(), a.clone()], vec![theta.clone(), theta.clone()], a.clone()).unwrap();
        assert_eq!(grad_abar_euclid(&state, &[task.clone(), task], &hp).unwrap(), DMatrix::zeros(5, 2));
    }

    #[test]
    fn single_task_center_gradient_mirrors_representation_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_stiefel(6, 2, &mut rng).unwrap();
        let abar = random_stiefel(6, 2, &mut rng).unwrap();
        let task = regression_task(9, 6, &mut rng);
        let hp = Hyperparams::with_weights(2.0, 0.0);
        let eval = ambient::penalty(a.matrix(), abar.matrix(), hp.penalty_smoothing, hp.penalty_norm).unwrap();
        let w = 2.0 * ambient::penalty_weight(&task, &hp);
        let state = ModelState::new(vec![a.clone()], vec![dvector![0.0, 0.0]], abar.clone()).unwrap();
        let g_bar = grad_abar_euclid(&state, std::slice::from_ref(&task), &hp).unwrap();
        let expected = -eval.apply(a.matrix(), abar.matrix(), abar.matrix()) * w;
        assert!((g_bar - expected).norm() <= 1e-14);
    }

    #[test]
    fn step1_objective_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<TaskData> = (0..3).map(|_| regression_task(5, 4, &mut rng)).collect();
        let a: Vec<StiefelPoint> = (0..3).map(|_| random_stiefel(4, 2, &mut rng).unwrap()).collect();
        let theta: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let abar = random_stiefel(4, 2, &mut rng).unwrap();
        let state = ModelState::new(a.clone(), theta.clone(), abar.clone()).unwrap();
        let hp = Hyperparams::with_weights(1.7, 0.0);
        let mut expected = 0.0;
        for t in 0..3 {
            expected += linear_loss(&data[t], &beta_of(&a[t], &theta[t]).unwrap()).unwrap();
            expected += 1.7 / 5f64.sqrt() * penalty(&a[t], &abar, 1e-3).unwrap();
        }
        assert!((step1_objective(&state, &data, &hp).unwrap() - expected).abs() <= 1e-12);

        let single = ModelState::new(vec![abar.clone()], vec![theta[0].clone()], abar.clone()).unwrap();
        let f = linear_loss(&data[0], &beta_of(&abar, &theta[0]).unwrap()).unwrap();
        assert!((step1_objective(&single, &data[..1], &hp).unwrap() - f).abs() <= 1e-12);
    }

    #[test]
    fn penalty_skipped_when_lambda_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let task = regression_task(5, 4, &mut rng);
        let a = random_stiefel(4, 2, &mut rng).unwrap();
        let b = random_stiefel(4, 2, &mut rng).unwrap();
        let before = penalty_evaluations();
        let hp = Hyperparams::with_weights(0.0, 0.0);
        grad_a_euclid(&task, &a, &dvector![1.0, 1.0], &b, &hp).unwrap();
        ambient::task_objective(&task, a.matrix(), &dvector![1.0, 1.0], b.matrix(), &hp).unwrap();
        assert_eq!(penalty_evaluations(), before);
    }
}
