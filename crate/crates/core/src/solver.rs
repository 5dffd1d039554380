//! The two-step GeoERM fit.
//!
//! Step 1 jointly updates the per-task representations A^(t), coefficients
//! θ^(t) and the center Ā. Each iteration computes all Euclidean gradients
//! at the current iterate, projects the A- and Ā-gradients onto their tangent
//! spaces, turns them into update directions (Adam or plain gradient) and
//! moves along the manifold with the polar retraction.
//!
//! Step 2 refines each task separately:
//!
//! ```text
//! β̂ = argmin_β f_t(β) + (γ/√n)·‖β − Â θ̂‖₂
//! ```
//!
//! solved by proximal gradient with the block soft-threshold toward the anchor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GeoErmError, Result};
use crate::manifold::{is_tangent, nearest_orthonormal, polar_retract, project_tangent, random_stiefel, StiefelPoint};
use crate::objective::{
    ambient, lipschitz_bound, loss_and_gradient, loss_gradient, Hyperparams, ModelState, TaskData, UpdateRule,
};

const STEP2_TOL: f64 = 1e-8;
const STEP2_MAX_ITER: usize = 5000;

/// Bias-corrected Adam moments for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Advances the moments with `grad` and returns m̂/(√v̂ + eps).
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if self.t == 0 {
            self.m = vec![0.0; grad.len()];
            self.v = vec![0.0; grad.len()];
        } else if grad.len() != self.m.len() {
            return Err(GeoErmError::State(format!(
                "gradient length changed from {} to {}",
                self.m.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            out.push((*m / c1) / ((*v / c2).sqrt() + self.eps));
        }
        Ok(out)
    }

    pub fn step_matrix(&mut self, grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let dir = self.step(grad.as_slice())?;
        Ok(DMatrix::from_vec(grad.nrows(), grad.ncols(), dir))
    }

    pub fn step_vector(&mut self, grad: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.step(grad.as_slice())?))
    }
}

/// Adam direction for `grad`; the step size is applied by the caller.
pub fn adam_step(state: &mut AdamState, grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    state.step_matrix(grad)
}

/// How representation matrices are moved back onto the manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifoldStep {
    /// Tangent projection followed by the polar retraction.
    Riemannian,
    /// Ambient step followed by the SVD projection onto St(p, r).
    NaiveOrthogonalization,
}

/// Per-iteration diagnostics handed to a [`step1_observed`] observer.
#[derive(Debug)]
pub struct IterationReport<'a> {
    pub iteration: usize,
    pub state: &'a ModelState,
    /// max over A^(t) and Ā of ‖AᵀA − I‖_F after the update.
    pub max_orthonormality_residual: f64,
    /// max over blocks of ‖AᵀH + HᵀA‖_F for the directions H that were retracted.
    pub max_tangency_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step1Output {
    pub state: ModelState,
    /// Exact (μ = 0) objective at the initial point.
    pub initial_objective: f64,
    /// Exact objective after each iteration.
    pub objective_history: Vec<f64>,
    /// Σ_t ‖Riemannian gradient of A^(t)‖_F at the start of each iteration.
    pub grad_norm_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Final parameters, with `beta` populated.
    pub state: ModelState,
    pub initial_objective: f64,
    pub objective_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    /// Whether each task's Step 2 refinement met its tolerance.
    pub step2_converged: Vec<bool>,
}

impl FitResult {
    pub fn betas(&self) -> &[DVector<f64>] {
        self.state.beta.as_deref().unwrap_or(&[])
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&self.initial_objective)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Random start: A^(t), Ā via Gaussian QR, θ^(t) ~ N(0, 0.01·I).
pub fn initialize<R: Rng + ?Sized>(task_count: usize, p: usize, r: usize, rng: &mut R) -> Result<ModelState> {
    let a = (0..task_count)
        .map(|_| random_stiefel(p, r, rng))
        .collect::<Result<Vec<_>>>()?;
    let abar = random_stiefel(p, r, rng)?;
    let theta = (0..task_count)
        .map(|_| DVector::from_fn(r, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    ModelState::new(a, theta, abar)
}

pub(crate) fn validate_inputs(data: &[TaskData], r: usize, hp: &Hyperparams) -> Result<usize> {
    hp.validate()?;
    let first = data
        .first()
        .ok_or_else(|| GeoErmError::Config("at least one task is required".into()))?;
    let p = first.p();
    if let Some((t, task)) = data.iter().enumerate().find(|(_, d)| d.p() != p) {
        return Err(GeoErmError::Dimension(format!(
            "task {t} has {} features, task 0 has {p}",
            task.p()
        )));
    }
    if r == 0 || r > p {
        return Err(GeoErmError::Config(format!("rank r = {r} must satisfy 1 ≤ r ≤ p = {p}")));
    }
    Ok(p)
}

/// Runs Step 1 then Step 2 for every task.
pub fn geoerm_fit<R: Rng + ?Sized>(data: &[TaskData], r: usize, hp: &Hyperparams, rng: &mut R) -> Result<FitResult> {
    let step1 = step1(data, r, hp, rng)?;
    finish_with_step2(data, step1, hp.gamma)
}

pub(crate) fn finish_with_step2(data: &[TaskData], step1: Step1Output, gamma: f64) -> Result<FitResult> {
    let Step1Output {
        mut state,
        initial_objective,
        objective_history,
        grad_norm_history,
    } = step1;
    let anchors = state.anchors();
    let mut betas = Vec::with_capacity(data.len());
    let mut converged = Vec::with_capacity(data.len());
    for (task, anchor) in data.iter().zip(&anchors) {
        let refined = step2_refine(task, anchor, gamma)?;
        betas.push(refined.beta);
        converged.push(refined.converged);
    }
    state.beta = Some(betas);
    Ok(FitResult {
        state,
        initial_objective,
        objective_history,
        grad_norm_history,
        step2_converged: converged,
    })
}

/// Step 1 of the fit: manifold-constrained updates of all A^(t), θ^(t) and Ā.
pub fn step1<R: Rng + ?Sized>(data: &[TaskData], r: usize, hp: &Hyperparams, rng: &mut R) -> Result<Step1Output> {
    step1_observed(data, r, hp, rng, ManifoldStep::Riemannian, &mut |_| {})
}

/// Step 1 with a choice of manifold update and a per-iteration observer.
pub fn step1_observed<R: Rng + ?Sized>(
    data: &[TaskData],
    r: usize,
    hp: &Hyperparams,
    rng: &mut R,
    mode: ManifoldStep,
    observer: &mut dyn FnMut(&IterationReport<'_>),
) -> Result<Step1Output> {
    let p = validate_inputs(data, r, hp)?;
    let mut state = initialize(data.len(), p, r, rng)?;
    let task_count = data.len();

    let mut adam_a = vec![AdamState::new(); task_count];
    let mut adam_theta = vec![AdamState::new(); task_count];
    let mut adam_abar = AdamState::new();

    let mut initial_objective = f64::NAN;
    let mut objective_history = Vec::with_capacity(hp.iterations);
    let mut grad_norm_history = Vec::with_capacity(hp.iterations);

    for iteration in 1..=hp.iterations {
        let grads = gradients(data, &state, hp, iteration)?;
        if iteration == 1 {
            initial_objective = grads.objective;
        } else {
            objective_history.push(grads.objective);
        }

        let mut grad_norm = 0.0;
        let mut max_tangency: f64 = 0.0;
        let mut next_a = Vec::with_capacity(task_count);
        for t in 0..task_count {
            let (a, rg_norm, tangency) = move_on_manifold(
                &state.a[t],
                &grads.a[t],
                &mut adam_a[t],
                hp,
                mode,
            )?;
            grad_norm += rg_norm;
            max_tangency = max_tangency.max(tangency);
            next_a.push(a);
        }
        for t in 0..task_count {
            let dir = match hp.theta_optimizer {
                UpdateRule::Adam => adam_theta[t].step_vector(&grads.theta[t])?,
                UpdateRule::Gradient => grads.theta[t].clone(),
            };
            state.theta[t] -= dir * hp.alpha;
        }
        let (abar, _, tangency) = move_on_manifold(&state.abar, &grads.abar, &mut adam_abar, hp, mode)?;
        max_tangency = max_tangency.max(tangency);
        state.a = next_a;
        state.abar = abar;
        grad_norm_history.push(grad_norm);

        let max_residual = state
            .a
            .iter()
            .chain(std::iter::once(&state.abar))
            .map(StiefelPoint::orthonormality_residual)
            .fold(0.0, f64::max);
        observer(&IterationReport {
            iteration,
            state: &state,
            max_orthonormality_residual: max_residual,
            max_tangency_residual: max_tangency,
        });
    }
    objective_history.push(exact_objective(data, &state, hp, hp.iterations)?);

    Ok(Step1Output {
        state,
        initial_objective,
        objective_history,
        grad_norm_history,
    })
}

struct Gradients {
    objective: f64,
    a: Vec<DMatrix<f64>>,
    theta: Vec<DVector<f64>>,
    abar: DMatrix<f64>,
}

/// All Euclidean gradients at `state`, plus the exact objective there.
fn gradients(data: &[TaskData], state: &ModelState, hp: &Hyperparams, iteration: usize) -> Result<Gradients> {
    let (p, r) = (state.abar.p(), state.abar.r());
    let mut out = Gradients {
        objective: 0.0,
        a: Vec::with_capacity(data.len()),
        theta: Vec::with_capacity(data.len()),
        abar: DMatrix::zeros(p, r),
    };
    for (t, task) in data.iter().enumerate() {
        let a = state.a[t].matrix();
        let theta = &state.theta[t];
        let (loss, g_beta) = loss_and_gradient(task, &(a * theta))?;
        let mut grad_a = &g_beta * theta.transpose();
        out.objective += loss;
        if hp.lambda != 0.0 {
            let abar = state.abar.matrix();
            let eval = ambient::penalty(a, abar, hp.penalty_smoothing, hp.penalty_norm)?;
            let w = ambient::penalty_weight(task, hp);
            out.objective += w * eval.norm;
            if !eval.is_zero() {
                grad_a += eval.apply(a, abar, a) * (2.0 * w);
                out.abar -= eval.apply(a, abar, abar) * (2.0 * w);
            }
        }
        let grad_theta = a.tr_mul(&g_beta);
        if !grad_a.iter().chain(grad_theta.iter()).all(|v| v.is_finite()) {
            return Err(GeoErmError::Divergence {
                iteration,
                what: "gradient",
            });
        }
        out.a.push(grad_a);
        out.theta.push(grad_theta);
    }
    if !out.objective.is_finite() || !out.abar.iter().all(|v| v.is_finite()) {
        return Err(GeoErmError::Divergence {
            iteration,
            what: "objective or center gradient",
        });
    }
    Ok(out)
}

fn exact_objective(data: &[TaskData], state: &ModelState, hp: &Hyperparams, iteration: usize) -> Result<f64> {
    let exact = Hyperparams {
        penalty_smoothing: 0.0,
        ..hp.clone()
    };
    let mut total = 0.0;
    for (t, task) in data.iter().enumerate() {
        total += ambient::task_objective(task, state.a[t].matrix(), &state.theta[t], state.abar.matrix(), &exact)?;
    }
    if !total.is_finite() {
        return Err(GeoErmError::Divergence {
            iteration,
            what: "objective",
        });
    }
    Ok(total)
}

/// One update of a manifold block. Returns the new point, the Riemannian
/// gradient norm and the tangency residual of the retracted direction.
fn move_on_manifold(
    point: &StiefelPoint,
    euclid: &DMatrix<f64>,
    adam: &mut AdamState,
    hp: &Hyperparams,
    mode: ManifoldStep,
) -> Result<(StiefelPoint, f64, f64)> {
    let riemannian = project_tangent(point, euclid)?;
    let rg_norm = riemannian.matrix().norm();
    match mode {
        ManifoldStep::Riemannian => {
            let direction = match hp.manifold_optimizer {
                UpdateRule::Gradient => riemannian,
                UpdateRule::Adam => {
                    let raw = adam.step_matrix(riemannian.matrix())?;
                    if !hp.adam_reproject {
                        // Adam's entrywise scaling leaves the tangent space; use the
                        // general polar factor of A + H instead of the Gram form.
                        let next = nearest_orthonormal(&(point.matrix() - raw * hp.alpha))?;
                        return Ok((next, rg_norm, f64::NAN));
                    }
                    project_tangent(point, &raw)?
                }
            };
            let step = direction.scale(-hp.alpha);
            let tangency = tangency_residual(point, step.matrix());
            debug_assert!(is_tangent(point, step.matrix(), 1e-6));
            Ok((polar_retract(point, &step)?, rg_norm, tangency))
        }
        ManifoldStep::NaiveOrthogonalization => {
            let direction = match hp.manifold_optimizer {
                UpdateRule::Gradient => euclid.clone(),
                UpdateRule::Adam => adam.step_matrix(euclid)?,
            };
            let next = nearest_orthonormal(&(point.matrix() - direction * hp.alpha))?;
            Ok((next, rg_norm, f64::NAN))
        }
    }
}

fn tangency_residual(a: &StiefelPoint, h: &DMatrix<f64>) -> f64 {
    let ath = a.matrix().tr_mul(h);
    (&ath + ath.transpose()).norm()
}

/// prox of τ‖· − center‖₂ at v: block soft-threshold of v − center.
pub fn prox_l2(v: &DVector<f64>, center: &DVector<f64>, tau: f64) -> DVector<f64> {
    let d = v - center;
    let norm = d.norm();
    if norm <= tau {
        return center.clone();
    }
    center + d * (1.0 - tau / norm)
}

/// Step 2: argmin_β f(β) + (γ/√n)·‖β − anchor‖₂ by proximal gradient.
///
/// Stops when ‖β_{k+1} − β_k‖₂ ≤ 1e-8 or after 5000 iterations; in the latter
/// case the last iterate is returned with `converged = false` (with step 1/L
/// the objective is non-increasing, so the last iterate is the best one).
pub fn step2_refine(task: &TaskData, anchor: &DVector<f64>, gamma: f64) -> Result<Refinement> {
    if anchor.len() != task.p() {
        return Err(GeoErmError::Dimension(format!(
            "anchor has length {}, task has {} features",
            anchor.len(),
            task.p()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(GeoErmError::Config("gamma must be ≥ 0".into()));
    }
    let tau = gamma / (task.n() as f64).sqrt();
    let step = 1.0 / lipschitz_bound(task);
    let mut beta = anchor.clone();
    for k in 1..=STEP2_MAX_ITER {
        let g = loss_gradient(task, &beta)?;
        let next = prox_l2(&(&beta - g * step), anchor, step * tau);
        let moved = (&next - &beta).norm();
        beta = next;
        if !moved.is_finite() {
            return Err(GeoErmError::Divergence {
                iteration: k,
                what: "step 2 iterate",
            });
        }
        if moved <= STEP2_TOL {
            return Ok(Refinement {
                beta,
                converged: true,
                iterations: k,
            });
        }
    }
    Ok(Refinement {
        beta,
        converged: false,
        iterations: STEP2_MAX_ITER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::gaussian_matrix;
    use crate::objective::LossKind;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut adam = AdamState::new();
        let d = adam.step(&[2.0]).unwrap();
        assert!((d[0] - 2.0 / (2.0 + 1e-8)).abs() <= 1e-15);

        let mut adam = AdamState::new();
        for _ in 0..50 {
            assert_eq!(adam.step(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        }
        assert!(adam.step(&[0.0]).is_err());
        assert!(adam.second_moment().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn prox_examples() {
        let out = prox_l2(&dvector![3.0, 4.0], &dvector![0.0, 0.0], 1.0);
        assert!((out - dvector![2.4, 3.2]).norm() <= 1e-15);
        let c = dvector![1.0, 1.0];
        assert_eq!(prox_l2(&dvector![1.5, 1.0], &c, 0.6), c);
        assert_eq!(prox_l2(&dvector![1.5, 1.0], &c, 0.0), dvector![1.5, 1.0]);
    }

    #[test]
    fn step2_large_gamma_returns_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_matrix(30, 4, &mut rng);
        let y = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
        let task = TaskData::new(x, y, LossKind::Regression).unwrap();
        let anchor = dvector![0.5, -0.2, 1.0, 0.0];
        let out = step2_refine(&task, &anchor, 1e6).unwrap();
        assert!(out.converged);
        assert!((out.beta - anchor).norm() <= 1e-6);
    }

    #[test]
    fn step2_one_dimensional_toy() {
        let task = TaskData::new(DMatrix::from_element(1, 1, 1.0), dvector![2.0], LossKind::Regression).unwrap();
        let out = step2_refine(&task, &dvector![0.0], 1.0).unwrap();
        assert!(out.converged);
        assert!((out.beta[0] - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn fit_rejects_bad_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = TaskData::new(gaussian_matrix(5, 3, &mut rng), DVector::zeros(5), LossKind::Regression).unwrap();
        let hp = Hyperparams {
            iterations: 0,
            ..Hyperparams::default()
        };
        assert!(matches!(geoerm_fit(&[task.clone()], 2, &hp, &mut rng), Err(GeoErmError::Config(_))));
        assert!(matches!(
            geoerm_fit(&[], 2, &Hyperparams::default(), &mut rng),
            Err(GeoErmError::Config(_))
        ));
        assert!(geoerm_fit(&[task], 4, &Hyperparams::default(), &mut rng).is_err());
    }

    #[test]
    fn zero_step_freezes_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<TaskData> = (0..3)
            .map(|_| {
                let x = gaussian_matrix(12, 5, &mut rng);
                let y = DVector::from_fn(12, |_, _| rng.sample::<f64, _>(StandardNormal));
                TaskData::new(x, y, LossKind::Regression).unwrap()
            })
            .collect();
        let hp = Hyperparams {
            alpha: 0.0,
            iterations: 25,
            ..Hyperparams::with_weights(1.0, 0.0)
        };
        let init = initialize(3, 5, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for mode in [ManifoldStep::Riemannian, ManifoldStep::NaiveOrthogonalization] {
            let out = step1_observed(&data, 2, &hp, &mut ChaCha8Rng::seed_from_u64(9), mode, &mut |_| {}).unwrap();
            for t in 0..3 {
                assert!((out.state.a[t].matrix() - init.a[t].matrix()).norm() <= 1e-12);
                assert_eq!(out.state.theta[t], init.theta[t]);
            }
            assert!((out.state.abar.matrix() - init.abar.matrix()).norm() <= 1e-12);
        }
    }
}
