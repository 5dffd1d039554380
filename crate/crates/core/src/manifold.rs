//! Geometry of the Stiefel manifold St(p, r) = {A ∈ ℝ^{p×r} : AᵀA = I_r}.
//!
//! Tangent space at A: {H : AᵀH + HᵀA = 0}. Normal space: {A·S : S symmetric}.
//! The orthogonal projection onto the tangent space is
//!
//! ```text
//! P_A(G) = G − A·sym(AᵀG),    sym(X) = (X + Xᵀ)/2
//! ```
//!
//! and the polar retraction is
//!
//! ```text
//! R_A(H) = (A + H)(I_r + HᵀH)^{-1/2}
//! ```
//!
//! which coincides with the orthonormal polar factor U·Wᵀ of the thin SVD
//! A + H = U·Σ·Wᵀ. Both routes are provided: [`polar_retract`] is the one the
//! optimizer uses, [`polar_retract_svd`] is kept as an independent check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GeoErmError, Result};

/// Manifold invariants (‖AᵀA − I‖_F, skew residuals) are held to this.
pub const MANIFOLD_TOL: f64 = 1e-8;

/// Singular values below this make a polar factor ill-defined.
pub const RANK_TOL: f64 = 1e-12;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Frobenius norm of AᵀA − I.
pub fn orthonormality_residual(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    (gram - DMatrix::identity(m.ncols(), m.ncols())).norm()
}

/// A p×r matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_shape(matrix.nrows(), matrix.ncols())?;
        let residual = orthonormality_residual(&matrix);
        if !(residual <= MANIFOLD_TOL) {
            return Err(GeoErmError::NotOrthonormal { residual });
        }
        Ok(StiefelPoint { matrix })
    }

    /// The canonical embedding [I_r; 0].
    pub fn canonical(p: usize, r: usize) -> Result<Self> {
        check_shape(p, r)?;
        Ok(StiefelPoint {
            matrix: DMatrix::identity(p, r),
        })
    }

    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<f64>) -> Self {
        debug_assert!(
            orthonormality_residual(&matrix) <= 1e-6,
            "not orthonormal: {:e}",
            orthonormality_residual(&matrix)
        );
        StiefelPoint { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn r(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn orthonormality_residual(&self) -> f64 {
        orthonormality_residual(&self.matrix)
    }
}

/// An element of the tangent space at some [`StiefelPoint`].
///
/// The base point is not stored; constructors validate tangency against the
/// base they are given and [`polar_retract`] re-checks it in debug builds.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    matrix: DMatrix<f64>,
}

impl TangentVector {
    pub fn new(base: &StiefelPoint, matrix: DMatrix<f64>, tol: f64) -> Result<Self> {
        check_same_shape(base.matrix(), &matrix)?;
        if !is_tangent(base, &matrix, tol) {
            return Err(GeoErmError::Dimension(format!(
                "matrix is not tangent at the base point (‖AᵀH + HᵀA‖_F = {:e})",
                skew_residual(base, &matrix)
            )));
        }
        Ok(TangentVector { matrix })
    }

    pub fn zero(base: &StiefelPoint) -> Self {
        TangentVector {
            matrix: DMatrix::zeros(base.p(), base.r()),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        TangentVector {
            matrix: &self.matrix * factor,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

/// A square matrix stored as its symmetric part.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix {
    matrix: DMatrix<f64>,
}

impl SymmetricMatrix {
    /// Symmetrizes `matrix`; see [`sym`].
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        sym(&matrix)
    }

    pub fn identity(n: usize) -> Self {
        SymmetricMatrix {
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

/// sym(X) = (X + Xᵀ)/2.
pub fn sym(x: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    if !x.is_square() {
        return Err(GeoErmError::Dimension(format!(
            "sym expects a square matrix, got {}×{}",
            x.nrows(),
            x.ncols()
        )));
    }
    let mut out = x + x.transpose();
    out *= 0.5;
    // force exact symmetry regardless of rounding order
    for j in 0..out.ncols() {
        for i in (j + 1)..out.nrows() {
            out[(j, i)] = out[(i, j)];
        }
    }
    Ok(SymmetricMatrix { matrix: out })
}

/// Orthogonal projection of an ambient p×r matrix onto the tangent space at `a`.
pub fn project_tangent(a: &StiefelPoint, g: &DMatrix<f64>) -> Result<TangentVector> {
    check_same_shape(a.matrix(), g)?;
    let normal = a.matrix() * sym(&(a.matrix().transpose() * g))?.matrix();
    Ok(TangentVector { matrix: g - normal })
}

/// Polar retraction via the r×r Gram matrix I + HᵀH.
pub fn polar_retract(a: &StiefelPoint, h: &TangentVector) -> Result<StiefelPoint> {
    check_same_shape(a.matrix(), h.matrix())?;
    debug_assert!(
        is_tangent(a, h.matrix(), 1e-6 * (1.0 + h.matrix().norm())),
        "retraction direction is not tangent: {:e}",
        skew_residual(a, h.matrix())
    );
    let hm = h.matrix();
    let r = a.r();
    let gram = SymmetricMatrix::new(DMatrix::identity(r, r) + hm.transpose() * hm)?;
    let inv_sqrt = inv_sqrt_spd(&gram)?;
    let out = (a.matrix() + hm) * inv_sqrt.matrix();
    Ok(StiefelPoint::from_matrix_unchecked(out))
}

/// Polar retraction via the thin SVD of A + H: returns U·Wᵀ.
pub fn polar_retract_svd(a: &StiefelPoint, h: &TangentVector) -> Result<StiefelPoint> {
    check_same_shape(a.matrix(), h.matrix())?;
    polar_factor(a.matrix() + h.matrix())?.map_err(|sigma_min| GeoErmError::DegenerateRetraction { sigma_min })
}

/// Frobenius-nearest orthonormal matrix (metric projection onto St(p, r)).
pub fn nearest_orthonormal(m: &DMatrix<f64>) -> Result<StiefelPoint> {
    check_shape(m.nrows(), m.ncols())?;
    polar_factor(m.clone())?.map_err(|sigma_min| GeoErmError::DegenerateProjection { sigma_min })
}

fn polar_factor(m: DMatrix<f64>) -> Result<std::result::Result<StiefelPoint, f64>> {
    let svd = thin_svd(&m)?;
    let sigma_min = svd.singular_values.min();
    if !(sigma_min >= RANK_TOL) {
        return Ok(Err(sigma_min));
    }
    Ok(Ok(StiefelPoint::from_matrix_unchecked(svd.u * svd.v.transpose())))
}

/// Thin SVD M = U·diag(σ)·Vᵀ with σ sorted in decreasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinSvd {
    /// rows × k with k = min(rows, cols); columns for zero singular values are zero.
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// cols × k.
    pub v: DMatrix<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided (Hestenes) Jacobi SVD.
///
/// nalgebra's bidiagonal SVD loses accuracy on square inputs with nearly
/// repeated singular values (reconstruction errors around 1e−2 were observed
/// for 3×3 matrices A(I + Ω), Ω skew), which is exactly the polar-retraction
/// case r = p. Jacobi rotations keep high relative accuracy there.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    if m.nrows() < m.ncols() {
        let t = thin_svd(&m.transpose())?;
        return Ok(ThinSvd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    let (rows, k) = m.shape();
    let mut u = m.clone();
    let mut v = DMatrix::<f64>::identity(k, k);
    let tol = f64::EPSILON * rows as f64;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..k {
            for j in (i + 1)..k {
                let alpha = u.column(i).norm_squared();
                let beta = u.column(j).norm_squared();
                let gamma = u.column(i).dot(&u.column(j));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = (1.0 + t * t).sqrt().recip();
                let s = c * t;
                rotate_columns(&mut u, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GeoErmError::Convergence {
            what: "Jacobi SVD",
            iterations: JACOBI_MAX_SWEEPS,
        });
    }
    let norms: Vec<f64> = (0..k).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut out_u = DMatrix::zeros(rows, k);
    let mut out_v = DMatrix::zeros(k, k);
    let mut sigma = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        if norms[src] > 0.0 {
            out_u.set_column(dst, &(u.column(src) / norms[src]));
        }
        out_v.set_column(dst, &v.column(src));
    }
    Ok(ThinSvd {
        u: out_u,
        singular_values: sigma,
        v: out_v,
    })
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let (x, y) = (m[(row, i)], m[(row, j)]);
        m[(row, i)] = c * x - s * y;
        m[(row, j)] = s * x + c * y;
    }
}

/// M^{-1/2} for a symmetric positive definite M, via its eigendecomposition.
pub fn inv_sqrt_spd(m: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let n = m.matrix().nrows();
    let eig = SymmetricEigen::try_new(m.matrix().clone(), EIGEN_EPS, EIGEN_MAX_ITER).ok_or(
        GeoErmError::Convergence {
            what: "symmetric eigendecomposition",
            iterations: EIGEN_MAX_ITER,
        },
    )?;
    let min_eigenvalue = eig.eigenvalues.min();
    if !(min_eigenvalue > RANK_TOL) {
        return Err(GeoErmError::NotPositiveDefinite { min_eigenvalue });
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(lambda.sqrt().recip());
    }
    let out = scaled * eig.eigenvectors.transpose();
    debug_assert_eq!(out.nrows(), n);
    sym(&out)
}

/// Sign-fixed thin QR factor of a p×r matrix (R has positive diagonal).
///
/// Returns `None` when some |R_ii| falls below `1e-10·max(1, ‖m‖_F)`.
pub fn orthonormalize_qr(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let r_cols = m.ncols();
    if m.nrows() < r_cols {
        return None;
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let floor = 1e-10 * m.norm().max(1.0);
    for j in 0..r_cols {
        let d = r[(j, j)];
        if !(d.abs() > floor) {
            return None;
        }
        if d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Some(q)
}

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-like random point: QR of a standard-Gaussian p×r matrix.
pub fn random_stiefel<R: Rng + ?Sized>(p: usize, r: usize, rng: &mut R) -> Result<StiefelPoint> {
    check_shape(p, r)?;
    loop {
        let g = gaussian_matrix(p, r, rng);
        // rank deficiency has probability zero; redraw if it happens
        if let Some(q) = orthonormalize_qr(&g) {
            return Ok(StiefelPoint::from_matrix_unchecked(q));
        }
    }
}

/// dim St(p, r) = p·r − r(r+1)/2.
pub fn manifold_dim(p: usize, r: usize) -> Result<usize> {
    check_shape(p, r)?;
    Ok(p * r - r * (r + 1) / 2)
}

/// Numerical rank of the projections of all p·r unit matrices onto T_A St(p, r).
pub fn tangent_basis_rank(a: &StiefelPoint) -> Result<usize> {
    let (p, r) = (a.p(), a.r());
    let mut basis = DMatrix::zeros(p * r, p * r);
    for k in 0..p * r {
        let mut e = DMatrix::zeros(p, r);
        e[k] = 1.0;
        basis.set_column(k, &DVector::from_column_slice(project_tangent(a, &e)?.matrix().as_slice()));
    }
    let sv = thin_svd(&basis)?.singular_values;
    Ok(sv.iter().filter(|&&s| s > 1e-9).count())
}

/// True iff ‖AᵀH + HᵀA‖_F ≤ tol.
pub fn is_tangent(a: &StiefelPoint, h: &DMatrix<f64>, tol: f64) -> bool {
    a.matrix().shape() == h.shape() && skew_residual(a, h) <= tol
}

fn skew_residual(a: &StiefelPoint, h: &DMatrix<f64>) -> f64 {
    let ath = a.matrix().transpose() * h;
    (&ath + ath.transpose()).norm()
}

fn check_shape(p: usize, r: usize) -> Result<()> {
    if p == 0 || r == 0 || r > p {
        return Err(GeoErmError::Dimension(format!(
            "Stiefel shape requires 1 ≤ r ≤ p, got p = {p}, r = {r}"
        )));
    }
    Ok(())
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GeoErmError::Dimension(format!(
            "expected {}×{}, got {}×{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}
