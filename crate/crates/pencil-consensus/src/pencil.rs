//! Dense small-matrix kernels: generalized eigenvalues of symmetric matrix
//! pencils, Lyapunov solvers for the synthesis matrices, element-wise
//! magnitude, definiteness classification.
//!
//! Everything here works on matrices of order a few tens at most, so the
//! kernels favor directness over scalability: the threshold pencils reduce
//! to a symmetric eigenproblem through a Cholesky factor of the definite
//! member, the general pencil goes through the standard eigenvalues of
//! `Q2^-1 Q1`, and the Lyapunov equation is solved through its
//! Kronecker-product linear system.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, ComplexField, DMatrix, DVector};

use crate::error::PencilError;
use crate::{lit, Real};

/// Relative tolerance under which the pencil members must be symmetric.
const SYMMETRY_RTOL: f64 = 1e-12;
/// Imaginary parts below this times the spectral scale are roundoff.
const IMAG_RTOL: f64 = 1e-8;
/// Dead-band for eigenvalue sign classification, applied after normalizing
/// by the Frobenius norm (matrices here are O(1)..O(1e3)).
const DEFINITENESS_ATOL: f64 = 1e-10;
/// Iteration budget per matrix dimension for the nonsymmetric eigensolver;
/// repeated eigenvalues can otherwise spin the shifted QR loop forever.
const SCHUR_ITER_PER_DIM: usize = 100;

/// A one-parameter family `Q1 - s Q2` of real symmetric matrices.
#[derive(Debug, Clone)]
pub struct Pencil<T: Real> {
    q1: DMatrix<T>,
    q2: DMatrix<T>,
}

/// Generalized eigenvalues of a pencil, real part only.
///
/// For the symmetric-definite pencils this library builds, all eigenvalues
/// are real; anything with a larger imaginary part is excluded from `values`
/// and reported in `discarded` so the caller can see it was not silently
/// dropped.
#[derive(Debug, Clone)]
pub struct GeneralizedEigs<T: Real> {
    /// Real generalized eigenvalues, ascending.
    pub values: Vec<T>,
    /// (re, im) pairs filtered out as non-real.
    pub discarded: Vec<(T, T)>,
}

/// Sign classification of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefinitenessTag {
    SymmetricPositiveDefinite,
    SymmetricNegativeDefinite,
    SymmetricIndefinite,
}

#[derive(Debug, Clone, Copy)]
pub struct DefinitenessClass<T: Real> {
    pub tag: DefinitenessTag,
    pub min_eig: T,
    pub max_eig: T,
}

impl<T: Real> Pencil<T> {
    /// Builds a pencil, validating squareness, equal dimensions and symmetry
    /// of both members to 1e-12 relative tolerance.
    pub fn new(q1: DMatrix<T>, q2: DMatrix<T>) -> Result<Self, PencilError> {
        if q1.nrows() != q1.ncols() || q2.nrows() != q2.ncols() {
            return Err(PencilError::Dimension(format!(
                "pencil members must be square, got {}x{} and {}x{}",
                q1.nrows(),
                q1.ncols(),
                q2.nrows(),
                q2.ncols()
            )));
        }
        if q1.nrows() != q2.nrows() {
            return Err(PencilError::Dimension(format!(
                "pencil members must have equal order, got {} and {}",
                q1.nrows(),
                q2.nrows()
            )));
        }
        require_symmetric(&q1)?;
        require_symmetric(&q2)?;
        Ok(Self { q1, q2 })
    }

    pub fn order(&self) -> usize {
        self.q1.nrows()
    }

    pub fn q1(&self) -> &DMatrix<T> {
        &self.q1
    }

    pub fn q2(&self) -> &DMatrix<T> {
        &self.q2
    }
}

/// All real generalized eigenvalues of `Q1 - s Q2`, ascending.
///
/// Computed as the standard eigenvalues of `Q2^-1 Q1` after symmetrizing
/// both members; `Q2` must be invertible. Non-real eigenvalues beyond the
/// roundoff band go into the `discarded` diagnostics list.
pub fn generalized_eigenvalues<T: Real>(
    pencil: &Pencil<T>,
) -> Result<GeneralizedEigs<T>, PencilError> {
    let q1 = symmetric_part(&pencil.q1);
    let q2 = symmetric_part(&pencil.q2);
    let m = invert_apply(&q2, &q1)?;
    let eigs = bounded_complex_eigenvalues(&m)?;

    let scale = eigs
        .iter()
        .map(|z| z.modulus())
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    let band = lit::<T>(IMAG_RTOL) * (T::one() + scale);

    let mut values = Vec::with_capacity(eigs.len());
    let mut discarded = Vec::new();
    for z in eigs.iter() {
        if z.im.abs() <= band {
            values.push(z.re);
        } else {
            discarded.push((z.re, z.im));
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    Ok(GeneralizedEigs { values, discarded })
}

/// Real eigenvalues of the pencil `(Q1, Q2)` with `Q2` SPD, through the
/// two-sided triangular reduction `L^-1 Q1 L^-T` with `Q2 = L L^T`. The
/// reduced matrix is symmetric, so the solve always converges and the
/// spectrum is real by construction.
fn spd_reduced_eigenvalues<T: Real>(
    q1: &DMatrix<T>,
    q2: &DMatrix<T>,
) -> Result<DVector<T>, PencilError> {
    let chol = q2
        .clone()
        .cholesky()
        .ok_or(PencilError::NotSpd { min_eig: f64::NAN })?;
    let l = chol.l();
    let y = l
        .solve_lower_triangular(q1)
        .ok_or_else(|| PencilError::Dimension("triangular solve broke down".into()))?;
    let reduced = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| PencilError::Dimension("triangular solve broke down".into()))?;
    Ok(symmetric_part(&reduced).symmetric_eigenvalues())
}

/// Largest generalized eigenvalue of a (symmetric, SPD) pencil.
///
/// For every `s` strictly above the returned threshold, `Q1 - s Q2` is
/// negative definite; this is the workhorse bound behind each synthesized
/// constant.
pub fn pencil_threshold_max<T: Real>(pencil: &Pencil<T>) -> Result<T, PencilError> {
    let class = classify_definiteness(&pencil.q2)?;
    if class.tag != DefinitenessTag::SymmetricPositiveDefinite {
        return Err(PencilError::NotSpd {
            min_eig: class.min_eig.to_f64().unwrap_or(f64::NAN),
        });
    }
    let eigs = spd_reduced_eigenvalues(&pencil.q1, &pencil.q2)?;
    eigs.iter()
        .copied()
        .reduce(|a, b| if b > a { b } else { a })
        .ok_or_else(|| PencilError::Dimension("empty pencil".into()))
}

/// Smallest generalized eigenvalue of an (SND, SND) pencil.
///
/// For every `s` strictly below the returned threshold, `Q1 - s Q2` is
/// negative definite. Negating the denominator turns this into an SPD
/// reduction whose largest eigenvalue flips sign.
pub fn pencil_threshold_min<T: Real>(pencil: &Pencil<T>) -> Result<T, PencilError> {
    for q in [&pencil.q1, &pencil.q2] {
        let class = classify_definiteness(q)?;
        if class.tag != DefinitenessTag::SymmetricNegativeDefinite {
            return Err(PencilError::NotSnd {
                max_eig: class.max_eig.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let eigs = spd_reduced_eigenvalues(&pencil.q1, &(-&pencil.q2))?;
    eigs.iter()
        .copied()
        .reduce(|a, b| if b > a { b } else { a })
        .map(|max| -max)
        .ok_or_else(|| PencilError::Dimension("empty pencil".into()))
}

/// Solves `P a + a^T P = -rhs_scale * I` exactly through the Kronecker
/// linear system and symmetrizes the result. `a` must be Hurwitz.
pub fn solve_lyapunov<T: Real>(
    a: &DMatrix<T>,
    rhs_scale: T,
) -> Result<DMatrix<T>, PencilError> {
    require_hurwitz(a)?;
    let m = a.nrows();
    let eye = DMatrix::<T>::identity(m, m);
    let at = a.transpose();
    // vec(P a) = (a^T (x) I) vec(P), vec(a^T P) = (I (x) a^T) vec(P),
    // column-major vectorization.
    let system = at.kronecker(&eye) + eye.kronecker(&at);
    let rhs = DVector::<T>::from_fn(m * m, |i, _| {
        if i % m == i / m {
            -rhs_scale
        } else {
            T::zero()
        }
    });
    let solved = system
        .lu()
        .solve(&rhs)
        .ok_or(PencilError::Dimension("Lyapunov system is singular".into()))?;
    let p = DMatrix::<T>::from_fn(m, m, |i, j| solved[j * m + i]);
    Ok(symmetric_part(&p))
}

/// Lyapunov solve plus diagonal-pairing scale: returns `P = rho * P0` with
/// `P0 a + a^T P0 = -rhs_scale * I` and `rho = max(1, 1/lambda_min(P0 d + d P0))`,
/// so that both `P a + a^T P <= -rhs_scale I` and `P d + d P >= I` hold.
pub fn solve_lyapunov_pair<T: Real>(
    a: &DMatrix<T>,
    d: &DMatrix<T>,
    rhs_scale: T,
) -> Result<DMatrix<T>, PencilError> {
    if d.nrows() != a.nrows() || d.ncols() != a.ncols() {
        return Err(PencilError::Dimension(format!(
            "scaling matrix is {}x{}, expected {}x{}",
            d.nrows(),
            d.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    let p0 = solve_lyapunov(a, rhs_scale)?;
    let paired = &p0 * d + d * &p0;
    let lam_min = lambda_min_sym(&paired);
    if lam_min <= T::zero() {
        // d is SPD diagonal and P0 is SPD, but their symmetrized product can
        // in principle lose definiteness; the synthesis never hits this.
        return Err(PencilError::NotSpd {
            min_eig: lam_min.to_f64().unwrap_or(f64::NAN),
        });
    }
    let rho = if lam_min < T::one() {
        T::one() / lam_min
    } else {
        T::one()
    };
    Ok(p0 * rho)
}

/// Entrywise absolute value.
pub fn elementwise_abs<T: Real>(q: &DMatrix<T>) -> DMatrix<T> {
    q.map(|x| x.abs())
}

/// Classifies a symmetric matrix by eigenvalue signs with a dead-band of
/// 1e-10 relative to its Frobenius norm.
pub fn classify_definiteness<T: Real>(
    q: &DMatrix<T>,
) -> Result<DefinitenessClass<T>, PencilError> {
    require_symmetric(q)?;
    let eigs = symmetric_part(q).symmetric_eigenvalues();
    let min_eig = eigs.min();
    let max_eig = eigs.max();
    let band = lit::<T>(DEFINITENESS_ATOL) * (T::one() + q.norm());
    let tag = if min_eig > band {
        DefinitenessTag::SymmetricPositiveDefinite
    } else if max_eig < -band {
        DefinitenessTag::SymmetricNegativeDefinite
    } else {
        DefinitenessTag::SymmetricIndefinite
    };
    Ok(DefinitenessClass {
        tag,
        min_eig,
        max_eig,
    })
}

/// `(Q + Q^T) / 2`.
pub fn symmetric_part<T: Real>(q: &DMatrix<T>) -> DMatrix<T> {
    let half = lit::<T>(0.5);
    (q + q.transpose()) * half
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max_sym<T: Real>(q: &DMatrix<T>) -> T {
    symmetric_part(q).symmetric_eigenvalues().max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min_sym<T: Real>(q: &DMatrix<T>) -> T {
    symmetric_part(q).symmetric_eigenvalues().min()
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm<T: Real>(q: &DMatrix<T>) -> T {
    let sv = q.clone().svd(false, false).singular_values;
    sv.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a })
}

/// Eigenvalues of a general real matrix through a Schur iteration with a
/// hard iteration cap instead of nalgebra's unbounded default.
pub fn bounded_complex_eigenvalues<T: Real>(
    a: &DMatrix<T>,
) -> Result<DVector<Complex<T>>, PencilError> {
    let iterations = SCHUR_ITER_PER_DIM * a.nrows().max(1);
    let schur = Schur::try_new(a.clone(), T::default_epsilon(), iterations)
        .ok_or(PencilError::NoConvergence { iterations })?;
    Ok(schur.complex_eigenvalues())
}

/// Max real part of the eigenvalues, the Hurwitz margin.
pub fn max_re_eigenvalue<T: Real>(a: &DMatrix<T>) -> Result<T, PencilError> {
    Ok(bounded_complex_eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(T::from_f64(f64::NEG_INFINITY).unwrap(), |acc, x| {
            if x > acc {
                x
            } else {
                acc
            }
        }))
}

/// Largest eigenvalue magnitude; used by the integrator's stability ceiling.
pub fn max_abs_eigenvalue<T: Real>(a: &DMatrix<T>) -> Result<T, PencilError> {
    Ok(bounded_complex_eigenvalues(a)?
        .iter()
        .map(|z| z.modulus())
        .fold(T::zero(), |acc, x| if x > acc { x } else { acc }))
}

fn require_symmetric<T: Real>(q: &DMatrix<T>) -> Result<(), PencilError> {
    let denom = T::one() + q.norm();
    let asym = (q - q.transpose()).norm() / denom;
    if asym > lit::<T>(SYMMETRY_RTOL) {
        return Err(PencilError::NotSymmetric {
            asym: asym.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

fn require_hurwitz<T: Real>(a: &DMatrix<T>) -> Result<(), PencilError> {
    let max_re = max_re_eigenvalue(a)?;
    if max_re >= lit::<T>(-1e-9) {
        return Err(PencilError::NotHurwitz {
            max_re: max_re.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// `q2^-1 q1` via LU, with an explicit singularity check on the pivots.
fn invert_apply<T: Real>(
    q2: &DMatrix<T>,
    q1: &DMatrix<T>,
) -> Result<DMatrix<T>, PencilError> {
    let tol = lit::<T>(1e-12) * (T::one() + q2.norm());
    let lu = q2.clone().lu();
    let min_pivot = lu
        .u()
        .diagonal()
        .iter()
        .map(|p| p.abs())
        .fold(T::from_f64(f64::INFINITY).unwrap(), |a, b| if b < a { b } else { a });
    if min_pivot <= tol {
        return Err(PencilError::SingularQ2 {
            pivot: min_pivot.to_f64().unwrap_or(f64::NAN),
            tol: tol.to_f64().unwrap_or(f64::NAN),
        });
    }
    lu.solve(q1)
        .ok_or(PencilError::SingularQ2 {
            pivot: min_pivot.to_f64().unwrap_or(f64::NAN),
            tol: tol.to_f64().unwrap_or(f64::NAN),
        })
}
