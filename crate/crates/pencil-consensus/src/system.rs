//! Assembly of the fleet-level block matrices that the gain synthesis and
//! the scaled closed-loop dynamics are expressed in. All agents share the
//! same chain-of-integrators structure, so every block is built from the
//! n-dimensional shift matrix, the feedback row K and the injection row G.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::SynthesisError;
use crate::pencil::max_re_eigenvalue;
use crate::topology::GraphTopology;
use crate::{lit, Real};

/// Margin (on the real axis) below which eigenvalues count as stable.
const HURWITZ_MARGIN: f64 = -1e-9;

/// All constant matrices of the interconnected error system.
#[derive(Debug, Clone)]
pub struct SystemMatrices<T: Real> {
    n: usize,
    n_followers: usize,
    a: DMatrix<T>,
    b_col: DVector<T>,
    c_row: RowDVector<T>,
    k_gain: RowDVector<T>,
    g_gain: RowDVector<T>,
    lbar: DMatrix<T>,
    a_c: DMatrix<T>,
    a_0: DMatrix<T>,
    d_blk: DMatrix<T>,
    a_g: DMatrix<T>,
    a_rho: Option<DMatrix<T>>,
}

impl<T: Real> SystemMatrices<T> {
    /// Agent state dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Follower count.
    pub fn n_followers(&self) -> usize {
        self.n_followers
    }

    /// Shift matrix: ones on the superdiagonal.
    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    /// Input column, the last standard basis vector.
    pub fn b_col(&self) -> &DVector<T> {
        &self.b_col
    }

    /// Output row, the first standard basis vector transposed.
    pub fn c_row(&self) -> &RowDVector<T> {
        &self.c_row
    }

    pub fn k_gain(&self) -> &RowDVector<T> {
        &self.k_gain
    }

    pub fn g_gain(&self) -> &RowDVector<T> {
        &self.g_gain
    }

    /// Pinned Laplacian the protocol weights come from.
    pub fn lbar(&self) -> &DMatrix<T> {
        &self.lbar
    }

    /// Fleet-level closed-loop matrix of the scaled consensus error.
    pub fn a_c(&self) -> &DMatrix<T> {
        &self.a_c
    }

    /// Fleet-level observer error matrix.
    pub fn a_0(&self) -> &DMatrix<T> {
        &self.a_0
    }

    /// Block diagonal of the dilation weights diag(n, n-1, ..., 1).
    pub fn d_blk(&self) -> &DMatrix<T> {
        &self.d_blk
    }

    /// Block diagonal of per-agent [G^T, 0, ..., 0] coupling blocks.
    pub fn a_g(&self) -> &DMatrix<T> {
        &self.a_g
    }

    /// Block diagonal of per-agent growth matrices; absent when growth rates
    /// were not supplied (they are an analysis input, not a control input).
    pub fn a_rho(&self) -> Option<&DMatrix<T>> {
        self.a_rho.as_ref()
    }

    /// Single-agent observer error matrix A - G^T C: companion form with -G
    /// in the first column.
    pub fn a_minus_gc(&self) -> DMatrix<T> {
        let mut m = self.a.clone();
        for i in 0..self.n {
            m[(i, 0)] -= self.g_gain[i];
        }
        m
    }

    /// Single-agent dilation weights diag(n, ..., 1).
    pub fn d_c(&self) -> DVector<T> {
        dilation_weights(self.n)
    }
}

/// Shift matrix of order n.
pub fn shift_matrix<T: Real>(n: usize) -> DMatrix<T> {
    DMatrix::from_fn(n, n, |i, j| if j == i + 1 { T::one() } else { T::zero() })
}

/// diag(n, n-1, ..., 1) as a vector.
pub fn dilation_weights<T: Real>(n: usize) -> DVector<T> {
    DVector::from_fn(n, |i, _| lit::<T>((n - i) as f64))
}

/// Builds and validates every block matrix from the agent dimension, the
/// graph, the two gain rows and optional per-agent growth rates.
pub fn build_system_matrices<T: Real>(
    n: usize,
    topology: &GraphTopology<T>,
    k_gain: &[T],
    g_gain: &[T],
    rho: Option<&[Vec<T>]>,
) -> Result<SystemMatrices<T>, SynthesisError> {
    if n == 0 {
        return Err(SynthesisError::BadParameter(
            "state dimension must be positive".into(),
        ));
    }
    let nf = topology.n_followers();
    if nf == 0 {
        return Err(SynthesisError::BadParameter(
            "at least one follower is required".into(),
        ));
    }
    if k_gain.len() != n {
        return Err(SynthesisError::BadParameter(format!(
            "feedback gain K has {} entries, expected {}",
            k_gain.len(),
            n
        )));
    }
    if g_gain.len() != n {
        return Err(SynthesisError::BadParameter(format!(
            "injection gain G has {} entries, expected {}",
            g_gain.len(),
            n
        )));
    }

    let a = shift_matrix::<T>(n);
    let b_col = DVector::from_fn(n, |i, _| if i == n - 1 { T::one() } else { T::zero() });
    let c_row = RowDVector::from_fn(n, |_, j| if j == 0 { T::one() } else { T::zero() });
    let k_row = RowDVector::from_row_slice(k_gain);
    let g_row = RowDVector::from_row_slice(g_gain);

    let eye_nf = DMatrix::<T>::identity(nf, nf);
    let bk = &b_col * &k_row;
    let a_c = eye_nf.kronecker(&a) - topology.lbar().kronecker(&bk);

    let gc = g_row.transpose() * &c_row;
    let a_minus_gc = &a - &gc;
    let a_0 = eye_nf.kronecker(&a_minus_gc);

    let d_blk = DMatrix::from_diagonal(&DVector::from_fn(n * nf, |i, _| {
        lit::<T>((n - (i % n)) as f64)
    }));
    let a_g = eye_nf.kronecker(&gc);

    let a_rho = match rho {
        None => None,
        Some(rates) => {
            if rates.len() != nf {
                return Err(SynthesisError::BadParameter(format!(
                    "growth rates given for {} agents, expected {}",
                    rates.len(),
                    nf
                )));
            }
            let mut m = DMatrix::<T>::zeros(n * nf, n * nf);
            for (k, rk) in rates.iter().enumerate() {
                if rk.len() != n {
                    return Err(SynthesisError::BadParameter(format!(
                        "growth rate list for follower {} has {} entries, expected {}",
                        k + 1,
                        rk.len(),
                        n
                    )));
                }
                if rk.iter().any(|&r| r < T::zero()) {
                    return Err(SynthesisError::BadParameter(format!(
                        "growth rates must be nonnegative (follower {})",
                        k + 1
                    )));
                }
                // row i of the per-agent block carries the first i rates
                for i in 0..n {
                    for j in 0..=i {
                        m[(k * n + i, k * n + j)] = rk[j];
                    }
                }
            }
            Some(m)
        }
    };

    let max_re_c = max_re_eigenvalue(&a_c)?;
    if max_re_c >= lit::<T>(HURWITZ_MARGIN) {
        return Err(SynthesisError::NotHurwitz {
            which: "closed-loop consensus",
            max_re: max_re_c.to_f64().unwrap_or(f64::NAN),
        });
    }
    let max_re_0 = max_re_eigenvalue(&a_0)?;
    if max_re_0 >= lit::<T>(HURWITZ_MARGIN) {
        return Err(SynthesisError::NotHurwitz {
            which: "observer error",
            max_re: max_re_0.to_f64().unwrap_or(f64::NAN),
        });
    }

    Ok(SystemMatrices {
        n,
        n_followers: nf,
        a,
        b_col,
        c_row,
        k_gain: k_row,
        g_gain: g_row,
        lbar: topology.lbar().clone(),
        a_c,
        a_0,
        d_blk,
        a_g,
        a_rho,
    })
}
