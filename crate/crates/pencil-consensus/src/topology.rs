//! Communication topology of the follower fleet: undirected 0/1 adjacency,
//! its Laplacian, and the pinned Laplacian that couples the followers to the
//! leader. Connectivity-plus-pinning is exactly positive definiteness of the
//! pinned Laplacian, so that is what the constructor checks.

use nalgebra::DMatrix;

use crate::error::TopologyError;
use crate::{lit, Real};

/// Positive-definiteness floor for the pinned Laplacian.
const LAMBDA_MIN_FLOOR: f64 = 1e-10;

/// Validated follower graph plus leader pinning.
#[derive(Debug, Clone)]
pub struct GraphTopology<T: Real> {
    adjacency: DMatrix<i64>,
    pinning: Vec<i64>,
    // integer Laplacian: row sums are exactly zero by construction
    laplacian: DMatrix<i64>,
    lbar: DMatrix<T>,
    lambda_min: T,
}

impl<T: Real> GraphTopology<T> {
    /// Builds and validates a topology from a 0/1 adjacency matrix (row-major,
    /// one inner slice per follower) and per-follower 0/1 pinning flags.
    pub fn new(adjacency: &[Vec<u8>], pinning: &[u8]) -> Result<Self, TopologyError> {
        let n = adjacency.len();
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(TopologyError::NotSquare {
                    row: i,
                    got: row.len(),
                    want: n,
                });
            }
        }
        if pinning.len() != n {
            return Err(TopologyError::PinningLength {
                got: pinning.len(),
                want: n,
            });
        }
        let mut adj = DMatrix::<i64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[i][j];
                if a > 1 || (i == j && a != 0) {
                    return Err(TopologyError::BadAdjacencyEntry { row: i, col: j });
                }
                adj[(i, j)] = i64::from(a);
            }
        }
        if adj != adj.transpose() {
            return Err(TopologyError::NotSymmetric);
        }
        for (i, &p) in pinning.iter().enumerate() {
            if p > 1 {
                return Err(TopologyError::BadPinningEntry { index: i });
            }
        }
        let pin: Vec<i64> = pinning.iter().map(|&p| i64::from(p)).collect();

        // integer Laplacian first, so the zero-row-sum identity is exact
        let mut lap = DMatrix::<i64>::zeros(n, n);
        for i in 0..n {
            let degree: i64 = (0..n).map(|j| adj[(i, j)]).sum();
            for j in 0..n {
                lap[(i, j)] = if i == j { degree } else { -adj[(i, j)] };
            }
        }

        let mut lbar = DMatrix::<T>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let entry = lap[(i, j)] + if i == j { pin[i] } else { 0 };
                lbar[(i, j)] = lit::<T>(entry as f64);
            }
        }

        let lambda_min = crate::pencil::lambda_min_sym(&lbar);
        if lambda_min <= lit::<T>(LAMBDA_MIN_FLOOR) {
            return Err(TopologyError::DisconnectedOrUnpinned {
                lambda_min: lambda_min.to_f64().unwrap_or(f64::NAN),
            });
        }

        Ok(Self {
            adjacency: adj,
            pinning: pin,
            laplacian: lap,
            lbar,
            lambda_min,
        })
    }

    /// Path graph 1-2-...-n with only follower 1 pinned to the leader; the
    /// topology used by the five-manipulator demo.
    pub fn path_with_root_pin(n: usize) -> Result<Self, TopologyError> {
        let mut adjacency = vec![vec![0u8; n]; n];
        for i in 0..n.saturating_sub(1) {
            adjacency[i][i + 1] = 1;
            adjacency[i + 1][i] = 1;
        }
        let mut pinning = vec![0u8; n];
        if n > 0 {
            pinning[0] = 1;
        }
        Self::new(&adjacency, &pinning)
    }

    /// Number of followers.
    pub fn n_followers(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<i64> {
        &self.adjacency
    }

    pub fn pinning(&self) -> &[i64] {
        &self.pinning
    }

    /// Graph Laplacian with exact integer entries.
    pub fn laplacian(&self) -> &DMatrix<i64> {
        &self.laplacian
    }

    /// Pinned Laplacian `L + diag(pinning)`; symmetric positive definite.
    pub fn lbar(&self) -> &DMatrix<T> {
        &self.lbar
    }

    /// Smallest eigenvalue of the pinned Laplacian, the connectivity margin.
    pub fn lambda_min(&self) -> T {
        self.lambda_min
    }

    /// Row of the pinned Laplacian for follower `k`, 1-indexed to match the
    /// agent numbering (agent 0 is the leader).
    pub fn row_of_lbar(&self, k: usize) -> Result<Vec<T>, TopologyError> {
        let n = self.n_followers();
        if k == 0 || k > n {
            return Err(TopologyError::IndexOutOfRange { index: k, max: n });
        }
        Ok(self.lbar.row(k - 1).iter().copied().collect())
    }
}
