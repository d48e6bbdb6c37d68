//! Time warp between physical time `t` and the stretched clock `tau`, plus
//! the state-scaling diagonal matrices the controller and observer build
//! from the blow-up rate.
//!
//! Exact mode uses `alpha(t) = 1/(T - t)` on `[0, T)`; the warped clock is
//! `tau = ln(T / (T - t))`, which runs to infinity as `t` approaches the
//! horizon. Practical mode runs the same warp with horizon `t_f + delta`
//! until `t_f`, then freezes `alpha` at `1/delta`, so the warped clock
//! continues linearly and every quantity stays bounded.

use nalgebra::{DMatrix, DVector};

use crate::error::WarpError;
use crate::{lit, Real};

/// Fraction of the horizon kept clear of the exact-mode singularity.
const EPS_GUARD_FRAC: f64 = 1e-12;

/// Which blow-up profile the schedule follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpMode<T: Real> {
    /// Gain grows unboundedly toward the horizon `T`.
    Exact { horizon: T },
    /// Gain grows until `t_f`, then saturates at `1/delta`.
    Practical { t_f: T, delta: T },
}

/// Time-varying gain profile shared by controller, observer and simulator.
#[derive(Debug, Clone, Copy)]
pub struct GainSchedule<T: Real> {
    mode: WarpMode<T>,
    /// Warped-time speed: `dt/dtau * r(t) = b` identically.
    b: T,
    /// State dimension of each agent; fixes the scaling-matrix order.
    n: usize,
}

impl<T: Real> GainSchedule<T> {
    pub fn new(mode: WarpMode<T>, b: T, n: usize) -> Result<Self, WarpError> {
        match mode {
            WarpMode::Exact { horizon } => {
                if horizon <= T::zero() {
                    return Err(WarpError::BadParameter(format!(
                        "horizon must be positive, got {}",
                        horizon.to_f64().unwrap_or(f64::NAN)
                    )));
                }
            }
            WarpMode::Practical { t_f, delta } => {
                if t_f <= T::zero() || delta <= T::zero() {
                    return Err(WarpError::BadParameter(format!(
                        "t_f and delta must be positive, got t_f = {}, delta = {}",
                        t_f.to_f64().unwrap_or(f64::NAN),
                        delta.to_f64().unwrap_or(f64::NAN)
                    )));
                }
            }
        }
        if b <= T::zero() {
            return Err(WarpError::BadParameter(format!(
                "b must be positive, got {}",
                b.to_f64().unwrap_or(f64::NAN)
            )));
        }
        if n == 0 {
            return Err(WarpError::BadParameter("state dimension must be positive".into()));
        }
        Ok(Self { mode, b, n })
    }

    pub fn mode(&self) -> WarpMode<T> {
        self.mode
    }

    pub fn b(&self) -> T {
        self.b
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Effective horizon: `T` in exact mode, `t_f + delta` in practical mode.
    pub fn horizon(&self) -> T {
        match self.mode {
            WarpMode::Exact { horizon } => horizon,
            WarpMode::Practical { t_f, delta } => t_f + delta,
        }
    }

    /// Width of the guard band before the exact-mode singularity.
    pub fn eps_guard(&self) -> T {
        lit::<T>(EPS_GUARD_FRAC) * self.horizon()
    }

    /// Warped time of the practical-mode freeze instant `t_f`.
    pub fn tau_freeze(&self) -> Option<T> {
        match self.mode {
            WarpMode::Exact { .. } => None,
            WarpMode::Practical { t_f, delta } => Some(((t_f + delta) / delta).ln()),
        }
    }

    /// Latest physical time the schedule accepts.
    pub fn t_max(&self) -> T {
        match self.mode {
            WarpMode::Exact { horizon } => horizon - self.eps_guard(),
            WarpMode::Practical { .. } => lit::<T>(f64::INFINITY),
        }
    }

    fn check_t(&self, t: T) -> Result<(), WarpError> {
        let hi = self.t_max();
        if t < T::zero() || t > hi {
            return Err(WarpError::OutOfDomain {
                value: t.to_f64().unwrap_or(f64::NAN),
                lo: 0.0,
                hi: hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    /// Blow-up gain `alpha(t)`.
    pub fn alpha(&self, t: T) -> Result<T, WarpError> {
        self.check_t(t)?;
        let horizon = self.horizon();
        Ok(match self.mode {
            WarpMode::Exact { .. } => T::one() / (horizon - t),
            WarpMode::Practical { t_f, delta } => {
                if t < t_f {
                    T::one() / (horizon - t)
                } else {
                    T::one() / delta
                }
            }
        })
    }

    /// Scaling rate `r(t) = b * alpha(t)`.
    pub fn r(&self, t: T) -> Result<T, WarpError> {
        Ok(self.b * self.alpha(t)?)
    }

    /// Warped clock `tau(t) = integral of alpha from 0 to t`.
    pub fn tau_of_t(&self, t: T) -> Result<T, WarpError> {
        self.check_t(t)?;
        let horizon = self.horizon();
        Ok(match self.mode {
            WarpMode::Exact { .. } => (horizon / (horizon - t)).ln(),
            WarpMode::Practical { t_f, delta } => {
                if t <= t_f {
                    (horizon / (horizon - t)).ln()
                } else {
                    (horizon / delta).ln() + (t - t_f) / delta
                }
            }
        })
    }

    /// Inverse of [`Self::tau_of_t`].
    pub fn t_of_tau(&self, tau: T) -> Result<T, WarpError> {
        if tau < T::zero() {
            return Err(WarpError::OutOfDomain {
                value: tau.to_f64().unwrap_or(f64::NAN),
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let horizon = self.horizon();
        let t = match self.mode {
            WarpMode::Exact { .. } => horizon * (T::one() - (-tau).exp()),
            WarpMode::Practical { t_f, delta } => {
                let tau_f = (horizon / delta).ln();
                if tau <= tau_f {
                    horizon * (T::one() - (-tau).exp())
                } else {
                    t_f + delta * (tau - tau_f)
                }
            }
        };
        self.check_t(t)?;
        Ok(t)
    }

    /// Diagonal entries of the scaling matrix: `r^n, r^(n-1), ..., r`.
    pub fn scaling_diag(&self, t: T) -> Result<DVector<T>, WarpError> {
        let r = self.r(t)?;
        Ok(descending_powers(r, self.n))
    }

    /// Scaling matrix `diag(r^n, ..., r)`.
    pub fn scaling_matrix(&self, t: T) -> Result<DMatrix<T>, WarpError> {
        Ok(DMatrix::from_diagonal(&self.scaling_diag(t)?))
    }

    /// Inverse scaling matrix, built from powers of `1/r` so that the product
    /// with the forward matrix is the identity to roundoff.
    pub fn inverse_scaling_matrix(&self, t: T) -> Result<DMatrix<T>, WarpError> {
        let r_inv = T::one() / self.r(t)?;
        Ok(DMatrix::from_diagonal(&descending_powers(r_inv, self.n)))
    }

    /// Diagonal entries `r, r^2, ..., r^n` of the observer injection factor
    /// `r^(n+1) * inverse scaling`.
    pub fn injection_diag(&self, t: T) -> Result<DVector<T>, WarpError> {
        let r = self.r(t)?;
        let mut powers = descending_powers(r, self.n);
        powers.as_mut_slice().reverse();
        Ok(powers)
    }

    /// Coefficient of the dilation term in the warped-time dynamics:
    /// `(dr/dtau)/r`, which is 1 while the gain grows and 0 after the
    /// practical-mode freeze.
    pub fn dilation_factor(&self, t: T) -> Result<T, WarpError> {
        self.check_t(t)?;
        Ok(match self.mode {
            WarpMode::Exact { .. } => T::one(),
            WarpMode::Practical { t_f, .. } => {
                if t < t_f {
                    T::one()
                } else {
                    T::zero()
                }
            }
        })
    }
}

/// `[x^n, x^(n-1), ..., x]` by repeated multiplication.
fn descending_powers<T: Real>(x: T, n: usize) -> DVector<T> {
    let mut ascending = Vec::with_capacity(n);
    let mut p = T::one();
    for _ in 0..n {
        p *= x;
        ascending.push(p);
    }
    ascending.reverse();
    DVector::from_vec(ascending)
}
