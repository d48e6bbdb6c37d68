//! Closed-loop simulation on the warped clock plus the certified-decay monitors.
//!
//! The integrator never steps physical states directly.  It advances the
//! scaled error coordinates in warped time, where the closed loop keeps a
//! bounded right-hand side all the way to the deadline, and reconstructs
//! physical states only at the recorded samples.  The step grid is built in
//! closed form from the schedule and a spectral stability estimate, so equal
//! configurations produce bit-identical traces.
//!
//! Scaled state layout:
//! - state feedback: `[x_0 (n) | eta stacked (n*N)]`
//! - output feedback: `[x_0 (n) | eps_0 (n) | eta_hat stacked (n*N) | eps stacked (n*N)]`
//! where `eps_0` is the leader's own scaled estimation error, carried only to
//! reconstruct the observer trajectories; it never enters the energy function.

use nalgebra::DVector;

use crate::error::SimError;
use crate::fleet::AgentFleet;
use crate::pencil::{lambda_min_sym, max_abs_eigenvalue};
use crate::synthesis::{SynthMode, SynthesisResult};
use crate::system::SystemMatrices;
use crate::warp::{GainSchedule, WarpMode};
use crate::{lit, Real};

/// Kept at or below one so every `h * |eigenvalue|` product stays well inside
/// the fourth-order stability region (real-axis boundary near 2.79).
const STABILITY_MARGIN: f64 = 1.0;

/// Auto-stride aims at roughly this many recorded samples.
const TARGET_SAMPLES: usize = 2000;

const DEFAULT_MAX_STEPS: usize = 20_000_000;

/// Relative slack for the reconstruction identity between physical errors and
/// scaled-norm bounds; pure algebra, so only roundoff passes through.
const IDENTITY_RTOL: f64 = 1e-9;

/// Absolute slack for the same identity, scaled by the leader magnitude: once
/// the scaled errors decay to roundoff level the physical difference floors
/// out near machine epsilon of the states it is computed from.
const IDENTITY_ATOL: f64 = 1e-12;

pub const MONITOR_DECAY: &str = "lyapunov_decay";
pub const MONITOR_IDENTITY: &str = "tracking_identity";
pub const MONITOR_ENVELOPE: &str = "tracking_envelope";
pub const MONITOR_OMEGA: &str = "omega_set";

/// Integration controls; `for_schedule` fills the documented defaults.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions<T: Real> {
    /// Largest physical-time step.
    pub h_max: T,
    /// Largest step as a fraction of the remaining runway.
    pub h_frac: T,
    /// Stop margin before the deadline (unbounded-gain mode only).
    pub eps_stop: T,
    /// Final physical time in saturated-gain mode.
    pub t_end: T,
    /// Record every `stride`-th grid point; 0 picks a stride automatically.
    pub stride: usize,
    /// Relative slack applied to every certified envelope check.
    pub tol_rel: T,
    /// Hard cap on executed integration steps.
    pub max_steps: usize,
}

impl<T: Real> SimOptions<T> {
    pub fn for_schedule(sched: &GainSchedule<T>) -> Self {
        let horizon = sched.horizon();
        let t_end = match sched.mode() {
            WarpMode::Exact { .. } => horizon,
            WarpMode::Practical { t_f, .. } => {
                let ten = lit::<T>(10.0);
                if ten > t_f {
                    ten
                } else {
                    t_f + horizon
                }
            }
        };
        Self {
            h_max: lit::<T>(1e-4) * horizon,
            h_frac: lit(1e-2),
            eps_stop: lit::<T>(1e-3) * horizon,
            t_end,
            stride: 0,
            tol_rel: lit(0.05),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

/// One monitor breach: when, which monitor, and by how much (log-scale for
/// envelope monitors, absolute for identity checks).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation<T: Real> {
    pub time: T,
    pub monitor: &'static str,
    pub margin: T,
}

/// Sampled closed-loop run.  All per-sample vectors share the same length;
/// `violations` stays empty until a monitor finds a breach.
#[derive(Debug, Clone)]
pub struct SimTrace<T: Real> {
    pub mode: SynthMode,
    pub n: usize,
    pub n_followers: usize,
    pub times: Vec<T>,
    pub taus: Vec<T>,
    /// Physical states per sample; index 0 is the leader.
    pub states: Vec<Vec<DVector<T>>>,
    /// Observer states per sample; equal to `states` under state feedback.
    pub observer_states: Vec<Vec<DVector<T>>>,
    /// Protocol inputs per sample; the leader entry is always zero.
    pub inputs: Vec<Vec<T>>,
    /// Stacked consensus coordinate (observer copy under output feedback).
    pub eta_hat: Vec<DVector<T>>,
    /// Stacked estimation errors; `None` under state feedback.
    pub epsilon: Option<Vec<DVector<T>>>,
    /// Energy function along the run.
    pub v: Vec<T>,
    /// Certified decay envelope; filled by the decay monitor.
    pub bounds: Vec<T>,
    pub violations: Vec<Violation<T>>,
    /// Sample index of the gain-freeze instant in saturated-gain mode.
    pub freeze_index: Option<usize>,
}

impl<T: Real> SimTrace<T> {
    pub fn empty(mode: SynthMode, n: usize, n_followers: usize) -> Self {
        Self {
            mode,
            n,
            n_followers,
            times: Vec::new(),
            taus: Vec::new(),
            states: Vec::new(),
            observer_states: Vec::new(),
            inputs: Vec::new(),
            eta_hat: Vec::new(),
            epsilon: if mode == SynthMode::StateFeedback {
                None
            } else {
                Some(Vec::new())
            },
            v: Vec::new(),
            bounds: Vec::new(),
            violations: Vec::new(),
            freeze_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the recorded sample closest to `t`; `t` must lie inside the
    /// recorded range.
    pub fn nearest_index(&self, t: T) -> Result<usize, SimError> {
        if self.is_empty() {
            return Err(SimError::Model("trace has no samples".into()));
        }
        let first = self.times[0];
        let last = *self.times.last().expect("nonempty");
        if t < first || t > last {
            return Err(SimError::Model(format!(
                "query time {t} outside recorded range [{first}, {last}]"
            )));
        }
        let i = self.times.partition_point(|&x| x < t);
        if i == 0 {
            return Ok(0);
        }
        if i >= self.times.len() {
            return Ok(self.times.len() - 1);
        }
        if t - self.times[i - 1] <= self.times[i] - t {
            Ok(i - 1)
        } else {
            Ok(i)
        }
    }
}

/// Outcome of the energy-decay monitor.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport<T: Real> {
    /// Net decay exponent after absorption (the saturating-gain pre-freeze
    /// exponent in that mode).
    pub kappa: T,
    /// Post-freeze decay exponent in saturated-gain mode.
    pub kappa_post: Option<T>,
    /// First warped time at which absorption leaves net decay.
    pub tau1: T,
    /// Transient amplification factor; may overflow to infinity, in which
    /// case the envelope is vacuous and reported as such.
    pub m_overshoot: T,
    /// False when no growth rates were declared, so no envelope is claimed.
    pub growth_monitored: bool,
    pub passed: bool,
}

/// Outcome of the tracking-error monitor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport<T: Real> {
    /// One verdict per follower, in fleet order.
    pub per_agent: Vec<bool>,
    /// Residual-set radius at the freeze instant in saturated-gain mode.
    pub omega_radius: Option<T>,
    pub passed: bool,
}

/// Distributed protocol on a stacked consensus coordinate (the true scaled
/// disagreement under state feedback, the observer copy otherwise): each
/// follower feeds back the gain row against its weighted neighborhood sum.
/// Returns one input per agent; index 0 (the leader) is always zero.
pub fn protocol_inputs<T: Real>(
    sys: &SystemMatrices<T>,
    eta: &[T],
) -> Result<Vec<T>, SimError> {
    let n = sys.n();
    let nf = sys.n_followers();
    if eta.len() != n * nf {
        return Err(SimError::Dimension(format!(
            "stacked consensus coordinate has length {}, expected {}",
            eta.len(),
            n * nf
        )));
    }
    let k_gain = sys.k_gain();
    let lbar = sys.lbar();
    let mut weighted = vec![T::zero(); nf];
    for (j, w) in weighted.iter_mut().enumerate() {
        let mut s = T::zero();
        for i in 0..n {
            s += k_gain[i] * eta[j * n + i];
        }
        *w = s;
    }
    let mut u = vec![T::zero(); nf + 1];
    for k in 1..=nf {
        let mut s = T::zero();
        for (j, w) in weighted.iter().enumerate() {
            s += lbar[(k - 1, j)] * *w;
        }
        u[k] = -s;
    }
    Ok(u)
}

/// Scaled closed loop bound to one fleet, gain set and schedule.
struct ScaledClosedLoop<'a, T: Real> {
    fleet: &'a AgentFleet<T>,
    sys: &'a SystemMatrices<T>,
    sched: &'a GainSchedule<T>,
    mode: SynthMode,
    n: usize,
    n_f: usize,
}

impl<'a, T: Real> ScaledClosedLoop<'a, T> {
    fn new(
        fleet: &'a AgentFleet<T>,
        sys: &'a SystemMatrices<T>,
        sched: &'a GainSchedule<T>,
        mode: SynthMode,
    ) -> Self {
        Self {
            fleet,
            sys,
            sched,
            mode,
            n: fleet.n(),
            n_f: fleet.n_followers(),
        }
    }

    fn dim(&self) -> usize {
        if self.mode == SynthMode::StateFeedback {
            self.n * (1 + self.n_f)
        } else {
            2 * self.n * (1 + self.n_f)
        }
    }

    /// Offset of the stacked consensus coordinate inside the state vector.
    fn consensus_offset(&self) -> usize {
        if self.mode == SynthMode::StateFeedback {
            self.n
        } else {
            2 * self.n
        }
    }

    /// Protocol inputs from the stacked consensus coordinate; index 0 (the
    /// leader) is always zero.
    fn protocol_inputs(&self, z: &DVector<T>) -> Vec<T> {
        let off = self.consensus_offset();
        let eta = &z.as_slice()[off..off + self.n * self.n_f];
        protocol_inputs(self.sys, eta).expect("stack dimensions are fixed by construction")
    }

    /// Warped-time derivative of the scaled state.  `dilation` selects the
    /// one-sided limit at the freeze boundary: 1 while the gain still grows,
    /// 0 once frozen (the dilation weights vanish there).
    fn rhs(
        &self,
        tau: T,
        dilation: T,
        z: &DVector<T>,
        out: &mut DVector<T>,
    ) -> Result<(), SimError> {
        let zero = T::zero();
        let one = T::one();
        let n = self.n;
        let nf = self.n_f;
        let t = self.sched.t_of_tau(tau)?;
        let r = self.sched.r(t)?;
        let b = self.sched.b();
        let g_gain = self.sys.g_gain();

        // diag(Lambda_r / r) = (r^{n-1}, ..., r, 1) and diag(Lambda_r^{-1}).
        let mut lam_over_r = vec![one; n];
        for i in (0..n.saturating_sub(1)).rev() {
            lam_over_r[i] = lam_over_r[i + 1] * r;
        }
        let r_inv = one / r;
        let mut lam_inv = vec![zero; n];
        let mut acc = one;
        for i in (0..n).rev() {
            acc *= r_inv;
            lam_inv[i] = acc;
        }
        let r_pow_n = lam_over_r[0] * r;

        let x0 = z.rows(0, n).clone_owned();
        let f0 = self.fleet.leader().f(t, &x0);
        if f0.len() != n {
            return Err(SimError::Model(format!(
                "leader nonlinearity returned {} entries, expected {n}",
                f0.len()
            )));
        }
        let b_over_r = b * r_inv;
        for i in 0..n {
            let sh = if i + 1 < n { x0[i + 1] } else { zero };
            out[i] = b_over_r * (sh + f0[i]);
        }

        let u = self.protocol_inputs(z);

        if self.mode == SynthMode::StateFeedback {
            for k in 1..=nf {
                let model = &self.fleet.followers()[k - 1];
                let off = n + (k - 1) * n;
                let mut xk = x0.clone();
                for i in 0..n {
                    xk[i] += lam_inv[i] * z[off + i];
                }
                let fk = model.f(t, &xk);
                if fk.len() != n {
                    return Err(SimError::Model(format!(
                        "agent {k} nonlinearity returned {} entries, expected {n}",
                        fk.len()
                    )));
                }
                for i in 0..n {
                    let sh = if i + 1 < n { z[off + i + 1] } else { zero };
                    let forced = if i + 1 == n { u[k] } else { zero };
                    let phi = lam_over_r[i] * (fk[i] - f0[i]);
                    let weight = dilation * lit::<T>((n - i) as f64);
                    out[off + i] = b * (sh + forced + phi) + weight * z[off + i];
                }
            }
            return Ok(());
        }

        // Output feedback: the innovation seen by agent k mixes its estimation
        // error, the sensitivity mismatch on the relative output, and the
        // leader's absolute output scaled back up by r^n.
        let theta0 = self.fleet.leader().theta(t);
        let off_e0 = n;
        let inn0 = z[off_e0] + r_pow_n * (theta0 - one) * x0[0];
        for i in 0..n {
            let sh = if i + 1 < n { z[off_e0 + i + 1] } else { zero };
            let weight = dilation * lit::<T>((n - i) as f64);
            out[off_e0 + i] =
                b * (sh + lam_over_r[i] * f0[i] - g_gain[i] * inn0) + weight * z[off_e0 + i];
        }

        let off_h = 2 * n;
        let off_e = 2 * n + n * nf;
        for k in 1..=nf {
            let model = &self.fleet.followers()[k - 1];
            let oh = off_h + (k - 1) * n;
            let oe = off_e + (k - 1) * n;
            let mut xk = x0.clone();
            for i in 0..n {
                xk[i] += lam_inv[i] * (z[oh + i] + z[oe + i]);
            }
            let fk = model.f(t, &xk);
            if fk.len() != n {
                return Err(SimError::Model(format!(
                    "agent {k} nonlinearity returned {} entries, expected {n}",
                    fk.len()
                )));
            }
            let theta_k = model.theta(t);
            let inn = z[oe]
                + (theta_k - one) * (z[oh] + z[oe])
                + r_pow_n * (theta_k - theta0) * x0[0];
            for i in 0..n {
                let shh = if i + 1 < n { z[oh + i + 1] } else { zero };
                let she = if i + 1 < n { z[oe + i + 1] } else { zero };
                let forced = if i + 1 == n { u[k] } else { zero };
                let phi = lam_over_r[i] * (fk[i] - f0[i]);
                let weight = dilation * lit::<T>((n - i) as f64);
                out[oh + i] = b * (shh + forced + g_gain[i] * inn) + weight * z[oh + i];
                out[oe + i] = b * (she + phi - g_gain[i] * inn) + weight * z[oe + i];
            }
        }
        Ok(())
    }
}

/// Spectral estimate of the warped-time right-hand-side magnitude, used to
/// size stable steps.
fn stability_coefficient<T: Real>(
    sys: &SystemMatrices<T>,
    sched: &GainSchedule<T>,
    fleet: &AgentFleet<T>,
    mode: SynthMode,
) -> Result<T, SimError> {
    let b = sched.b();
    let n_term = lit::<T>(sched.n() as f64);
    let consensus =
        max_abs_eigenvalue(sys.a_c()).map_err(|e| SimError::Synthesis(e.into()))?;
    let coeff = if mode == SynthMode::StateFeedback {
        consensus
    } else {
        let observer = max_abs_eigenvalue(&sys.a_minus_gc())
            .map_err(|e| SimError::Synthesis(e.into()))?;
        let mut dtheta_max = fleet.leader().dtheta();
        for d in fleet.follower_dthetas() {
            if d > dtheta_max {
                dtheta_max = d;
            }
        }
        let g_norm = sys.g_gain().norm();
        consensus + g_norm * (T::one() + dtheta_max) + observer
    };
    Ok(b * coeff + n_term)
}

#[derive(Debug, Clone, Copy)]
enum StepRule<T: Real> {
    /// Uniform physical-time steps `t0 + i h`, mapped through the warp.
    UniformT { t0: T, h: T },
    /// Uniform warped-time steps `tau0 + i h`.
    UniformTau { tau0: T, h: T },
}

#[derive(Debug, Clone, Copy)]
struct Segment<T: Real> {
    dilation: T,
    n_steps: usize,
    rule: StepRule<T>,
}

impl<T: Real> Segment<T> {
    fn tau_at(&self, sched: &GainSchedule<T>, i: usize) -> Result<T, SimError> {
        match self.rule {
            StepRule::UniformT { t0, h } => {
                Ok(sched.tau_of_t(t0 + h * lit::<T>(i as f64))?)
            }
            StepRule::UniformTau { tau0, h } => Ok(tau0 + h * lit::<T>(i as f64)),
        }
    }
}

struct Plan<T: Real> {
    segments: Vec<Segment<T>>,
    /// Segment index whose end lands exactly on the freeze instant.
    freeze_after: Option<usize>,
    total_steps: usize,
}

fn ceil_count<T: Real>(span: T, h: T) -> usize {
    let raw = (span / h).to_f64().unwrap_or(f64::NAN);
    if !raw.is_finite() || raw <= 0.0 {
        return 1;
    }
    raw.ceil() as usize
}

/// Pre-deadline phases: uniform physical steps of `h_max` while the runway is
/// long, then uniform warped steps once the shrinking runway binds first.
fn pre_deadline_segments<T: Real>(
    sched: &GainSchedule<T>,
    h_max: T,
    h_tau: T,
    q: T,
    t_stop: T,
) -> Result<(Vec<Segment<T>>, T), SimError> {
    let one = T::one();
    let horizon = sched.horizon();
    let mut segments = Vec::new();
    let mut t_switch = horizon - h_max / q;
    if t_switch > t_stop {
        t_switch = t_stop;
    }
    let mut t_a_end = T::zero();
    if t_switch > T::zero() {
        let steps_a = (t_switch / h_max).to_f64().unwrap_or(0.0).floor() as usize;
        if steps_a > 0 {
            t_a_end = h_max * lit::<T>(steps_a as f64);
            segments.push(Segment {
                dilation: one,
                n_steps: steps_a,
                rule: StepRule::UniformT {
                    t0: T::zero(),
                    h: h_max,
                },
            });
        }
    }
    let tau_a_end = sched.tau_of_t(t_a_end)?;
    let tau_stop = sched.tau_of_t(t_stop)?;
    let span = tau_stop - tau_a_end;
    if span > T::zero() {
        let steps_b = ceil_count(span, h_tau);
        segments.push(Segment {
            dilation: one,
            n_steps: steps_b,
            rule: StepRule::UniformTau {
                tau0: tau_a_end,
                h: span / lit::<T>(steps_b as f64),
            },
        });
    }
    if segments.is_empty() {
        return Err(SimError::Model(
            "step plan is empty; stop margin leaves no room to integrate".into(),
        ));
    }
    Ok((segments, tau_stop))
}

fn build_plan<T: Real>(
    sched: &GainSchedule<T>,
    opts: &SimOptions<T>,
    lambda_hat: T,
) -> Result<Plan<T>, SimError> {
    let one = T::one();
    let h_tau_stab = lit::<T>(STABILITY_MARGIN) / lambda_hat;
    let h_tau_frac = -(one - opts.h_frac).ln();
    let h_tau = if h_tau_frac < h_tau_stab {
        h_tau_frac
    } else {
        h_tau_stab
    };
    let q = one - (-h_tau).exp();

    match sched.mode() {
        WarpMode::Exact { horizon } => {
            let t_stop = horizon - opts.eps_stop;
            let (segments, _) = pre_deadline_segments(sched, opts.h_max, h_tau, q, t_stop)?;
            let total_steps = segments.iter().map(|s| s.n_steps).sum();
            Ok(Plan {
                segments,
                freeze_after: None,
                total_steps,
            })
        }
        WarpMode::Practical { t_f, delta } => {
            let (mut segments, tau_f) =
                pre_deadline_segments(sched, opts.h_max, h_tau, q, t_f)?;
            let freeze_after = Some(segments.len() - 1);
            let t_span = opts.t_end - t_f;
            let h_c_stab = delta * h_tau_stab;
            let h_c = if opts.h_max < h_c_stab {
                opts.h_max
            } else {
                h_c_stab
            };
            let steps_c = ceil_count(t_span, h_c);
            segments.push(Segment {
                dilation: T::zero(),
                n_steps: steps_c,
                rule: StepRule::UniformTau {
                    tau0: tau_f,
                    h: (t_span / delta) / lit::<T>(steps_c as f64),
                },
            });
            let total_steps = segments.iter().map(|s| s.n_steps).sum();
            Ok(Plan {
                segments,
                freeze_after,
                total_steps,
            })
        }
    }
}

fn validate_options<T: Real>(
    opts: &SimOptions<T>,
    sched: &GainSchedule<T>,
) -> Result<(), SimError> {
    if !(opts.h_max > T::zero()) || !opts.h_max.is_finite() {
        return Err(SimError::Model("h_max must be positive and finite".into()));
    }
    if !(opts.h_frac > T::zero()) || !(opts.h_frac < T::one()) {
        return Err(SimError::Model("h_frac must lie in (0, 1)".into()));
    }
    if opts.tol_rel < T::zero() {
        return Err(SimError::Model("tol_rel must be nonnegative".into()));
    }
    if opts.max_steps == 0 {
        return Err(SimError::Model("max_steps must be positive".into()));
    }
    match sched.mode() {
        WarpMode::Exact { horizon } => {
            if !(opts.eps_stop > sched.eps_guard()) || !(opts.eps_stop < horizon) {
                return Err(SimError::Model(format!(
                    "eps_stop must lie in ({:e}, horizon); got {}",
                    sched.eps_guard().to_f64().unwrap_or(f64::NAN),
                    opts.eps_stop
                )));
            }
        }
        WarpMode::Practical { t_f, .. } => {
            if !(opts.t_end > t_f) || !opts.t_end.is_finite() {
                return Err(SimError::Model(format!(
                    "t_end must exceed the freeze time {t_f}; got {}",
                    opts.t_end
                )));
            }
        }
    }
    Ok(())
}

fn initial_scaled_state<T: Real>(
    fleet: &AgentFleet<T>,
    sched: &GainSchedule<T>,
    mode: SynthMode,
) -> Result<DVector<T>, SimError> {
    let n = fleet.n();
    let nf = fleet.n_followers();
    let with_observers = mode != SynthMode::StateFeedback;
    let state0 = fleet.initial_state(with_observers);
    let lam0 = sched.scaling_diag(T::zero())?;
    let dim = if with_observers {
        2 * n * (1 + nf)
    } else {
        n * (1 + nf)
    };
    let mut z = DVector::zeros(dim);
    let x0 = &state0.x[0];
    for i in 0..n {
        z[i] = x0[i];
    }
    if with_observers {
        let hats = state0.x_hat.as_ref().expect("observers requested");
        for i in 0..n {
            z[n + i] = lam0[i] * (x0[i] - hats[0][i]);
        }
        for k in 1..=nf {
            let oh = 2 * n + (k - 1) * n;
            let oe = 2 * n + n * nf + (k - 1) * n;
            for i in 0..n {
                let eta_hat = lam0[i] * (hats[k][i] - hats[0][i]);
                z[oh + i] = eta_hat;
                z[oe + i] = lam0[i] * (state0.x[k][i] - x0[i]) - eta_hat;
            }
        }
    } else {
        for k in 1..=nf {
            let off = n + (k - 1) * n;
            for i in 0..n {
                z[off + i] = lam0[i] * (state0.x[k][i] - x0[i]);
            }
        }
    }
    Ok(z)
}

struct Workspace<T: Real> {
    k1: DVector<T>,
    k2: DVector<T>,
    k3: DVector<T>,
    k4: DVector<T>,
    tmp: DVector<T>,
    zero: DVector<T>,
}

impl<T: Real> Workspace<T> {
    fn new(dim: usize) -> Self {
        Self {
            k1: DVector::zeros(dim),
            k2: DVector::zeros(dim),
            k3: DVector::zeros(dim),
            k4: DVector::zeros(dim),
            tmp: DVector::zeros(dim),
            zero: DVector::zeros(dim),
        }
    }
}

fn rk4_step<T: Real>(
    ctx: &ScaledClosedLoop<'_, T>,
    tau: T,
    h: T,
    dilation: T,
    z: &mut DVector<T>,
    ws: &mut Workspace<T>,
) -> Result<(), SimError> {
    let one = T::one();
    let half = h * lit::<T>(0.5);
    ctx.rhs(tau, dilation, z, &mut ws.k1)?;
    ws.tmp.copy_from(z);
    ws.tmp.axpy(half, &ws.k1, one);
    ctx.rhs(tau + half, dilation, &ws.tmp, &mut ws.k2)?;
    ws.tmp.copy_from(z);
    ws.tmp.axpy(half, &ws.k2, one);
    ctx.rhs(tau + half, dilation, &ws.tmp, &mut ws.k3)?;
    ws.tmp.copy_from(z);
    ws.tmp.axpy(h, &ws.k3, one);
    ctx.rhs(tau + h, dilation, &ws.tmp, &mut ws.k4)?;
    let w = h / lit::<T>(6.0);
    let w2 = w * lit::<T>(2.0);
    z.axpy(w, &ws.k1, one);
    z.axpy(w2, &ws.k2, one);
    z.axpy(w2, &ws.k3, one);
    z.axpy(w, &ws.k4, one);
    Ok(())
}

/// Snap magnitudes below the smallest normal number to zero.  Keeps long
/// saturated-gain tails out of denormal arithmetic and lets a collapsed state
/// reach exact zero, where the equilibrium short-circuit takes over.
fn flush_subnormal<T: Real>(z: &mut DVector<T>, floor: T) {
    if floor <= T::zero() {
        return;
    }
    for v in z.iter_mut() {
        if v.abs() < floor {
            *v = T::zero();
        }
    }
}

fn ensure_finite<T: Real>(
    ctx: &ScaledClosedLoop<'_, T>,
    z: &DVector<T>,
    tau: T,
) -> Result<(), SimError> {
    for (idx, v) in z.iter().enumerate() {
        if !v.is_finite() {
            let n = ctx.n;
            let agent = if ctx.mode == SynthMode::StateFeedback {
                if idx < n {
                    0
                } else {
                    (idx - n) / n + 1
                }
            } else if idx < 2 * n {
                0
            } else {
                ((idx - 2 * n) % (n * ctx.n_f)) / n + 1
            };
            let t = ctx
                .sched
                .t_of_tau(tau)
                .ok()
                .and_then(|t| t.to_f64())
                .unwrap_or(f64::NAN);
            return Err(SimError::NonFinite { t, agent });
        }
    }
    Ok(())
}

fn is_all_zero<T: Real>(z: &DVector<T>) -> bool {
    z.iter().all(|v| *v == T::zero())
}

fn rhs_is_zero<T: Real>(
    ctx: &ScaledClosedLoop<'_, T>,
    tau: T,
    dilation: T,
    ws: &mut Workspace<T>,
) -> Result<bool, SimError> {
    let zero = ws.zero.clone();
    ctx.rhs(tau, dilation, &zero, &mut ws.tmp)?;
    Ok(is_all_zero(&ws.tmp))
}

fn quad_form<T: Real>(p: &nalgebra::DMatrix<T>, x: &DVector<T>) -> T {
    (p * x).dot(x)
}

fn record_sample<T: Real>(
    ctx: &ScaledClosedLoop<'_, T>,
    synthesis: &SynthesisResult<T>,
    trace: &mut SimTrace<T>,
    tau: T,
    z: &DVector<T>,
) -> Result<(), SimError> {
    let n = ctx.n;
    let nf = ctx.n_f;
    let t = ctx.sched.t_of_tau(tau)?;
    let r = ctx.sched.r(t)?;
    let one = T::one();
    let r_inv = one / r;
    let mut lam_inv = vec![T::zero(); n];
    let mut acc = one;
    for i in (0..n).rev() {
        acc *= r_inv;
        lam_inv[i] = acc;
    }

    let x0 = z.rows(0, n).clone_owned();
    let inputs = ctx.protocol_inputs(z);
    let mut states = Vec::with_capacity(nf + 1);
    states.push(x0.clone());

    if ctx.mode == SynthMode::StateFeedback {
        let eta = z.rows(n, n * nf).clone_owned();
        for k in 1..=nf {
            let mut xk = x0.clone();
            for i in 0..n {
                xk[i] += lam_inv[i] * eta[(k - 1) * n + i];
            }
            states.push(xk);
        }
        let v = quad_form(&synthesis.p_c, &eta);
        trace.observer_states.push(states.clone());
        trace.states.push(states);
        trace.eta_hat.push(eta);
        trace.v.push(v);
    } else {
        let eps0 = z.rows(n, n).clone_owned();
        let eta_hat = z.rows(2 * n, n * nf).clone_owned();
        let eps = z.rows(2 * n + n * nf, n * nf).clone_owned();
        let mut xhat0 = x0.clone();
        for i in 0..n {
            xhat0[i] -= lam_inv[i] * eps0[i];
        }
        let mut observers = Vec::with_capacity(nf + 1);
        observers.push(xhat0.clone());
        for k in 1..=nf {
            let mut xk = x0.clone();
            let mut xhk = xhat0.clone();
            for i in 0..n {
                let idx = (k - 1) * n + i;
                xk[i] += lam_inv[i] * (eta_hat[idx] + eps[idx]);
                xhk[i] += lam_inv[i] * eta_hat[idx];
            }
            states.push(xk);
            observers.push(xhk);
        }
        let p_0 = synthesis
            .p_0
            .as_ref()
            .ok_or_else(|| SimError::Model("observer energy matrix missing".into()))?;
        let c = synthesis
            .c
            .ok_or_else(|| SimError::Model("observer energy weight missing".into()))?;
        let v = quad_form(&synthesis.p_c, &eta_hat) + c * quad_form(p_0, &eps);
        trace.states.push(states);
        trace.observer_states.push(observers);
        trace.eta_hat.push(eta_hat);
        trace
            .epsilon
            .as_mut()
            .expect("observer trace")
            .push(eps);
        trace.v.push(v);
    }
    trace.times.push(t);
    trace.taus.push(tau);
    trace.inputs.push(inputs);
    Ok(())
}

/// Integrate the scaled closed loop over the deterministic grid.
///
/// The trace records physical states, observer states, inputs, the scaled
/// coordinates and the energy function at every retained sample.  Decay
/// envelopes and violations are filled in by the monitors afterwards.
pub fn integrate<T: Real>(
    fleet: &AgentFleet<T>,
    sys: &SystemMatrices<T>,
    sched: &GainSchedule<T>,
    synthesis: &SynthesisResult<T>,
    opts: &SimOptions<T>,
) -> Result<SimTrace<T>, SimError> {
    let n = fleet.n();
    let nf = fleet.n_followers();
    if sys.n() != n || sched.n() != n || synthesis.n != n {
        return Err(SimError::Dimension(format!(
            "state dimensions disagree: fleet {n}, matrices {}, schedule {}, synthesis {}",
            sys.n(),
            sched.n(),
            synthesis.n
        )));
    }
    if sys.n_followers() != nf || synthesis.n_followers != nf {
        return Err(SimError::Dimension(format!(
            "follower counts disagree: fleet {nf}, matrices {}, synthesis {}",
            sys.n_followers(),
            synthesis.n_followers
        )));
    }
    let sched_practical = matches!(sched.mode(), WarpMode::Practical { .. });
    if (synthesis.mode == SynthMode::Practical) != sched_practical {
        return Err(SimError::Model(
            "schedule saturation does not match the synthesized mode".into(),
        ));
    }
    let b_gap = (sched.b() - synthesis.b).abs();
    if b_gap > lit::<T>(1e-12) * synthesis.b {
        return Err(SimError::Model(
            "schedule speed differs from the synthesized value".into(),
        ));
    }
    validate_options(opts, sched)?;

    let mode = synthesis.mode;
    let ctx = ScaledClosedLoop::new(fleet, sys, sched, mode);
    if mode != SynthMode::StateFeedback && (synthesis.p_0.is_none() || synthesis.c.is_none()) {
        return Err(SimError::Model(
            "observer energy data missing from synthesis".into(),
        ));
    }

    let lambda_hat = stability_coefficient(sys, sched, fleet, mode)?;
    let plan = build_plan(sched, opts, lambda_hat)?;
    let stride = if opts.stride == 0 {
        (plan.total_steps / TARGET_SAMPLES).max(1)
    } else {
        opts.stride
    };

    let mut z = initial_scaled_state(fleet, sched, mode)?;
    let dim = ctx.dim();
    let mut ws = Workspace::new(dim);
    let flush_floor = lit::<T>(f64::MIN_POSITIVE);
    let mut trace = SimTrace::empty(mode, n, nf);

    let tau_first = plan.segments[0].tau_at(sched, 0)?;
    record_sample(&ctx, synthesis, &mut trace, tau_first, &z)?;
    let mut short = is_all_zero(&z)
        && rhs_is_zero(&ctx, tau_first, plan.segments[0].dilation, &mut ws)?;

    let mut executed: usize = 0;
    let mut global_step: usize = 0;
    for (si, seg) in plan.segments.iter().enumerate() {
        // The dilation weight changes across the freeze boundary, so a
        // standing short-circuit must be re-verified under the new segment.
        if short && !rhs_is_zero(&ctx, seg.tau_at(sched, 0)?, seg.dilation, &mut ws)? {
            short = false;
        }
        let mut i: usize = 0;
        let mut tau_prev = seg.tau_at(sched, 0)?;
        while i < seg.n_steps {
            if short {
                // Trajectory is pinned at the origin; hop between samples and
                // re-verify the equilibrium at each one instead of stepping.
                let rem = stride - (global_step % stride);
                let next = (i + rem).min(seg.n_steps);
                let tau_next = seg.tau_at(sched, next)?;
                if rhs_is_zero(&ctx, tau_next, seg.dilation, &mut ws)? {
                    global_step += next - i;
                    i = next;
                    tau_prev = tau_next;
                    record_sample(&ctx, synthesis, &mut trace, tau_next, &z)?;
                } else {
                    short = false;
                }
            } else {
                if executed >= opts.max_steps {
                    let t = sched
                        .t_of_tau(tau_prev)
                        .ok()
                        .and_then(|t| t.to_f64())
                        .unwrap_or(f64::NAN);
                    return Err(SimError::StepBudget {
                        t,
                        budget: opts.max_steps,
                    });
                }
                let tau_next = seg.tau_at(sched, i + 1)?;
                rk4_step(&ctx, tau_prev, tau_next - tau_prev, seg.dilation, &mut z, &mut ws)?;
                flush_subnormal(&mut z, flush_floor);
                ensure_finite(&ctx, &z, tau_next)?;
                executed += 1;
                global_step += 1;
                i += 1;
                tau_prev = tau_next;
                if is_all_zero(&z) && rhs_is_zero(&ctx, tau_next, seg.dilation, &mut ws)? {
                    short = true;
                }
                if global_step % stride == 0 || i == seg.n_steps {
                    record_sample(&ctx, synthesis, &mut trace, tau_next, &z)?;
                }
            }
        }
        if plan.freeze_after == Some(si) {
            trace.freeze_index = Some(trace.len() - 1);
        }
    }
    Ok(trace)
}

struct DecayEnvelope<T: Real> {
    ln_env: Vec<T>,
    kappa: T,
    kappa_post: Option<T>,
    tau1: T,
    ln_m: T,
}

/// Log-scale certified envelope along the recorded samples.  Returns `None`
/// when the synthesis carried no growth rates, i.e. no envelope is claimed.
/// All comparisons downstream stay in log scale so an overflowing transient
/// factor degrades to a vacuous (infinite) envelope instead of poisoning the
/// arithmetic.
fn decay_log_envelope<T: Real>(
    trace: &SimTrace<T>,
    synthesis: &SynthesisResult<T>,
    sched: &GainSchedule<T>,
) -> Result<Option<DecayEnvelope<T>>, SimError> {
    if trace.is_empty() {
        return Err(SimError::Model("trace has no samples".into()));
    }
    if trace.mode != synthesis.mode {
        return Err(SimError::Model(
            "trace mode does not match the synthesis".into(),
        ));
    }
    let horizon_gap = (sched.horizon() - synthesis.horizon).abs();
    if horizon_gap > lit::<T>(1e-12) * synthesis.horizon {
        return Err(SimError::Model(
            "schedule horizon differs from the synthesized value".into(),
        ));
    }
    if !synthesis.growth_known {
        return Ok(None);
    }
    let v0 = trace.v[0];
    let ln_v0 = v0.ln();
    let horizon = synthesis.horizon;

    match synthesis.mode {
        SynthMode::StateFeedback | SynthMode::OutputFeedback => {
            let k0 = synthesis.kappa0_or_a;
            let k1 = synthesis.kappa1_or_b;
            // Earliest warped time at which the absorbed coupling k1/alpha
            // leaves net decay; past the grid it is placed analytically just
            // beyond the crossing.
            let tau1 = if k1 <= T::zero() {
                trace.taus[0]
            } else {
                let crossing = trace
                    .taus
                    .iter()
                    .copied()
                    .find(|&tau| k0 - k1 * horizon * (-tau).exp() > T::zero());
                match crossing {
                    Some(tau) => tau,
                    None => {
                        let last = *trace.taus.last().expect("nonempty");
                        let first = trace.taus[0];
                        let count = lit::<T>((trace.len().max(2) - 1) as f64);
                        let nudge = (last - first) / count;
                        (k1 * horizon / k0).ln() + nudge
                    }
                }
            };
            let kappa = k0 - k1 * horizon * (-tau1).exp();
            let ln_m = horizon * k1 * tau1;
            let ln_env = trace
                .times
                .iter()
                .map(|&t| ln_m + kappa * ((horizon - t) / horizon).ln() + ln_v0)
                .collect();
            Ok(Some(DecayEnvelope {
                ln_env,
                kappa,
                kappa_post: None,
                tau1,
                ln_m,
            }))
        }
        SynthMode::Practical => {
            let gamma = synthesis
                .gamma
                .ok_or_else(|| SimError::Model("saturated synthesis lacks gamma".into()))?;
            let gamma_star = synthesis.gamma_star.ok_or_else(|| {
                SimError::Model("saturated synthesis lacks the frozen decay rate".into())
            })?;
            let freeze = trace.freeze_index.ok_or_else(|| {
                SimError::Model("trace has no freeze sample for the saturated mode".into())
            })?;
            let t_f = trace.times[freeze];
            let ln_vf = trace.v[freeze].ln();
            let ln_env = trace
                .times
                .iter()
                .map(|&t| {
                    if t <= t_f {
                        gamma * ((horizon - t) / horizon).ln() + ln_v0
                    } else {
                        ln_vf - gamma_star * (t - t_f)
                    }
                })
                .collect();
            Ok(Some(DecayEnvelope {
                ln_env,
                kappa: gamma,
                kappa_post: Some(gamma_star),
                tau1: T::zero(),
                ln_m: T::zero(),
            }))
        }
    }
}

/// Check the run against its certified energy envelope, filling
/// `trace.bounds` and appending any violations.
pub fn monitor_lyapunov_decay<T: Real>(
    trace: &mut SimTrace<T>,
    synthesis: &SynthesisResult<T>,
    sched: &GainSchedule<T>,
    tol_rel: T,
) -> Result<MonitorReport<T>, SimError> {
    let envelope = decay_log_envelope(trace, synthesis, sched)?;
    trace.violations.retain(|v| v.monitor != MONITOR_DECAY);
    let Some(env) = envelope else {
        trace.bounds = vec![lit::<T>(f64::INFINITY); trace.len()];
        return Ok(MonitorReport {
            kappa: synthesis.gamma.unwrap_or(synthesis.kappa0_or_a),
            kappa_post: synthesis.gamma_star,
            tau1: T::zero(),
            m_overshoot: T::one(),
            growth_monitored: false,
            passed: true,
        });
    };
    let ln_tol = (T::one() + tol_rel).ln();
    trace.bounds = env.ln_env.iter().map(|&le| le.exp()).collect();
    let mut passed = true;
    for i in 0..trace.len() {
        let ln_v = trace.v[i].ln();
        let limit = env.ln_env[i] + ln_tol;
        if ln_v > limit {
            passed = false;
            trace.violations.push(Violation {
                time: trace.times[i],
                monitor: MONITOR_DECAY,
                margin: ln_v - limit,
            });
        }
    }
    Ok(MonitorReport {
        kappa: env.kappa,
        kappa_post: env.kappa_post,
        tau1: env.tau1,
        m_overshoot: env.ln_m.exp(),
        growth_monitored: true,
        passed,
    })
}

/// Check per-follower tracking errors: the scaled-norm reconstruction
/// identity always, the certified tracking envelope when growth rates are
/// declared, and the residual-set radius at the freeze instant in
/// saturated-gain mode.
pub fn monitor_tracking_bound<T: Real>(
    trace: &mut SimTrace<T>,
    synthesis: &SynthesisResult<T>,
    sched: &GainSchedule<T>,
    tol_rel: T,
) -> Result<TrackingReport<T>, SimError> {
    if trace.is_empty() {
        return Err(SimError::Model("trace has no samples".into()));
    }
    let envelope = decay_log_envelope(trace, synthesis, sched)?;
    trace
        .violations
        .retain(|v| v.monitor != MONITOR_IDENTITY && v.monitor != MONITOR_ENVELOPE && v.monitor != MONITOR_OMEGA);

    let nf = trace.n_followers;
    let mut per_agent = vec![true; nf];
    let identity_tol = T::one() + lit::<T>(IDENTITY_RTOL);
    let ln_tol = (T::one() + tol_rel).ln();

    // Norm floor of the energy function: V >= floor * |stack|^2 per block.
    let lambda_c = lambda_min_sym(&synthesis.p_c);
    let (lambda_floor, stack_factor) = match synthesis.mode {
        SynthMode::StateFeedback => (lambda_c, T::one()),
        _ => {
            let p_0 = synthesis
                .p_0
                .as_ref()
                .ok_or_else(|| SimError::Model("observer energy matrix missing".into()))?;
            let c = synthesis
                .c
                .ok_or_else(|| SimError::Model("observer energy weight missing".into()))?;
            let lambda_0 = c * lambda_min_sym(p_0);
            let floor = if lambda_c < lambda_0 { lambda_c } else { lambda_0 };
            (floor, lit::<T>(2.0))
        }
    };
    if lambda_floor <= T::zero() {
        return Err(SimError::Model(
            "energy function is not positive definite".into(),
        ));
    }
    let ln_floor = lambda_floor.ln();
    let ln_factor = stack_factor.ln();

    for i in 0..trace.len() {
        let t = trace.times[i];
        let r = sched.r(t)?;
        let eta_norm = trace.eta_hat[i].norm();
        let eps_norm = trace
            .epsilon
            .as_ref()
            .map(|e| e[i].norm())
            .unwrap_or_else(T::zero);
        let stack_bound = (eta_norm + eps_norm) / r;
        let x0 = &trace.states[i][0];
        for k in 1..=nf {
            let err = (&trace.states[i][k] - x0).norm();
            // the physical states are reconstructed through x_0, so the
            // difference carries absolute roundoff at the scale of x_0 itself
            let floor = lit::<T>(IDENTITY_ATOL) * (T::one() + x0.norm());
            let limit = stack_bound * identity_tol + floor;
            if err > limit {
                per_agent[k - 1] = false;
                trace.violations.push(Violation {
                    time: t,
                    monitor: MONITOR_IDENTITY,
                    margin: err - limit,
                });
            }
            if let Some(env) = &envelope {
                // |x_k - x_0| <= factor/r * sqrt(envelope/lambda_floor).
                let ln_limit =
                    ln_factor - r.ln() + (env.ln_env[i] - ln_floor) * lit::<T>(0.5) + ln_tol;
                if err > T::zero() && err.ln() > ln_limit {
                    per_agent[k - 1] = false;
                    trace.violations.push(Violation {
                        time: t,
                        monitor: MONITOR_ENVELOPE,
                        margin: err.ln() - ln_limit,
                    });
                }
            }
        }
    }

    let mut omega_radius = None;
    if synthesis.mode == SynthMode::Practical {
        if let Some(env) = &envelope {
            let freeze = trace.freeze_index.ok_or_else(|| {
                SimError::Model("trace has no freeze sample for the saturated mode".into())
            })?;
            let WarpMode::Practical { delta, .. } = sched.mode() else {
                return Err(SimError::Model(
                    "saturated synthesis paired with an unbounded schedule".into(),
                ));
            };
            // Residual radius: 2 delta sqrt(V(0)) (delta/(t_f+delta))^{gamma/2}
            //                   / (b sqrt(lambda_floor)).
            let ln_v0 = trace.v[0].ln();
            let gamma = env.kappa;
            let ln_omega = (lit::<T>(2.0) * delta).ln()
                + (ln_v0 + gamma * (delta / synthesis.horizon).ln()) * lit::<T>(0.5)
                - sched.b().ln()
                - ln_floor * lit::<T>(0.5);
            let omega = ln_omega.exp();
            omega_radius = Some(omega);
            let t_f = trace.times[freeze];
            let x0 = &trace.states[freeze][0];
            for k in 1..=nf {
                let err = (&trace.states[freeze][k] - x0).norm();
                if err > T::zero() && err.ln() > ln_omega + ln_tol {
                    per_agent[k - 1] = false;
                    trace.violations.push(Violation {
                        time: t_f,
                        monitor: MONITOR_OMEGA,
                        margin: err.ln() - (ln_omega + ln_tol),
                    });
                }
            }
        }
    }

    let passed = per_agent.iter().all(|&ok| ok);
    Ok(TrackingReport {
        per_agent,
        omega_radius,
        passed,
    })
}

/// True when every follower is within `tol` of the leader at the recorded
/// sample nearest to `t_query`.
pub fn check_consensus<T: Real>(
    trace: &SimTrace<T>,
    t_query: T,
    tol: T,
) -> Result<bool, SimError> {
    let i = trace.nearest_index(t_query)?;
    let x0 = &trace.states[i][0];
    for k in 1..=trace.n_followers {
        if (&trace.states[i][k] - x0).norm() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}
