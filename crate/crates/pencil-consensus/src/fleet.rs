//! Agent models, sensor models, the distributed protocols, and the
//! five-manipulator demo preset.
//!
//! Everything here evaluates in the physical time domain: per-agent control
//! laws exactly as the protocol definitions state them, observer injection,
//! and the full fleet right-hand side. The helpers at the bottom bridge to
//! the scaled error coordinates the analysis lives in, computing the scaled
//! rates both by the chain rule on the physical derivatives and from the
//! compact closed-loop form, so tests can check the two routes agree.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;
use crate::synthesis::SynthMode;
use crate::system::SystemMatrices;
use crate::topology::GraphTopology;
use crate::warp::GainSchedule;
use crate::{lit, Real};

/// Agent nonlinearity `F_k(t, x)`.
pub type DynamicsFn<T> = Arc<dyn Fn(T, &DVector<T>) -> DVector<T> + Send + Sync>;
/// Sensor sensitivity `theta_k(t)`.
pub type SensitivityFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// One agent: chain-of-integrators core, additive nonlinearity, and a
/// multiplicative sensor model on the first state component.
#[derive(Clone)]
pub struct AgentModel<T: Real> {
    index: usize,
    n: usize,
    nonlinearity: DynamicsFn<T>,
    sensitivity: SensitivityFn<T>,
    dtheta: T,
    growth_rates: Option<Vec<T>>,
    initial_state: DVector<T>,
}

impl<T: Real> AgentModel<T> {
    pub fn new(
        index: usize,
        n: usize,
        nonlinearity: DynamicsFn<T>,
        sensitivity: SensitivityFn<T>,
        dtheta: T,
        growth_rates: Option<Vec<T>>,
        initial_state: DVector<T>,
    ) -> Result<Self, SimError> {
        if n == 0 {
            return Err(SimError::Model("state dimension must be positive".into()));
        }
        if initial_state.len() != n {
            return Err(SimError::Model(format!(
                "agent {index}: initial state has {} entries, expected {n}",
                initial_state.len()
            )));
        }
        if dtheta < T::zero() || dtheta >= T::one() {
            return Err(SimError::Model(format!(
                "agent {index}: sensitivity error must lie in [0, 1), got {dtheta}"
            )));
        }
        if let Some(rates) = &growth_rates {
            if rates.len() != n {
                return Err(SimError::Model(format!(
                    "agent {index}: {} growth rates for dimension {n}",
                    rates.len()
                )));
            }
            if rates.iter().any(|&r| r < T::zero()) {
                return Err(SimError::Model(format!(
                    "agent {index}: growth rates must be nonnegative"
                )));
            }
        }
        Ok(Self {
            index,
            n,
            nonlinearity,
            sensitivity,
            dtheta,
            growth_rates,
            initial_state,
        })
    }

    /// Agent with no nonlinearity and an ideal sensor; the workhorse of
    /// equilibrium and linear-oracle tests.
    pub fn ideal(index: usize, n: usize, initial_state: DVector<T>) -> Result<Self, SimError> {
        Self::new(
            index,
            n,
            Arc::new(move |_t, _x: &DVector<T>| DVector::zeros(n)),
            Arc::new(|_t| T::one()),
            T::zero(),
            Some(vec![T::zero(); n]),
            initial_state,
        )
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonlinearity value `F_k(t, x)`.
    pub fn f(&self, t: T, x: &DVector<T>) -> DVector<T> {
        (self.nonlinearity)(t, x)
    }

    /// Sensor sensitivity `theta_k(t)`.
    pub fn theta(&self, t: T) -> T {
        (self.sensitivity)(t)
    }

    /// Measured output `y_k = theta_k(t) * x_1`.
    pub fn output(&self, t: T, x: &DVector<T>) -> T {
        self.theta(t) * x[0]
    }

    /// Declared bound on `|theta_k - 1|`.
    pub fn dtheta(&self) -> T {
        self.dtheta
    }

    pub fn growth_rates(&self) -> Option<&[T]> {
        self.growth_rates.as_deref()
    }

    pub fn initial_state(&self) -> &DVector<T> {
        &self.initial_state
    }
}

impl<T: Real> fmt::Debug for AgentModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentModel")
            .field("index", &self.index)
            .field("n", &self.n)
            .field("dtheta", &self.dtheta)
            .field("growth_rates", &self.growth_rates)
            .field("initial_state", &self.initial_state)
            .finish_non_exhaustive()
    }
}

/// Leader plus followers plus the follower communication graph.
#[derive(Debug, Clone)]
pub struct AgentFleet<T: Real> {
    leader: AgentModel<T>,
    followers: Vec<AgentModel<T>>,
    topology: GraphTopology<T>,
}

impl<T: Real> AgentFleet<T> {
    pub fn new(
        leader: AgentModel<T>,
        followers: Vec<AgentModel<T>>,
        topology: GraphTopology<T>,
    ) -> Result<Self, SimError> {
        if leader.index() != 0 {
            return Err(SimError::Model("leader must have index 0".into()));
        }
        if followers.is_empty() {
            return Err(SimError::Model("at least one follower required".into()));
        }
        for (i, agent) in followers.iter().enumerate() {
            if agent.index() != i + 1 {
                return Err(SimError::Model(format!(
                    "follower at position {i} has index {}, expected {}",
                    agent.index(),
                    i + 1
                )));
            }
            if agent.n() != leader.n() {
                return Err(SimError::Model(format!(
                    "follower {} has dimension {}, leader has {}",
                    agent.index(),
                    agent.n(),
                    leader.n()
                )));
            }
        }
        if topology.n_followers() != followers.len() {
            return Err(SimError::Model(format!(
                "topology has {} followers, fleet has {}",
                topology.n_followers(),
                followers.len()
            )));
        }
        Ok(Self {
            leader,
            followers,
            topology,
        })
    }

    pub fn n(&self) -> usize {
        self.leader.n()
    }

    pub fn n_followers(&self) -> usize {
        self.followers.len()
    }

    pub fn leader(&self) -> &AgentModel<T> {
        &self.leader
    }

    pub fn followers(&self) -> &[AgentModel<T>] {
        &self.followers
    }

    /// Agent by fleet index; 0 is the leader.
    pub fn agent(&self, k: usize) -> Result<&AgentModel<T>, SimError> {
        if k == 0 {
            Ok(&self.leader)
        } else {
            self.followers.get(k - 1).ok_or_else(|| {
                SimError::Dimension(format!(
                    "agent index {k} out of range for {} followers",
                    self.followers.len()
                ))
            })
        }
    }

    pub fn topology(&self) -> &GraphTopology<T> {
        &self.topology
    }

    /// Declared sensitivity errors of the followers, in fleet order.
    pub fn follower_dthetas(&self) -> Vec<T> {
        self.followers.iter().map(|a| a.dtheta()).collect()
    }

    /// Growth rates of all followers, or `None` if any follower lacks them.
    pub fn follower_growth_rates(&self) -> Option<Vec<Vec<T>>> {
        self.followers
            .iter()
            .map(|a| a.growth_rates().map(<[T]>::to_vec))
            .collect()
    }

    /// Fleet state at `t = 0`; observer states start at zero when requested.
    pub fn initial_state(&self, with_observers: bool) -> FleetState<T> {
        let mut x = Vec::with_capacity(self.n_followers() + 1);
        x.push(self.leader.initial_state().clone());
        for agent in &self.followers {
            x.push(agent.initial_state().clone());
        }
        let x_hat =
            with_observers.then(|| vec![DVector::zeros(self.n()); self.n_followers() + 1]);
        FleetState { t: T::zero(), x, x_hat }
    }
}

/// Snapshot of every agent's state (index 0 is the leader), with observer
/// states present in the output-feedback modes.
#[derive(Debug, Clone)]
pub struct FleetState<T: Real> {
    pub t: T,
    pub x: Vec<DVector<T>>,
    pub x_hat: Option<Vec<DVector<T>>>,
}

/// Physical-domain derivative of the whole fleet plus the inputs applied.
#[derive(Debug, Clone)]
pub struct FleetRates<T: Real> {
    /// `dx_k/dt`, index 0 is the leader.
    pub x_dot: Vec<DVector<T>>,
    /// `dx_hat_k/dt` in output-feedback modes.
    pub x_hat_dot: Option<Vec<DVector<T>>>,
    /// Inputs `u_k`; the leader's entry is always zero.
    pub inputs: Vec<T>,
}

/// Scaled error coordinates at one instant.
#[derive(Debug, Clone)]
pub struct ScaledErrors<T: Real> {
    /// True scaled errors, followers stacked: `eta_k = Lambda_r (x_k - x_0)`.
    pub eta: DVector<T>,
    /// Observer-relative scaled errors `eta_hat_k = Lambda_r (xhat_k - xhat_0)`.
    pub eta_hat: Option<DVector<T>>,
    /// Scaled estimation errors `epsilon_k = eta_k - eta_hat_k`.
    pub epsilon: Option<DVector<T>>,
    /// Leader's own scaled estimation error `Lambda_r (x_0 - xhat_0)`.
    pub epsilon_leader: Option<DVector<T>>,
}

/// Warped-time rates of the scaled error coordinates.
#[derive(Debug, Clone)]
pub struct ScaledRates<T: Real> {
    pub eta: DVector<T>,
    pub eta_hat: Option<DVector<T>>,
    pub epsilon: Option<DVector<T>>,
    pub epsilon_leader: Option<DVector<T>>,
}

fn check_state<T: Real>(
    state: &FleetState<T>,
    n: usize,
    n_followers: usize,
    need_observers: bool,
) -> Result<(), SimError> {
    if state.x.len() != n_followers + 1 {
        return Err(SimError::Dimension(format!(
            "fleet state has {} agents, expected {}",
            state.x.len(),
            n_followers + 1
        )));
    }
    for (k, x) in state.x.iter().enumerate() {
        if x.len() != n {
            return Err(SimError::Dimension(format!(
                "agent {k} state has {} entries, expected {n}",
                x.len()
            )));
        }
    }
    if let Some(hats) = &state.x_hat {
        if hats.len() != n_followers + 1 {
            return Err(SimError::Dimension(format!(
                "fleet state has {} observer states, expected {}",
                hats.len(),
                n_followers + 1
            )));
        }
        for (k, x) in hats.iter().enumerate() {
            if x.len() != n {
                return Err(SimError::Dimension(format!(
                    "agent {k} observer state has {} entries, expected {n}",
                    x.len()
                )));
            }
        }
    } else if need_observers {
        return Err(SimError::Dimension(
            "output-feedback evaluation requires observer states".into(),
        ));
    }
    Ok(())
}

/// `A x` for the chain-of-integrators core: shift every entry up one slot.
fn shift_apply<T: Real>(x: &DVector<T>) -> DVector<T> {
    let n = x.len();
    let mut out = DVector::zeros(n);
    for i in 0..n.saturating_sub(1) {
        out[i] = x[i + 1];
    }
    out
}

/// Neighborhood disagreement of follower `k`:
/// `sum_j a_kj (z_k - z_j) + pin_k (z_k - z_0)` over the supplied states.
fn neighborhood_error<T: Real>(
    k: usize,
    states: &[DVector<T>],
    topology: &GraphTopology<T>,
) -> Result<DVector<T>, SimError> {
    let n_f = topology.n_followers();
    if k == 0 || k > n_f {
        return Err(SimError::Dimension(format!(
            "follower index {k} out of range 1..={n_f}"
        )));
    }
    let adjacency = topology.adjacency();
    let n = states[k].len();
    let mut s = DVector::<T>::zeros(n);
    for j in 1..=n_f {
        let weight = adjacency[(k - 1, j - 1)];
        if weight != 0 {
            s += (&states[k] - &states[j]) * lit::<T>(weight as f64);
        }
    }
    if topology.pinning()[k - 1] != 0 {
        s += &states[k] - &states[0];
    }
    Ok(s)
}

fn scaled_gain_input<T: Real>(
    k: usize,
    states: &[DVector<T>],
    t: T,
    topology: &GraphTopology<T>,
    k_gain: &[T],
    sched: &GainSchedule<T>,
) -> Result<T, SimError> {
    let s = neighborhood_error(k, states, topology)?;
    if k_gain.len() != s.len() {
        return Err(SimError::Dimension(format!(
            "control gain has {} entries for dimension {}",
            k_gain.len(),
            s.len()
        )));
    }
    let lam = sched.scaling_diag(t)?;
    let mut u = T::zero();
    for i in 0..s.len() {
        u -= k_gain[i] * lam[i] * s[i];
    }
    Ok(u)
}

/// State-feedback input of follower `k`:
/// `u_k = -K Lambda_r (sum_j a_kj (x_k - x_j) + pin_k (x_k - x_0))`.
pub fn state_feedback_control<T: Real>(
    k: usize,
    state: &FleetState<T>,
    topology: &GraphTopology<T>,
    k_gain: &[T],
    sched: &GainSchedule<T>,
) -> Result<T, SimError> {
    check_state(state, k_gain.len(), topology.n_followers(), false)?;
    scaled_gain_input(k, &state.x, state.t, topology, k_gain, sched)
}

/// Output-feedback input of follower `k`: the same protocol evaluated on the
/// observer states.
pub fn output_feedback_control<T: Real>(
    k: usize,
    state: &FleetState<T>,
    topology: &GraphTopology<T>,
    k_gain: &[T],
    sched: &GainSchedule<T>,
) -> Result<T, SimError> {
    check_state(state, k_gain.len(), topology.n_followers(), true)?;
    let hats = state.x_hat.as_ref().expect("checked above");
    scaled_gain_input(k, hats, state.t, topology, k_gain, sched)
}

/// Observer derivative for agent `k`:
/// `A xhat + B u + r^(n+1) Lambda_r^{-1} G^T (y - xhat_1)`.
pub fn observer_step_rhs<T: Real>(
    k: usize,
    state: &FleetState<T>,
    u_k: T,
    y_k: T,
    g_gain: &[T],
    sched: &GainSchedule<T>,
) -> Result<DVector<T>, SimError> {
    let hats = state
        .x_hat
        .as_ref()
        .ok_or_else(|| SimError::Dimension("observer states absent".into()))?;
    let x_hat = hats.get(k).ok_or_else(|| {
        SimError::Dimension(format!("agent index {k} out of range for observers"))
    })?;
    let n = x_hat.len();
    if g_gain.len() != n {
        return Err(SimError::Dimension(format!(
            "observer gain has {} entries for dimension {n}",
            g_gain.len()
        )));
    }
    let mut rhs = shift_apply(x_hat);
    rhs[n - 1] += u_k;
    let innovation = y_k - x_hat[0];
    let injection = sched.injection_diag(state.t)?;
    for i in 0..n {
        rhs[i] += injection[i] * g_gain[i] * innovation;
    }
    Ok(rhs)
}

/// Physical-domain derivative of every agent under the selected protocol.
/// The leader is unforced; output-feedback modes also advance one observer
/// per agent, the leader's included, each driven by its own sensor.
pub fn fleet_rhs<T: Real>(
    fleet: &AgentFleet<T>,
    state: &FleetState<T>,
    mode: SynthMode,
    k_gain: &[T],
    g_gain: &[T],
    sched: &GainSchedule<T>,
) -> Result<FleetRates<T>, SimError> {
    let n = fleet.n();
    let n_f = fleet.n_followers();
    let with_observers = mode != SynthMode::StateFeedback;
    check_state(state, n, n_f, with_observers)?;
    let t = state.t;

    let mut inputs = vec![T::zero(); n_f + 1];
    for k in 1..=n_f {
        inputs[k] = if with_observers {
            output_feedback_control(k, state, fleet.topology(), k_gain, sched)?
        } else {
            state_feedback_control(k, state, fleet.topology(), k_gain, sched)?
        };
    }

    let mut x_dot = Vec::with_capacity(n_f + 1);
    for k in 0..=n_f {
        let x = &state.x[k];
        let mut rhs = shift_apply(x);
        rhs[n - 1] += inputs[k];
        rhs += fleet.agent(k)?.f(t, x);
        x_dot.push(rhs);
    }

    let x_hat_dot = if with_observers {
        let mut hats = Vec::with_capacity(n_f + 1);
        for k in 0..=n_f {
            let y = fleet.agent(k)?.output(t, &state.x[k]);
            hats.push(observer_step_rhs(k, state, inputs[k], y, g_gain, sched)?);
        }
        Some(hats)
    } else {
        None
    };

    Ok(FleetRates { x_dot, x_hat_dot, inputs })
}

/// Scaled error coordinates of a fleet state.
pub fn scaled_errors<T: Real>(
    fleet: &AgentFleet<T>,
    state: &FleetState<T>,
    sched: &GainSchedule<T>,
) -> Result<ScaledErrors<T>, SimError> {
    let n = fleet.n();
    let n_f = fleet.n_followers();
    check_state(state, n, n_f, false)?;
    let lam = sched.scaling_diag(state.t)?;
    let scale = |d: &DVector<T>| -> DVector<T> { d.component_mul(&lam) };

    let mut eta = DVector::<T>::zeros(n * n_f);
    for k in 1..=n_f {
        eta.rows_mut((k - 1) * n, n)
            .copy_from(&scale(&(&state.x[k] - &state.x[0])));
    }

    let (eta_hat, epsilon, epsilon_leader) = if let Some(hats) = &state.x_hat {
        let mut eta_hat = DVector::<T>::zeros(n * n_f);
        for k in 1..=n_f {
            eta_hat
                .rows_mut((k - 1) * n, n)
                .copy_from(&scale(&(&hats[k] - &hats[0])));
        }
        let epsilon = &eta - &eta_hat;
        let eps0 = scale(&(&state.x[0] - &hats[0]));
        (Some(eta_hat), Some(epsilon), Some(eps0))
    } else {
        (None, None, None)
    };

    Ok(ScaledErrors { eta, eta_hat, epsilon, epsilon_leader })
}

/// Stacked scaled nonlinearity deviation:
/// `Phi_k = diag(r^(n-1), ..., 1) (F_k(t, x_k) - F_0(t, x_0))`.
pub fn growth_deviation_stack<T: Real>(
    fleet: &AgentFleet<T>,
    state: &FleetState<T>,
    sched: &GainSchedule<T>,
) -> Result<DVector<T>, SimError> {
    let n = fleet.n();
    let n_f = fleet.n_followers();
    check_state(state, n, n_f, false)?;
    let t = state.t;
    let r = sched.r(t)?;
    let weights = sched.scaling_diag(t)? / r;
    let f_leader = fleet.leader().f(t, &state.x[0]);
    let mut phi = DVector::<T>::zeros(n * n_f);
    for k in 1..=n_f {
        let dev = (fleet.agent(k)?.f(t, &state.x[k]) - &f_leader).component_mul(&weights);
        phi.rows_mut((k - 1) * n, n).copy_from(&dev);
    }
    Ok(phi)
}

/// Compact closed-loop rate of the true scaled error under state feedback:
/// `d eta / d tau = b (A_c eta + Phi) + D eta` (the dilation term drops out
/// after the practical-mode freeze).
pub fn consensus_rate_compact<T: Real>(
    sys: &SystemMatrices<T>,
    sched: &GainSchedule<T>,
    t: T,
    eta: &DVector<T>,
    phi: &DVector<T>,
) -> Result<DVector<T>, SimError> {
    if eta.len() != sys.a_c().nrows() || phi.len() != eta.len() {
        return Err(SimError::Dimension(format!(
            "scaled state has {} entries, system expects {}",
            eta.len(),
            sys.a_c().nrows()
        )));
    }
    let b = sched.b();
    let dilation = sched.dilation_factor(t)?;
    let mut rate = (sys.a_c() * eta + phi) * b;
    rate += sys.d_blk() * eta * dilation;
    Ok(rate)
}

/// Compact closed-loop rates of the observer coordinates under output
/// feedback, in the form the convergence analysis uses: the sensor enters
/// through `theta_k` only, relative deviations of the leader's own sensor
/// are not modeled here.
pub fn output_feedback_rates_compact<T: Real>(
    sys: &SystemMatrices<T>,
    fleet: &AgentFleet<T>,
    sched: &GainSchedule<T>,
    t: T,
    errors: &ScaledErrors<T>,
    phi: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>), SimError> {
    let n = fleet.n();
    let n_f = fleet.n_followers();
    let (eta_hat, epsilon) = match (&errors.eta_hat, &errors.epsilon) {
        (Some(h), Some(e)) => (h, e),
        _ => {
            return Err(SimError::Dimension(
                "output-feedback rates require observer coordinates".into(),
            ))
        }
    };
    let b = sched.b();
    let dilation = sched.dilation_factor(t)?;
    let lbar = fleet.topology().lbar();
    let k_gain = sys.k_gain();
    let g_gain = sys.g_gain();

    let mut d_eta_hat = DVector::<T>::zeros(n * n_f);
    let mut d_epsilon = DVector::<T>::zeros(n * n_f);
    for k in 1..=n_f {
        let hk = eta_hat.rows((k - 1) * n, n);
        let ek = epsilon.rows((k - 1) * n, n);
        let theta = fleet.agent(k)?.theta(t);

        // u_k = -(row_k(Lbar) (x) K) eta_hat
        let mut u = T::zero();
        for j in 1..=n_f {
            let w = lbar[(k - 1, j - 1)];
            if w != T::zero() {
                let hj = eta_hat.rows((j - 1) * n, n);
                for i in 0..n {
                    u -= w * k_gain[i] * hj[i];
                }
            }
        }

        let injected = theta * ek[0] + (theta - T::one()) * hk[0];
        let mut dh = shift_apply(&hk.clone_owned());
        dh[n - 1] += u;
        for i in 0..n {
            dh[i] += g_gain[i] * injected;
        }
        dh *= b;
        for i in 0..n {
            dh[i] += dilation * lit::<T>((n - i) as f64) * hk[i];
        }
        d_eta_hat.rows_mut((k - 1) * n, n).copy_from(&dh);

        let rejected = ek[0] + (theta - T::one()) * (hk[0] + ek[0]);
        let mut de = shift_apply(&ek.clone_owned());
        for i in 0..n {
            de[i] += phi[(k - 1) * n + i] - g_gain[i] * rejected;
        }
        de *= b;
        for i in 0..n {
            de[i] += dilation * lit::<T>((n - i) as f64) * ek[i];
        }
        d_epsilon.rows_mut((k - 1) * n, n).copy_from(&de);
    }
    Ok((d_eta_hat, d_epsilon))
}

/// Warped-time rates of the scaled errors obtained by the chain rule on the
/// definitions: differentiate `Lambda_r (x_k - x_0)` along the physical
/// fleet derivative. This route keeps every sensor term, including the
/// relative deviation of the leader's own sensor.
pub fn scaled_rates_by_definition<T: Real>(
    fleet: &AgentFleet<T>,
    state: &FleetState<T>,
    mode: SynthMode,
    k_gain: &[T],
    g_gain: &[T],
    sched: &GainSchedule<T>,
) -> Result<ScaledRates<T>, SimError> {
    let n = fleet.n();
    let n_f = fleet.n_followers();
    let t = state.t;
    let rates = fleet_rhs(fleet, state, mode, k_gain, g_gain, sched)?;
    let errors = scaled_errors(fleet, state, sched)?;

    let b = sched.b();
    let r = sched.r(t)?;
    let dilation = sched.dilation_factor(t)?;
    // Lambda_r * dt/dtau = Lambda_r * b / r
    let lam_dt = sched.scaling_diag(t)? * (b / r);
    let dil = |z: &DVector<T>, k: usize, out: &mut DVector<T>| {
        for i in 0..n {
            out[(k - 1) * n + i] += dilation * lit::<T>((n - i) as f64) * z[(k - 1) * n + i];
        }
    };

    let mut d_eta = DVector::<T>::zeros(n * n_f);
    for k in 1..=n_f {
        let v = (&rates.x_dot[k] - &rates.x_dot[0]).component_mul(&lam_dt);
        d_eta.rows_mut((k - 1) * n, n).copy_from(&v);
        dil(&errors.eta, k, &mut d_eta);
    }

    let (d_eta_hat, d_epsilon, d_eps_leader) = if let Some(hat_dot) = &rates.x_hat_dot {
        let eta_hat = errors.eta_hat.as_ref().expect("observers present");
        let eps_leader = errors.epsilon_leader.as_ref().expect("observers present");
        let mut dh = DVector::<T>::zeros(n * n_f);
        for k in 1..=n_f {
            let v = (&hat_dot[k] - &hat_dot[0]).component_mul(&lam_dt);
            dh.rows_mut((k - 1) * n, n).copy_from(&v);
            dil(eta_hat, k, &mut dh);
        }
        let de = &d_eta - &dh;
        let mut d0 = (&rates.x_dot[0] - &hat_dot[0]).component_mul(&lam_dt);
        for i in 0..n {
            d0[i] += dilation * lit::<T>((n - i) as f64) * eps_leader[i];
        }
        (Some(dh), Some(de), Some(d0))
    } else {
        (None, None, None)
    };

    Ok(ScaledRates {
        eta: d_eta,
        eta_hat: d_eta_hat,
        epsilon: d_epsilon,
        epsilon_leader: d_eps_leader,
    })
}

/// Worst violation of the incremental growth bound for follower `k` against
/// a leader state: `max_i (|F_k,i(t,x) - F_0,i(t,x_0)| - sum_{j<=i}
/// rho_j |x_j - x_0j|)`. Nonpositive means the bound holds at this pair.
/// The bound is relative to states the leader actually visits; it need not
/// hold for arbitrary reference points.
pub fn growth_bound_slack<T: Real>(
    fleet: &AgentFleet<T>,
    k: usize,
    t: T,
    x_k: &DVector<T>,
    x_0: &DVector<T>,
) -> Result<T, SimError> {
    let agent = fleet.agent(k)?;
    if k == 0 {
        return Err(SimError::Dimension("leader has no growth bound".into()));
    }
    let rates = agent
        .growth_rates()
        .ok_or_else(|| SimError::Model(format!("agent {k} has no declared growth rates")))?;
    let n = fleet.n();
    if x_k.len() != n || x_0.len() != n {
        return Err(SimError::Dimension(format!(
            "growth check states must have {n} entries"
        )));
    }
    let dev = agent.f(t, x_k) - fleet.leader().f(t, x_0);
    let mut worst = lit::<T>(f64::NEG_INFINITY);
    let mut budget = T::zero();
    for i in 0..n {
        budget += rates[i] * (x_k[i] - x_0[i]).abs();
        worst = worst.max(dev[i].abs() - budget);
    }
    Ok(worst)
}

/// The five-manipulator demo: one leader and four followers on a path graph
/// with the first follower pinned, plus the gains the demo uses.
#[derive(Debug, Clone)]
pub struct ManipulatorPreset<T: Real> {
    pub fleet: AgentFleet<T>,
    pub k_gain: Vec<T>,
    pub g_gain: Vec<T>,
}

const MANIPULATOR_INERTIA: [f64; 5] = [8.5, 10.0, 10.0, 10.0, 8.5];
const MANIPULATOR_DAMPING: [f64; 5] = [1.4, 1.6, 1.6, 1.4, 1.6];
const MANIPULATOR_MASS: [f64; 5] = [1.3, 1.0, 1.3, 1.0, 1.0];
const MANIPULATOR_HEIGHT: [f64; 5] = [1.0, 1.0, 0.8, 1.2, 1.2];
const GRAVITY: f64 = 9.8;
/// Sensor fluctuation amplitudes of the deterministic demo.
const MANIPULATOR_KAPPAS: [f64; 5] = [0.0, 0.08, 0.09, -0.08, -0.09];
/// Declared sensitivity error bounds; seeded draws stay inside them.
const MANIPULATOR_DTHETA: [f64; 5] = [0.0, 0.08, 0.09, 0.08, 0.09];
/// Growth rates covering every follower's deviation from the leader's
/// rest trajectory: max |B_k/J_k| = 0.1883 <= 0.19 on the velocity and
/// max |m_k g h_k / J_k| = 1.384 <= 1.8 on the position channel.
const MANIPULATOR_GROWTH: [f64; 2] = [1.8, 0.19];
pub const MANIPULATOR_K_GAIN: [f64; 2] = [8.0, 9.0];
pub const MANIPULATOR_G_GAIN: [f64; 2] = [2.0, 2.0];

fn manipulator_agent<T: Real>(index: usize, kappa: f64) -> AgentModel<T> {
    let inertia = lit::<T>(MANIPULATOR_INERTIA[index]);
    let damping = lit::<T>(MANIPULATOR_DAMPING[index]);
    let torque =
        lit::<T>(MANIPULATOR_MASS[index] * GRAVITY * MANIPULATOR_HEIGHT[index]);
    let nonlinearity: DynamicsFn<T> = Arc::new(move |_t, x: &DVector<T>| {
        DVector::from_vec(vec![
            T::zero(),
            -damping * x[1] / inertia - torque * (x[0] / inertia).sin(),
        ])
    });
    let kap = lit::<T>(kappa);
    let pulse = lit::<T>(10.0);
    let sensitivity: SensitivityFn<T> =
        Arc::new(move |t: T| T::one() + kap * (pulse * t).sin().abs());
    let growth =
        (index > 0).then(|| MANIPULATOR_GROWTH.iter().map(|&r| lit::<T>(r)).collect());
    let offset = lit::<T>(index as f64);
    AgentModel::new(
        index,
        2,
        nonlinearity,
        sensitivity,
        lit::<T>(MANIPULATOR_DTHETA[index]),
        growth,
        DVector::from_vec(vec![offset, offset]),
    )
    .expect("preset parameters are valid")
}

fn manipulator_with_kappas<T: Real>(kappas: &[f64; 5]) -> ManipulatorPreset<T> {
    let leader = manipulator_agent(0, kappas[0]);
    let followers = (1..5).map(|k| manipulator_agent(k, kappas[k])).collect();
    let topology = GraphTopology::path_with_root_pin(4).expect("path graph is valid");
    ManipulatorPreset {
        fleet: AgentFleet::new(leader, followers, topology).expect("preset fleet is valid"),
        k_gain: MANIPULATOR_K_GAIN.iter().map(|&k| lit::<T>(k)).collect(),
        g_gain: MANIPULATOR_G_GAIN.iter().map(|&g| lit::<T>(g)).collect(),
    }
}

/// The demo fleet with its published sensor amplitudes.
pub fn manipulator_preset<T: Real>() -> ManipulatorPreset<T> {
    manipulator_with_kappas(&MANIPULATOR_KAPPAS)
}

/// The demo fleet with sensor amplitudes drawn uniformly inside the declared
/// bounds; the same seed always produces the same fleet.
pub fn manipulator_preset_seeded<T: Real>(seed: u64) -> ManipulatorPreset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kappas = [0.0f64; 5];
    for k in 1..5 {
        let bound = MANIPULATOR_DTHETA[k];
        kappas[k] = rng.random_range(-bound..=bound);
    }
    manipulator_with_kappas(&kappas)
}
