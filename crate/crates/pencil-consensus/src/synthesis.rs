//! Matrix-pencil synthesis of the consensus and observer weighting matrices
//! plus every scalar constant the closed-loop analysis needs, together with
//! machine-checkable certificates of the block inequalities behind them.
//!
//! Three entry points share one pipeline:
//! - state feedback: consensus weight only,
//! - output feedback: adds the observer weight, the coupling constant c and
//!   the sensitivity admissibility test,
//! - bounded gain ("practical"): output feedback with the decay rate enforced
//!   above the growth coupling so the gain can freeze at a finite level.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::SynthesisError;
use crate::pencil::{
    classify_definiteness, elementwise_abs, lambda_max_sym, pencil_threshold_max,
    pencil_threshold_min, solve_lyapunov, solve_lyapunov_pair, spectral_norm, symmetric_part,
    DefinitenessTag, Pencil,
};
use crate::system::SystemMatrices;
use crate::{lit, Real};

/// Strictness factor on the consensus Lyapunov right-hand side in the
/// observer modes; keeps the decay pencil denominator strictly definite.
pub const LYAPUNOV_STRICTNESS: f64 = 1.01;

/// A certificate passes when lambda_max <= CERT_RTOL * (1 + spectral norm).
pub const CERT_RTOL: f64 = 1e-7;

/// Default margin by which the bounded-gain decay rate clears the growth
/// coupling term.
pub const DEFAULT_KAPPA_MARGIN: f64 = 0.5;

/// Largest power of two tried when rescaling the observer weight to shrink
/// the growth coupling constant.
const DYADIC_SWEEP_MAX_EXP: i32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    StateFeedback,
    OutputFeedback,
    Practical,
}

impl std::fmt::Display for SynthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SynthMode::StateFeedback => "state_feedback",
            SynthMode::OutputFeedback => "output_feedback",
            SynthMode::Practical => "practical",
        };
        write!(f, "{}", s)
    }
}

/// One verified linear matrix inequality: `matrix` must be negative
/// semidefinite up to roundoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Serialize",
    deserialize = "T: serde::de::DeserializeOwned"
))]
pub struct Certificate<T: Real> {
    pub name: String,
    pub matrix: DMatrix<T>,
    pub lambda_max: T,
}

impl<T: Real> Certificate<T> {
    /// Symmetrizes and records the largest eigenvalue of the given matrix.
    pub fn check(name: &str, matrix: DMatrix<T>) -> Self {
        let sym = symmetric_part(&matrix);
        let lambda_max = lambda_max_sym(&sym);
        Certificate {
            name: name.to_string(),
            matrix: sym,
            lambda_max,
        }
    }

    pub fn tolerance(&self) -> T {
        lit::<T>(CERT_RTOL) * (T::one() + spectral_norm(&self.matrix))
    }

    pub fn passes(&self) -> bool {
        self.lambda_max <= self.tolerance()
    }
}

/// Everything the synthesis produces: the weights, the scalar constants and
/// the certificate list. Scalar slots are shared across modes; the first
/// kappa is the decay offset, the second the energy-level growth constant,
/// the third the absorption-level growth constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Serialize",
    deserialize = "T: serde::de::DeserializeOwned"
))]
pub struct SynthesisResult<T: Real> {
    pub mode: SynthMode,
    pub n: usize,
    pub n_followers: usize,
    pub p_c: DMatrix<T>,
    pub p_0: Option<DMatrix<T>>,
    pub c: Option<T>,
    pub b: T,
    pub kappa0_or_a: T,
    pub kappa1_or_b: T,
    pub kappa2_or_btilde: T,
    pub delta_ac: T,
    pub delta_a0: Option<T>,
    pub admissible_dtheta: T,
    pub gamma: Option<T>,
    pub gamma_star: Option<T>,
    pub horizon: T,
    pub observer_scale: Option<T>,
    pub growth_known: bool,
    pub certificates: Vec<Certificate<T>>,
}

impl<T: Real> SynthesisResult<T> {
    pub fn certificate(&self, name: &str) -> Option<&Certificate<T>> {
        self.certificates.iter().find(|c| c.name == name)
    }

    pub fn certificates_pass(&self) -> bool {
        self.certificates.iter().all(|c| c.passes())
    }

    pub fn failing_certificates(&self) -> Vec<&str> {
        self.certificates
            .iter()
            .filter(|c| !c.passes())
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Raw ingredients for re-deriving the certificate list from stored weights
/// and scalars, without re-running any pencil computation.
pub struct CertificateInputs<'a, T: Real> {
    pub sys: &'a SystemMatrices<T>,
    pub mode: SynthMode,
    pub p_c: &'a DMatrix<T>,
    pub p_0: Option<&'a DMatrix<T>>,
    pub c: Option<T>,
    pub b: T,
    pub kappa0_or_a: T,
    pub kappa1_or_b: T,
    pub kappa2_or_btilde: T,
    pub delta_ac: T,
    pub delta_a0: Option<T>,
    pub gamma: Option<T>,
    pub gamma_star: Option<T>,
    pub c1: Option<T>,
    pub max_dtheta: Option<T>,
    pub sat_width: Option<T>,
}

fn diag_of<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_diagonal(&m.diagonal())
}

fn gram<T: Real>(p: &DMatrix<T>, a: &DMatrix<T>) -> DMatrix<T> {
    p * a + a.transpose() * p
}

fn block_diag2<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let (m, n) = (a.nrows(), b.nrows());
    let mut out = DMatrix::<T>::zeros(m + n, m + n);
    out.view_mut((0, 0), (m, m)).copy_from(a);
    out.view_mut((m, m), (n, n)).copy_from(b);
    out
}

fn block_2x2<T: Real>(
    tl: &DMatrix<T>,
    tr: &DMatrix<T>,
    bl: &DMatrix<T>,
    br: &DMatrix<T>,
) -> DMatrix<T> {
    let m = tl.nrows();
    let n = br.nrows();
    let mut out = DMatrix::<T>::zeros(m + n, m + n);
    out.view_mut((0, 0), (m, m)).copy_from(tl);
    out.view_mut((0, m), (m, n)).copy_from(tr);
    out.view_mut((m, 0), (n, m)).copy_from(bl);
    out.view_mut((m, m), (n, n)).copy_from(br);
    out
}

fn require_spd<T: Real>(p: &DMatrix<T>, which: &'static str) -> Result<(), SynthesisError> {
    let class = classify_definiteness(p).map_err(SynthesisError::Pencil)?;
    if class.tag != DefinitenessTag::SymmetricPositiveDefinite {
        return Err(SynthesisError::BadParameter(format!(
            "{} weight lost positive definiteness (min eigenvalue {})",
            which,
            class.min_eig.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

/// Entrywise absolute value of the scaled sensor coupling |P_c A_g| times
/// the worst declared sensitivity deviation.
fn coupling_abs<T: Real>(
    p_c: &DMatrix<T>,
    a_g: &DMatrix<T>,
    max_dtheta: T,
) -> DMatrix<T> {
    elementwise_abs(&(p_c * a_g)) * (T::one() + max_dtheta)
}

/// Rebuilds every certificate matrix from stored weights and scalars.
pub fn assemble_certificates<T: Real>(
    inp: &CertificateInputs<'_, T>,
) -> Result<Vec<Certificate<T>>, SynthesisError> {
    let sys = inp.sys;
    let nn = sys.n() * sys.n_followers();
    let eye = DMatrix::<T>::identity(nn, nn);
    let gram_c = gram(inp.p_c, sys.a_c());
    let pairing_c = inp.p_c * sys.d_blk() + sys.d_blk() * inp.p_c;
    let a_bar_c = diag_of(&gram_c);
    let mut certs = Vec::new();

    certs.push(Certificate::check(
        "consensus_diag_bound",
        &gram_c - &a_bar_c * inp.delta_ac,
    ));

    match inp.mode {
        SynthMode::StateFeedback => {
            certs.push(Certificate::check("consensus_contraction", &gram_c + &eye));
            certs.push(Certificate::check("dilation_pairing", &eye - &pairing_c));
            let q1 = &pairing_c + inp.p_c * inp.kappa0_or_a;
            certs.push(Certificate::check("warped_decay", &q1 + &gram_c * inp.b));
            if let Some(a_rho) = sys.a_rho() {
                let abs_pc = elementwise_abs(inp.p_c);
                let growth = a_rho.transpose() * &abs_pc + &abs_pc * a_rho;
                let p_bar = diag_of(inp.p_c);
                certs.push(Certificate::check(
                    "growth_absorption",
                    &growth - &p_bar * inp.kappa2_or_btilde,
                ));
                certs.push(Certificate::check(
                    "growth_to_energy",
                    &p_bar * inp.kappa2_or_btilde - inp.p_c * inp.kappa1_or_b,
                ));
            }
        }
        SynthMode::OutputFeedback | SynthMode::Practical => {
            let p_0 = inp.p_0.ok_or_else(|| {
                SynthesisError::BadParameter("observer weight missing".into())
            })?;
            let c = inp.c.ok_or_else(|| {
                SynthesisError::BadParameter("coupling constant missing".into())
            })?;
            let c1 = inp.c1.ok_or_else(|| {
                SynthesisError::BadParameter("contraction split c1 missing".into())
            })?;
            let max_dtheta = inp.max_dtheta.ok_or_else(|| {
                SynthesisError::BadParameter("sensitivity deviation missing".into())
            })?;
            let delta_a0 = inp.delta_a0.ok_or_else(|| {
                SynthesisError::BadParameter("observer diagonal bound missing".into())
            })?;
            let gram_0 = gram(p_0, sys.a_0());
            let pairing_0 = p_0 * sys.d_blk() + sys.d_blk() * p_0;
            let a_bar_0 = diag_of(&gram_0);

            certs.push(Certificate::check(
                "observer_diag_bound",
                &gram_0 - &a_bar_0 * delta_a0,
            ));
            certs.push(Certificate::check("observer_contraction", &gram_0 + &eye));
            certs.push(Certificate::check(
                "observer_dilation_pairing",
                &eye - &pairing_0,
            ));
            certs.push(Certificate::check(
                "scaled_consensus_contraction",
                &gram_c * c1 + &eye * lit::<T>(2.0),
            ));

            let p_eps = coupling_abs(inp.p_c, sys.a_g(), max_dtheta);
            let one_minus_c1 = T::one() - c1;
            let w_obs = &a_bar_0 * (one_minus_c1 * delta_a0);
            let m_con = &a_bar_c * (one_minus_c1 * inp.delta_ac);
            let zero = DMatrix::<T>::zeros(nn, nn);
            let q_c1 = block_2x2(&w_obs, &zero, &zero, &zero);
            let q_c2 = block_2x2(&zero, &p_eps.transpose(), &p_eps, &m_con);
            certs.push(Certificate::check("coupling_weight", &q_c1 * c + &q_c2));

            let q_b1 = block_diag2(&(&gram_0 * (c1 * c)), &(&gram_c * c1 + &eye * lit::<T>(2.0)));
            match inp.mode {
                SynthMode::OutputFeedback => {
                    let q_b2 = block_diag2(
                        &((&pairing_0 + p_0 * inp.kappa0_or_a) * c),
                        &(&pairing_c + inp.p_c * inp.kappa0_or_a),
                    );
                    certs.push(Certificate::check("warped_decay", &q_b2 + &q_b1 * inp.b));
                }
                SynthMode::Practical => {
                    let sat_width = inp.sat_width.ok_or_else(|| {
                        SynthesisError::BadParameter("saturation width missing".into())
                    })?;
                    let q_b2s = block_diag2(
                        &(p_0 * (c * inp.kappa0_or_a)),
                        &(inp.p_c * inp.kappa0_or_a),
                    );
                    certs.push(Certificate::check(
                        "saturated_decay",
                        &q_b2s + &q_b1 * inp.b,
                    ));
                    certs.push(Certificate::check(
                        "frozen_phase_decay",
                        &q_b2s + &q_b1 * (inp.b / sat_width),
                    ));
                    let gamma = inp.gamma.ok_or_else(|| {
                        SynthesisError::BadParameter("decay margin missing".into())
                    })?;
                    let gamma_star = inp.gamma_star.ok_or_else(|| {
                        SynthesisError::BadParameter("frozen decay margin missing".into())
                    })?;
                    certs.push(Certificate::check(
                        "decay_margin",
                        DMatrix::from_element(1, 1, -gamma),
                    ));
                    certs.push(Certificate::check(
                        "frozen_decay_margin",
                        DMatrix::from_element(1, 1, -gamma_star),
                    ));
                }
                SynthMode::StateFeedback => unreachable!(),
            }

            if let Some(a_rho) = sys.a_rho() {
                let abs_p0 = elementwise_abs(p_0);
                let growth = &abs_p0 * a_rho;
                let q_kb = block_2x2(
                    &(&growth + growth.transpose()),
                    &growth,
                    &growth.transpose(),
                    &zero,
                ) * c;
                let p_bar_0 = diag_of(p_0);
                let p_bar_c = diag_of(inp.p_c);
                let q_ka = block_diag2(&(-&p_bar_0), &(-&p_bar_c));
                certs.push(Certificate::check(
                    "growth_absorption",
                    &q_kb + &q_ka * inp.kappa2_or_btilde,
                ));
                let q_kd = block_diag2(&p_bar_0, &p_bar_c) * inp.kappa2_or_btilde;
                let q_kc = block_diag2(&(-(p_0 * c)), &(-inp.p_c.clone()));
                certs.push(Certificate::check(
                    "growth_to_energy",
                    &q_kd + &q_kc * inp.kappa1_or_b,
                ));
            }
        }
    }
    Ok(certs)
}

/// State-feedback synthesis: consensus weight, proportional coefficient and
/// (when growth rates are known) the two growth constants.
pub fn synthesize_state_feedback<T: Real>(
    sys: &SystemMatrices<T>,
    kappa0: T,
    horizon: T,
) -> Result<SynthesisResult<T>, SynthesisError> {
    if kappa0 <= T::zero() {
        return Err(SynthesisError::BadParameter(
            "decay offset must be positive".into(),
        ));
    }
    if horizon <= T::zero() {
        return Err(SynthesisError::BadParameter(
            "horizon must be positive".into(),
        ));
    }

    let p_c = solve_lyapunov_pair(sys.a_c(), sys.d_blk(), T::one())?;
    require_spd(&p_c, "consensus")?;
    let gram_c = gram(&p_c, sys.a_c());
    let pairing_c = &p_c * sys.d_blk() + sys.d_blk() * &p_c;

    let q1 = &pairing_c + &p_c * kappa0;
    let b_pencil = pencil_threshold_max(&Pencil::new(q1, -&gram_c)?)?;
    let b = if b_pencil > horizon { b_pencil } else { horizon };

    let a_bar_c = diag_of(&gram_c);
    let delta_ac = pencil_threshold_min(&Pencil::new(gram_c.clone(), a_bar_c)?)?;

    let (kappa2, kappa1) = match sys.a_rho() {
        None => (T::zero(), T::zero()),
        Some(a_rho) => {
            let abs_pc = elementwise_abs(&p_c);
            let growth = a_rho.transpose() * &abs_pc + &abs_pc * a_rho;
            let p_bar = diag_of(&p_c);
            let kappa2 = pencil_threshold_max(&Pencil::new(growth, p_bar.clone())?)?;
            let kappa1 = pencil_threshold_max(&Pencil::new(&p_bar * kappa2, p_c.clone())?)?;
            (kappa2, kappa1)
        }
    };

    let admissible_dtheta = T::one() / spectral_norm(&(&p_c * sys.a_g()));

    let mut result = SynthesisResult {
        mode: SynthMode::StateFeedback,
        n: sys.n(),
        n_followers: sys.n_followers(),
        p_c,
        p_0: None,
        c: None,
        b,
        kappa0_or_a: kappa0,
        kappa1_or_b: kappa1,
        kappa2_or_btilde: kappa2,
        delta_ac,
        delta_a0: None,
        admissible_dtheta,
        gamma: None,
        gamma_star: None,
        horizon,
        observer_scale: None,
        growth_known: sys.a_rho().is_some(),
        certificates: Vec::new(),
    };
    result.certificates = assemble_certificates(&CertificateInputs {
        sys,
        mode: SynthMode::StateFeedback,
        p_c: &result.p_c,
        p_0: None,
        c: None,
        b,
        kappa0_or_a: kappa0,
        kappa1_or_b: kappa1,
        kappa2_or_btilde: kappa2,
        delta_ac,
        delta_a0: None,
        gamma: None,
        gamma_star: None,
        c1: None,
        max_dtheta: None,
        sat_width: None,
    })?;
    Ok(result)
}

/// Shared observer-mode pipeline up to the growth coupling constant.
struct ObserverCore<T: Real> {
    p_c: DMatrix<T>,
    gram_c: DMatrix<T>,
    pairing_c: DMatrix<T>,
    p_0: DMatrix<T>,
    gram_0: DMatrix<T>,
    pairing_0: DMatrix<T>,
    delta_ac: T,
    delta_a0: T,
    c: T,
    kappa_tilde_b: T,
    kappa_b: T,
    observer_scale: T,
    admissible: T,
    max_dtheta: T,
}

fn observer_core<T: Real>(
    sys: &SystemMatrices<T>,
    c1: T,
    dtheta: &[T],
) -> Result<ObserverCore<T>, SynthesisError> {
    if c1 <= T::zero() || c1 >= T::one() {
        return Err(SynthesisError::BadParameter(
            "contraction split c1 must lie strictly between 0 and 1".into(),
        ));
    }
    if dtheta.len() != sys.n_followers() {
        return Err(SynthesisError::BadParameter(format!(
            "sensitivity deviations given for {} agents, expected {}",
            dtheta.len(),
            sys.n_followers()
        )));
    }
    for (k, &d) in dtheta.iter().enumerate() {
        if d < T::zero() || d >= T::one() {
            return Err(SynthesisError::BadParameter(format!(
                "sensitivity deviation of follower {} must lie in [0, 1)",
                k + 1
            )));
        }
    }
    let max_dtheta = dtheta
        .iter()
        .copied()
        .fold(T::zero(), |a, b| if b > a { b } else { a });

    let strict = lit::<T>(LYAPUNOV_STRICTNESS);
    let p_c = solve_lyapunov(sys.a_c(), lit::<T>(2.0) / c1 * strict)?;
    require_spd(&p_c, "consensus")?;
    let gram_c = gram(&p_c, sys.a_c());
    let pairing_c = &p_c * sys.d_blk() + sys.d_blk() * &p_c;

    let admissible = T::one() / spectral_norm(&(&p_c * sys.a_g()));
    if max_dtheta > admissible {
        return Err(SynthesisError::SensitivityInadmissible {
            max_dtheta: max_dtheta.to_f64().unwrap_or(f64::NAN),
            admissible: admissible.to_f64().unwrap_or(f64::NAN),
        });
    }

    let p_0_base = solve_lyapunov_pair(sys.a_0(), sys.d_blk(), T::one())?;
    require_spd(&p_0_base, "observer")?;

    let a_bar_c = diag_of(&gram_c);
    let delta_ac = pencil_threshold_min(&Pencil::new(gram_c.clone(), a_bar_c.clone())?)?;

    let p_eps = coupling_abs(&p_c, sys.a_g(), max_dtheta);
    let one_minus_c1 = T::one() - c1;
    // Schur complement of the coupling inequality: the lower-right block is
    // inverted exactly (diagonal), leaving an SPD-vs-SPD threshold pencil.
    let m_con_diag = (&a_bar_c * (one_minus_c1 * delta_ac)).diagonal();
    let inv_neg_m = DMatrix::<T>::from_diagonal(&m_con_diag.map(|v| -T::one() / v));
    let schur = symmetric_part(&(p_eps.transpose() * &inv_neg_m * &p_eps));

    // Observer weight rescaling: every power of two keeps the contraction
    // and pairing inequalities valid; pick the one minimizing the growth
    // coupling constant (the weakest link of the decay estimate).
    let mut chosen: Option<(T, T, T, T, T)> = None;
    for j in 0..=DYADIC_SWEEP_MAX_EXP {
        let s = lit::<T>(2f64.powi(j));
        let p_0 = &p_0_base * s;
        let gram_0 = gram(&p_0, sys.a_0());
        let a_bar_0 = diag_of(&gram_0);
        let delta_a0 = pencil_threshold_min(&Pencil::new(gram_0.clone(), a_bar_0.clone())?)?;
        let w_obs = -(&a_bar_0 * (one_minus_c1 * delta_a0));
        let c = pencil_threshold_max(&Pencil::new(schur.clone(), w_obs)?)?;

        let (kappa_tilde_b, kappa_b) = match sys.a_rho() {
            None => (T::zero(), T::zero()),
            Some(a_rho) => {
                let nn = p_0.nrows();
                let abs_p0 = elementwise_abs(&p_0);
                let growth = &abs_p0 * a_rho;
                let zero = DMatrix::<T>::zeros(nn, nn);
                let q_kb = block_2x2(
                    &(&growth + growth.transpose()),
                    &growth,
                    &growth.transpose(),
                    &zero,
                ) * c;
                let p_bar_0 = diag_of(&p_0);
                let p_bar_c = diag_of(&p_c);
                let paired_bars = block_diag2(&p_bar_0, &p_bar_c);
                let kappa_tilde_b =
                    pencil_threshold_max(&Pencil::new(q_kb, paired_bars.clone())?)?;
                let q_kd = paired_bars * kappa_tilde_b;
                let weights = block_diag2(&(&p_0 * c), &p_c);
                let kappa_b = pencil_threshold_max(&Pencil::new(q_kd, weights)?)?;
                (kappa_tilde_b, kappa_b)
            }
        };

        let better = match chosen {
            None => true,
            Some((_, _, _, _, best_kb)) => kappa_b < best_kb,
        };
        if better {
            chosen = Some((s, delta_a0, c, kappa_tilde_b, kappa_b));
        }
    }
    let (s, delta_a0, c, kappa_tilde_b, kappa_b) =
        chosen.expect("sweep visits at least one scale");

    let p_0 = &p_0_base * s;
    let gram_0 = gram(&p_0, sys.a_0());
    let pairing_0 = &p_0 * sys.d_blk() + sys.d_blk() * &p_0;

    Ok(ObserverCore {
        p_c,
        gram_c,
        pairing_c,
        p_0,
        gram_0,
        pairing_0,
        delta_ac,
        delta_a0,
        c,
        kappa_tilde_b,
        kappa_b,
        observer_scale: s,
        admissible,
        max_dtheta,
    })
}

/// Output-feedback synthesis with exact-time gain blow-up.
pub fn synthesize_output_feedback<T: Real>(
    sys: &SystemMatrices<T>,
    kappa_a: T,
    c1: T,
    horizon: T,
    dtheta: &[T],
) -> Result<SynthesisResult<T>, SynthesisError> {
    if kappa_a <= T::zero() {
        return Err(SynthesisError::BadParameter(
            "decay offset must be positive".into(),
        ));
    }
    if horizon <= T::zero() {
        return Err(SynthesisError::BadParameter(
            "horizon must be positive".into(),
        ));
    }
    let core = observer_core(sys, c1, dtheta)?;
    let nn = sys.n() * sys.n_followers();
    let eye = DMatrix::<T>::identity(nn, nn);

    let q_b1 = block_diag2(
        &(&core.gram_0 * (c1 * core.c)),
        &(&core.gram_c * c1 + &eye * lit::<T>(2.0)),
    );
    let q_b2 = block_diag2(
        &((&core.pairing_0 + &core.p_0 * kappa_a) * core.c),
        &(&core.pairing_c + &core.p_c * kappa_a),
    );
    let b_pencil = pencil_threshold_max(&Pencil::new(q_b2, -&q_b1)?)?;
    let b = if b_pencil > horizon { b_pencil } else { horizon };

    let mut result = SynthesisResult {
        mode: SynthMode::OutputFeedback,
        n: sys.n(),
        n_followers: sys.n_followers(),
        p_c: core.p_c,
        p_0: Some(core.p_0),
        c: Some(core.c),
        b,
        kappa0_or_a: kappa_a,
        kappa1_or_b: core.kappa_b,
        kappa2_or_btilde: core.kappa_tilde_b,
        delta_ac: core.delta_ac,
        delta_a0: Some(core.delta_a0),
        admissible_dtheta: core.admissible,
        gamma: None,
        gamma_star: None,
        horizon,
        observer_scale: Some(core.observer_scale),
        growth_known: sys.a_rho().is_some(),
        certificates: Vec::new(),
    };
    result.certificates = assemble_certificates(&CertificateInputs {
        sys,
        mode: SynthMode::OutputFeedback,
        p_c: &result.p_c,
        p_0: result.p_0.as_ref(),
        c: result.c,
        b,
        kappa0_or_a: kappa_a,
        kappa1_or_b: result.kappa1_or_b,
        kappa2_or_btilde: result.kappa2_or_btilde,
        delta_ac: result.delta_ac,
        delta_a0: result.delta_a0,
        gamma: None,
        gamma_star: None,
        c1: Some(c1),
        max_dtheta: Some(core.max_dtheta),
        sat_width: None,
    })?;
    Ok(result)
}

/// Bounded-gain synthesis: the gain saturates at t_f and the decay offset is
/// raised above the growth coupling so contraction survives the freeze.
pub fn synthesize_practical<T: Real>(
    sys: &SystemMatrices<T>,
    t_f: T,
    delta: T,
    kappa_margin: T,
    c1: T,
    dtheta: &[T],
) -> Result<SynthesisResult<T>, SynthesisError> {
    if t_f <= T::zero() || delta <= T::zero() {
        return Err(SynthesisError::BadParameter(
            "saturation time and width must be positive".into(),
        ));
    }
    if kappa_margin <= T::zero() {
        return Err(SynthesisError::BadParameter(
            "decay margin must be positive".into(),
        ));
    }
    let horizon = t_f + delta;
    let core = observer_core(sys, c1, dtheta)?;
    let nn = sys.n() * sys.n_followers();
    let eye = DMatrix::<T>::identity(nn, nn);

    let kappa_a = core.kappa_b * horizon + kappa_margin;
    let gamma = kappa_a - core.kappa_b * horizon;
    let gamma_star = kappa_a / delta - core.kappa_b;

    let q_b1 = block_diag2(
        &(&core.gram_0 * (c1 * core.c)),
        &(&core.gram_c * c1 + &eye * lit::<T>(2.0)),
    );
    let q_b2s = block_diag2(
        &(&core.p_0 * (core.c * kappa_a)),
        &(&core.p_c * kappa_a),
    );
    let b_pencil = pencil_threshold_max(&Pencil::new(q_b2s, -&q_b1)?)?;
    let b = if b_pencil > horizon { b_pencil } else { horizon };

    let mut result = SynthesisResult {
        mode: SynthMode::Practical,
        n: sys.n(),
        n_followers: sys.n_followers(),
        p_c: core.p_c,
        p_0: Some(core.p_0),
        c: Some(core.c),
        b,
        kappa0_or_a: kappa_a,
        kappa1_or_b: core.kappa_b,
        kappa2_or_btilde: core.kappa_tilde_b,
        delta_ac: core.delta_ac,
        delta_a0: Some(core.delta_a0),
        admissible_dtheta: core.admissible,
        gamma: Some(gamma),
        gamma_star: Some(gamma_star),
        horizon,
        observer_scale: Some(core.observer_scale),
        growth_known: sys.a_rho().is_some(),
        certificates: Vec::new(),
    };
    result.certificates = assemble_certificates(&CertificateInputs {
        sys,
        mode: SynthMode::Practical,
        p_c: &result.p_c,
        p_0: result.p_0.as_ref(),
        c: result.c,
        b,
        kappa0_or_a: kappa_a,
        kappa1_or_b: result.kappa1_or_b,
        kappa2_or_btilde: result.kappa2_or_btilde,
        delta_ac: result.delta_ac,
        delta_a0: result.delta_a0,
        gamma: Some(gamma),
        gamma_star: Some(gamma_star),
        c1: Some(c1),
        max_dtheta: Some(core.max_dtheta),
        sat_width: Some(delta),
    })?;
    Ok(result)
}

/// Admissibility of declared sensitivity deviations against a finished
/// synthesis; returns the verdict and the remaining margin.
pub fn check_sensitivity_admissible<T: Real>(
    result: &SynthesisResult<T>,
    dtheta: &[T],
) -> (bool, T) {
    let max_dtheta = dtheta
        .iter()
        .copied()
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    let margin = result.admissible_dtheta - max_dtheta;
    (max_dtheta <= result.admissible_dtheta, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::build_system_matrices;
    use crate::topology::GraphTopology;

    fn reference_system(with_growth: bool) -> SystemMatrices<f64> {
        let topo = GraphTopology::<f64>::path_with_root_pin(4).unwrap();
        let rho = vec![vec![1.8, 0.19]; 4];
        build_system_matrices(
            2,
            &topo,
            &[8.0, 9.0],
            &[2.0, 2.0],
            if with_growth { Some(&rho) } else { None },
        )
        .unwrap()
    }

    const REFERENCE_DTHETA: [f64; 4] = [0.08, 0.09, 0.08, 0.09];

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn scalar_chain_state_feedback_matches_hand_formulas() {
        let topo = GraphTopology::<f64>::path_with_root_pin(1).unwrap();
        let sys = build_system_matrices(1, &topo, &[4.0], &[3.0], None).unwrap();
        // Lyapunov solve: p0 = 1/8, pairing 1/4, scale 4 => p = 1/2.
        // b = max{(2p + kappa0 p) / (8p), T}.
        let r = synthesize_state_feedback(&sys, 0.001, 0.1).unwrap();
        assert!((r.p_c[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((r.b - 2.001 / 8.0).abs() < 1e-12);
        assert_eq!(r.kappa1_or_b, 0.0);
        assert_eq!(r.kappa2_or_btilde, 0.0);
        assert!((r.delta_ac - 1.0).abs() < 1e-9);
        assert!(r.certificates_pass(), "{:?}", r.failing_certificates());

        let r = synthesize_state_feedback(&sys, 0.001, 1.0).unwrap();
        assert_eq!(r.b, 1.0);
    }

    #[test]
    fn scalar_chain_growth_constants_close_the_loop() {
        let topo = GraphTopology::<f64>::path_with_root_pin(1).unwrap();
        let rho = vec![vec![0.5]];
        let sys = build_system_matrices(1, &topo, &[4.0], &[3.0], Some(&rho)).unwrap();
        let r = synthesize_state_feedback(&sys, 0.001, 0.1).unwrap();
        // p = 1/2: absorption eig = 2*0.5*0.5 / 0.5 = 1; energy eig = 1.
        assert!((r.kappa2_or_btilde - 1.0).abs() < 1e-12);
        assert!((r.kappa1_or_b - 1.0).abs() < 1e-12);
        assert!(r.certificates_pass());
    }

    #[test]
    fn zero_growth_rates_give_exactly_zero_constants() {
        let topo = GraphTopology::<f64>::path_with_root_pin(4).unwrap();
        let rho = vec![vec![0.0, 0.0]; 4];
        let sys =
            build_system_matrices(2, &topo, &[8.0, 9.0], &[2.0, 2.0], Some(&rho)).unwrap();
        let r = synthesize_state_feedback(&sys, 0.001, 2.0).unwrap();
        assert_eq!(r.kappa1_or_b, 0.0);
        assert_eq!(r.kappa2_or_btilde, 0.0);

        let r = synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &REFERENCE_DTHETA).unwrap();
        assert_eq!(r.kappa1_or_b, 0.0);
        assert_eq!(r.kappa2_or_btilde, 0.0);
        assert_eq!(r.observer_scale, Some(1.0));
    }

    #[test]
    fn reference_state_feedback_constants() {
        let sys = reference_system(true);
        let r = synthesize_state_feedback(&sys, 0.001, 2.0).unwrap();
        assert!(r.b >= 2.0);
        assert!(rel_close(r.b, 6.40562, 1e-3), "b = {}", r.b);
        assert!(rel_close(r.kappa2_or_btilde, 8.99453, 1e-3));
        assert!(rel_close(r.kappa1_or_b, 160.4635, 1e-3));
        assert!((r.delta_ac - 1.0).abs() < 1e-9);
        assert!(r.certificates_pass(), "{:?}", r.failing_certificates());
    }

    #[test]
    fn reference_output_feedback_constants() {
        let sys = reference_system(true);
        let r = synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &REFERENCE_DTHETA).unwrap();
        assert!((r.admissible_dtheta - 0.0904658).abs() < 1e-5);
        assert!(r.admissible_dtheta > 0.09);
        assert!(rel_close(r.b, 718.9, 1e-2), "b = {}", r.b);
        assert!(rel_close(r.kappa1_or_b, 1386.0, 5e-2), "kb = {}", r.kappa1_or_b);
        assert_eq!(r.observer_scale, Some(32768.0));
        assert!((r.delta_ac - 1.0).abs() < 1e-9);
        assert!((r.delta_a0.unwrap() - 1.0).abs() < 1e-9);
        let c = r.c.unwrap();
        assert!(c > 0.0);
        let p_0 = r.p_0.as_ref().unwrap();
        let weighted = c * crate::pencil::lambda_min_sym(p_0);
        assert!(rel_close(weighted, 2075.0, 5e-2), "c*lmin = {}", weighted);
        assert!(r.certificates_pass(), "{:?}", r.failing_certificates());
    }

    #[test]
    fn scalar_output_feedback_matches_hand_pencils() {
        let topo = GraphTopology::<f64>::path_with_root_pin(1).unwrap();
        let rho_val = 0.3;
        let rho = vec![vec![rho_val]];
        let sys = build_system_matrices(1, &topo, &[4.0], &[2.0], Some(&rho)).unwrap();
        let c1 = 0.9;
        let kappa_a = 0.001;
        let r = synthesize_output_feedback(&sys, kappa_a, c1, 2.0, &[0.05]).unwrap();

        let p_c = LYAPUNOV_STRICTNESS * 2.0 / c1 / 8.0;
        assert!((r.p_c[(0, 0)] - p_c).abs() < 1e-14);
        let p0_1 = 0.5; // base solve 1/4 scaled by pairing factor 2
        let p_eps = 1.05 * p_c * 2.0;
        let schur = p_eps * p_eps / ((1.0 - c1) * 2.0 / c1 * LYAPUNOV_STRICTNESS);
        // sweep over power-of-two observer scales, scalar closed forms
        let mut best: Option<(f64, f64, f64)> = None;
        for j in 0..=24 {
            let s = 2f64.powi(j);
            let p0 = p0_1 * s;
            let c = schur / ((1.0 - c1) * 4.0 * p0);
            let u = c * rho_val * p0;
            let ktb = (u / p0) * (1.0 + (1.0 + p0 / p_c).sqrt());
            let kb = ktb * (1.0f64 / c).max(1.0);
            if best.map_or(true, |(_, _, b)| kb < b) {
                best = Some((s, c, kb));
            }
        }
        let (s, c, kb) = best.unwrap();
        assert_eq!(r.observer_scale, Some(s));
        assert!((r.c.unwrap() - c).abs() < 1e-9 * c);
        assert!((r.kappa1_or_b - kb).abs() < 1e-9 * kb);

        let p0 = p0_1 * s;
        let sig_tl = (2.0 * p0 + kappa_a * p0) / (c1 * 4.0 * p0);
        let sig_br = (2.0 * p_c + kappa_a * p_c) / (2.0 * (LYAPUNOV_STRICTNESS - 1.0));
        let b = sig_tl.max(sig_br).max(2.0);
        assert!((r.b - b).abs() < 1e-9 * b);
        assert!(r.certificates_pass(), "{:?}", r.failing_certificates());
    }

    #[test]
    fn reference_practical_constants() {
        let sys = reference_system(true);
        let r =
            synthesize_practical(&sys, 1.98, 0.02, DEFAULT_KAPPA_MARGIN, 0.9, &REFERENCE_DTHETA)
                .unwrap();
        assert_eq!(r.horizon, 2.0);
        assert!(r.b >= 2.0);
        assert!(rel_close(r.kappa0_or_a, 2772.9, 2e-2));
        assert!((r.gamma.unwrap() - 0.5).abs() < 1e-9);
        assert!(rel_close(r.gamma_star.unwrap(), 1.37e5, 2e-2));
        assert!(rel_close(r.b, 5.55e5, 2e-2), "b = {}", r.b);
        assert!(r.certificates_pass(), "{:?}", r.failing_certificates());
        assert!(r.certificate("frozen_phase_decay").is_some());
        assert!(r.certificate("decay_margin").is_some());
    }

    #[test]
    fn practical_without_growth_uses_margin_alone() {
        let sys = reference_system(false);
        let r = synthesize_practical(&sys, 1.98, 0.02, 0.5, 0.9, &REFERENCE_DTHETA).unwrap();
        assert_eq!(r.kappa0_or_a, 0.5);
        assert_eq!(r.gamma.unwrap(), 0.5);
        assert!(r.certificates_pass());
    }

    #[test]
    fn raising_kappa0_never_lowers_b() {
        let sys = reference_system(true);
        let mut last = 0.0;
        for kappa0 in [1e-4, 1e-2, 1.0, 10.0] {
            let r = synthesize_state_feedback(&sys, kappa0, 2.0).unwrap();
            assert!(r.b >= last);
            last = r.b;
        }
    }

    #[test]
    fn inadmissible_sensitivity_is_rejected() {
        let sys = reference_system(true);
        let err = synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &[0.08, 0.5, 0.08, 0.09]);
        assert!(matches!(
            err,
            Err(SynthesisError::SensitivityInadmissible { .. })
        ));
    }

    #[test]
    fn admissibility_check_margins() {
        let sys = reference_system(true);
        let r = synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &REFERENCE_DTHETA).unwrap();
        let adm = r.admissible_dtheta;
        let (ok, margin) = check_sensitivity_admissible(&r, &REFERENCE_DTHETA);
        assert!(ok);
        assert!((margin - (adm - 0.09)).abs() < 1e-15);
        let (ok, margin) = check_sensitivity_admissible(&r, &[adm + 1e-6]);
        assert!(!ok);
        assert!(margin < 0.0);
        let (ok, margin) = check_sensitivity_admissible(&r, &[1e-12; 4]);
        assert!(ok);
        assert!((margin - adm).abs() < 1e-9);
    }

    #[test]
    fn bad_parameters_rejected() {
        let sys = reference_system(false);
        assert!(synthesize_state_feedback(&sys, 0.0, 2.0).is_err());
        assert!(synthesize_state_feedback(&sys, 0.001, 0.0).is_err());
        assert!(synthesize_output_feedback(&sys, 0.001, 1.0, 2.0, &REFERENCE_DTHETA).is_err());
        assert!(synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &[0.1]).is_err());
        assert!(
            synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &[0.08, -0.1, 0.08, 0.09]).is_err()
        );
        assert!(synthesize_practical(&sys, 0.0, 0.02, 0.5, 0.9, &REFERENCE_DTHETA).is_err());
        assert!(synthesize_practical(&sys, 1.98, 0.02, 0.0, 0.9, &REFERENCE_DTHETA).is_err());
    }

    #[test]
    fn result_serializes_and_round_trips() {
        let sys = reference_system(true);
        let r = synthesize_output_feedback(&sys, 0.001, 0.9, 2.0, &REFERENCE_DTHETA).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: SynthesisResult<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.b, r.b);
        assert_eq!(back.p_c, r.p_c);
        assert_eq!(back.certificates.len(), r.certificates.len());
        assert_eq!(back.mode, SynthMode::OutputFeedback);
    }
}
