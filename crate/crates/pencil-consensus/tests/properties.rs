//! Generative property tests checking the library against independent
//! oracles: Jacobi eigenvalues, characteristic-polynomial roots, defining
//! equations, and hand-assembled Kronecker forms.

mod support;

use nalgebra::{Complex, DMatrix, DVector};
use pencil_consensus::fleet::manipulator_preset;
use pencil_consensus::pencil::{
    generalized_eigenvalues, max_re_eigenvalue, pencil_threshold_max, pencil_threshold_min,
    solve_lyapunov, solve_lyapunov_pair, Pencil,
};
use pencil_consensus::sim::protocol_inputs;
use pencil_consensus::synthesis::synthesize_output_feedback;
use pencil_consensus::system::{build_system_matrices, dilation_weights};
use pencil_consensus::topology::GraphTopology;
use pencil_consensus::warp::{GainSchedule, WarpMode};
use proptest::prelude::*;
use rand::Rng;
use support::*;

fn frob(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(80))]

    /// Above the max threshold the pencil is negative definite; just below,
    /// it is not. Verified with the Jacobi oracle, margins scaled by the
    /// threshold magnitude.
    #[test]
    fn threshold_max_is_the_negativity_boundary(m in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let q1 = random_symmetric(&mut r, m, 5.0);
        let q2 = random_spd(&mut r, m);
        let pencil = Pencil::new(q1.clone(), q2.clone()).unwrap();
        let sigma = pencil_threshold_max(&pencil).unwrap();
        let scale = 1.0 + sigma.abs();
        for margin in [1e-3, 1.0, 10.0] {
            let s = sigma + margin * scale;
            prop_assert!(lambda_max_oracle(&(&q1 - &q2 * s)) < 0.0, "margin {margin}");
        }
        let below = sigma - 1e-3 * scale;
        prop_assert!(lambda_max_oracle(&(&q1 - &q2 * below)) > 0.0);
    }

    /// Mirror property for the min threshold over negative definite pairs.
    #[test]
    fn threshold_min_is_the_negativity_boundary(m in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let q1 = random_snd(&mut r, m);
        let q2 = random_snd(&mut r, m);
        let pencil = Pencil::new(q1.clone(), q2.clone()).unwrap();
        let sigma = pencil_threshold_min(&pencil).unwrap();
        let scale = 1.0 + sigma.abs();
        for margin in [1e-3, 1.0, 10.0] {
            let s = sigma - margin * scale;
            prop_assert!(lambda_max_oracle(&(&q1 - &q2 * s)) < 0.0, "margin {margin}");
        }
        let above = sigma + 1e-3 * scale;
        prop_assert!(lambda_max_oracle(&(&q1 - &q2 * above)) > 0.0);
    }

    /// Generalized eigenvalues agree with the roots of det(Q1 - x Q2)
    /// computed by cofactor expansion and Durand-Kerner iteration.
    #[test]
    fn generalized_eigenvalues_match_the_characteristic_roots(
        m in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let q1 = random_symmetric(&mut r, m, 3.0);
        let q2 = if seed % 2 == 0 {
            random_spd(&mut r, m)
        } else {
            random_symmetric(&mut r, m, 3.0)
        };
        let coeffs = pencil_char_poly(&q1, &q2);
        prop_assume!(coeffs.last().unwrap().abs() > 1e-3);
        let oracle = poly_roots(&coeffs);
        let scale = oracle.iter().map(|z| z.norm()).fold(1.0, f64::max);
        // well-separated spectra only: near-multiple roots make the
        // real/complex classification ambiguous on both sides
        for i in 0..oracle.len() {
            for j in 0..i {
                prop_assume!((oracle[i] - oracle[j]).norm() > 1e-5 * scale);
            }
        }
        let eigs = generalized_eigenvalues(&Pencil::new(q1, q2).unwrap()).unwrap();
        let mut lib: Vec<Complex<f64>> = eigs
            .values
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(eigs.discarded.iter().map(|&(re, im)| Complex::new(re, im)))
            .collect();
        prop_assert_eq!(lib.len(), oracle.len());
        // multiset comparison: greedily pair each oracle root with its
        // closest remaining library value
        for b in &oracle {
            let (idx, dist) = lib
                .iter()
                .enumerate()
                .map(|(i, a)| (i, (a - b).norm()))
                .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                .unwrap();
            prop_assert!(dist <= 1e-8 * (1.0 + b.norm()), "{} vs {b}", lib[idx]);
            lib.swap_remove(idx);
        }
    }

    /// The Lyapunov solution satisfies its defining equation, is symmetric,
    /// and is positive definite for Hurwitz inputs.
    #[test]
    fn lyapunov_solution_satisfies_its_equation(
        m in 1usize..=6,
        seed in any::<u64>(),
        s in 0.5f64..3.0,
    ) {
        let mut r = rng(seed);
        let raw = random_symmetric(&mut r, m, 2.0)
            + random_symmetric(&mut r, m, 2.0).map(|v| v.signum() * v.abs().sqrt());
        let shift = max_re_eigenvalue(&raw).unwrap() + 0.7;
        let a = raw - DMatrix::<f64>::identity(m, m) * shift;
        let p = solve_lyapunov(&a, s).unwrap();
        let residual = &p * &a + a.transpose() * &p
            + DMatrix::<f64>::identity(m, m) * s;
        prop_assert!(frob(&residual) <= 1e-9 * (1.0 + frob(&p) * frob(&a)));
        prop_assert!(frob(&(&p - p.transpose())) <= 1e-12 * (1.0 + frob(&p)));
        prop_assert!(lambda_min_oracle(&p) > 0.0);
    }

    /// The paired solve certifies both Gram inequalities at once; when it
    /// refuses, the refusal is honest (the paired form really is indefinite).
    #[test]
    fn lyapunov_pair_certifies_both_gram_forms(m in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let raw = random_symmetric(&mut r, m, 2.0);
        let shift = max_re_eigenvalue(&raw).unwrap() + 0.6;
        let a = raw - DMatrix::<f64>::identity(m, m) * shift;
        let d = DMatrix::<f64>::from_diagonal(&dilation_weights::<f64>(m));
        match solve_lyapunov_pair(&a, &d, 1.0) {
            Ok(p) => {
                let gram = &p * &a + a.transpose() * &p;
                let paired = &p * &d + &d * &p;
                let tol = 1e-9 * (1.0 + frob(&p) * frob(&a));
                prop_assert!(lambda_max_oracle(&gram) <= -1.0 + tol);
                prop_assert!(lambda_min_oracle(&paired) >= 1.0 - tol);
            }
            Err(_) => {
                let p0 = solve_lyapunov(&a, 1.0).unwrap();
                let paired = &p0 * &d + &d * &p0;
                let slack = 1e-9 * (1.0 + frob(&p0));
                prop_assert!(lambda_min_oracle(&paired) <= slack);
            }
        }
    }

    /// Time warp maps are mutually inverse and obey the constant-speed
    /// identity r(t) * dt/dtau = b everywhere before the deadline.
    #[test]
    fn warp_maps_are_inverse_and_constant_speed(
        horizon in 0.5f64..5.0,
        b_extra in 0.0f64..20.0,
        frac in 1e-6f64..0.999,
    ) {
        let b = horizon + b_extra;
        let sched = GainSchedule::new(WarpMode::Exact { horizon }, b, 2).unwrap();
        let t = frac * horizon;
        let tau = sched.tau_of_t(t).unwrap();
        let back = sched.t_of_tau(tau).unwrap();
        prop_assert!((back - t).abs() <= 1e-12 * (1.0 + t));
        // dt/dtau = T - t in the unbounded mode, so r * dt/dtau = b exactly
        let speed = sched.r(t).unwrap() * (horizon - t);
        prop_assert!((speed - b).abs() <= 1e-9 * b);
        let lam = sched.scaling_diag(t).unwrap();
        let r_t = sched.r(t).unwrap();
        prop_assert!((lam[1] - r_t).abs() <= 1e-9 * r_t);
        prop_assert!((lam[0] - r_t * r_t).abs() <= 1e-6 * r_t * r_t);
    }

    /// In the saturated mode the gain freezes at t_f and the dilation factor
    /// drops to zero there.
    #[test]
    fn saturated_schedule_freezes_the_gain(
        t_f in 0.5f64..3.0,
        delta in 0.01f64..0.5,
        after in 0.0f64..5.0,
    ) {
        let horizon = t_f + delta;
        let b = horizon + 3.0;
        let sched = GainSchedule::new(WarpMode::Practical { t_f, delta }, b, 2).unwrap();
        let frozen = sched.r(t_f + after).unwrap();
        prop_assert!((frozen - b / delta).abs() <= 1e-9 * frozen);
        prop_assert!(sched.dilation_factor(t_f + after + 1e-9).unwrap() == 0.0);
        prop_assert!(sched.dilation_factor(0.5 * t_f).unwrap() == 1.0);
    }

    /// The weighted topology matrix is symmetric positive definite for
    /// connected follower graphs with at least one pinned node, and its row
    /// accessor matches the matrix.
    #[test]
    fn pinned_connected_topology_is_positive_definite(seed in any::<u64>()) {
        let mut r = rng(seed);
        let nf = r.random_range(1..=6);
        let mut adj = vec![vec![0u8; nf]; nf];
        for k in 1..nf {
            let j = r.random_range(0..k);
            adj[k][j] = 1;
            adj[j][k] = 1;
        }
        let mut pin = vec![0u8; nf];
        pin[r.random_range(0..nf)] = 1;
        let topo: GraphTopology<f64> = GraphTopology::new(&adj, &pin).unwrap();
        let lbar = topo.lbar().clone();
        prop_assert!(lambda_min_oracle(&lbar) > 0.0);
        let reported: f64 = topo.lambda_min();
        prop_assert!((reported - lambda_min_oracle(&lbar)).abs() <= 1e-9 * (1.0 + reported));
        for k in 1..=nf {
            let row = topo.row_of_lbar(k).unwrap();
            for j in 0..nf {
                prop_assert_eq!(row[j], lbar[(k - 1, j)]);
            }
        }
    }

    /// The distributed protocol equals the Kronecker row form
    /// u_k = -(row_k(Lbar) (x) K) eta on arbitrary stacks.
    #[test]
    fn protocol_matches_the_kronecker_row_form(seed in any::<u64>(), scale in 0.1f64..1e4) {
        let mut r = rng(seed);
        let preset = manipulator_preset::<f64>();
        let sys = build_system_matrices(
            2,
            preset.fleet.topology(),
            &preset.k_gain,
            &preset.g_gain,
            None,
        )
        .unwrap();
        let nf = sys.n_followers();
        let n = sys.n();
        let eta: Vec<f64> = (0..n * nf).map(|_| r.random_range(-scale..scale)).collect();
        let u = protocol_inputs(&sys, &eta).unwrap();
        prop_assert_eq!(u.len(), nf + 1);
        prop_assert_eq!(u[0], 0.0);
        let lbar = sys.lbar();
        let k_gain = sys.k_gain();
        for k in 1..=nf {
            let mut want = 0.0;
            for j in 0..nf {
                for i in 0..n {
                    want -= lbar[(k - 1, j)] * k_gain[i] * eta[j * n + i];
                }
            }
            prop_assert!((u[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Declaring zero growth rates makes both coupling constants vanish.
    #[test]
    fn zero_growth_rates_give_zero_coupling(seed in any::<u64>()) {
        let mut r = rng(seed);
        let setup = random_valid_setup(&mut r);
        let zero_rho = vec![vec![0.0; setup.n]; setup.n_followers];
        let sys = build_system_matrices(
            setup.n,
            // rebuild on the same graph with zero growth declared
            &topology_of(&setup.sys),
            &k_of(&setup.sys),
            &g_of(&setup.sys),
            Some(&zero_rho),
        )
        .unwrap();
        let dtheta = vec![0.0; setup.n_followers];
        let res = synthesize_output_feedback(&sys, 0.5, 0.9, 2.0, &dtheta).unwrap();
        prop_assert!(res.kappa1_or_b.abs() <= 1e-12);
        prop_assert!(res.kappa2_or_btilde.abs() <= 1e-12);
        prop_assert!(res.certificates_pass());
    }

    /// The warp speed grows with the decay demand: a larger decay offset
    /// never yields a smaller synthesized b.
    #[test]
    fn warp_speed_is_monotone_in_the_decay_offset(seed in any::<u64>()) {
        let mut r = rng(seed);
        let setup = random_valid_setup(&mut r);
        let dtheta = vec![0.0; setup.n_followers];
        let lo = synthesize_output_feedback(&setup.sys, 0.2, 0.9, 2.0, &dtheta).unwrap();
        let hi = synthesize_output_feedback(&setup.sys, 2.0, 0.9, 2.0, &dtheta).unwrap();
        prop_assert!(hi.b >= lo.b - 1e-9 * (1.0 + lo.b.abs()));
    }
}

/// Reconstructs constructor arguments from a finished system so the setup
/// can be rebuilt with different growth declarations.
fn topology_of(sys: &pencil_consensus::system::SystemMatrices<f64>) -> GraphTopology<f64> {
    let lbar = sys.lbar();
    let nf = lbar.nrows();
    let mut adj = vec![vec![0u8; nf]; nf];
    let mut pin = vec![0u8; nf];
    for i in 0..nf {
        for j in 0..nf {
            if i != j && lbar[(i, j)] != 0.0 {
                adj[i][j] = 1;
            }
        }
        let degree: f64 = (0..nf).filter(|&j| j != i).map(|j| f64::from(adj[i][j] as u8)).sum();
        let pinned = lbar[(i, i)] - degree;
        pin[i] = if pinned > 0.5 { 1 } else { 0 };
    }
    GraphTopology::new(&adj, &pin).unwrap()
}

fn k_of(sys: &pencil_consensus::system::SystemMatrices<f64>) -> Vec<f64> {
    (0..sys.n()).map(|i| sys.k_gain()[i]).collect()
}

fn g_of(sys: &pencil_consensus::system::SystemMatrices<f64>) -> Vec<f64> {
    (0..sys.n()).map(|i| sys.g_gain()[i]).collect()
}

/// Non-generative sanity checks of the oracles themselves, so a broken
/// oracle cannot silently weaken the suites above.
#[test]
fn oracle_self_checks() {
    // Jacobi on a known spectrum
    let q = DMatrix::<f64>::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let mut eigs = jacobi_eigenvalues(&q);
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!((eigs[0] - 1.0).abs() < 1e-12);
    assert!((eigs[1] - 3.0).abs() < 1e-12);

    // char poly of (diag(1,2) - x I) = (1-x)(2-x) = 2 - 3x + x^2
    let q1 = DMatrix::<f64>::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
    let q2 = DMatrix::<f64>::identity(2, 2);
    let coeffs = pencil_char_poly(&q1, &q2);
    assert_eq!(coeffs.len(), 3);
    assert!((coeffs[0] - 2.0).abs() < 1e-12);
    assert!((coeffs[1] + 3.0).abs() < 1e-12);
    assert!((coeffs[2] - 1.0).abs() < 1e-12);

    // Durand-Kerner on x^2 + 1: roots +/- i
    let mut roots = poly_roots(&[1.0, 0.0, 1.0]);
    sort_complex(&mut roots);
    assert!((roots[0] - Complex::new(0.0, -1.0)).norm() < 1e-10);
    assert!((roots[1] - Complex::new(0.0, 1.0)).norm() < 1e-10);

    // own Cholesky accepts SPD and rejects indefinite
    assert!(own_cholesky(&q).is_some());
    let indef = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(own_cholesky(&indef).is_none());
}
