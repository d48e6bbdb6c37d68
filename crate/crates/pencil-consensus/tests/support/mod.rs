//! Shared test support: numerical oracles implemented independently of the
//! library (own Jacobi eigensolver, own Cholesky, characteristic polynomials
//! by cofactor expansion, Durand-Kerner root finding) plus seeded random
//! problem generators.

// each test target uses its own subset of these helpers
#![allow(dead_code)]

use nalgebra::{Complex, DMatrix};
use pencil_consensus::pencil::max_re_eigenvalue;
use pencil_consensus::synthesis::{
    synthesize_output_feedback, synthesize_practical, synthesize_state_feedback,
};
use pencil_consensus::system::{build_system_matrices, SystemMatrices};
use pencil_consensus::topology::GraphTopology;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations; shares no
/// code with the library's Schur-based path.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "jacobi oracle needs a square matrix");
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    let scale = 1.0 + frobenius(&a);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

pub fn lambda_max_oracle(m: &DMatrix<f64>) -> f64 {
    jacobi_eigenvalues(m)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn lambda_min_oracle(m: &DMatrix<f64>) -> f64 {
    jacobi_eigenvalues(m)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a symmetric matrix through the Jacobi oracle.
pub fn spectral_norm_oracle(m: &DMatrix<f64>) -> f64 {
    jacobi_eigenvalues(m)
        .into_iter()
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Plain in-place Cholesky; `None` when the matrix is not positive definite.
pub fn own_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return None;
        }
        l[(j, j)] = d.sqrt();
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / l[(j, j)];
        }
    }
    Some(l)
}

// ---- characteristic polynomial of a pencil, degree <= small ----

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add_scaled(acc: &mut Vec<f64>, p: &[f64], s: f64) {
    if acc.len() < p.len() {
        acc.resize(p.len(), 0.0);
    }
    for (a, b) in acc.iter_mut().zip(p) {
        *a += s * b;
    }
}

/// det over a matrix of polynomials by cofactor expansion along the first
/// remaining row; exponential in the order, which is fine for m <= 6.
fn poly_det(entries: &[Vec<Vec<f64>>], cols: &[usize]) -> Vec<f64> {
    let row = entries.len() - cols.len();
    if cols.len() == 1 {
        return entries[row][cols[0]].clone();
    }
    let mut acc = vec![0.0];
    for (pos, &c) in cols.iter().enumerate() {
        let minor_cols: Vec<usize> = cols
            .iter()
            .copied()
            .filter(|&other| other != c)
            .collect();
        let minor = poly_det(entries, &minor_cols);
        let term = poly_mul(&entries[row][c], &minor);
        let sign = if pos % 2 == 0 { 1.0 } else { -1.0 };
        poly_add_scaled(&mut acc, &term, sign);
    }
    acc
}

/// Ascending coefficients of `det(Q1 - x Q2)`.
pub fn pencil_char_poly(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> Vec<f64> {
    let m = q1.nrows();
    let entries: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|i| (0..m).map(|j| vec![q1[(i, j)], -q2[(i, j)]]).collect())
        .collect();
    let cols: Vec<usize> = (0..m).collect();
    poly_det(&entries, &cols)
}

fn eval_poly(coeffs: &[f64], z: Complex<f64>) -> Complex<f64> {
    let mut acc = Complex::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        acc = acc * z + Complex::new(c, 0.0);
    }
    acc
}

/// All complex roots by Durand-Kerner iteration, for exact-degree
/// polynomials with a well-scaled leading coefficient.
pub fn poly_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let d = coeffs.len() - 1;
    assert!(d >= 1, "constant polynomial has no roots");
    let lead = coeffs[d];
    assert!(
        lead.abs() > 1e-12,
        "leading coefficient too small for root finding"
    );
    let radius = 1.0
        + coeffs[..d]
            .iter()
            .map(|c| (c / lead).abs())
            .fold(0.0, f64::max);
    let seed = Complex::new(0.4, 0.9);
    let mut z: Vec<Complex<f64>> = (0..d)
        .map(|k| seed.powu(k as u32 + 1) * radius)
        .collect();
    for _ in 0..600 {
        let mut step = 0.0_f64;
        for i in 0..d {
            let p = eval_poly(coeffs, z[i]) / Complex::new(lead, 0.0);
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..d {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            let dz = p / denom;
            z[i] -= dz;
            step = step.max(dz.norm());
        }
        if step <= 1e-14 * radius {
            break;
        }
    }
    z
}

/// Sorts complex values lexicographically by (re, im) for multiset
/// comparison of spectra.
pub fn sort_complex(values: &mut [Complex<f64>]) {
    values.sort_by(|a, b| {
        (a.re, a.im)
            .partial_cmp(&(b.re, b.im))
            .expect("finite spectra")
    });
}

// ---- random problem generators ----

pub fn random_symmetric(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> DMatrix<f64> {
    let mut q = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = rng.random_range(-scale..scale);
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    q
}

pub fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let shift = rng.random_range(0.2..2.0);
    &a * a.transpose() + DMatrix::<f64>::identity(m, m) * shift
}

pub fn random_snd(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    -random_spd(rng, m)
}

/// A random synthesizable setup: connected follower graph with at least one
/// pinned node, gains rejection-sampled until both closed-loop matrices are
/// comfortably Hurwitz.
pub struct RandomSetup {
    pub sys: SystemMatrices<f64>,
    pub n: usize,
    pub n_followers: usize,
}

pub fn random_valid_setup(rng: &mut ChaCha8Rng) -> RandomSetup {
    loop {
        let n = rng.random_range(1..=3);
        let nf = rng.random_range(1..=4);
        let mut adj = vec![vec![0u8; nf]; nf];
        for k in 1..nf {
            let j = rng.random_range(0..k);
            adj[k][j] = 1;
            adj[j][k] = 1;
        }
        for i in 0..nf {
            for j in i + 1..nf {
                if rng.random_bool(0.25) {
                    adj[i][j] = 1;
                    adj[j][i] = 1;
                }
            }
        }
        let mut pin = vec![0u8; nf];
        pin[0] = 1;
        for p in pin.iter_mut().skip(1) {
            if rng.random_bool(0.3) {
                *p = 1;
            }
        }
        let topo = GraphTopology::new(&adj, &pin).expect("tree plus pin is always valid");
        for _ in 0..50 {
            let k: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..4.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..4.0)).collect();
            let rho: Vec<Vec<f64>> = (0..nf)
                .map(|_| (0..n).map(|_| rng.random_range(0.0..0.3)).collect())
                .collect();
            let Ok(sys) = build_system_matrices(n, &topo, &k, &g, Some(&rho)) else {
                continue;
            };
            let hurwitz_c = max_re_eigenvalue(sys.a_c()).map(|v| v < -0.05);
            let hurwitz_0 = max_re_eigenvalue(&sys.a_minus_gc()).map(|v| v < -0.05);
            if !(hurwitz_c.unwrap_or(false) && hurwitz_0.unwrap_or(false)) {
                continue;
            }
            // the setup must admit every protocol, not just stable dynamics:
            // the diagonal-pairing solve can lose definiteness for stable
            // but poorly conditioned gain choices
            let dtheta = vec![0.0; nf];
            let viable = synthesize_state_feedback(&sys, 0.5, 2.0).is_ok()
                && synthesize_output_feedback(&sys, 0.5, 0.9, 2.0, &dtheta).is_ok()
                && synthesize_practical(&sys, 1.98, 0.02, 0.5, 0.9, &dtheta).is_ok();
            if viable {
                return RandomSetup {
                    sys,
                    n,
                    n_followers: nf,
                };
            }
        }
    }
}
