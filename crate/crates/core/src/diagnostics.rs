//! Numerical checks of the solver's stability structure: factorization of the
//! update's covariance factor, spectral envelopes of the linearized dynamics,
//! a robust-stability linear matrix inequality with closed-form constants,
//! problem-constant estimation, and convergence-rate fitting.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lower_solver::interior_floor;
use crate::routing_game::LowerProblem;
use crate::simplex::{BlockLayout, BlockSimplexVector};

/// Spectral norm via power iteration on the Gram matrix; deterministic start.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(m.ncols(), 1.0 / (m.ncols() as f64).sqrt());
    let mut last = 0.0;
    for _ in 0..500 {
        let w = m.tr_mul(&(m * &v));
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
        let estimate = n.sqrt();
        if (estimate - last).abs() <= 1e-13 * estimate.max(1.0) {
            return estimate;
        }
        last = estimate;
    }
    last
}

/// Seeded strictly interior point of the block simplex (unit-mean exponential
/// weights, normalized per block).
pub fn random_interior_point(
    layout: &std::sync::Arc<BlockLayout>,
    rng: &mut ChaCha8Rng,
) -> BlockSimplexVector {
    let mut data = DVector::zeros(layout.total_dim());
    for range in layout.ranges() {
        let mut z = 0.0;
        for j in range.clone() {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let e = -u.ln();
            data[j] = e;
            z += e;
        }
        for j in range {
            data[j] /= z;
        }
    }
    BlockSimplexVector::new_unchecked(layout.clone(), data)
}

// ---------------------------------------------------------------------------
// Factorization of the update covariance factor
// ---------------------------------------------------------------------------

/// Factor of diag(h) - h h' per block: Lambda = diag(sqrt h) V with
/// [sqrt h, V] orthonormal, so the block equals Lambda Lambda'.
///
/// V comes from the Householder reflector sending sqrt(h) to a coordinate
/// axis; a size-one block yields an empty (0-column) factor.
#[derive(Debug, Clone)]
pub struct BFactor {
    /// Per-block factors, shape d_i x (d_i - 1).
    pub lambda: Vec<DMatrix<f64>>,
    /// Per-block orthonormal complements of sqrt(h), shape d_i x (d_i - 1).
    pub v: Vec<DMatrix<f64>>,
}

pub fn factor_b(h: &BlockSimplexVector) -> Result<BFactor> {
    if !h.strictly_positive() {
        return Err(Error::Domain("factorization needs strictly positive entries".into()));
    }
    let layout = h.layout();
    let mut lambda = Vec::with_capacity(layout.num_blocks());
    let mut v_blocks = Vec::with_capacity(layout.num_blocks());
    for range in layout.ranges() {
        let d = range.len();
        let sqrt_h = DVector::from_iterator(
            d,
            h.as_vector().as_slice()[range].iter().map(|&x| x.sqrt()),
        );
        if d == 1 {
            lambda.push(DMatrix::zeros(1, 0));
            v_blocks.push(DMatrix::zeros(1, 0));
            continue;
        }
        // Householder reflector Q with Q sqrt_h = -sign(s0) e_1; its trailing
        // columns form an orthonormal basis of the complement of sqrt_h.
        let mut w = sqrt_h.clone();
        let sign = if w[0] >= 0.0 { 1.0 } else { -1.0 };
        w[0] += sign * sqrt_h.norm();
        let wn2 = w.norm_squared();
        let mut q = DMatrix::identity(d, d);
        if wn2 > 0.0 {
            q -= (&w * w.transpose()) * (2.0 / wn2);
        }
        let v = q.columns(1, d - 1).into_owned();
        let mut lam = v.clone();
        for (j, mut row) in lam.row_iter_mut().enumerate() {
            row *= sqrt_h[j];
        }
        lambda.push(lam);
        v_blocks.push(v);
    }
    Ok(BFactor {
        lambda,
        v: v_blocks,
    })
}

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Spectrum {
    pub spectral_radius: f64,
    pub spectral_norm: f64,
    pub eigenvalues: Vec<Complex<f64>>,
}

/// Full (complex-safe) eigenvalues plus the largest singular value.
pub fn spectrum_m(m: &DMatrix<f64>) -> Result<Spectrum> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape("spectrum needs a square matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let eigs = m.complex_eigenvalues();
    let radius = eigs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    Ok(Spectrum {
        spectral_radius: radius,
        spectral_norm: spectral_norm(m),
        eigenvalues: eigs.iter().copied().collect(),
    })
}

/// First index at which the dynamics deviation falls below `eps` for good.
pub fn transient_index(delta_norms: &[f64], eps: f64) -> Option<usize> {
    let mut candidate = None;
    for (t, &d) in delta_norms.iter().enumerate() {
        if d <= eps {
            if candidate.is_none() {
                candidate = Some(t);
            }
        } else {
            candidate = None;
        }
    }
    candidate
}

// ---------------------------------------------------------------------------
// Robust-stability certificate
// ---------------------------------------------------------------------------

/// Closed-form constants of the robust-stability certificate.
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub eta: f64,
    pub alpha: f64,
    pub l_g: f64,
    pub nu_min: f64,
    /// Contraction factor 1 - eta alpha / 2.
    pub lambda: f64,
    pub mu_tilde: f64,
    /// Scale of the quadratic-form weight diag(1/h*).
    pub c_p: f64,
    /// Largest admissible uncertainty magnitude.
    pub eps_bar: f64,
    pub s: f64,
    pub omega: f64,
}

/// Evaluates the certificate constants.
///
/// Requires alpha <= 1 / (2 L_g^2 / eta + 2 eta); the constants are
/// lambda = 1 - eta alpha / 2,
/// mu_tilde = (eta alpha / 4) / (1 + 16 (1 - eta alpha)^2 L_g^2 / eta^2),
/// C_P = (3/2 s + 1) / mu_tilde with s = 4,
/// eps_bar = min(sqrt(2 nu / C_P), nu^{3/2} / (2 C_P (1 - eta alpha))),
/// omega = 3 C_P / nu + C_P^2 (1 - eta alpha)^2 / nu^3.
pub fn stability_constants(
    eta: f64,
    alpha: f64,
    l_g: f64,
    nu_min: f64,
) -> Result<StabilityCertificate> {
    if !(eta > 0.0) || !(alpha > 0.0) {
        return Err(Error::Validation("eta and alpha must be positive".into()));
    }
    if !(nu_min > 0.0) || !nu_min.is_finite() {
        return Err(Error::Numeric(format!(
            "interior floor {nu_min} is degenerate; certificate undefined"
        )));
    }
    let alpha_bar = 1.0 / (2.0 * l_g * l_g / eta + 2.0 * eta);
    if alpha > alpha_bar {
        return Err(Error::Validation(format!(
            "alpha = {alpha} violates the certificate bound alpha <= 1/(2 L_g^2/eta + 2 eta) = {alpha_bar}"
        )));
    }
    let ea = eta * alpha;
    let lambda = 1.0 - ea / 2.0;
    let mu_tilde = (ea / 4.0) / (1.0 + 16.0 * (1.0 - ea).powi(2) * l_g * l_g / (eta * eta));
    let s = 4.0;
    let c_p = (1.5 * s + 1.0) / mu_tilde;
    let eps_bar = (2.0 * nu_min / c_p)
        .sqrt()
        .min(nu_min.powf(1.5) / (2.0 * c_p * (1.0 - ea)));
    let omega = 3.0 * c_p / nu_min + c_p * c_p * (1.0 - ea).powi(2) / nu_min.powi(3);
    if !omega.is_finite() || !c_p.is_finite() {
        return Err(Error::Numeric(
            "certificate constants overflowed; interior floor too small".into(),
        ));
    }
    Ok(StabilityCertificate {
        eta,
        alpha,
        l_g,
        nu_min,
        lambda,
        mu_tilde,
        c_p,
        eps_bar,
        s,
        omega,
    })
}

/// Result of the linear-matrix-inequality feasibility check.
#[derive(Debug, Clone)]
pub struct LmiOutcome {
    /// Smallest eigenvalue of the diagonally equilibrated slack.
    pub min_eig_scaled: f64,
    /// Smallest eigenvalue of the raw symmetrized slack (scale-dependent).
    pub min_eig_raw: f64,
    pub pass: bool,
}

/// Minimum slack eigenvalue accepted as feasible.
pub const LMI_TOL: f64 = -1e-9;

/// Checks blkdiag(lambda P, s I, omega I) >= G' blkdiag(P, s I, I) G with
/// G = [M*, eps I, I; I, 0, 0; I, 0, 0] and P = C_P diag(1 / h*).
///
/// The slack is symmetrized and diagonally equilibrated before the eigenvalue
/// test: the certificate constants span hundreds of orders of magnitude on
/// strongly regularized instances, and positive semidefiniteness is invariant
/// under the scaling while raw eigenvalues are not representable.
pub fn lmi_check(
    m_star: &DMatrix<f64>,
    h_star: &BlockSimplexVector,
    cert: &StabilityCertificate,
    eps: f64,
) -> Result<LmiOutcome> {
    let d = m_star.nrows();
    if m_star.ncols() != d || h_star.len() != d {
        return Err(Error::Shape("dynamics matrix and equilibrium disagree".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Validation("uncertainty magnitude must be positive".into()));
    }
    if !h_star.strictly_positive() {
        return Err(Error::Domain("equilibrium must be strictly positive".into()));
    }
    let p_diag = DVector::from_iterator(
        d,
        h_star.as_vector().iter().map(|&hj| cert.c_p / hj),
    );
    let n = 3 * d;
    // G and the two weight matrices, assembled blockwise.
    let mut g = DMatrix::zeros(n, n);
    g.view_mut((0, 0), (d, d)).copy_from(m_star);
    for j in 0..d {
        g[(j, d + j)] = eps;
        g[(j, 2 * d + j)] = 1.0;
        g[(d + j, j)] = 1.0;
        g[(2 * d + j, j)] = 1.0;
    }
    let mut w_rhs = DVector::zeros(n);
    let mut w_lhs = DVector::zeros(n);
    for j in 0..d {
        w_rhs[j] = p_diag[j];
        w_rhs[d + j] = cert.s;
        w_rhs[2 * d + j] = 1.0;
        w_lhs[j] = cert.lambda * p_diag[j];
        w_lhs[d + j] = cert.s;
        w_lhs[2 * d + j] = cert.omega;
    }
    let mut weighted = g.clone();
    for (j, mut row) in weighted.row_iter_mut().enumerate() {
        row *= w_rhs[j];
    }
    let rhs = g.transpose() * weighted;
    let mut slack = -rhs;
    for j in 0..n {
        slack[(j, j)] += w_lhs[j];
    }
    // Symmetrize, then equilibrate.
    let slack = (&slack + slack.transpose()) * 0.5;
    let scale = DVector::from_iterator(
        n,
        (0..n).map(|j| 1.0 / slack[(j, j)].abs().max(1.0).sqrt()),
    );
    let mut scaled = slack.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let min_eig_scaled = scaled.symmetric_eigen().eigenvalues.min();
    let min_eig_raw = if slack.iter().all(|v| v.is_finite()) {
        slack.symmetric_eigen().eigenvalues.min()
    } else {
        f64::NAN
    };
    Ok(LmiOutcome {
        min_eig_scaled,
        min_eig_raw,
        pass: min_eig_scaled >= LMI_TOL,
    })
}

// ---------------------------------------------------------------------------
// Problem constants
// ---------------------------------------------------------------------------

/// Empirical realizations of the smoothness and boundedness constants.
#[derive(Debug, Clone)]
pub struct ProblemConstants {
    /// Bound on the gradient norm (exact when the model provides one).
    pub omega_g: f64,
    /// Bound on the Hessian spectral norm.
    pub l_g: f64,
    pub nu_min: f64,
    /// Global bound on the initial KL error:
    /// N ln(1/nu) + nu sum_i d_i ln(1/d_i).
    pub dkl_max: f64,
    /// Sampled bound on the cross-Hessian spectral norm.
    pub lambda_yh: f64,
    /// Sensitivity bound 4 lambda_yh / (eta sqrt(nu)).
    pub c_0: f64,
}

/// Estimates the constants by sampling interior points against the supplied
/// upper decisions, preferring exact model bounds where available.
pub fn estimate_constants(
    prob: &LowerProblem,
    y_samples: &[DVector<f64>],
    points_per_y: usize,
    seed: u64,
) -> Result<ProblemConstants> {
    if y_samples.is_empty() || points_per_y == 0 {
        return Err(Error::Validation("need at least one sample".into()));
    }
    let layout = prob.layout().clone();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut omega_sampled: f64 = 0.0;
    let mut l_sampled: f64 = 0.0;
    let mut lambda_yh: f64 = 0.0;
    for y in y_samples {
        for _ in 0..points_per_y {
            let h = random_interior_point(&layout, &mut rng);
            omega_sampled = omega_sampled.max(prob.model.grad_h(&h, y)?.norm());
            l_sampled = l_sampled.max(spectral_norm(&prob.model.hessian_h(&h, y)?));
            lambda_yh = lambda_yh.max(spectral_norm(&prob.model.cross_hessian(&h, y)?));
        }
    }
    let omega_g = prob.model.grad_norm_bound().unwrap_or(omega_sampled).max(omega_sampled);
    let l_g = prob.model.hessian_norm_bound().unwrap_or(l_sampled).max(l_sampled);
    let nu_min = interior_floor(prob.eta, omega_g, layout.max_block_size())?;
    let dkl_max = dkl_global_bound(&layout, nu_min);
    let c_0 = 4.0 * lambda_yh / (prob.eta * nu_min.sqrt());
    Ok(ProblemConstants {
        omega_g,
        l_g,
        nu_min,
        dkl_max,
        lambda_yh,
        c_0,
    })
}

/// N ln(1/nu) + nu sum_i d_i ln(1/d_i), the global initial-error bound.
pub fn dkl_global_bound(layout: &BlockLayout, nu_min: f64) -> f64 {
    let n = layout.num_blocks() as f64;
    let correction: f64 = layout
        .sizes()
        .iter()
        .map(|&d| {
            let df = d as f64;
            df * (1.0 / df).ln()
        })
        .sum();
    n * (1.0 / nu_min).ln() + nu_min * correction
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

/// Geometric decay rate fitted by least squares on the log of the tail half.
pub fn fit_rate(trace: &[f64]) -> Result<f64> {
    if trace.len() < 3 {
        return Err(Error::Validation(format!(
            "rate fit needs at least 3 points, got {}",
            trace.len()
        )));
    }
    if trace.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Domain("rate fit needs strictly positive errors".into()));
    }
    let start = trace.len() / 2;
    let tail = &trace[start..];
    let n = tail.len() as f64;
    let mut sum_t = 0.0;
    let mut sum_l = 0.0;
    let mut sum_tt = 0.0;
    let mut sum_tl = 0.0;
    for (i, &e) in tail.iter().enumerate() {
        let t = i as f64;
        let l = e.ln();
        sum_t += t;
        sum_l += l;
        sum_tt += t * t;
        sum_tl += t * l;
    }
    let denom = n * sum_tt - sum_t * sum_t;
    if denom == 0.0 {
        return Err(Error::Numeric("degenerate least-squares system".into()));
    }
    let slope = (n * sum_tl - sum_t * sum_l) / denom;
    Ok(slope.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::applications::toy_instance_with_sizes;
    use crate::jacobian::build_b;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use std::sync::Arc;

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in [2usize, 5, 9] {
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let exact = m.clone().singular_values().max();
            assert_relative_eq!(spectral_norm(&m), exact, epsilon = 1e-9);
        }
    }

    #[test]
    fn factor_reconstructs_b() {
        let layout = BlockLayout::new(vec![2, 30, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_interior_point(&layout, &mut rng);
        let b = build_b(&h);
        let f = factor_b(&h).unwrap();
        for (i, block) in b.blocks.iter().enumerate() {
            let lam = &f.lambda[i];
            assert_eq!(lam.ncols(), layout.sizes()[i] - 1);
            let err = (block - lam * lam.transpose()).norm();
            assert!(err <= 1e-12, "block {i}: reconstruction error {err}");
            let v = &f.v[i];
            if v.ncols() > 0 {
                let vtv = v.transpose() * v;
                let gap = (&vtv - DMatrix::identity(v.ncols(), v.ncols())).norm();
                assert!(gap <= 1e-12);
                let sqrt_h = DVector::from_iterator(
                    v.nrows(),
                    h.block(i).iter().map(|&x| x.sqrt()),
                );
                assert!((sqrt_h.transpose() * v).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_spectrum() {
        let spec = spectrum_m(&DMatrix::identity(4, 4)).unwrap();
        assert_relative_eq!(spec.spectral_radius, 1.0, epsilon = 1e-12);
        assert_relative_eq!(spec.spectral_norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stability_constants_hand_values() {
        let c = stability_constants(1.0, 0.1, 0.0, 0.25).unwrap();
        assert_relative_eq!(c.mu_tilde, 0.025, epsilon = 1e-15);
        assert_relative_eq!(c.c_p, 280.0, epsilon = 1e-12);
        assert_relative_eq!(c.lambda, 0.95, epsilon = 1e-15);
        assert_eq!(c.s, 4.0);
    }

    #[test]
    fn lambda_monotone_decreasing_in_alpha() {
        let mut last = f64::INFINITY;
        for &alpha in &[0.05, 0.1, 0.2, 0.4] {
            let c = stability_constants(1.0, alpha, 0.0, 0.25).unwrap();
            assert!(c.lambda < last);
            last = c.lambda;
        }
    }

    #[test]
    fn alpha_bound_enforced_by_name() {
        let err = stability_constants(0.02, 0.05, 1.0, 0.1).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("alpha <= 1/(2 L_g^2/eta + 2 eta)"), "{msg}");
    }

    #[test]
    fn toy_constants_within_paper_bounds() {
        let (toy, y) = toy_instance_with_sizes(1, &[4, 4]);
        let prob = LowerProblem::new(Arc::new(toy), 0.5).unwrap();
        let c = estimate_constants(&prob, &[y], 20, 5).unwrap();
        assert!(c.omega_g <= 1.0 + 1e-12);
        assert!(c.l_g <= 1.0 + 1e-12);
        assert!(c.nu_min > 0.0 && c.nu_min < 1.0);
        assert!(c.c_0.is_finite() && c.c_0 > 0.0);
    }

    #[test]
    fn dkl_bound_hand_value() {
        let layout = BlockLayout::new(vec![2]).unwrap();
        let v = dkl_global_bound(&layout, 0.25);
        assert_relative_eq!(v, 4.0f64.ln() + 0.25 * 2.0 * 0.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(v, 1.039_720_770_839_917_9, epsilon = 1e-12);
    }

    #[test]
    fn fit_rate_exact_geometric() {
        let trace: Vec<f64> = (0..40).map(|t| 5.0 * 0.9f64.powi(t)).collect();
        assert_relative_eq!(fit_rate(&trace).unwrap(), 0.9, epsilon = 1e-9);
        assert!(fit_rate(&[1.0, 0.5]).is_err());
        assert!(fit_rate(&[1.0, 0.0, 0.5]).is_err());
    }

    #[test]
    fn transient_index_finds_stable_tail() {
        let deltas = [3.0, 2.0, 0.5, 1.5, 0.4, 0.3, 0.2];
        assert_eq!(transient_index(&deltas, 0.6), Some(4));
        assert_eq!(transient_index(&deltas, 10.0), Some(0));
        assert_eq!(transient_index(&deltas, 0.1), None);
    }

    #[test]
    fn lmi_passes_on_gentle_toy() {
        use crate::jacobian::build_mu;
        use crate::lower_solver::solve_reference;
        let (toy, y) = toy_instance_with_sizes(2, &[3, 3]);
        let eta = 2.0;
        let prob = LowerProblem::new(Arc::new(toy), eta).unwrap();
        let consts = estimate_constants(&prob, &[y.clone()], 10, 1).unwrap();
        let alpha = 0.9 / (2.0 * consts.l_g * consts.l_g / eta + 2.0 * eta);
        let cert = stability_constants(eta, alpha, consts.l_g, consts.nu_min).unwrap();
        let star = solve_reference(&prob, &y, None, alpha).unwrap();
        let dyn_mats = build_mu(&prob, &star, &star, &y, alpha, eta).unwrap();
        let out = lmi_check(&dyn_mats.m, &star, &cert, cert.eps_bar).unwrap();
        assert!(out.pass, "min scaled eig {}", out.min_eig_scaled);
    }
}
