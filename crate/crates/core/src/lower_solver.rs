//! Entropic projected mirror descent on the product of simplices.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::routing_game::LowerProblem;
use crate::simplex::{kl_divergence, BlockSimplexVector};

/// Inner-loop configuration.
#[derive(Debug, Clone)]
pub struct LowerSolveConfig {
    /// Mirror-descent step size.
    pub alpha: f64,
    /// Fixed number of steps.
    pub iters: usize,
    /// When set, stop early once the KL divergence between consecutive
    /// iterates drops below this tolerance and the fixed-point residual check
    /// passes (reference-solve mode).
    pub tol: Option<f64>,
}

impl LowerSolveConfig {
    pub fn fixed(alpha: f64, iters: usize) -> Self {
        LowerSolveConfig {
            alpha,
            iters,
            tol: None,
        }
    }

    pub fn reference(alpha: f64) -> Self {
        LowerSolveConfig {
            alpha,
            iters: 5_000_000,
            tol: Some(1e-14),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Validation(format!(
                "step size must be positive, got {}",
                self.alpha
            )));
        }
        if self.iters == 0 {
            return Err(Error::Validation("iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of a lower solve.
#[derive(Debug, Clone)]
pub struct LowerIterRecord {
    /// KL divergence to a supplied reference solution, when available.
    pub eps_h: Option<f64>,
    /// Smallest entry of the iterate.
    pub min_entry: f64,
}

#[derive(Debug, Clone)]
pub struct LowerResult {
    pub h_final: BlockSimplexVector,
    pub trace: Vec<LowerIterRecord>,
    /// Steps actually taken (less than the budget when a tolerance stops early).
    pub iters_run: usize,
}

/// Maximum fixed-point residual accepted by reference solves.
pub const FIXED_POINT_RESIDUAL_TOL: f64 = 1e-12;

/// One multiplicative mirror-descent step on every block.
///
/// The closed-form update h * exp(-alpha (grad g + eta ln h)) / Z is applied
/// in the algebraically identical form exp((1 - alpha eta) ln h - alpha grad g)
/// with the per-block maximum exponent subtracted before exponentiation, which
/// neither overflows nor manufactures NaNs when entries underflow to zero.
pub fn pmd_step(
    prob: &LowerProblem,
    h: &BlockSimplexVector,
    y: &DVector<f64>,
    alpha: f64,
) -> Result<BlockSimplexVector> {
    if !(alpha > 0.0) {
        return Err(Error::Validation(format!(
            "step size must be positive, got {alpha}"
        )));
    }
    if alpha * prob.eta >= 1.0 {
        return Err(Error::Numeric(format!(
            "alpha * eta = {} >= 1 breaks the multiplicative update",
            alpha * prob.eta
        )));
    }
    let grad = prob.model.grad_h(h, y)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient has non-finite entries".into()));
    }
    let retain = 1.0 - alpha * prob.eta;
    let layout = h.layout().clone();
    let hv = h.as_vector();
    let mut exponent = DVector::zeros(hv.len());
    for j in 0..hv.len() {
        // ln(0) = -inf propagates to a zero weight, keeping dead entries dead.
        exponent[j] = retain * hv[j].ln() - alpha * grad[j];
    }
    let mut out = DVector::zeros(hv.len());
    for range in layout.ranges() {
        let m = range
            .clone()
            .map(|j| exponent[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::Numeric("entire block has vanished".into()));
        }
        let mut z = 0.0;
        for j in range.clone() {
            let w = (exponent[j] - m).exp();
            out[j] = w;
            z += w;
        }
        for j in range {
            out[j] /= z;
        }
    }
    Ok(BlockSimplexVector::new_unchecked(layout, out))
}

/// Largest absolute change under one more step; the fixed-point residual.
pub fn fixed_point_residual(
    prob: &LowerProblem,
    h: &BlockSimplexVector,
    y: &DVector<f64>,
    alpha: f64,
) -> Result<f64> {
    let next = pmd_step(prob, h, y, alpha)?;
    Ok((next.as_vector() - h.as_vector()).amax())
}

/// Runs the inner loop from `h0`, optionally tracking the KL gap to a
/// reference solution.
pub fn solve_lower(
    prob: &LowerProblem,
    y: &DVector<f64>,
    h0: &BlockSimplexVector,
    cfg: &LowerSolveConfig,
    reference: Option<&BlockSimplexVector>,
) -> Result<LowerResult> {
    cfg.validate()?;
    if !h0.strictly_positive() {
        return Err(Error::Domain("initial point must be strictly positive".into()));
    }
    let mut h = h0.clone();
    let mut trace = Vec::with_capacity(cfg.iters.min(65_536));
    let mut iters_run = 0;
    for _ in 0..cfg.iters {
        let next = pmd_step(prob, &h, y, cfg.alpha)?;
        iters_run += 1;
        let eps_h = match reference {
            Some(star) => Some(kl_divergence(star, &next)?),
            None => None,
        };
        trace.push(LowerIterRecord {
            eps_h,
            min_entry: next.min_entry(),
        });
        if let Some(tol) = cfg.tol {
            let step_kl = kl_divergence(&next, &h)?;
            h = next;
            if step_kl < tol && fixed_point_residual(prob, &h, y, cfg.alpha)? <= FIXED_POINT_RESIDUAL_TOL
            {
                return Ok(LowerResult {
                    h_final: h,
                    trace,
                    iters_run,
                });
            }
        } else {
            h = next;
        }
    }
    if cfg.tol.is_some() {
        return Err(Error::Numeric(format!(
            "reference solve did not converge within {} iterations",
            cfg.iters
        )));
    }
    Ok(LowerResult {
        h_final: h,
        trace,
        iters_run,
    })
}

/// High-accuracy equilibrium used as the oracle for the lower solution map.
pub fn solve_reference(
    prob: &LowerProblem,
    y: &DVector<f64>,
    h0: Option<&BlockSimplexVector>,
    alpha: f64,
) -> Result<BlockSimplexVector> {
    let uniform;
    let start = match h0 {
        Some(h) => h,
        None => {
            uniform = BlockSimplexVector::uniform(prob.layout().clone());
            &uniform
        }
    };
    let cfg = LowerSolveConfig::reference(alpha);
    Ok(solve_lower(prob, y, start, &cfg, None)?.h_final)
}

/// Provable componentwise floor exp(-2 Omega_g / eta) / d_max on every iterate
/// of the multiplicative update started inside the floor.
pub fn interior_floor(eta: f64, omega_g: f64, d_max: usize) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Validation(format!("eta must be positive, got {eta}")));
    }
    if omega_g < 0.0 {
        return Err(Error::Validation(format!(
            "gradient bound must be nonnegative, got {omega_g}"
        )));
    }
    if d_max == 0 {
        return Err(Error::Validation("maximum block size must be at least 1".into()));
    }
    Ok((-2.0 * omega_g / eta).exp() / d_max as f64)
}
