//! Outer loop: hypergradient assembly, projected gradient steps on a box, and
//! orchestration of the warm-started inner solver with the Jacobian recursion.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::diagnostics::spectral_norm;
use crate::error::{Error, Result};
use crate::jacobian::{build_mu, exact_jacobian, jacobian_step_operator};
use crate::lower_solver::{pmd_step, solve_reference};
use crate::routing_game::LowerProblem;
use crate::simplex::{kl_divergence, BlockSimplexVector};

/// Upper-level objective with gradients in both arguments.
pub trait UpperObjective: Send + Sync {
    fn value(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64>;
    fn grad_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>>;
    fn grad_y(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Componentwise box constraints on the upper decision.
#[derive(Debug, Clone)]
pub struct BoxBounds {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape("box bounds must have equal length".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(&l, &h)| l > h) {
            return Err(Error::Validation("box has lo > hi".into()));
        }
        Ok(BoxBounds { lo, hi })
    }

    pub fn symmetric(dim: usize, radius: f64) -> Self {
        BoxBounds {
            lo: DVector::from_element(dim, -radius),
            hi: DVector::from_element(dim, radius),
        }
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        y.len() == self.lo.len()
            && y.iter()
                .zip(self.lo.iter())
                .zip(self.hi.iter())
                .all(|((&v, &l), &h)| v >= l && v <= h)
    }
}

/// Generic feasible-set projector; the box is the first-class instance.
pub trait Projector: Send + Sync {
    fn project(&self, y: &DVector<f64>) -> DVector<f64>;
}

impl Projector for BoxBounds {
    fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        project_box(y, self)
    }
}

/// Componentwise clamp onto the box.
pub fn project_box(y: &DVector<f64>, bounds: &BoxBounds) -> DVector<f64> {
    DVector::from_iterator(
        y.len(),
        y.iter()
            .zip(bounds.lo.iter())
            .zip(bounds.hi.iter())
            .map(|((&v, &l), &h)| v.clamp(l, h)),
    )
}

/// Gradient estimator grad_y f + R' grad_h f at the current inner state.
pub fn hypergradient(
    upper: &dyn UpperObjective,
    h_d: &BlockSimplexVector,
    r_d: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gy = upper.grad_y(h_d, y)?;
    let gh = upper.grad_h(h_d, y)?;
    if r_d.nrows() != gh.len() || r_d.ncols() != gy.len() {
        return Err(Error::Shape(format!(
            "sensitivity is {}x{}, expected {}x{}",
            r_d.nrows(),
            r_d.ncols(),
            gh.len(),
            gy.len()
        )));
    }
    let grad = gy + r_d.tr_mul(&gh);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("hypergradient has non-finite entries".into()));
    }
    Ok(grad)
}

/// Reference-solve options for the exact gradient and error recording.
#[derive(Debug, Clone)]
pub struct RefSolveConfig {
    /// Step size of the reference mirror-descent solve.
    pub alpha: f64,
}

/// True gradient of the reduced objective via the equilibrium and its exact
/// sensitivity.
pub fn exact_gradient(
    upper: &dyn UpperObjective,
    prob: &LowerProblem,
    y: &DVector<f64>,
    h0: Option<&BlockSimplexVector>,
    ref_cfg: &RefSolveConfig,
) -> Result<DVector<f64>> {
    let star = solve_reference(prob, y, h0, ref_cfg.alpha)?;
    let r_star = exact_jacobian(prob, y, &star, ref_cfg.alpha)?;
    hypergradient(upper, &star, &r_star, y)
}

/// Squared distance of -grad to the normal cone of the box at y.
///
/// Per coordinate: the full gradient counts strictly inside the box, only the
/// infeasible-ascent part counts at an active bound.
pub fn stationarity_sq(grad: &DVector<f64>, y: &DVector<f64>, bounds: &BoxBounds) -> Result<f64> {
    if !bounds.contains(y) {
        return Err(Error::Domain("point is outside the box".into()));
    }
    let mut acc = 0.0;
    for j in 0..y.len() {
        let (l, h, g) = (bounds.lo[j], bounds.hi[j], grad[j]);
        let s = if l == h {
            0.0
        } else if y[j] == l {
            (-g).max(0.0)
        } else if y[j] == h {
            g.max(0.0)
        } else {
            g.abs()
        };
        acc += s * s;
    }
    Ok(acc)
}

/// Outer-loop configuration.
#[derive(Debug, Clone)]
pub struct BilevelConfig {
    /// Outer iterations.
    pub outer_iters: usize,
    /// Inner iterations per outer step.
    pub inner_iters: usize,
    /// Upper step size (zero freezes the upper decision).
    pub beta: f64,
    /// Inner step size.
    pub alpha: f64,
    pub bounds: BoxBounds,
    /// Record KL and sensitivity errors against reference solutions each
    /// outer step (requires a reference solve plus an exact sensitivity per
    /// step; slow).
    pub record_errors: bool,
    /// Collect spectral radius and norm of the inner dynamics at the snapshot
    /// outer iteration (dense; meant for small instances).
    pub collect_spectra: bool,
    /// Outer iteration whose inner error trajectory is recorded.
    pub snapshot_k: usize,
}

impl BilevelConfig {
    pub fn new(
        outer_iters: usize,
        inner_iters: usize,
        beta: f64,
        alpha: f64,
        bounds: BoxBounds,
    ) -> Result<Self> {
        if outer_iters == 0 || inner_iters == 0 {
            return Err(Error::Validation(
                "outer and inner iteration counts must be at least 1".into(),
            ));
        }
        if !(beta >= 0.0) {
            return Err(Error::Validation(format!(
                "upper step size must be nonnegative, got {beta}"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Validation(format!(
                "inner step size must be positive, got {alpha}"
            )));
        }
        Ok(BilevelConfig {
            outer_iters,
            inner_iters,
            beta,
            alpha,
            bounds,
            record_errors: false,
            collect_spectra: false,
            snapshot_k: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct OuterRecord {
    /// Upper objective at the inner terminal state, before the upper step.
    pub objective: f64,
    /// Squared normal-cone distance of the negated estimator.
    pub stationarity_sq: f64,
    pub eps_h: Option<f64>,
    pub eps_r: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct InnerRecord {
    pub t: usize,
    pub eps_h: f64,
    pub eps_r: f64,
}

#[derive(Debug, Clone)]
pub struct SpectrumRecord {
    pub t: usize,
    pub spectral_radius: f64,
    pub spectral_norm: f64,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub outer: Vec<OuterRecord>,
    /// Inner error trajectory at the snapshot outer iteration (when recorded).
    pub inner_snapshot: Vec<InnerRecord>,
    pub snapshot_k: usize,
    pub spectra: Vec<SpectrumRecord>,
    pub final_y: DVector<f64>,
    pub final_h: BlockSimplexVector,
}

/// Runs the double loop: warm-started mirror descent with the unrolled
/// sensitivity recursion inside, a projected gradient step outside.
pub fn run_algorithm1(
    upper: &dyn UpperObjective,
    prob: &LowerProblem,
    cfg: &BilevelConfig,
    y0: &DVector<f64>,
    h0: &BlockSimplexVector,
) -> Result<RunTrace> {
    if !cfg.bounds.contains(y0) {
        return Err(Error::Validation("initial upper decision is infeasible".into()));
    }
    if !h0.strictly_positive() {
        return Err(Error::Domain("initial path flows must be strictly positive".into()));
    }
    if y0.len() != prob.upper_dim() {
        return Err(Error::Shape(format!(
            "upper decision has {} entries, problem expects {}",
            y0.len(),
            prob.upper_dim()
        )));
    }
    let d_l = prob.layout().total_dim();
    let d_u = prob.upper_dim();
    let mut y = y0.clone();
    let mut h = h0.clone();
    let mut outer = Vec::with_capacity(cfg.outer_iters);
    let mut inner_snapshot = Vec::new();
    let mut spectra = Vec::new();

    for k in 0..cfg.outer_iters {
        let started = Instant::now();
        // Sensitivity resets every outer iteration; flows warm start.
        let mut r = DMatrix::zeros(d_l, d_u);
        let snapshot = k == cfg.snapshot_k && (cfg.record_errors || cfg.collect_spectra);
        let reference = if cfg.record_errors {
            let star = solve_reference(prob, &y, Some(&h), cfg.alpha)?;
            let r_star = exact_jacobian(prob, &y, &star, cfg.alpha)?;
            Some((star, r_star))
        } else {
            None
        };

        for t in 0..cfg.inner_iters {
            let h_next = pmd_step(prob, &h, &y, cfg.alpha)?;
            if snapshot && cfg.collect_spectra {
                let dyn_mats = build_mu(prob, &h, &h_next, &y, cfg.alpha, prob.eta)?;
                let eigs = dyn_mats.m.complex_eigenvalues();
                let radius = eigs.iter().map(|c| c.norm()).fold(0.0, f64::max);
                spectra.push(SpectrumRecord {
                    t,
                    spectral_radius: radius,
                    spectral_norm: spectral_norm(&dyn_mats.m),
                });
            }
            r = jacobian_step_operator(prob, &h, &h_next, &y, cfg.alpha, &r)?;
            h = h_next;
            if let Some((star, r_star)) = &reference {
                if snapshot {
                    inner_snapshot.push(InnerRecord {
                        t: t + 1,
                        eps_h: kl_divergence(star, &h)?,
                        eps_r: {
                            let gap = &r - r_star;
                            let s = spectral_norm(&gap);
                            s * s
                        },
                    });
                }
            }
        }

        let objective = upper.value(&h, &y)?;
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "objective became non-finite at outer iteration {k}"
            )));
        }
        let grad_est = hypergradient(upper, &h, &r, &y)?;
        let stationarity = stationarity_sq(&grad_est, &y, &cfg.bounds)?;
        let (eps_h, eps_r) = match &reference {
            Some((star, r_star)) => (
                Some(kl_divergence(star, &h)?),
                Some({
                    let gap = &r - r_star;
                    let s = spectral_norm(&gap);
                    s * s
                }),
            ),
            None => (None, None),
        };
        outer.push(OuterRecord {
            objective,
            stationarity_sq: stationarity,
            eps_h,
            eps_r,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.beta > 0.0 {
            y = project_box(&(&y - &grad_est * cfg.beta), &cfg.bounds);
        }
    }

    Ok(RunTrace {
        outer,
        inner_snapshot,
        snapshot_k: cfg.snapshot_k,
        spectra,
        final_y: y,
        final_h: h,
    })
}
