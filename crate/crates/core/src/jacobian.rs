//! Forward differentiation of the mirror-descent dynamics.
//!
//! One step of the multiplicative update linearizes to R <- M R + U where the
//! coefficient matrices depend on the current and next iterate. Iterating
//! that recursion alongside the solver estimates the sensitivity of the lower
//! solution to the upper decision; at a fixed point the exact sensitivity is
//! the solution of (I - M) R = U.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lower_solver::{fixed_point_residual, FIXED_POINT_RESIDUAL_TOL};
use crate::routing_game::LowerProblem;
use crate::simplex::{BlockLayout, BlockSimplexVector};

/// Sensitivity estimate carried across inner iterations.
#[derive(Debug, Clone)]
pub struct JacobianState {
    pub r: DMatrix<f64>,
    pub t: usize,
}

impl JacobianState {
    /// The recursion starts from zero sensitivity.
    pub fn zero(layout: &BlockLayout, upper_dim: usize) -> Self {
        JacobianState {
            r: DMatrix::zeros(layout.total_dim(), upper_dim),
            t: 0,
        }
    }
}

/// Block-diagonal matrix with one dense block per population.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    layout: Arc<BlockLayout>,
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockDiag {
    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.layout.total_dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, block) in self.blocks.iter().enumerate() {
            let range = self.layout.range(i);
            m.view_mut((range.start, range.start), (range.len(), range.len()))
                .copy_from(block);
        }
        m
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, block) in self.blocks.iter().enumerate() {
            let range = self.layout.range(i);
            let xin = x.rows(range.start, range.len());
            out.rows_mut(range.start, range.len())
                .copy_from(&(block * xin));
        }
        out
    }
}

/// Covariance-style factor of one update step: per block diag(h) - h h'.
///
/// Built from the *next* iterate of the solver. Each block is symmetric,
/// positive semidefinite, has zero row sums, and spectral norm at most one.
pub fn build_b(h_next: &BlockSimplexVector) -> BlockDiag {
    let layout = h_next.layout().clone();
    let blocks = layout
        .ranges()
        .map(|range| {
            let hb = DVector::from_column_slice(&h_next.as_vector().as_slice()[range]);
            DMatrix::from_diagonal(&hb) - &hb * hb.transpose()
        })
        .collect();
    BlockDiag { layout, blocks }
}

/// Coefficient matrices of the linearized update.
#[derive(Debug, Clone)]
pub struct DynamicsMatrices {
    pub m: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub b: BlockDiag,
}

/// Assembles M = B [(1 - eta alpha) diag(1/h) - alpha hess g] and
/// U = -alpha B cross_hess g, with B taken at `h_next` and the pointwise
/// terms at `h_t` (the caller guarantees `h_next` is the step from `h_t`).
pub fn build_mu(
    prob: &LowerProblem,
    h_t: &BlockSimplexVector,
    h_next: &BlockSimplexVector,
    y: &DVector<f64>,
    alpha: f64,
    eta: f64,
) -> Result<DynamicsMatrices> {
    if !h_t.strictly_positive() {
        return Err(Error::Domain(
            "dynamics matrices need a strictly positive current iterate".into(),
        ));
    }
    let b = build_b(h_next);
    let hess = prob.model.hessian_h(h_t, y)?;
    let n = h_t.len();
    let retain = 1.0 - eta * alpha;
    let mut inner = hess * (-alpha);
    for j in 0..n {
        inner[(j, j)] += retain / h_t.as_vector()[j];
    }
    let m = b.apply(&inner);
    let cross = prob.model.cross_hessian(h_t, y)?;
    let u = b.apply(&cross) * (-alpha);
    Ok(DynamicsMatrices { m, u, b })
}

/// One recursion step: M R + U.
pub fn jacobian_step(dyn_mats: &DynamicsMatrices, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if dyn_mats.m.ncols() != r.nrows() || dyn_mats.u.shape() != r.shape() {
        return Err(Error::Shape(format!(
            "dynamics {}x{} incompatible with state {}x{}",
            dyn_mats.m.nrows(),
            dyn_mats.m.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(&dyn_mats.m * r + &dyn_mats.u)
}

/// Applies one recursion step without materializing M.
///
/// Computes B [(1 - eta alpha) diag(1/h_t) R - alpha (hess R + cross)] using
/// the model's structured Hessian product; rows whose entries have underflowed
/// to zero are annihilated by B and handled directly.
pub fn jacobian_step_operator(
    prob: &LowerProblem,
    h_t: &BlockSimplexVector,
    h_next: &BlockSimplexVector,
    y: &DVector<f64>,
    alpha: f64,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let retain = 1.0 - prob.eta * alpha;
    let mut inner = prob.model.hessian_apply(h_t, y, r)?;
    inner += prob.model.cross_hessian(h_t, y)?;
    inner *= -alpha;
    let hv = h_t.as_vector();
    let cols = inner.ncols();
    for j in 0..hv.len() {
        if hv[j] > 0.0 {
            let scale = retain / hv[j];
            for c in 0..cols {
                inner[(j, c)] += scale * r[(j, c)];
            }
        } else {
            for c in 0..cols {
                inner[(j, c)] = 0.0;
            }
        }
    }
    // Apply B blockwise: diag(h_next) T - h_next (h_next' T).
    let layout = h_t.layout();
    let nv = h_next.as_vector();
    let mut out = inner;
    let mut mass = vec![0.0f64; cols];
    for range in layout.ranges() {
        mass.iter_mut().for_each(|m| *m = 0.0);
        for j in range.clone() {
            let hj = nv[j];
            for (c, m) in mass.iter_mut().enumerate() {
                *m += hj * out[(j, c)];
            }
        }
        for j in range {
            let hj = nv[j];
            for (c, m) in mass.iter().enumerate() {
                out[(j, c)] = hj * (out[(j, c)] - m);
            }
        }
    }
    Ok(out)
}

/// Sensitivity of the equilibrium to the upper decision: solves
/// (I - M) R = U at a converged point.
///
/// Entries of `h_star` that have underflowed to exact zero are outside the
/// active support; their sensitivities vanish, so the system is solved on the
/// positive support and zero rows are scattered back.
pub fn exact_jacobian(
    prob: &LowerProblem,
    y: &DVector<f64>,
    h_star: &BlockSimplexVector,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let residual = fixed_point_residual(prob, h_star, y, alpha)?;
    if residual > 10.0 * FIXED_POINT_RESIDUAL_TOL {
        return Err(Error::Numeric(format!(
            "point is not an equilibrium: fixed-point residual {residual:.3e}"
        )));
    }
    let support: Vec<usize> = h_star
        .as_vector()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(j, _)| j)
        .collect();
    let full = h_star.len();
    let d_u = prob.upper_dim();
    let dyn_mats = if support.len() == full {
        build_mu(prob, h_star, h_star, y, alpha, prob.eta)?
    } else {
        restricted_dynamics(prob, h_star, y, alpha, &support)?
    };
    let n = dyn_mats.m.nrows();
    let identity = DMatrix::identity(n, n);
    let system = identity - &dyn_mats.m;
    if n <= 400 {
        let svals = system.clone().singular_values();
        let smax = svals.max();
        let smin = svals.min();
        if smin <= 0.0 || smax / smin > 1e12 {
            return Err(Error::Numeric(format!(
                "I - M is numerically singular (condition {:.3e})",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
    }
    let lu = system.clone().lu();
    let r_sub = lu
        .solve(&dyn_mats.u)
        .ok_or_else(|| Error::Numeric("I - M is singular".into()))?;
    let resid = (&system * &r_sub - &dyn_mats.u).norm();
    let scale = dyn_mats.u.norm().max(1.0);
    if !(resid / scale < 1e-8) {
        return Err(Error::Numeric(format!(
            "linear solve residual {resid:.3e} too large for I - M"
        )));
    }
    if support.len() == full {
        return Ok(r_sub);
    }
    let mut r = DMatrix::zeros(full, d_u);
    for (row_sub, &row_full) in support.iter().enumerate() {
        r.row_mut(row_full).copy_from(&r_sub.row(row_sub));
    }
    Ok(r)
}

/// Dynamics restricted to the strictly positive support of the equilibrium.
fn restricted_dynamics(
    prob: &LowerProblem,
    h_star: &BlockSimplexVector,
    y: &DVector<f64>,
    alpha: f64,
    support: &[usize],
) -> Result<DynamicsMatrices> {
    let hess = prob.model.hessian_h(h_star, y)?;
    let cross = prob.model.cross_hessian(h_star, y)?;
    let hv = h_star.as_vector();
    let layout = h_star.layout();
    let retain = 1.0 - prob.eta * alpha;
    let n = support.len();
    let mut inner = DMatrix::zeros(n, n);
    for (i, &fi) in support.iter().enumerate() {
        for (j, &fj) in support.iter().enumerate() {
            inner[(i, j)] = -alpha * hess[(fi, fj)];
        }
        inner[(i, i)] += retain / hv[fi];
    }
    let mut cross_sub = DMatrix::zeros(n, cross.ncols());
    for (i, &fi) in support.iter().enumerate() {
        cross_sub.row_mut(i).copy_from(&cross.row(fi));
    }
    // Blocks of B on the support of each population; block mass still sums to 1.
    let mut sub_sizes = Vec::new();
    let mut sub_blocks = Vec::new();
    let mut cursor = 0;
    for range in layout.ranges() {
        let members: Vec<usize> = support
            .iter()
            .copied()
            .skip_while(|&j| j < range.start)
            .take_while(|&j| j < range.end)
            .collect();
        if members.is_empty() {
            return Err(Error::Numeric(
                "a population lost every path to underflow".into(),
            ));
        }
        let hb = DVector::from_iterator(members.len(), members.iter().map(|&j| hv[j]));
        sub_blocks.push(DMatrix::from_diagonal(&hb) - &hb * hb.transpose());
        sub_sizes.push(members.len());
        cursor += members.len();
    }
    debug_assert_eq!(cursor, n);
    let sub_layout = BlockLayout::new(sub_sizes)?;
    let b = BlockDiag {
        layout: sub_layout,
        blocks: sub_blocks,
    };
    let m = b.apply(&inner);
    let u = b.apply(&cross_sub) * (-alpha);
    Ok(DynamicsMatrices { m, u, b })
}

/// Largest absolute per-block column sum of a sensitivity matrix; should be
/// zero because differentiating the per-block normalization kills column mass.
pub fn max_block_column_sum(layout: &BlockLayout, r: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for range in layout.ranges() {
        for c in 0..r.ncols() {
            let s: f64 = range.clone().map(|j| r[(j, c)]).sum();
            worst = worst.max(s.abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::applications::toy_instance_with_sizes;
    use crate::lower_solver::{pmd_step, solve_reference};
    use crate::routing_game::CostModel;
    use approx::assert_relative_eq;

    #[test]
    fn b_matrix_hand_values() {
        let layout = BlockLayout::new(vec![2]).unwrap();
        let h = BlockSimplexVector::new(layout.clone(), DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let b = build_b(&h);
        let expect = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert_relative_eq!(b.blocks[0], expect, epsilon = 1e-15);

        let vertex =
            BlockSimplexVector::new(layout, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let bv = build_b(&vertex);
        assert_eq!(bv.blocks[0].amax(), 0.0);
    }

    #[test]
    fn b_matrix_zero_row_sums_and_unit_norm() {
        let (toy, _) = toy_instance_with_sizes(21, &[5, 7]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        for _ in 0..20 {
            let h = crate::diagnostics::random_interior_point(toy.layout(), &mut rng);
            let b = build_b(&h);
            for block in &b.blocks {
                let ones = DVector::from_element(block.ncols(), 1.0);
                assert!((block * &ones).amax() < 1e-14);
                let eigs = block.clone().symmetric_eigen().eigenvalues;
                assert!(eigs.min() > -1e-12);
                assert!(eigs.max() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn dynamics_hand_value() {
        // Zero Hessian, eta = 0, uniform 2-block: M = B diag(2, 2).
        struct Flat {
            layout: Arc<BlockLayout>,
        }
        impl crate::routing_game::CostModel for Flat {
            fn layout(&self) -> &Arc<BlockLayout> {
                &self.layout
            }
            fn upper_dim(&self) -> usize {
                1
            }
            fn potential(&self, _h: &BlockSimplexVector, _y: &DVector<f64>) -> Result<f64> {
                Ok(0.0)
            }
            fn grad_h(&self, h: &BlockSimplexVector, _y: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(DVector::zeros(h.len()))
            }
            fn hessian_h(&self, h: &BlockSimplexVector, _y: &DVector<f64>) -> Result<DMatrix<f64>> {
                Ok(DMatrix::zeros(h.len(), h.len()))
            }
            fn cross_hessian(
                &self,
                h: &BlockSimplexVector,
                _y: &DVector<f64>,
            ) -> Result<DMatrix<f64>> {
                Ok(DMatrix::zeros(h.len(), 1))
            }
        }
        let layout = BlockLayout::new(vec![2]).unwrap();
        let prob = LowerProblem::new(
            Arc::new(Flat {
                layout: layout.clone(),
            }),
            0.5,
        )
        .unwrap();
        let h = BlockSimplexVector::uniform(layout);
        let y = DVector::zeros(1);
        let dyn_mats = build_mu(&prob, &h, &h, &y, 0.25, 0.0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_relative_eq!(dyn_mats.m, expect, epsilon = 1e-14);
        assert_eq!(dyn_mats.u.amax(), 0.0);
    }

    #[test]
    fn zero_state_steps_to_u() {
        let (toy, y) = toy_instance_with_sizes(4, &[3, 3]);
        let prob = LowerProblem::new(Arc::new(toy), 0.3).unwrap();
        let h = BlockSimplexVector::uniform(prob.layout().clone());
        let h_next = pmd_step(&prob, &h, &y, 0.1).unwrap();
        let dyn_mats = build_mu(&prob, &h, &h_next, &y, 0.1, prob.eta).unwrap();
        let r0 = DMatrix::zeros(6, 6);
        let r1 = jacobian_step(&dyn_mats, &r0).unwrap();
        assert_relative_eq!(r1, dyn_mats.u, epsilon = 1e-15);
    }

    #[test]
    fn operator_step_matches_explicit() {
        let (toy, y) = toy_instance_with_sizes(9, &[4, 3]);
        let prob = LowerProblem::new(Arc::new(toy), 0.2).unwrap();
        let h = BlockSimplexVector::uniform(prob.layout().clone());
        let h_next = pmd_step(&prob, &h, &y, 0.15).unwrap();
        let dyn_mats = build_mu(&prob, &h, &h_next, &y, 0.15, prob.eta).unwrap();
        let mut r = DMatrix::from_fn(7, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        // Column sums within blocks need not be zero for this equivalence check.
        for _ in 0..3 {
            let explicit = jacobian_step(&dyn_mats, &r).unwrap();
            let operator = jacobian_step_operator(&prob, &h, &h_next, &y, 0.15, &r).unwrap();
            assert_relative_eq!(explicit, operator, epsilon = 1e-12);
            r = explicit;
        }
    }

    #[test]
    fn block_column_sums_preserved() {
        let (toy, y) = toy_instance_with_sizes(14, &[3, 4]);
        let prob = LowerProblem::new(Arc::new(toy), 0.3).unwrap();
        let mut h = BlockSimplexVector::uniform(prob.layout().clone());
        let mut r = DMatrix::zeros(7, 7);
        for _ in 0..50 {
            let h_next = pmd_step(&prob, &h, &y, 0.1).unwrap();
            r = jacobian_step_operator(&prob, &h, &h_next, &y, 0.1, &r).unwrap();
            h = h_next;
        }
        assert!(max_block_column_sum(prob.layout(), &r) < 1e-9);
    }

    #[test]
    fn exact_jacobian_is_fixed_point_and_alpha_invariant() {
        let (toy, y) = toy_instance_with_sizes(5, &[3, 3]);
        let prob = LowerProblem::new(Arc::new(toy), 0.4).unwrap();
        let star = solve_reference(&prob, &y, None, 0.3).unwrap();
        let alpha = 0.3;
        let r_star = exact_jacobian(&prob, &y, &star, alpha).unwrap();
        let dyn_mats = build_mu(&prob, &star, &star, &y, alpha, prob.eta).unwrap();
        let step = jacobian_step(&dyn_mats, &r_star).unwrap();
        assert!((step - &r_star).norm() <= 1e-10);

        let r_half = exact_jacobian(&prob, &y, &star, alpha / 2.0).unwrap();
        assert!((&r_star - &r_half).amax() <= 1e-9);
    }

    #[test]
    fn no_upper_coupling_means_zero_jacobian() {
        // y = 0 gives a zero cross Hessian for the toy game.
        let (toy, _) = toy_instance_with_sizes(6, &[3, 2]);
        let prob = LowerProblem::new(Arc::new(toy), 0.5).unwrap();
        let y = DVector::zeros(5);
        let star = solve_reference(&prob, &y, None, 0.4).unwrap();
        let r = exact_jacobian(&prob, &y, &star, 0.2).unwrap();
        assert!(r.amax() <= 1e-12);
    }

    #[test]
    fn unrolled_recursion_approaches_exact_jacobian() {
        let (toy, y) = toy_instance_with_sizes(12, &[3, 3]);
        let prob = LowerProblem::new(Arc::new(toy), 0.4).unwrap();
        let alpha = 0.25;
        let star = solve_reference(&prob, &y, None, alpha).unwrap();
        let r_star = exact_jacobian(&prob, &y, &star, alpha).unwrap();
        let mut h = BlockSimplexVector::uniform(prob.layout().clone());
        let mut r = DMatrix::zeros(6, 6);
        for _ in 0..400 {
            let h_next = pmd_step(&prob, &h, &y, alpha).unwrap();
            r = jacobian_step_operator(&prob, &h, &h_next, &y, alpha, &r).unwrap();
            h = h_next;
        }
        assert!((&r - &r_star).norm() <= 1e-8, "gap {}", (&r - &r_star).norm());
    }
}
