//! Lower-level games: potential values and derivatives.
//!
//! `CostModel` is the interface the solvers differentiate through; `BprGame`
//! is the congestion-game instance over a road network, and the applications
//! module supplies a small quadratic game behind the same trait.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{link_flows, PathFlowSpace, RoadNetwork};
use crate::simplex::{BlockLayout, BlockSimplexVector};

/// A convex potential game over a block simplex, smooth in the upper decision.
///
/// Implementations provide the potential and the derivative blocks the solver
/// and the Jacobian recursion consume. All methods are pure.
pub trait CostModel: Send + Sync {
    fn layout(&self) -> &Arc<BlockLayout>;

    /// Dimension of the upper-level decision the game is differentiated against.
    fn upper_dim(&self) -> usize;

    /// Potential value g(h, y).
    fn potential(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64>;

    /// Gradient of the potential in h (unregularized).
    fn grad_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>>;

    /// Hessian of the potential in h; positive semidefinite.
    fn hessian_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Mixed derivative, shape (total paths) x (upper dim).
    fn cross_hessian(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Hessian-matrix product; override when the Hessian has cheap structure.
    fn hessian_apply(
        &self,
        h: &BlockSimplexVector,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        Ok(self.hessian_h(h, y)? * x)
    }

    /// A priori bound on the gradient norm over the model's domain, if known.
    fn grad_norm_bound(&self) -> Option<f64> {
        None
    }

    /// A priori bound on the Hessian spectral norm over the domain, if known.
    fn hessian_norm_bound(&self) -> Option<f64> {
        None
    }
}

/// An entropically regularized lower-level problem: g(h, y) + eta * psi(h).
#[derive(Clone)]
pub struct LowerProblem {
    pub model: Arc<dyn CostModel>,
    pub eta: f64,
}

impl LowerProblem {
    pub fn new(model: Arc<dyn CostModel>, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Validation(format!(
                "regularization weight must be positive, got {eta}"
            )));
        }
        Ok(LowerProblem { model, eta })
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        self.model.layout()
    }

    pub fn upper_dim(&self) -> usize {
        self.model.upper_dim()
    }

    /// Regularized potential g(h, y) + eta * sum(h ln h - h).
    pub fn reg_potential(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64> {
        Ok(self.model.potential(h, y)? + self.eta * h.neg_entropy())
    }

    /// Regularized gradient: grad_h g + eta * ln(h). Requires h strictly positive.
    pub fn reg_grad_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>> {
        if !h.strictly_positive() {
            return Err(Error::Domain(
                "regularized gradient needs strictly positive entries".into(),
            ));
        }
        let mut g = self.model.grad_h(h, y)?;
        for (gj, &hj) in g.iter_mut().zip(h.as_vector().iter()) {
            *gj += self.eta * hj.ln();
        }
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Quartic delay (BPR) routing game
// ---------------------------------------------------------------------------

/// Travel time A + B (x / (K + y))^4 on one link.
pub fn link_cost(a: f64, b: f64, k: f64, y: f64, x: f64) -> Result<f64> {
    let cap = k + y;
    if !(cap > 0.0) {
        return Err(Error::Domain(format!(
            "effective capacity {cap} must be positive"
        )));
    }
    let r = x / cap;
    Ok(a + b * r.powi(4))
}

/// Derivative of the link cost in the flow: 4 B x^3 / (K + y)^4.
fn link_cost_dx(b: f64, k: f64, y: f64, x: f64) -> f64 {
    let cap = k + y;
    4.0 * b * x.powi(3) / cap.powi(4)
}

/// Derivative of the link cost in the expansion: -4 B x^4 / (K + y)^5.
fn link_cost_dy(b: f64, k: f64, y: f64, x: f64) -> f64 {
    let cap = k + y;
    -4.0 * b * x.powi(4) / cap.powi(5)
}

/// Routing game with quartic volume-delay costs over enumerated paths.
///
/// The upper decision indexes capacity expansions on `upper_map`; links not in
/// the map keep their base capacity.
pub struct BprGame {
    net: Arc<RoadNetwork>,
    space: Arc<PathFlowSpace>,
    upper_map: Vec<usize>,
    /// For each link, slot in `upper_map` if expandable.
    link_slot: Vec<Option<usize>>,
}

impl BprGame {
    pub fn new(
        net: Arc<RoadNetwork>,
        space: Arc<PathFlowSpace>,
        upper_map: Vec<usize>,
    ) -> Result<Self> {
        let mut link_slot = vec![None; net.links.len()];
        for (slot, &a) in upper_map.iter().enumerate() {
            if a >= net.links.len() {
                return Err(Error::Validation(format!(
                    "upper map references unknown link {a}"
                )));
            }
            if link_slot[a].is_some() {
                return Err(Error::Validation(format!(
                    "upper map lists link {a} twice"
                )));
            }
            link_slot[a] = Some(slot);
        }
        Ok(BprGame {
            net,
            space,
            upper_map,
            link_slot,
        })
    }

    /// Uses every link with a positive expansion bound, in file order.
    pub fn from_expandable(net: Arc<RoadNetwork>, space: Arc<PathFlowSpace>) -> Result<Self> {
        let upper_map = net.expandable_links();
        BprGame::new(net, space, upper_map)
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn space(&self) -> &Arc<PathFlowSpace> {
        &self.space
    }

    pub fn upper_map(&self) -> &[usize] {
        &self.upper_map
    }

    /// Box bounds (0, u_a) for the expandable links.
    pub fn expansion_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = DVector::zeros(self.upper_map.len());
        let hi = DVector::from_iterator(
            self.upper_map.len(),
            self.upper_map.iter().map(|&a| self.net.links[a].expansion_ub),
        );
        (lo, hi)
    }

    /// Expansion on link `a` under the upper decision `y`.
    fn expansion(&self, a: usize, y: &DVector<f64>) -> f64 {
        self.link_slot[a].map_or(0.0, |slot| y[slot])
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.upper_map.len() {
            return Err(Error::Shape(format!(
                "upper decision has {} entries, expected {}",
                y.len(),
                self.upper_map.len()
            )));
        }
        Ok(())
    }

    pub fn flows(&self, h: &BlockSimplexVector) -> Result<DVector<f64>> {
        link_flows(&self.space, h)
    }

    /// Per-link travel times at the given flows and expansions.
    pub fn costs(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_y(y)?;
        let mut c = DVector::zeros(self.net.links.len());
        for (a, link) in self.net.links.iter().enumerate() {
            c[a] = link_cost(
                link.free_flow_time,
                link.bpr_coeff,
                link.capacity,
                self.expansion(a, y),
                x[a],
            )?;
        }
        Ok(c)
    }

    /// Per-link cost slopes in the flow.
    pub fn cost_slopes(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_y(y)?;
        let mut s = DVector::zeros(self.net.links.len());
        for (a, link) in self.net.links.iter().enumerate() {
            let ya = self.expansion(a, y);
            if !(link.capacity + ya > 0.0) {
                return Err(Error::Domain(format!(
                    "effective capacity of link {} is nonpositive",
                    a + 1
                )));
            }
            s[a] = link_cost_dx(link.bpr_coeff, link.capacity, ya, x[a]);
        }
        Ok(s)
    }

    /// Per-link cost sensitivities to the expansion, for expandable links.
    pub fn cost_dy(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_y(y)?;
        let mut s = DVector::zeros(self.upper_map.len());
        for (slot, &a) in self.upper_map.iter().enumerate() {
            let link = &self.net.links[a];
            let ya = y[slot];
            if !(link.capacity + ya > 0.0) {
                return Err(Error::Domain(format!(
                    "effective capacity of link {} is nonpositive",
                    a + 1
                )));
            }
            s[slot] = link_cost_dy(link.bpr_coeff, link.capacity, ya, x[a]);
        }
        Ok(s)
    }

    /// Rigorous gradient-norm bound: every link flow is at most the summed
    /// demand of the OD pairs whose candidate paths use it, and expansions are
    /// nonnegative, so per-path worst-case costs bound the gradient entries.
    pub fn grad_norm_bound_exact(&self) -> Result<f64> {
        let links = self.net.links.len();
        let mut x_max = vec![0.0f64; links];
        for (i, od) in self.space.od_pairs.iter().enumerate() {
            let mut used = vec![false; links];
            for path in &self.space.paths[i] {
                for &a in path {
                    used[a] = true;
                }
            }
            for a in 0..links {
                if used[a] {
                    x_max[a] += od.demand;
                }
            }
        }
        let mut c_max = DVector::zeros(links);
        for (a, link) in self.net.links.iter().enumerate() {
            c_max[a] = link_cost(
                link.free_flow_time,
                link.bpr_coeff,
                link.capacity,
                0.0,
                x_max[a],
            )?;
        }
        let mut sq = 0.0;
        for (i, od) in self.space.od_pairs.iter().enumerate() {
            for path in &self.space.paths[i] {
                let worst: f64 = path.iter().map(|&a| c_max[a]).sum();
                sq += (od.demand * worst).powi(2);
            }
        }
        Ok(sq.sqrt())
    }
}

impl CostModel for BprGame {
    fn layout(&self) -> &Arc<BlockLayout> {
        self.space.layout()
    }

    fn upper_dim(&self) -> usize {
        self.upper_map.len()
    }

    /// Closed-form integral of the quartic cost: sum_a A x + B x^5 / (5 (K+y)^4).
    fn potential(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64> {
        self.check_y(y)?;
        let x = self.flows(h)?;
        let mut g = 0.0;
        for (a, link) in self.net.links.iter().enumerate() {
            let cap = link.capacity + self.expansion(a, y);
            if !(cap > 0.0) {
                return Err(Error::Domain(format!(
                    "effective capacity of link {} is nonpositive",
                    a + 1
                )));
            }
            g += link.free_flow_time * x[a] + link.bpr_coeff * x[a].powi(5) / (5.0 * cap.powi(4));
        }
        Ok(g)
    }

    fn grad_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.flows(h)?;
        let c = self.costs(&x, y)?;
        Ok(self.space.incidence() * c)
    }

    fn hessian_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = self.flows(h)?;
        let slopes = self.cost_slopes(&x, y)?;
        let delta = self.space.incidence();
        let mut scaled = delta.clone();
        for (a, mut col) in scaled.column_iter_mut().enumerate() {
            col *= slopes[a];
        }
        Ok(&scaled * delta.transpose())
    }

    fn cross_hessian(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = self.flows(h)?;
        let dy = self.cost_dy(&x, y)?;
        let delta = self.space.incidence();
        let mut out = DMatrix::zeros(delta.nrows(), self.upper_map.len());
        for (slot, &a) in self.upper_map.iter().enumerate() {
            out.column_mut(slot).axpy(dy[slot], &delta.column(a), 0.0);
        }
        Ok(out)
    }

    fn hessian_apply(
        &self,
        h: &BlockSimplexVector,
        y: &DVector<f64>,
        m: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let x = self.flows(h)?;
        let slopes = self.cost_slopes(&x, y)?;
        let delta = self.space.incidence();
        // (Delta diag(c') Delta^T) m via two skinny products.
        let mut inner = delta.tr_mul(m);
        for (a, mut row) in inner.row_iter_mut().enumerate() {
            row *= slopes[a];
        }
        Ok(delta * inner)
    }

    fn grad_norm_bound(&self) -> Option<f64> {
        self.grad_norm_bound_exact().ok()
    }
}
