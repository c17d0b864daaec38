//! Concrete problem instances: the transport network-design upper objective
//! and a small quadratic game used throughout the tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bilevel::UpperObjective;
use crate::error::{Error, Result};
use crate::routing_game::{BprGame, CostModel};
use crate::simplex::{BlockLayout, BlockSimplexVector};

// ---------------------------------------------------------------------------
// Network design
// ---------------------------------------------------------------------------

/// Capacity-expansion planning: total travel time plus converted investment.
///
/// The objective sums `cost * flow` over all links plus `theta * d_a * y_a^2`
/// for the expandable ones. Travel cost equals travel time here; swap in a
/// different game to change that.
pub struct NetworkDesignProblem {
    game: Arc<BprGame>,
    theta: f64,
}

impl NetworkDesignProblem {
    pub fn new(game: Arc<BprGame>, theta: f64) -> Result<Self> {
        if theta < 0.0 {
            return Err(Error::Validation(format!(
                "conversion factor must be nonnegative, got {theta}"
            )));
        }
        Ok(NetworkDesignProblem { game, theta })
    }

    pub fn game(&self) -> &Arc<BprGame> {
        &self.game
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl UpperObjective for NetworkDesignProblem {
    fn value(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64> {
        let x = self.game.flows(h)?;
        let c = self.game.costs(&x, y)?;
        let mut f = c.dot(&x);
        for (slot, &a) in self.game.upper_map().iter().enumerate() {
            let d = self.game.network().links[a].invest_coeff;
            f += self.theta * d * y[slot] * y[slot];
        }
        Ok(f)
    }

    fn grad_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.game.flows(h)?;
        let c = self.game.costs(&x, y)?;
        let slopes = self.game.cost_slopes(&x, y)?;
        // d/dh sum_a c_a(x_a) x_a = Delta (c + x c').
        let marginal = DVector::from_iterator(
            c.len(),
            c.iter().zip(slopes.iter()).zip(x.iter()).map(|((&ca, &sa), &xa)| ca + xa * sa),
        );
        Ok(self.game.space().incidence() * marginal)
    }

    fn grad_y(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.game.flows(h)?;
        let dy = self.game.cost_dy(&x, y)?;
        let mut g = DVector::zeros(y.len());
        for (slot, &a) in self.game.upper_map().iter().enumerate() {
            let d = self.game.network().links[a].invest_coeff;
            g[slot] = x[a] * dy[slot] + 2.0 * self.theta * d * y[slot];
        }
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Toy quadratic game
// ---------------------------------------------------------------------------

/// Lower-level game g(h, y) = (h' y)^2 / 2 with the upper decision matching
/// the path dimension. Over the unit ball of y the gradient and Hessian norms
/// stay within one.
pub struct ToyGameProblem {
    layout: Arc<BlockLayout>,
}

impl ToyGameProblem {
    pub fn new(block_sizes: &[usize]) -> Result<Self> {
        if block_sizes.iter().any(|&s| s < 2) {
            return Err(Error::Validation("toy blocks need at least 2 entries".into()));
        }
        Ok(ToyGameProblem {
            layout: BlockLayout::new(block_sizes.to_vec())?,
        })
    }

    fn check(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<()> {
        if h.len() != self.layout.total_dim() || y.len() != self.layout.total_dim() {
            return Err(Error::Shape(format!(
                "expected h and y of length {}, got {} and {}",
                self.layout.total_dim(),
                h.len(),
                y.len()
            )));
        }
        Ok(())
    }
}

impl CostModel for ToyGameProblem {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn upper_dim(&self) -> usize {
        self.layout.total_dim()
    }

    fn potential(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64> {
        self.check(h, y)?;
        let s = y.dot(h.as_vector());
        Ok(0.5 * s * s)
    }

    fn grad_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(h, y)?;
        Ok(y * y.dot(h.as_vector()))
    }

    fn hessian_h(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(h, y)?;
        Ok(y * y.transpose())
    }

    fn cross_hessian(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(h, y)?;
        let n = y.len();
        let mut m = DMatrix::identity(n, n) * y.dot(h.as_vector());
        m += h.as_vector() * y.transpose();
        Ok(m)
    }

    fn hessian_apply(
        &self,
        h: &BlockSimplexVector,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check(h, y)?;
        let yt_x = y.transpose() * x;
        Ok(y * yt_x)
    }

    fn grad_norm_bound(&self) -> Option<f64> {
        Some(1.0)
    }

    fn hessian_norm_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// Deterministic unit vector for the toy game's upper decision.
fn unit_sphere_point(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        // Box-Muller pairs; rejection keeps the direction well defined.
        let mut v = DVector::zeros(dim);
        for j in 0..dim {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            v[j] = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// The two-population, 30-path instance with a seeded direction on the unit
/// sphere.
pub fn toy_instance(seed: u64) -> (ToyGameProblem, DVector<f64>) {
    toy_instance_with_sizes(seed, &[30, 30])
}

/// Same construction with custom block sizes.
pub fn toy_instance_with_sizes(seed: u64, sizes: &[usize]) -> (ToyGameProblem, DVector<f64>) {
    let problem = ToyGameProblem::new(sizes).expect("valid toy sizes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = unit_sphere_point(&mut rng, problem.upper_dim());
    (problem, y)
}

/// Quadratic tracking objective for bilevel runs on the toy game:
/// f(h, y) = |h - target|^2 / 2 + w |y|^2 / 2.
pub struct ToyUpperObjective {
    target: DVector<f64>,
    weight_y: f64,
}

impl ToyUpperObjective {
    pub fn new(target: DVector<f64>, weight_y: f64) -> Self {
        ToyUpperObjective { target, weight_y }
    }

    /// Seeded interior target of the same block structure.
    pub fn seeded(layout: &Arc<BlockLayout>, seed: u64, weight_y: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7459_21ab_44d0_11c3);
        let mut target = DVector::zeros(layout.total_dim());
        for range in layout.ranges() {
            let mut z = 0.0;
            for j in range.clone() {
                let e: f64 = rng.gen_range(0.05..1.0);
                target[j] = e;
                z += e;
            }
            for j in range {
                target[j] /= z;
            }
        }
        ToyUpperObjective { target, weight_y }
    }
}

impl UpperObjective for ToyUpperObjective {
    fn value(&self, h: &BlockSimplexVector, y: &DVector<f64>) -> Result<f64> {
        let d = h.as_vector() - &self.target;
        Ok(0.5 * d.norm_squared() + 0.5 * self.weight_y * y.norm_squared())
    }

    fn grad_h(&self, h: &BlockSimplexVector, _y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(h.as_vector() - &self.target)
    }

    fn grad_y(&self, _h: &BlockSimplexVector, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(y * self.weight_y)
    }
}
