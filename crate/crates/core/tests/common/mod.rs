//! Shared fixtures: finite-difference oracles, quadrature, and random small
//! routing instances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wardrop_core::network::{DemandEntry, Link, PathFlowSpace, RoadNetwork};
use wardrop_core::routing_game::BprGame;
use wardrop_core::simplex::{BlockLayout, BlockSimplexVector};

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    step: f64,
) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += step;
        minus[j] -= step;
        g[j] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    g
}

/// Central finite-difference Jacobian of a vector function (columns are the
/// derivatives in each input coordinate).
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let probe = f(x);
    let mut jac = DMatrix::zeros(probe.len(), x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += step;
        minus[j] -= step;
        let col = (f(&plus) - f(&minus)) / (2.0 * step);
        jac.column_mut(j).copy_from(&col);
    }
    jac
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    recurse(f, a, b, simpson(f, a, b), tol, 40)
}

pub fn rel_err(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth.abs().max(1e-12)
}

pub fn rel_err_vec(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (estimate - truth).norm() / truth.norm().max(1e-12)
}

/// A small two-population routing instance with shared links, randomized
/// parameters, and one expandable link per route level.
///
/// Node 0 -> 1 -> 2 with parallel links on each hop plus a direct 0 -> 2
/// link; population A travels 0 -> 2, population B travels 0 -> 1, so the
/// first-hop links are shared between populations.
pub fn random_routing_instance(seed: u64) -> (Arc<BprGame>, Arc<RoadNetwork>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |tail: usize, head: usize, expandable: bool| Link {
        tail,
        head,
        free_flow_time: rng.gen_range(0.5..2.0),
        bpr_coeff: rng.gen_range(0.1..1.0),
        capacity: rng.gen_range(1.0..3.0),
        invest_coeff: rng.gen_range(0.5..2.0),
        expansion_ub: if expandable { 5.0 } else { 0.0 },
    };
    let links = vec![
        mk(0, 1, true),  // 0: first hop, route a
        mk(0, 1, false), // 1: first hop, route b
        mk(1, 2, false), // 2: second hop, route a
        mk(1, 2, true),  // 3: second hop, route b
        mk(0, 2, false), // 4: direct
    ];
    let net = Arc::new(RoadNetwork { nodes: 3, links });
    net.validate().unwrap();
    let od = vec![
        DemandEntry {
            origin: 0,
            destination: 2,
            demand: rng.gen_range(0.5..2.0),
        },
        DemandEntry {
            origin: 0,
            destination: 1,
            demand: rng.gen_range(0.5..2.0),
        },
    ];
    let paths = vec![
        vec![vec![0, 2], vec![1, 3], vec![4]],
        vec![vec![0], vec![1]],
    ];
    let space = Arc::new(PathFlowSpace::from_parts(paths, od, net.links.len()).unwrap());
    let game = Arc::new(BprGame::from_expandable(net.clone(), space).unwrap());
    (game, net)
}

/// Seeded strictly interior point (thin wrapper so tests share one sampler).
pub fn interior_point(layout: &Arc<BlockLayout>, rng: &mut ChaCha8Rng) -> BlockSimplexVector {
    wardrop_core::diagnostics::random_interior_point(layout, rng)
}

/// Feasible upper decision for a game's expansion box.
pub fn random_feasible_y(game: &BprGame, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let (lo, hi) = game.expansion_bounds();
    DVector::from_iterator(
        lo.len(),
        lo.iter()
            .zip(hi.iter())
            .map(|(&l, &h)| rng.gen_range(l..=(l + 0.4 * (h - l)).max(l + f64::EPSILON))),
    )
}

/// Reads the bundled Sioux Falls dataset.
pub fn sioux_falls_texts() -> (String, String, String) {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/siouxfalls");
    let net = std::fs::read_to_string(format!("{root}/siouxfalls_net.tntp")).unwrap();
    let trips = std::fs::read_to_string(format!("{root}/siouxfalls_trips.tntp")).unwrap();
    let expansion = std::fs::read_to_string(format!("{root}/expansion.csv")).unwrap();
    (net, trips, expansion)
}
