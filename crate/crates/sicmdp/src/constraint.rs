//! The continuum of constraints `(Y, c_y, u_y)` and the interchangeable
//! inner-loop maximizers over `Y`.
//!
//! `Y` is restricted to an axis-aligned box, which covers the benchmark
//! experiments and makes uniform sampling, clamping projection, and the
//! diameter exact.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SicmdpError;

type CostFn = dyn Fn(&[f64], usize, usize) -> f64 + Send + Sync;
type ThresholdFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type CostGradFn = dyn Fn(&[f64], usize, usize) -> Vec<f64> + Send + Sync;
type ThresholdGradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A family of constraints indexed by points of a compact box `Y`.
///
/// `cost(y, s, a)` takes values in `[0,1]` and both the cost and the
/// threshold are `lipschitz`-Lipschitz in `y` w.r.t. the infinity norm.
#[derive(Clone)]
pub struct ConstraintFamily {
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
    pub lipschitz: f64,
    cost: Arc<CostFn>,
    threshold: Arc<ThresholdFn>,
    cost_grad: Option<Arc<CostGradFn>>,
    threshold_grad: Option<Arc<ThresholdGradFn>>,
}

impl std::fmt::Debug for ConstraintFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConstraintFamily")
            .field("dim", &self.dim)
            .field("bounds", &self.bounds)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl ConstraintFamily {
    pub fn new(
        bounds: Vec<(f64, f64)>,
        lipschitz: f64,
        cost: Arc<CostFn>,
        threshold: Arc<ThresholdFn>,
    ) -> Result<Self, SicmdpError> {
        if bounds.is_empty() {
            return Err(SicmdpError::InvalidInput("Y must have dimension >= 1".into()));
        }
        for &(lo, hi) in &bounds {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(SicmdpError::InvalidInput(format!(
                    "degenerate box interval [{lo}, {hi}]"
                )));
            }
        }
        if !(lipschitz > 0.0) {
            return Err(SicmdpError::InvalidInput("lipschitz must be positive".into()));
        }
        Ok(ConstraintFamily {
            dim: bounds.len(),
            bounds,
            lipschitz,
            cost,
            threshold,
            cost_grad: None,
            threshold_grad: None,
        })
    }

    pub fn with_gradients(
        mut self,
        cost_grad: Arc<CostGradFn>,
        threshold_grad: Arc<ThresholdGradFn>,
    ) -> Self {
        self.cost_grad = Some(cost_grad);
        self.threshold_grad = Some(threshold_grad);
        self
    }

    #[inline]
    pub fn cost(&self, y: &[f64], s: usize, a: usize) -> f64 {
        (self.cost)(y, s, a)
    }

    #[inline]
    pub fn threshold(&self, y: &[f64]) -> f64 {
        (self.threshold)(y)
    }

    pub fn cost_grad(&self, y: &[f64], s: usize, a: usize) -> Option<Vec<f64>> {
        self.cost_grad.as_ref().map(|g| g(y, s, a))
    }

    pub fn threshold_grad(&self, y: &[f64]) -> Option<Vec<f64>> {
        self.threshold_grad.as_ref().map(|g| g(y))
    }

    pub fn has_gradients(&self) -> bool {
        self.cost_grad.is_some() && self.threshold_grad.is_some()
    }

    /// Box diameter under the infinity norm.
    pub fn diameter(&self) -> f64 {
        self.bounds
            .iter()
            .map(|&(lo, hi)| hi - lo)
            .fold(0.0, f64::max)
    }

    /// Per-coordinate projection onto the box.
    pub fn clamp(&self, y: &mut [f64]) {
        for (v, &(lo, hi)) in y.iter_mut().zip(&self.bounds) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(&self.bounds)
            .all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    }

    /// Center of the box, used as the deterministic exchange seed point.
    pub fn center(&self) -> Vec<f64> {
        self.bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    /// Deterministic lattice with at least `size` points: `k` evenly spaced
    /// values per axis (endpoints included) with `k = ceil(size^(1/dim))`,
    /// in row-major order.
    pub fn lattice(&self, size: usize) -> Vec<Vec<f64>> {
        let size = size.max(1);
        let mut k = (size as f64).powf(1.0 / self.dim as f64).ceil() as usize;
        while k.pow(self.dim as u32) < size {
            k += 1;
        }
        let axis: Vec<Vec<f64>> = self
            .bounds
            .iter()
            .map(|&(lo, hi)| {
                if k == 1 {
                    vec![0.5 * (lo + hi)]
                } else {
                    (0..k)
                        .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total = k.pow(self.dim as u32);
        let mut points = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut y = vec![0.0; self.dim];
            for d in (0..self.dim).rev() {
                y[d] = axis[d][idx % k];
                idx /= k;
            }
            points.push(y);
        }
        points
    }
}

/// Serializable descriptor of a constraint family; closures are wired up in
/// code, not deserialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConstraintDescriptor {
    Sewage {
        outfalls: Vec<[f64; 2]>,
        delta_margin: f64,
        target_occupancy: Vec<f64>,
    },
    Custom {
        name: String,
        dim: usize,
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
    },
}

impl ConstraintDescriptor {
    /// Descriptor of the vacuous family (cost 0, threshold 1): every policy
    /// is feasible.
    pub fn none() -> Self {
        ConstraintDescriptor::Custom {
            name: "vacuous".into(),
            dim: 1,
            bounds: vec![[0.0, 1.0]],
        }
    }

    /// Builds the family the descriptor names. Custom families must be
    /// registered here; only "vacuous" is built in.
    pub fn build(&self) -> Result<ConstraintFamily, SicmdpError> {
        match self {
            ConstraintDescriptor::Sewage {
                outfalls,
                delta_margin,
                target_occupancy,
            } => crate::bench::sewage_family(outfalls, *delta_margin, target_occupancy),
            ConstraintDescriptor::Custom { name, bounds, .. } => match name.as_str() {
                "vacuous" => ConstraintFamily::new(
                    bounds.iter().map(|b| (b[0], b[1])).collect(),
                    1.0,
                    Arc::new(|_y, _s, _a| 0.0),
                    Arc::new(|_y| 1.0),
                ),
                other => Err(SicmdpError::InvalidInput(format!(
                    "unknown custom constraint family '{other}'"
                ))),
            },
        }
    }
}

/// Which inner-loop maximizer to run, and its parameters.
#[derive(Clone, Debug)]
pub enum InnerKind {
    RandomSearch {
        samples: usize,
    },
    ProjectedSubgradientAscent {
        iterations: usize,
        /// Central finite differences (step 1e-5) when analytic gradients
        /// are missing.
        finite_diff_fallback: bool,
        /// Initial iterate; box center when absent.
        start: Option<Vec<f64>>,
    },
    FixedGrid {
        grid: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug)]
pub struct InnerSolverConfig {
    pub kind: InnerKind,
    pub seed: u64,
}

impl InnerSolverConfig {
    pub fn random_search(samples: usize, seed: u64) -> Self {
        InnerSolverConfig {
            kind: InnerKind::RandomSearch { samples },
            seed,
        }
    }

    pub fn fixed_grid(grid: Vec<Vec<f64>>) -> Self {
        InnerSolverConfig {
            kind: InnerKind::FixedGrid { grid },
            seed: 0,
        }
    }

    pub fn pga(iterations: usize, finite_diff_fallback: bool, seed: u64) -> Self {
        InnerSolverConfig {
            kind: InnerKind::ProjectedSubgradientAscent {
                iterations,
                finite_diff_fallback,
                start: None,
            },
            seed,
        }
    }

    fn validate(&self) -> Result<(), SicmdpError> {
        match &self.kind {
            InnerKind::RandomSearch { samples } if *samples == 0 => Err(
                SicmdpError::InvalidInput("random search needs M >= 1".into()),
            ),
            InnerKind::ProjectedSubgradientAscent { iterations, .. } if *iterations == 0 => Err(
                SicmdpError::InvalidInput("PGA needs T_pga >= 1".into()),
            ),
            InnerKind::FixedGrid { grid } if grid.is_empty() => Err(
                SicmdpError::InvalidInput("fixed grid must be nonempty".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// The separation/violation oracle shared by both pipelines: an approximate
/// `argmax` of `objective` over `Y`, deterministic given the seed.
///
/// Random search and fixed-grid return the argmax over the points they
/// evaluate (first index on exact ties); PGA returns the averaged iterate.
pub fn inner_max(
    family: &ConstraintFamily,
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    config: &InnerSolverConfig,
) -> Result<(Vec<f64>, f64), SicmdpError> {
    config.validate()?;
    match &config.kind {
        InnerKind::RandomSearch { samples } => {
            Ok(random_search(family, objective, *samples, config.seed))
        }
        InnerKind::FixedGrid { grid } => Ok(grid_argmax(grid, objective)),
        InnerKind::ProjectedSubgradientAscent {
            iterations,
            finite_diff_fallback,
            start,
        } => {
            let start = start.clone().unwrap_or_else(|| family.center());
            match gradient {
                Some(g) => Ok(projected_subgradient_ascent(
                    family, objective, g, *iterations, &start,
                )),
                None if *finite_diff_fallback => {
                    let g = |y: &[f64]| finite_difference_gradient(objective, y);
                    Ok(projected_subgradient_ascent(
                        family, objective, &g, *iterations, &start,
                    ))
                }
                None => Err(SicmdpError::GradientUnavailable),
            }
        }
    }
}

/// Argmax of `objective` over `samples` i.i.d. uniform draws from the box.
pub fn random_search(
    family: &ConstraintFamily,
    objective: &dyn Fn(&[f64]) -> f64,
    samples: usize,
    seed: u64,
) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_y = family.sample_uniform(&mut rng);
    let mut best_v = objective(&best_y);
    for _ in 1..samples {
        let y = family.sample_uniform(&mut rng);
        let v = objective(&y);
        if v > best_v {
            best_v = v;
            best_y = y;
        }
    }
    (best_y, best_v)
}

/// Argmax over an explicit grid, first index on ties.
pub fn grid_argmax(grid: &[Vec<f64>], objective: &dyn Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut best_y = grid[0].clone();
    let mut best_v = objective(&best_y);
    for y in &grid[1..] {
        let v = objective(y);
        if v > best_v {
            best_v = v;
            best_y = y.clone();
        }
    }
    (best_y, best_v)
}

/// Projected subgradient ascent with step size `diam(Y) / (L sqrt(T))` and
/// per-coordinate clamping; returns the averaged iterate and its objective
/// value. The theory guarantee needs a concave objective, which is not
/// checked here.
pub fn projected_subgradient_ascent(
    family: &ConstraintFamily,
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> Vec<f64>,
    iterations: usize,
    start: &[f64],
) -> (Vec<f64>, f64) {
    let step = family.diameter() / (family.lipschitz * (iterations as f64).sqrt());
    let mut y = start.to_vec();
    family.clamp(&mut y);
    let mut avg = vec![0.0; family.dim];
    for _ in 0..iterations {
        let g = gradient(&y);
        for (v, gv) in y.iter_mut().zip(&g) {
            *v += step * gv;
        }
        family.clamp(&mut y);
        for (acc, v) in avg.iter_mut().zip(&y) {
            *acc += v;
        }
    }
    for acc in avg.iter_mut() {
        *acc /= iterations as f64;
    }
    let value = objective(&avg);
    (avg, value)
}

/// Central finite differences with step 1e-5.
pub fn finite_difference_gradient(objective: &dyn Fn(&[f64]) -> f64, y: &[f64]) -> Vec<f64> {
    const STEP: f64 = 1e-5;
    let mut grad = vec![0.0; y.len()];
    let mut probe = y.to_vec();
    for d in 0..y.len() {
        probe[d] = y[d] + STEP;
        let hi = objective(&probe);
        probe[d] = y[d] - STEP;
        let lo = objective(&probe);
        probe[d] = y[d];
        grad[d] = (hi - lo) / (2.0 * STEP);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_family() -> ConstraintFamily {
        ConstraintFamily::new(
            vec![(0.0, 1.0)],
            1.0,
            Arc::new(|_y, _s, _a| 0.0),
            Arc::new(|_y| 1.0),
        )
        .unwrap()
    }

    #[test]
    fn fixed_grid_argmax() {
        let family = unit_family();
        let cfg = InnerSolverConfig::fixed_grid(vec![vec![0.1], vec![0.5], vec![0.9]]);
        let f = |y: &[f64]| -(y[0] - 0.45).abs();
        let (y, v) = inner_max(&family, &f, None, &cfg).unwrap();
        assert_eq!(y, vec![0.5]);
        assert!((v - (-0.05)).abs() < 1e-12);
    }

    #[test]
    fn random_search_constant_objective() {
        let family = unit_family();
        let f = |_: &[f64]| 3.25;
        let (_, v) = random_search(&family, &f, 7, 42);
        assert_eq!(v, 3.25);
    }

    #[test]
    fn random_search_single_sample_returns_the_draw() {
        let family = unit_family();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let expected = family.sample_uniform(&mut rng);
        let f = |y: &[f64]| y[0];
        let (y, v) = random_search(&family, &f, 1, 5);
        assert_eq!(y, expected);
        assert_eq!(v, expected[0]);
    }

    #[test]
    fn random_search_ties_break_to_first_draw() {
        let family = unit_family();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let first = family.sample_uniform(&mut rng);
        let f = |_: &[f64]| 1.0;
        let (y, _) = random_search(&family, &f, 3, 11);
        assert_eq!(y, first);
    }

    #[test]
    fn random_search_is_deterministic_given_seed() {
        let family = ConstraintFamily::new(
            vec![(0.0, 1.0), (0.0, 1.0)],
            1.0,
            Arc::new(|_y, _s, _a| 0.0),
            Arc::new(|_y| 1.0),
        )
        .unwrap();
        let f = |y: &[f64]| -(y[0] - 0.3).powi(2) - (y[1] - 0.7).powi(2);
        let a = random_search(&family, &f, 100, 9);
        let b = random_search(&family, &f, 100, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn random_search_covers_the_optimum() {
        // f(y) = -||y - y0||^2 on [0,1]^2: with M = 10^4 uniform draws the
        // best value should be within 1e-2 of 0 in nearly every seed.
        // Coverage of an l-inf ball of radius 0.1 around an interior point
        // has per-draw probability 0.04 -> miss probability (1-0.04)^10000,
        // vanishingly small; we check 100 seeds and require >= 99 hits.
        let family = ConstraintFamily::new(
            vec![(0.0, 1.0), (0.0, 1.0)],
            1.0,
            Arc::new(|_y, _s, _a| 0.0),
            Arc::new(|_y| 1.0),
        )
        .unwrap();
        let y0 = [0.4, 0.6];
        let f = |y: &[f64]| -((y[0] - y0[0]).powi(2) + (y[1] - y0[1]).powi(2));
        let mut hits = 0;
        for seed in 0..100u64 {
            let (_, v) = random_search(&family, &f, 10_000, seed);
            if v >= -1e-2 {
                hits += 1;
            }
        }
        assert!(hits >= 99, "only {hits}/100 seeds reached -1e-2");
    }

    #[test]
    fn pga_zero_gradient_stays_at_start() {
        let family = unit_family();
        let f = |y: &[f64]| y[0];
        let g = |_: &[f64]| vec![0.0];
        let (y, _) = projected_subgradient_ascent(&family, &f, &g, 25, &[0.3]);
        assert!((y[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pga_concave_quadratic_converges() {
        let family = unit_family();
        let f = |y: &[f64]| -(y[0] - 0.5).powi(2);
        let g = |y: &[f64]| vec![-2.0 * (y[0] - 0.5)];
        let (y, v) = projected_subgradient_ascent(&family, &f, &g, 10_000, &[0.0]);
        assert!((y[0] - 0.5).abs() <= 0.05, "averaged iterate {}", y[0]);
        assert!(v >= -1e-2);
    }

    #[test]
    fn pga_iterates_stay_in_box() {
        // Outward gradient at the boundary: the clamp keeps every iterate,
        // and hence the average, inside the box.
        let family = unit_family();
        let f = |y: &[f64]| y[0];
        let g = |_: &[f64]| vec![10.0];
        let (y, _) = projected_subgradient_ascent(&family, &f, &g, 50, &[1.0]);
        assert!(family.contains(&y));
    }

    #[test]
    fn pga_without_gradient_errors_unless_fallback() {
        let family = unit_family();
        let f = |y: &[f64]| -(y[0] - 0.5).powi(2);
        let strict = InnerSolverConfig::pga(100, false, 0);
        assert!(matches!(
            inner_max(&family, &f, None, &strict),
            Err(SicmdpError::GradientUnavailable)
        ));
        let fallback = InnerSolverConfig::pga(400, true, 0);
        let (_, v) = inner_max(&family, &f, None, &fallback).unwrap();
        assert!(v >= -1e-2);
    }

    #[test]
    fn finite_difference_matches_analytic() {
        let f = |y: &[f64]| y[0].powi(2) + 3.0 * y[1];
        let g = finite_difference_gradient(&f, &[0.4, 0.2]);
        assert!((g[0] - 0.8).abs() < 1e-4);
        assert!((g[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn clamp_is_idempotent() {
        let family = ConstraintFamily::new(
            vec![(0.0, 1.0), (-2.0, 3.0)],
            1.0,
            Arc::new(|_y, _s, _a| 0.0),
            Arc::new(|_y| 1.0),
        )
        .unwrap();
        let mut y = vec![1.7, -5.0];
        family.clamp(&mut y);
        let once = y.clone();
        family.clamp(&mut y);
        assert_eq!(y, once);
        assert!(family.contains(&y));
    }

    #[test]
    fn lattice_has_requested_resolution() {
        let family = ConstraintFamily::new(
            vec![(0.0, 1.0), (0.0, 1.0)],
            1.0,
            Arc::new(|_y, _s, _a| 0.0),
            Arc::new(|_y| 1.0),
        )
        .unwrap();
        let grid = family.lattice(9);
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], vec![0.0, 0.0]);
        assert_eq!(grid[8], vec![1.0, 1.0]);
        assert_eq!(grid[4], vec![0.5, 0.5]);
        assert!(family.lattice(10).len() >= 10);
    }

    #[test]
    fn descriptor_round_trip_and_vacuous_build() {
        let d = ConstraintDescriptor::none();
        let json = serde_json::to_string(&d).unwrap();
        let back: ConstraintDescriptor = serde_json::from_str(&json).unwrap();
        let family = back.build().unwrap();
        assert_eq!(family.cost(&[0.5], 0, 0), 0.0);
        assert_eq!(family.threshold(&[0.5]), 1.0);
    }
}
