//! Benchmark instance generation (the sewage-discharge environment),
//! dataset samplers, and fine-grid reference solutions.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintDescriptor, ConstraintFamily};
use crate::error::SicmdpError;
use crate::lp::{IncrementalSolver, LinearProgram, LpStatus, Row};
use crate::model::{occupancy_to_policy, policy_to_occupancy, OccupancyMeasure, Policy, TabularSicmdp};
use crate::sicrl::{Provenance, TransitionDataset};

/// Generator parameters for a sewage-discharge instance.
///
/// Each state is an outfall at a uniformly sampled position in the unit
/// square; the constraint family charges cost `c_y(s) = 1/(1 + ||y - s||^2)`
/// (pollution at monitoring point `y` from the outfall occupied in state
/// `s`) and the threshold leaves every policy a `delta_margin` of slack over
/// the uniform policy's exposure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SewageSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub delta_margin: f64,
    pub seed: u64,
}

impl SewageSpec {
    /// The benchmark's default shape: 8 states, 4 actions, gamma 0.9,
    /// margin 1e-6.
    pub fn standard(seed: u64) -> Self {
        SewageSpec {
            num_states: 8,
            num_actions: 4,
            gamma: 0.9,
            delta_margin: 1e-6,
            seed,
        }
    }
}

/// Supremum over the unit square of the l1 gradient norm of
/// `y -> 1/(1 + ||y - o||^2)`; attained at offset `(1/sqrt 6, 1/sqrt 6)`.
const SEWAGE_COST_LIPSCHITZ: f64 = 0.92;

/// Builds the sewage constraint family on `Y = [0,1]^2`.
///
/// `target_occupancy` is the discounted state visitation of the reference
/// (uniform) policy, summing to `1/(1-gamma)`, so the threshold
/// `u_y = (1 + delta_margin) * sum_s d(s) c_y(s)` is exactly
/// `(1 + delta_margin)` times that policy's exposure `V_{c_y}` and the
/// reference policy is feasible by construction.
pub fn sewage_family(
    outfalls: &[[f64; 2]],
    delta_margin: f64,
    target_occupancy: &[f64],
) -> Result<ConstraintFamily, SicmdpError> {
    if outfalls.is_empty() || outfalls.len() != target_occupancy.len() {
        return Err(SicmdpError::InvalidInput(
            "outfalls and target_occupancy must be nonempty and the same length".into(),
        ));
    }
    if outfalls
        .iter()
        .any(|o| o.iter().any(|&v| !(0.0..=1.0).contains(&v)))
    {
        return Err(SicmdpError::InvalidInput(
            "outfall coordinates must lie in the unit square".into(),
        ));
    }
    if target_occupancy.iter().any(|&d| d < 0.0) || !(delta_margin > 0.0) {
        return Err(SicmdpError::InvalidInput(
            "target occupancy must be nonnegative and delta_margin positive".into(),
        ));
    }
    let outfalls: Arc<Vec<[f64; 2]>> = Arc::new(outfalls.to_vec());
    let d: Arc<Vec<f64>> = Arc::new(target_occupancy.to_vec());
    let total: f64 = d.iter().sum();
    let lipschitz = SEWAGE_COST_LIPSCHITZ * (1.0 + delta_margin) * total.max(1.0);

    let cost_of = |y: &[f64], o: &[f64; 2]| {
        let dx = y[0] - o[0];
        let dy = y[1] - o[1];
        1.0 / (1.0 + dx * dx + dy * dy)
    };
    let grad_of = |y: &[f64], o: &[f64; 2]| {
        let dx = y[0] - o[0];
        let dy = y[1] - o[1];
        let c = 1.0 / (1.0 + dx * dx + dy * dy);
        let k = -2.0 * c * c;
        vec![k * dx, k * dy]
    };

    let cost = {
        let outfalls = Arc::clone(&outfalls);
        move |y: &[f64], s: usize, _a: usize| cost_of(y, &outfalls[s])
    };
    let threshold = {
        let outfalls = Arc::clone(&outfalls);
        let d = Arc::clone(&d);
        move |y: &[f64]| {
            let exposure: f64 = outfalls
                .iter()
                .zip(d.iter())
                .map(|(o, &w)| w * cost_of(y, o))
                .sum();
            (1.0 + delta_margin) * exposure
        }
    };
    let cost_grad = {
        let outfalls = Arc::clone(&outfalls);
        move |y: &[f64], s: usize, _a: usize| grad_of(y, &outfalls[s])
    };
    let threshold_grad = {
        let outfalls = Arc::clone(&outfalls);
        let d = Arc::clone(&d);
        move |y: &[f64]| {
            let mut g = vec![0.0, 0.0];
            for (o, &w) in outfalls.iter().zip(d.iter()) {
                let go = grad_of(y, o);
                g[0] += w * go[0];
                g[1] += w * go[1];
            }
            g[0] *= 1.0 + delta_margin;
            g[1] *= 1.0 + delta_margin;
            g
        }
    };
    Ok(ConstraintFamily::new(
        vec![(0.0, 1.0), (0.0, 1.0)],
        lipschitz,
        Arc::new(cost),
        Arc::new(threshold),
    )?
    .with_gradients(Arc::new(cost_grad), Arc::new(threshold_grad)))
}

/// Uniform draw from the probability simplex via sorted-uniform spacings.
fn uniform_simplex_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let mut cuts: Vec<f64> = (0..len - 1).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut row = Vec::with_capacity(len);
    let mut prev = 0.0;
    for &c in cuts.iter().chain(std::iter::once(&1.0)) {
        row.push(c - prev);
        prev = c;
    }
    row
}

/// Generates a sewage instance: outfall positions uniform on the unit
/// square, transition rows uniform on the simplex, rewards uniform on
/// [0,1], uniform initial distribution, and the constraint threshold
/// anchored to the uniform policy's discounted visitation.
/// Deterministic given the seed.
pub fn generate_sewage_env(spec: &SewageSpec) -> Result<TabularSicmdp, SicmdpError> {
    let (ns, na) = (spec.num_states, spec.num_actions);
    if ns == 0 || na == 0 {
        return Err(SicmdpError::InvalidInput(
            "need at least one state and action".into(),
        ));
    }
    if !(spec.gamma > 0.0 && spec.gamma < 1.0) || !(spec.delta_margin > 0.0) {
        return Err(SicmdpError::InvalidInput(
            "gamma must lie in (0,1) and delta_margin be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let outfalls: Vec<[f64; 2]> = (0..ns)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let mut transition = vec![vec![Vec::new(); na]; ns];
    for s in 0..ns {
        for a in 0..na {
            transition[s][a] = uniform_simplex_row(&mut rng, ns);
        }
    }
    let reward: Vec<Vec<f64>> = (0..ns)
        .map(|_| (0..na).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mu = vec![1.0 / ns as f64; ns];

    // Discounted state visitation of the uniform policy, scaled to sum to
    // 1/(1-gamma); this anchors the constraint threshold.
    let probe = TabularSicmdp::new(
        ns,
        na,
        spec.gamma,
        transition.clone(),
        reward.clone(),
        mu.clone(),
        ConstraintDescriptor::none(),
    )?;
    let nu = policy_to_occupancy(&probe, &Policy::uniform(ns, na))?;
    let scale = 1.0 / (1.0 - spec.gamma);
    let target_occupancy: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| nu.at(s, a)).sum::<f64>() * scale)
        .collect();

    TabularSicmdp::new(
        ns,
        na,
        spec.gamma,
        transition,
        reward,
        mu,
        ConstraintDescriptor::Sewage {
            outfalls,
            delta_margin: spec.delta_margin,
            target_occupancy,
        },
    )
}

/// How the offline dataset is drawn.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DatasetMode {
    /// `n_per_pair` successor draws from every (s,a) pair.
    GenerativeModel { n_per_pair: usize },
    /// `m` triples with (s,a) drawn from the distribution `nu`.
    NuMeasure { nu: Vec<f64>, m: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub mode: DatasetMode,
    pub seed: u64,
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draws an offline dataset from the true model. Deterministic given the
/// spec's seed.
pub fn sample_dataset(
    model: &TabularSicmdp,
    spec: &DatasetSpec,
) -> Result<TransitionDataset, SicmdpError> {
    let (ns, na) = (model.num_states, model.num_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut triples = Vec::new();
    let provenance;
    match &spec.mode {
        DatasetMode::GenerativeModel { n_per_pair } => {
            provenance = Provenance::GenerativeModel;
            for s in 0..ns {
                for a in 0..na {
                    for _ in 0..*n_per_pair {
                        let s2 = sample_index(&mut rng, &model.transition[s][a]);
                        triples.push((s as u32, a as u32, s2 as u32));
                    }
                }
            }
        }
        DatasetMode::NuMeasure { nu, m } => {
            provenance = Provenance::NuMeasure;
            if nu.len() != ns * na {
                return Err(SicmdpError::InvalidInput(
                    "nu must have one weight per (s,a) pair".into(),
                ));
            }
            let total: f64 = nu.iter().sum();
            if (total - 1.0).abs() > 1e-9 || nu.iter().any(|&w| w < 0.0) {
                return Err(SicmdpError::InvalidInput(
                    "nu must be a probability vector".into(),
                ));
            }
            for _ in 0..*m {
                let sa = sample_index(&mut rng, nu);
                let (s, a) = (sa / na, sa % na);
                let s2 = sample_index(&mut rng, &model.transition[s][a]);
                triples.push((s as u32, a as u32, s2 as u32));
            }
        }
    }
    TransitionDataset::new(ns, na, triples, provenance)
}

/// The finite relaxation of the occupancy-measure program under the true
/// kernel: variables `nu(s,a)`, one cut per grid point, flow balance per
/// state. Row order: [cuts | flow].
pub fn build_occupancy_lp(
    model: &TabularSicmdp,
    family: &ConstraintFamily,
    cuts: &[Vec<f64>],
) -> LinearProgram {
    let (ns, na) = (model.num_states, model.num_actions);
    let scale = 1.0 / (1.0 - model.gamma);
    let objective: Vec<f64> = (0..ns * na)
        .map(|i| model.reward[i / na][i % na])
        .collect();
    let mut rows = Vec::with_capacity(cuts.len() + ns);
    for y in cuts {
        let coeffs: Vec<f64> = (0..ns * na)
            .map(|i| family.cost(y, i / na, i % na) * scale)
            .collect();
        rows.push(Row::le(coeffs, family.threshold(y)));
    }
    for s in 0..ns {
        let mut coeffs = vec![0.0; ns * na];
        for a in 0..na {
            coeffs[s * na + a] += 1.0;
        }
        for s2 in 0..ns {
            for a in 0..na {
                coeffs[s2 * na + a] -= model.gamma * model.p(s2, a, s);
            }
        }
        rows.push(Row::eq(coeffs, (1.0 - model.gamma) * model.mu[s]));
    }
    LinearProgram::new(objective, rows)
}

/// A fine-grid optimum of the true-model program, used as ground truth for
/// error measurements.
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub policy: Policy,
    /// V_r of the reference policy from the initial distribution.
    pub value: f64,
    pub occupancy: OccupancyMeasure,
    pub grid_points: usize,
    /// Exchange iterations it took to satisfy every grid constraint.
    pub iterations: usize,
    pub lp_objective: f64,
}

/// Solves the true-model program over a deterministic lattice of
/// `grid_size` constraint points.
///
/// Rather than materializing one LP row per grid point, the grid is
/// enforced by an exchange loop whose separation oracle scans the lattice;
/// the result satisfies every lattice constraint to 1e-9.
pub fn solve_reference(
    model: &TabularSicmdp,
    family: &ConstraintFamily,
    grid_size: usize,
) -> Result<ReferenceSolution, SicmdpError> {
    let grid = family.lattice(grid_size);
    solve_on_grid(model, family, &grid)
}

/// True-model optimum subject to exactly the given constraint points.
pub fn solve_on_grid(
    model: &TabularSicmdp,
    family: &ConstraintFamily,
    grid: &[Vec<f64>],
) -> Result<ReferenceSolution, SicmdpError> {
    let (ns, na) = (model.num_states, model.num_actions);
    let scale = 1.0 / (1.0 - model.gamma);
    let mut solver =
        IncrementalSolver::new(build_occupancy_lp(model, family, &grid[..1]))?;
    let mut sol = solver.solve()?;
    let mut active = 1usize;
    let mut iterations = 0usize;
    // Exchange to within tolerance of the grid optimum; the loop adds one
    // grid row per iteration and must terminate within the grid size.
    for _ in 0..=grid.len() {
        match sol.status {
            LpStatus::Optimal => {}
            LpStatus::Infeasible => return Err(SicmdpError::InfeasibleOptimisticSet),
            LpStatus::Unbounded => {
                return Err(SicmdpError::NumericalBreakdown(
                    "occupancy program reported unbounded".into(),
                ))
            }
        }
        iterations += 1;
        let nu = &sol.x;
        let mut worst_v = f64::NEG_INFINITY;
        let mut worst_y: Option<&Vec<f64>> = None;
        for y in grid {
            let mut v = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    let w = nu[s * na + a];
                    if w != 0.0 {
                        v += w * family.cost(y, s, a);
                    }
                }
            }
            let viol = v * scale - family.threshold(y);
            if viol > worst_v {
                worst_v = viol;
                worst_y = Some(y);
            }
        }
        if worst_v <= 1e-9 {
            let occupancy = OccupancyMeasure {
                nu: sol.x.clone(),
                num_states: ns,
                num_actions: na,
            };
            let policy = occupancy_to_policy(&occupancy);
            return Ok(ReferenceSolution {
                policy,
                value: sol.objective_value * scale,
                occupancy,
                grid_points: grid.len(),
                iterations,
                lp_objective: sol.objective_value,
            });
        }
        let y = worst_y.expect("grid is nonempty");
        let coeffs: Vec<f64> = (0..ns * na)
            .map(|i| family.cost(y, i / na, i % na) * scale)
            .collect();
        sol = solver.add_row(&Row::le(coeffs, family.threshold(y)))?;
        active += 1;
        let _ = active;
    }
    Err(SicmdpError::NumericalBreakdown(
        "grid exchange failed to settle within the grid size".into(),
    ))
}
