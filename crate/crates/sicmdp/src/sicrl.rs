//! Model-based pipeline: offline dataset -> empirical model with confidence
//! widths -> optimistic extended linear program -> exchange loop -> policy.

use serde::{Deserialize, Serialize};

use crate::constraint::{inner_max, ConstraintFamily, InnerSolverConfig};
use crate::error::SicmdpError;
use crate::lp::{
    IncrementalSolver, LinearProgram, LpStatus, Pricing, Row, SolverOptions,
};
use crate::model::{extract_policy, ExtendedOccupancy, Policy, TabularSicmdp};

/// Offline transition dataset: a list of observed `(s, a, s')` triples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub triples: Vec<(u32, u32, u32)>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GenerativeModel,
    NuMeasure,
}

impl TransitionDataset {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        triples: Vec<(u32, u32, u32)>,
        provenance: Provenance,
    ) -> Result<Self, SicmdpError> {
        for &(s, a, s2) in &triples {
            if s as usize >= num_states || a as usize >= num_actions || s2 as usize >= num_states
            {
                return Err(SicmdpError::InvalidInput(format!(
                    "triple ({s},{a},{s2}) out of range"
                )));
            }
        }
        Ok(TransitionDataset {
            num_states,
            num_actions,
            triples,
            provenance,
        })
    }

    /// Packed binary form: little-endian u32 header (S, A, provenance,
    /// count) followed by u32 triples. Round-trips exactly.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 12 * self.triples.len());
        let prov = match self.provenance {
            Provenance::GenerativeModel => 0u32,
            Provenance::NuMeasure => 1u32,
        };
        for v in [
            self.num_states as u32,
            self.num_actions as u32,
            prov,
            self.triples.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &(s, a, s2) in &self.triples {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&s2.to_le_bytes());
        }
        out
    }

    pub fn from_packed_bytes(bytes: &[u8]) -> Result<Self, SicmdpError> {
        let word = |i: usize| -> Result<u32, SicmdpError> {
            let range = 4 * i..4 * i + 4;
            bytes
                .get(range)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| SicmdpError::InvalidInput("truncated dataset file".into()))
        };
        let num_states = word(0)? as usize;
        let num_actions = word(1)? as usize;
        let provenance = match word(2)? {
            0 => Provenance::GenerativeModel,
            1 => Provenance::NuMeasure,
            other => {
                return Err(SicmdpError::InvalidInput(format!(
                    "unknown provenance tag {other}"
                )))
            }
        };
        let count = word(3)? as usize;
        if bytes.len() != 16 + 12 * count {
            return Err(SicmdpError::InvalidInput(format!(
                "dataset length {} does not match header count {count}",
                bytes.len()
            )));
        }
        let mut triples = Vec::with_capacity(count);
        for i in 0..count {
            triples.push((word(4 + 3 * i)?, word(5 + 3 * i)?, word(6 + 3 * i)?));
        }
        TransitionDataset::new(num_states, num_actions, triples, provenance)
    }
}

/// Which sample count the confidence width divides by.
///
/// The concentration bounds apply per draw from `P(.|s,a)`, whose count is
/// `n(s,a)`; `TripleCount` reproduces the per-successor count variant for
/// comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WidthDenominator {
    #[default]
    PairCount,
    TripleCount,
}

/// Empirical transition estimate with per-entry confidence widths.
#[derive(Clone, Debug)]
pub struct EmpiricalModel {
    pub num_states: usize,
    pub num_actions: usize,
    /// n(s,a,s'), flat in (s,a,s') row-major order.
    pub counts3: Vec<u64>,
    /// n(s,a), flat in (s,a) row-major order.
    pub counts2: Vec<u64>,
    /// P-hat(s'|s,a) = n(s,a,s') / max(1, n(s,a)).
    pub p_hat: Vec<f64>,
    /// d_delta(s,a,s'), clamped to [0,1].
    pub widths: Vec<f64>,
    pub delta: f64,
}

impl EmpiricalModel {
    #[inline]
    pub fn p_hat(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p_hat[(s * self.num_actions + a) * self.num_states + s2]
    }

    #[inline]
    pub fn width(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.widths[(s * self.num_actions + a) * self.num_states + s2]
    }

    /// The exact-model special case: true transition kernel, zero widths.
    /// The optimistic program then collapses to the true-model program.
    pub fn exact(model: &TabularSicmdp) -> Self {
        let (ns, na) = (model.num_states, model.num_actions);
        let mut p_hat = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    p_hat[(s * na + a) * ns + s2] = model.p(s, a, s2);
                }
            }
        }
        EmpiricalModel {
            num_states: ns,
            num_actions: na,
            counts3: vec![0; ns * na * ns],
            counts2: vec![0; ns * na],
            p_hat,
            widths: vec![0.0; ns * na * ns],
            delta: 0.0,
        }
    }
}

/// min(empirical Bernstein, Hoeffding) confidence width for one transition
/// probability estimated from `count` samples, clamped to [0,1]. Unvisited
/// entries (`count = 0`) get the vacuous width 1.
pub fn confidence_width(p_hat: f64, count: u64, delta: f64) -> f64 {
    if count == 0 {
        return 1.0;
    }
    let n = count as f64;
    let log4 = (4.0 / delta).ln();
    let bernstein = (2.0 * p_hat * (1.0 - p_hat) * log4 / n).sqrt() + 4.0 * log4 / n;
    let hoeffding = ((2.0 / delta).ln() / (2.0 * n)).sqrt();
    bernstein.min(hoeffding).min(1.0)
}

pub fn estimate_model(
    dataset: &TransitionDataset,
    delta: f64,
) -> Result<EmpiricalModel, SicmdpError> {
    estimate_model_with(dataset, delta, WidthDenominator::default())
}

pub fn estimate_model_with(
    dataset: &TransitionDataset,
    delta: f64,
    denominator: WidthDenominator,
) -> Result<EmpiricalModel, SicmdpError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SicmdpError::InvalidInput(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    let (ns, na) = (dataset.num_states, dataset.num_actions);
    let mut counts3 = vec![0u64; ns * na * ns];
    let mut counts2 = vec![0u64; ns * na];
    for &(s, a, s2) in &dataset.triples {
        let (s, a, s2) = (s as usize, a as usize, s2 as usize);
        counts3[(s * na + a) * ns + s2] += 1;
        counts2[s * na + a] += 1;
    }
    let mut p_hat = vec![0.0; ns * na * ns];
    let mut widths = vec![0.0; ns * na * ns];
    for sa in 0..ns * na {
        let n2 = counts2[sa];
        for s2 in 0..ns {
            let i = sa * ns + s2;
            p_hat[i] = counts3[i] as f64 / (n2.max(1)) as f64;
            let count = match denominator {
                WidthDenominator::PairCount => n2,
                WidthDenominator::TripleCount => counts3[i],
            };
            widths[i] = confidence_width(p_hat[i], count, delta);
        }
    }
    Ok(EmpiricalModel {
        num_states: ns,
        num_actions: na,
        counts3,
        counts2,
        p_hat,
        widths,
        delta,
    })
}

/// One cut row of the extended program for the constraint indexed by `y`:
/// `sum_{s,a,s'} z(s,a,s') c_y(s,a) / (1-gamma) <= u_y`.
pub fn extended_cut_row(
    family: &ConstraintFamily,
    y: &[f64],
    num_states: usize,
    num_actions: usize,
    gamma: f64,
) -> Row {
    let (ns, na) = (num_states, num_actions);
    let scale = 1.0 / (1.0 - gamma);
    let mut coeffs = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let c = family.cost(y, s, a) * scale;
            for s2 in 0..ns {
                coeffs[(s * na + a) * ns + s2] = c;
            }
        }
    }
    Row::le(coeffs, family.threshold(y))
}

/// The optimistic extended linear program over state-action-state occupancy
/// variables `z(s,a,s')` in row-major order.
///
/// Row order: constraint cuts for `active_set`, then the upper envelope
/// `z(s,a,s') <= (P-hat + d)(s'|s,a) sum_x z(s,a,x)`, the lower envelope
/// `z(s,a,s') >= (P-hat - d)(s'|s,a) sum_x z(s,a,x)`, and the flow balance
/// `sum_{b,x} z(s,b,x) = (1-gamma) mu(s) + gamma sum_{x,b} z(x,b,s)`;
/// objective `max sum z(s,a,s') r(s,a)`.
pub fn build_extended_lsip(
    estimate: &EmpiricalModel,
    reward: &[Vec<f64>],
    mu: &[f64],
    gamma: f64,
    active_set: &[Vec<f64>],
    family: &ConstraintFamily,
) -> LinearProgram {
    let (ns, na) = (estimate.num_states, estimate.num_actions);
    let nz = ns * na * ns;
    let idx = |s: usize, a: usize, s2: usize| (s * na + a) * ns + s2;

    let mut objective = vec![0.0; nz];
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                objective[idx(s, a, s2)] = reward[s][a];
            }
        }
    }

    let mut rows = Vec::with_capacity(active_set.len() + 2 * nz + ns);
    for y in active_set {
        rows.push(extended_cut_row(family, y, ns, na, gamma));
    }
    // Upper envelope: z(s,a,s') - (P-hat + d) sum_x z(s,a,x) <= 0.
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                let bound = estimate.p_hat(s, a, s2) + estimate.width(s, a, s2);
                let mut coeffs = vec![0.0; nz];
                for x in 0..ns {
                    coeffs[idx(s, a, x)] = -bound;
                }
                coeffs[idx(s, a, s2)] += 1.0;
                rows.push(Row::le(coeffs, 0.0));
            }
        }
    }
    // Lower envelope: (P-hat - d) sum_x z(s,a,x) - z(s,a,s') <= 0.
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                let bound = (estimate.p_hat(s, a, s2) - estimate.width(s, a, s2)).max(0.0);
                let mut coeffs = vec![0.0; nz];
                for x in 0..ns {
                    coeffs[idx(s, a, x)] = bound;
                }
                coeffs[idx(s, a, s2)] -= 1.0;
                rows.push(Row::le(coeffs, 0.0));
            }
        }
    }
    // Flow balance per state.
    for s in 0..ns {
        let mut coeffs = vec![0.0; nz];
        for b in 0..na {
            for x in 0..ns {
                coeffs[idx(s, b, x)] += 1.0;
            }
        }
        for x in 0..ns {
            for b in 0..na {
                coeffs[idx(x, b, s)] -= gamma;
            }
        }
        rows.push(Row::eq(coeffs, (1.0 - gamma) * mu[s]));
    }
    LinearProgram::new(objective, rows)
}

/// How an exchange run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeTermination {
    /// Worst violation fell to the tolerance.
    Converged,
    /// Iteration cap reached with violation still above tolerance.
    IterationCap,
    /// The separation oracle returned an already-active point with residual
    /// violation; adding it again cannot change the optimum.
    Stalled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExchangeIterate {
    pub iter: usize,
    pub elapsed_ms: u64,
    /// Cuts active in the program when this iteration's LP was solved.
    pub active_constraints: usize,
    pub lp_objective: f64,
    pub violation: f64,
    pub y: Vec<f64>,
    pub warm_pivots: usize,
}

#[derive(Clone, Debug)]
pub struct ExchangeState {
    pub active_set: Vec<Vec<f64>>,
    pub iterate: ExtendedOccupancy,
    pub history: Vec<ExchangeIterate>,
    pub eta: f64,
    pub max_iter: usize,
    pub termination: ExchangeTermination,
}

impl ExchangeState {
    /// CSV trace with one line per exchange iteration. Numbers use the
    /// shortest round-trip decimal form, so re-runs are byte-stable.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iter,elapsed_ms,active_constraints,lp_objective,violation,y_coords,warm_pivots\n",
        );
        for it in &self.history {
            let y_coords = it
                .y
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                it.iter,
                it.elapsed_ms,
                it.active_constraints,
                it.lp_objective,
                it.violation,
                y_coords,
                it.warm_pivots
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SicrlConfig {
    /// Violation tolerance eta.
    pub eta: f64,
    /// Exchange iteration cap T.
    pub max_iter: usize,
    pub inner: InnerSolverConfig,
    /// Exchange seed point y_0; box center when absent.
    pub seed_point: Option<Vec<f64>>,
    pub pricing: Pricing,
    /// Record wall-clock per iteration; off by default so traces are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl SicrlConfig {
    pub fn new(eta: f64, max_iter: usize, inner: InnerSolverConfig) -> Self {
        SicrlConfig {
            eta,
            max_iter,
            inner,
            seed_point: None,
            pricing: Pricing::Bland,
            record_timing: false,
        }
    }
}

/// The exchange method on the optimistic extended program.
///
/// Each iteration solves the current finite relaxation, asks the inner
/// oracle for the most violated constraint index, and either terminates
/// (violation within `eta`) or appends the cut and warm-restarts the LP.
/// `skeleton` supplies the reward, initial distribution, and discount; the
/// transition kernel comes from `estimate`.
pub fn run_sicrl(
    skeleton: &TabularSicmdp,
    estimate: &EmpiricalModel,
    family: &ConstraintFamily,
    config: &SicrlConfig,
) -> Result<(Policy, ExchangeState), SicmdpError> {
    let (ns, na) = (skeleton.num_states, skeleton.num_actions);
    if estimate.num_states != ns || estimate.num_actions != na {
        return Err(SicmdpError::InvalidInput(
            "empirical model shape does not match the skeleton".into(),
        ));
    }
    if config.max_iter == 0 {
        return Err(SicmdpError::InvalidInput("max_iter must be >= 1".into()));
    }
    let gamma = skeleton.gamma;
    let y0 = config
        .seed_point
        .clone()
        .unwrap_or_else(|| family.center());
    let mut active_set = vec![y0];

    let lp = build_extended_lsip(
        estimate,
        &skeleton.reward,
        &skeleton.mu,
        gamma,
        &active_set,
        family,
    );
    let mut solver = IncrementalSolver::with_options(
        lp,
        SolverOptions {
            pricing: config.pricing,
        },
    )?;
    let mut sol = solver.solve()?;
    let start = std::time::Instant::now();

    let mut history = Vec::new();
    let mut termination = ExchangeTermination::IterationCap;
    for t in 0..config.max_iter {
        match sol.status {
            LpStatus::Optimal => {}
            LpStatus::Infeasible => return Err(SicmdpError::InfeasibleOptimisticSet),
            LpStatus::Unbounded => {
                return Err(SicmdpError::NumericalBreakdown(
                    "extended program reported unbounded".into(),
                ))
            }
        }
        // nu-hat(s,a): successor marginal of the current iterate.
        let mut nu = vec![0.0; ns * na];
        for sa in 0..ns * na {
            nu[sa] = sol.x[sa * ns..(sa + 1) * ns].iter().sum();
        }
        let scale = 1.0 / (1.0 - gamma);
        let violation_at = |y: &[f64]| {
            let mut v = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    let w = nu[s * na + a];
                    if w != 0.0 {
                        v += w * family.cost(y, s, a);
                    }
                }
            }
            v * scale - family.threshold(y)
        };
        let grad_fn;
        let gradient: Option<&dyn Fn(&[f64]) -> Vec<f64>> = if family.has_gradients() {
            grad_fn = |y: &[f64]| {
                let mut g = family.threshold_grad(y).expect("checked above");
                for v in g.iter_mut() {
                    *v = -*v;
                }
                for s in 0..ns {
                    for a in 0..na {
                        let w = nu[s * na + a] * scale;
                        if w != 0.0 {
                            let cg = family.cost_grad(y, s, a).expect("checked above");
                            for (gv, cv) in g.iter_mut().zip(&cg) {
                                *gv += w * cv;
                            }
                        }
                    }
                }
                g
            };
            Some(&grad_fn)
        } else {
            None
        };
        // Decorrelate the oracle's draws across iterations.
        let mut inner = config.inner.clone();
        inner.seed = inner
            .seed
            .wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (y_t, violation) = inner_max(family, &violation_at, gradient, &inner)?;

        let elapsed_ms = if config.record_timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        history.push(ExchangeIterate {
            iter: t,
            elapsed_ms,
            active_constraints: active_set.len(),
            lp_objective: sol.objective_value,
            violation,
            y: y_t.clone(),
            warm_pivots: sol.pivots,
        });

        if violation <= config.eta {
            termination = ExchangeTermination::Converged;
            break;
        }
        let duplicate = active_set
            .iter()
            .any(|seen| linf_dist(seen, &y_t) <= 1e-12);
        if duplicate {
            termination = ExchangeTermination::Stalled;
            break;
        }
        if t + 1 == config.max_iter {
            break;
        }
        let cut = extended_cut_row(family, &y_t, ns, na, gamma);
        active_set.push(y_t);
        sol = solver.add_row(&cut)?;
    }

    let iterate = ExtendedOccupancy {
        z: sol.x.clone(),
        num_states: ns,
        num_actions: na,
    };
    let policy = extract_policy(&iterate);
    let state = ExchangeState {
        active_set,
        iterate,
        history,
        eta: config.eta,
        max_iter: config.max_iter,
        termination,
    };
    Ok((policy, state))
}

fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::ConstraintDescriptor;
    use crate::lp;
    use crate::model::exact_value_mu;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn empty_dataset_is_vacuous() {
        let ds = TransitionDataset::new(2, 2, vec![], Provenance::GenerativeModel).unwrap();
        let est = estimate_model(&ds, 0.1).unwrap();
        assert!(est.p_hat.iter().all(|&p| p == 0.0));
        assert!(est.widths.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn width_matches_closed_form_on_split_counts() {
        // 8 samples at one pair, 4 to each of two successors, delta = 0.1:
        // P-hat = 0.5 each; Bernstein = sqrt(2*.25*ln 40/8) + 4 ln 40 / 8
        // exceeds Hoeffding = sqrt(ln 20 / 16) ~ 0.43271, so the min is the
        // Hoeffding branch.
        let mut triples = Vec::new();
        for _ in 0..4 {
            triples.push((0u32, 0u32, 0u32));
            triples.push((0, 0, 1));
        }
        let ds = TransitionDataset::new(2, 1, triples, Provenance::GenerativeModel).unwrap();
        let est = estimate_model(&ds, 0.1).unwrap();
        assert!((est.p_hat(0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((est.p_hat(0, 0, 1) - 0.5).abs() < 1e-12);
        let expected = (20.0f64.ln() / 16.0).sqrt();
        assert!((est.width(0, 0, 0) - expected).abs() < 1e-12);
        // Unvisited pair keeps the vacuous width.
        assert_eq!(est.width(1, 0, 0), 1.0);
    }

    #[test]
    fn width_shrinks_with_more_samples_and_is_clamped() {
        let d8 = confidence_width(0.5, 8, 0.1);
        let d16 = confidence_width(0.5, 16, 0.1);
        let d64 = confidence_width(0.5, 64, 0.1);
        assert!(d16 < d8 && d64 < d16);
        assert!(confidence_width(0.5, 1, 1e-12) <= 1.0);
        // Hoeffding dominates as an upper bound.
        for &(p, n) in &[(0.1, 5u64), (0.5, 50), (0.9, 2000)] {
            let d = confidence_width(p, n, 0.05);
            let hoeffding = ((2.0 / 0.05f64).ln() / (2.0 * n as f64)).sqrt();
            assert!(d <= hoeffding + 1e-15);
        }
    }

    #[test]
    fn width_denominator_flag_changes_the_count() {
        let mut triples = Vec::new();
        for _ in 0..6 {
            triples.push((0u32, 0u32, 0u32));
        }
        for _ in 0..2 {
            triples.push((0, 0, 1));
        }
        let ds = TransitionDataset::new(2, 1, triples, Provenance::GenerativeModel).unwrap();
        let pair = estimate_model_with(&ds, 0.1, WidthDenominator::PairCount).unwrap();
        let triple = estimate_model_with(&ds, 0.1, WidthDenominator::TripleCount).unwrap();
        assert!((pair.width(0, 0, 1) - confidence_width(0.25, 8, 0.1)).abs() < 1e-15);
        assert!((triple.width(0, 0, 1) - confidence_width(0.25, 2, 0.1)).abs() < 1e-15);
    }

    #[test]
    fn dataset_packed_round_trip() {
        let ds = TransitionDataset::new(
            3,
            2,
            vec![(0, 0, 1), (2, 1, 0), (1, 1, 2)],
            Provenance::NuMeasure,
        )
        .unwrap();
        let bytes = ds.to_packed_bytes();
        let back = TransitionDataset::from_packed_bytes(&bytes).unwrap();
        assert_eq!(back.triples, ds.triples);
        assert_eq!(back.provenance, ds.provenance);
        assert_eq!(back.to_packed_bytes(), bytes);
        assert!(TransitionDataset::from_packed_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range_indices() {
        assert!(
            TransitionDataset::new(2, 2, vec![(0, 2, 0)], Provenance::GenerativeModel).is_err()
        );
    }

    fn random_model(seed: u64, ns: usize, na: usize, gamma: f64) -> TabularSicmdp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transition = vec![vec![vec![0.0; ns]; na]; ns];
        let mut reward = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            for a in 0..na {
                // Uniform-simplex row via sorted-uniform spacings.
                let mut cuts: Vec<f64> = (0..ns - 1).map(|_| rng.random::<f64>()).collect();
                cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let mut prev = 0.0;
                for (s2, &c) in cuts.iter().chain(std::iter::once(&1.0)).enumerate() {
                    transition[s][a][s2] = c - prev;
                    prev = c;
                }
                reward[s][a] = rng.random::<f64>();
            }
        }
        let mu = vec![1.0 / ns as f64; ns];
        TabularSicmdp::new(
            ns,
            na,
            gamma,
            transition,
            reward,
            mu,
            ConstraintDescriptor::none(),
        )
        .unwrap()
    }

    /// Value iteration to high precision: the dynamic-programming oracle for
    /// unconstrained optima.
    fn value_iteration(model: &TabularSicmdp) -> f64 {
        let (ns, na) = (model.num_states, model.num_actions);
        let mut v = vec![0.0; ns];
        for _ in 0..2000 {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                let mut best = f64::NEG_INFINITY;
                for a in 0..na {
                    let mut q = model.reward[s][a];
                    for s2 in 0..ns {
                        q += model.gamma * model.p(s, a, s2) * v[s2];
                    }
                    best = best.max(q);
                }
                next[s] = best;
            }
            v = next;
        }
        model.mu.iter().zip(&v).map(|(m, v)| m * v).sum()
    }

    #[test]
    fn zero_width_program_matches_unconstrained_optimum() {
        // With d = 0 the envelopes pin z(s,a,s') = P(s'|s,a) nu(s,a), so the
        // extended program under vacuous constraints must equal the
        // dynamic-programming optimum (times 1-gamma).
        let model = random_model(3, 3, 2, 0.9);
        let est = EmpiricalModel::exact(&model);
        let family = ConstraintDescriptor::none().build().unwrap();
        let lp_prog = build_extended_lsip(
            &est,
            &model.reward,
            &model.mu,
            model.gamma,
            &[],
            &family,
        );
        let sol = lp::solve(&lp_prog).unwrap();
        assert_eq!(sol.status, lp::LpStatus::Optimal);
        let v_star = value_iteration(&model);
        assert!(
            (sol.objective_value / (1.0 - model.gamma) - v_star).abs() < 1e-6,
            "LP value {} vs DP value {}",
            sol.objective_value / (1.0 - model.gamma),
            v_star
        );
    }

    fn single_state_family() -> ConstraintFamily {
        // c_y(a0) = 0, c_y(a1) = y, u_y = 0.5 on Y = [0,1].
        ConstraintFamily::new(
            vec![(0.0, 1.0)],
            1.0,
            Arc::new(|y: &[f64], _s, a| if a == 1 { y[0] } else { 0.0 }),
            Arc::new(|_y: &[f64]| 0.5),
        )
        .unwrap()
    }

    fn single_state_model() -> TabularSicmdp {
        TabularSicmdp::new(
            1,
            2,
            0.9,
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![0.0, 1.0]],
            vec![1.0],
            ConstraintDescriptor::none(),
        )
        .unwrap()
    }

    #[test]
    fn single_state_extended_program_analytic_optimum() {
        // Binding cut at y = 1: nu(a1)/(1-gamma) <= 0.5 forces
        // nu(a1) = 0.05, so the LP optimum is 0.05 and V_r(mu) = 0.5.
        let model = single_state_model();
        let est = EmpiricalModel::exact(&model);
        let family = single_state_family();
        let prog = build_extended_lsip(
            &est,
            &model.reward,
            &model.mu,
            model.gamma,
            &[vec![1.0]],
            &family,
        );
        let sol = lp::solve(&prog).unwrap();
        assert_eq!(sol.status, lp::LpStatus::Optimal);
        assert!((sol.objective_value - 0.05).abs() < 1e-9);
        assert!((sol.objective_value / (1.0 - model.gamma) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn exchange_terminates_immediately_on_vacuous_constraints() {
        let model = random_model(7, 3, 2, 0.9);
        let est = EmpiricalModel::exact(&model);
        let family = ConstraintDescriptor::none().build().unwrap();
        let config = SicrlConfig::new(1e-6, 16, InnerSolverConfig::random_search(64, 0));
        let (policy, state) = run_sicrl(&model, &est, &family, &config).unwrap();
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.termination, ExchangeTermination::Converged);
        let reward_flat: Vec<f64> = (0..6).map(|i| model.reward[i / 2][i % 2]).collect();
        let v = exact_value_mu(&model, &policy, &reward_flat).unwrap();
        assert!((v - value_iteration(&model)).abs() < 1e-6);
    }

    #[test]
    fn exchange_converges_on_single_state_instance() {
        let model = single_state_model();
        let est = EmpiricalModel::exact(&model);
        let family = single_state_family();
        let grid = vec![vec![0.0], vec![0.5], vec![1.0]];
        let mut config = SicrlConfig::new(1e-6, 16, InnerSolverConfig::fixed_grid(grid));
        config.seed_point = Some(vec![0.0]);
        let (_, state) = run_sicrl(&model, &est, &family, &config).unwrap();
        assert_eq!(state.termination, ExchangeTermination::Converged);
        let last = state.history.last().unwrap();
        assert!((last.lp_objective / (1.0 - model.gamma) - 0.5).abs() < 1e-6);
        // The binding constraint index is y = 1.
        assert!(state.active_set.iter().any(|y| (y[0] - 1.0).abs() < 1e-9));
    }

    #[test]
    fn exchange_objective_is_non_increasing() {
        let model = single_state_model();
        let est = EmpiricalModel::exact(&model);
        let family = single_state_family();
        let grid = vec![vec![0.2], vec![0.6], vec![1.0]];
        let mut config = SicrlConfig::new(1e-9, 16, InnerSolverConfig::fixed_grid(grid));
        config.seed_point = Some(vec![0.2]);
        let (_, state) = run_sicrl(&model, &est, &family, &config).unwrap();
        for w in state.history.windows(2) {
            assert!(w[1].lp_objective <= w[0].lp_objective + 1e-9);
        }
    }

    #[test]
    fn trace_csv_shape() {
        let model = single_state_model();
        let est = EmpiricalModel::exact(&model);
        let family = single_state_family();
        let config = SicrlConfig::new(
            1e-6,
            8,
            InnerSolverConfig::fixed_grid(vec![vec![0.0], vec![1.0]]),
        );
        let (_, state) = run_sicrl(&model, &est, &family, &config).unwrap();
        let csv = state.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,elapsed_ms,active_constraints,lp_objective,violation,y_coords,warm_pivots"
        );
        assert_eq!(csv.lines().count(), state.history.len() + 1);
        // Deterministic re-run produces the identical trace.
        let (_, again) = run_sicrl(&model, &est, &family, &config).unwrap();
        assert_eq!(again.to_csv(), csv);
    }

    #[test]
    fn coverage_of_confidence_widths() {
        // Draw n samples from a known 3-outcome distribution many times and
        // check the entrywise coverage event |P - P-hat| <= d at the
        // advertised rate. 2 outcomes x delta failure each is the union
        // bound; empirically coverage is far above 1 - 2*delta.
        let p = [0.2, 0.5, 0.3];
        let delta = 0.05;
        let n = 400;
        let reps = 300;
        let mut covered = 0;
        for seed in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let mut triples = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.random();
                let s2 = if u < p[0] {
                    0
                } else if u < p[0] + p[1] {
                    1
                } else {
                    2
                };
                triples.push((0u32, 0u32, s2 as u32));
            }
            let ds =
                TransitionDataset::new(3, 1, triples, Provenance::GenerativeModel).unwrap();
            let est = estimate_model(&ds, delta).unwrap();
            let ok = (0..3).all(|s2| (est.p_hat(0, 0, s2) - p[s2]).abs() <= est.width(0, 0, s2));
            if ok {
                covered += 1;
            }
        }
        let needed = ((1.0 - 6.0 * delta) * reps as f64).floor() as usize;
        assert!(
            covered >= needed,
            "coverage {covered}/{reps}, needed {needed}"
        );
    }
}
