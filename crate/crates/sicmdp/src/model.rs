//! Tabular SICMDP representation, exact value/occupancy computation, and the
//! occupancy/policy conversions every other module builds on.
//!
//! All types are immutable after construction and every operation is a pure
//! function, safe to call concurrently.

use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintDescriptor, ConstraintFamily};
use crate::error::SicmdpError;
use crate::linalg::{self, Matrix};

const INPUT_TOL: f64 = 1e-12;

/// Finite state/action model with an attached constraint-family descriptor.
///
/// `transition` is indexed `[s][a][s']` and row-stochastic, `reward` is
/// `[s][a]` with entries in `[0,1]`, `mu` is the initial distribution, and
/// `gamma` lies strictly inside `(0,1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularSicmdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub constraints: ConstraintDescriptor,
}

impl TabularSicmdp {
    /// Validates the probabilistic invariants and returns the model.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        mu: Vec<f64>,
        constraints: ConstraintDescriptor,
    ) -> Result<Self, SicmdpError> {
        let model = TabularSicmdp {
            num_states,
            num_actions,
            gamma,
            transition,
            reward,
            mu,
            constraints,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), SicmdpError> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(SicmdpError::InvalidInput(
                "model must have at least one state and action".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SicmdpError::InvalidInput(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.transition.len() != ns || self.reward.len() != ns || self.mu.len() != ns {
            return Err(SicmdpError::InvalidInput("state dimension mismatch".into()));
        }
        for s in 0..ns {
            if self.transition[s].len() != na || self.reward[s].len() != na {
                return Err(SicmdpError::InvalidInput("action dimension mismatch".into()));
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != ns {
                    return Err(SicmdpError::InvalidInput("transition row length".into()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > INPUT_TOL || row.iter().any(|&p| p < 0.0) {
                    return Err(SicmdpError::InvalidInput(format!(
                        "transition row ({s},{a}) is not a distribution (sum {sum})"
                    )));
                }
                let r = self.reward[s][a];
                if !(0.0..=1.0).contains(&r) {
                    return Err(SicmdpError::InvalidInput(format!(
                        "reward ({s},{a}) = {r} outside [0,1]"
                    )));
                }
            }
        }
        let mu_sum: f64 = self.mu.iter().sum();
        if (mu_sum - 1.0).abs() > INPUT_TOL || self.mu.iter().any(|&p| p < 0.0) {
            return Err(SicmdpError::InvalidInput(format!(
                "mu is not a distribution (sum {mu_sum})"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[s][a][s2]
    }

    /// Builds the constraint family described by the attached descriptor.
    pub fn family(&self) -> Result<ConstraintFamily, SicmdpError> {
        self.constraints.build()
    }

    /// Reads a model from the canonical JSON document.
    pub fn from_json(text: &str) -> Result<Self, SicmdpError> {
        let model: TabularSicmdp = serde_json::from_str(text)
            .map_err(|e| SicmdpError::InvalidInput(format!("model JSON: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }
}

/// Stationary policy: a row-stochastic matrix `pi(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, SicmdpError> {
        for (s, row) in probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > INPUT_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(SicmdpError::InvalidInput(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Policy { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Policy {
            probs: vec![vec![1.0 / num_actions as f64; num_actions]; num_states],
        }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }
}

/// Discounted state-action occupancy `nu(s,a)`, flat in `(s,a)` row-major
/// order.
#[derive(Clone, Debug)]
pub struct OccupancyMeasure {
    pub nu: Vec<f64>,
    pub num_states: usize,
    pub num_actions: usize,
}

impl OccupancyMeasure {
    #[inline]
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.nu[s * self.num_actions + a]
    }
}

/// State-action-state occupancy `z(s,a,s')`, flat in `(s,a,s')` row-major
/// order. Its `s'`-marginal is an ordinary occupancy measure.
#[derive(Clone, Debug)]
pub struct ExtendedOccupancy {
    pub z: Vec<f64>,
    pub num_states: usize,
    pub num_actions: usize,
}

impl ExtendedOccupancy {
    #[inline]
    pub fn at(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.z[(s * self.num_actions + a) * self.num_states + s2]
    }

    /// Sums out the successor state.
    pub fn marginal(&self) -> OccupancyMeasure {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut nu = vec![0.0; ns * na];
        for sa in 0..ns * na {
            nu[sa] = self.z[sa * ns..(sa + 1) * ns].iter().sum();
        }
        OccupancyMeasure {
            nu,
            num_states: ns,
            num_actions: na,
        }
    }
}

/// Exact policy value for an arbitrary per-(s,a) signal, via the direct
/// linear solve `(I - gamma P_pi) V = signal_pi`.
pub fn exact_value(
    model: &TabularSicmdp,
    policy: &Policy,
    signal: &[f64],
) -> Result<Vec<f64>, SicmdpError> {
    let (ns, na) = (model.num_states, model.num_actions);
    assert_eq!(signal.len(), ns * na);
    let mut a = Matrix::identity(ns);
    let mut b = vec![0.0; ns];
    for s in 0..ns {
        for act in 0..na {
            let pa = policy.prob(s, act);
            if pa == 0.0 {
                continue;
            }
            b[s] += pa * signal[s * na + act];
            for s2 in 0..ns {
                let v = a.at(s, s2) - model.gamma * pa * model.p(s, act, s2);
                a.set(s, s2, v);
            }
        }
    }
    let v = linalg::solve(&a, &b)?;
    let res = linalg::residual(&a, &v, &b);
    if res > 1e-10 {
        return Err(SicmdpError::SingularSystem(format!(
            "value solve residual {res:.3e}"
        )));
    }
    Ok(v)
}

/// Initial-distribution value `mu . V`.
pub fn exact_value_mu(
    model: &TabularSicmdp,
    policy: &Policy,
    signal: &[f64],
) -> Result<f64, SicmdpError> {
    let v = exact_value(model, policy, signal)?;
    Ok(model.mu.iter().zip(&v).map(|(m, v)| m * v).sum())
}

/// Discounted occupancy measure of a policy, from the transposed flow system
/// `(I - gamma P_pi^T) d = (1-gamma) mu`, then `nu(s,a) = d(s) pi(a|s)`.
pub fn policy_to_occupancy(
    model: &TabularSicmdp,
    policy: &Policy,
) -> Result<OccupancyMeasure, SicmdpError> {
    let (ns, na) = (model.num_states, model.num_actions);
    let mut a = Matrix::identity(ns);
    for s in 0..ns {
        for act in 0..na {
            let pa = policy.prob(s, act);
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..ns {
                // transposed: coefficient of d(s) in the equation for s2
                let v = a.at(s2, s) - model.gamma * pa * model.p(s, act, s2);
                a.set(s2, s, v);
            }
        }
    }
    let b: Vec<f64> = model.mu.iter().map(|&m| (1.0 - model.gamma) * m).collect();
    let d = linalg::solve(&a, &b)?;
    let res = linalg::residual(&a, &d, &b);
    if res > 1e-9 {
        return Err(SicmdpError::SingularSystem(format!(
            "flow solve residual {res:.3e}"
        )));
    }
    let mut nu = vec![0.0; ns * na];
    for s in 0..ns {
        for act in 0..na {
            nu[s * na + act] = d[s] * policy.prob(s, act);
        }
    }
    Ok(OccupancyMeasure {
        nu,
        num_states: ns,
        num_actions: na,
    })
}

/// Normalizes the rows of an occupancy measure into a policy. States with
/// zero marginal are unreachable under `nu`; they get the uniform row.
pub fn occupancy_to_policy(nu: &OccupancyMeasure) -> Policy {
    let (ns, na) = (nu.num_states, nu.num_actions);
    let mut probs = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        let marginal: f64 = (0..na).map(|a| nu.at(s, a)).sum();
        if marginal > 0.0 {
            for a in 0..na {
                probs[s][a] = nu.at(s, a) / marginal;
            }
        } else {
            for a in 0..na {
                probs[s][a] = 1.0 / na as f64;
            }
        }
    }
    Policy { probs }
}

/// Policy extraction from a state-action-state occupancy: normalize the
/// `s'`-marginal, same contract as [`occupancy_to_policy`].
pub fn extract_policy(z: &ExtendedOccupancy) -> Policy {
    occupancy_to_policy(&z.marginal())
}

/// Scalar quality metric: the max of the reward suboptimality gap and the
/// largest constraint violation over the evaluation grid.
///
/// The violation part is a lower bound on the true supremum, accurate only
/// up to the resolution of `grid`.
pub fn error_term(
    model: &TabularSicmdp,
    family: &ConstraintFamily,
    candidate: &Policy,
    reference_value: f64,
    grid: &[Vec<f64>],
) -> Result<f64, SicmdpError> {
    assert!(!grid.is_empty(), "evaluation grid must be nonempty");
    let (ns, na) = (model.num_states, model.num_actions);
    let reward_flat: Vec<f64> = (0..ns * na)
        .map(|i| model.reward[i / na][i % na])
        .collect();
    let gap = reference_value - exact_value_mu(model, candidate, &reward_flat)?;
    let nu = policy_to_occupancy(model, candidate)?;
    let scale = 1.0 / (1.0 - model.gamma);
    let mut worst = f64::NEG_INFINITY;
    for y in grid {
        let mut v = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let w = nu.at(s, a);
                if w > 0.0 {
                    v += w * family.cost(y, s, a);
                }
            }
        }
        worst = worst.max(v * scale - family.threshold(y));
    }
    Ok(gap.max(worst))
}
