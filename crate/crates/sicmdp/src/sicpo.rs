//! Model-free pipeline: softmax policies, fixed-horizon Monte-Carlo
//! evaluation, a sample-based natural-policy-gradient direction, and the
//! good-set/bad-set alternation that either improves the reward or backs
//! away from the most violated constraint.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{inner_max, ConstraintFamily, InnerSolverConfig};
use crate::error::SicmdpError;
use crate::model::{exact_value_mu, Policy, TabularSicmdp};

/// Tabular softmax policy `pi(a|s) = exp(theta_{s,a}) / sum_a' exp(theta_{s,a'})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub theta: Vec<f64>,
    pub num_states: usize,
    pub num_actions: usize,
}

impl SoftmaxPolicy {
    /// theta = 0: the uniform policy.
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        SoftmaxPolicy {
            theta: vec![0.0; num_states * num_actions],
            num_states,
            num_actions,
        }
    }

    /// Row-stochastic probability table (max-shifted for stability).
    pub fn probs(&self) -> Vec<Vec<f64>> {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut out = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            let row = &self.theta[s * na..(s + 1) * na];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in 0..na {
                let e = (row[a] - max).exp();
                out[s][a] = e;
                sum += e;
            }
            for a in 0..na {
                out[s][a] /= sum;
            }
        }
        out
    }

    pub fn to_policy(&self) -> Policy {
        Policy {
            probs: self.probs(),
        }
    }

    /// `grad_theta log pi(a|s)`: the indicator minus the policy row, on the
    /// block of state `s` (all other coordinates are zero).
    pub fn log_prob_grad(&self, s: usize, a: usize) -> Vec<f64> {
        let na = self.num_actions;
        let probs = self.probs();
        let mut g = vec![0.0; self.theta.len()];
        for a2 in 0..na {
            g[s * na + a2] = -probs[s][a2];
        }
        g[s * na + a] += 1.0;
        g
    }
}

/// Source of environment transitions, so the same algorithms run against
/// the tabular model or any external simulator.
pub trait EnvSampler {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> usize;
    /// Initial state by inverse-CDF from a caller-supplied uniform, so
    /// evaluation can stratify episodes over the initial distribution.
    fn initial_from_uniform(&self, u: f64) -> usize;
    fn sample_transition(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize;
    /// Writes the transition row `P(. | s, a)` into `out` and returns
    /// true when the sampler can expose it. Samplers wrapping a black-box
    /// simulator return false (the default), and estimators fall back to
    /// single-sample updates.
    fn transition_row(&self, _s: usize, _a: usize, _out: &mut [f64]) -> bool {
        false
    }
    /// Successor state by inverse-CDF from a caller-supplied uniform, so
    /// rollouts can share randomness for variance reduction.
    fn transition_from_uniform(&self, s: usize, a: usize, u: f64) -> usize;
    /// Jointly draws successors for two state-action pairs so the two
    /// chains land in the same state as often as their transition rows
    /// allow. Marginally each successor is an ordinary transition draw;
    /// only the correlation between the two is implementation-defined.
    /// The default shares one uniform across both inverse-CDF draws
    /// (common random numbers), which any seeded simulator can provide.
    fn coupled_transition(
        &self,
        s1: usize,
        a1: usize,
        s2: usize,
        a2: usize,
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize) {
        let u: f64 = rng.random();
        (
            self.transition_from_uniform(s1, a1, u),
            self.transition_from_uniform(s2, a2, u),
        )
    }
    /// Reward emitted on taking `a` in `s` (deterministic per pair here).
    fn reward(&self, s: usize, a: usize) -> f64;
}

/// Sampler backed by the tabular model, with precomputed cumulative rows
/// for fast categorical draws.
pub struct ModelSampler {
    ns: usize,
    na: usize,
    mu_cum: Vec<f64>,
    p_cum: Vec<f64>, // (s,a) rows of cumulative transition probabilities
    reward: Vec<f64>,
}

impl ModelSampler {
    pub fn new(model: &TabularSicmdp) -> Self {
        let (ns, na) = (model.num_states, model.num_actions);
        let mut mu_cum = Vec::with_capacity(ns);
        let mut acc = 0.0;
        for &m in &model.mu {
            acc += m;
            mu_cum.push(acc);
        }
        let mut p_cum = Vec::with_capacity(ns * na * ns);
        for s in 0..ns {
            for a in 0..na {
                let mut acc = 0.0;
                for s2 in 0..ns {
                    acc += model.p(s, a, s2);
                    p_cum.push(acc);
                }
            }
        }
        let reward = (0..ns * na)
            .map(|i| model.reward[i / na][i % na])
            .collect();
        ModelSampler {
            ns,
            na,
            mu_cum,
            p_cum,
            reward,
        }
    }
}

#[inline]
fn draw_cum(rng: &mut ChaCha8Rng, cum: &[f64]) -> usize {
    let u: f64 = rng.random();
    for (i, &c) in cum.iter().enumerate() {
        if u < c {
            return i;
        }
    }
    cum.len() - 1
}

impl EnvSampler for ModelSampler {
    fn num_states(&self) -> usize {
        self.ns
    }

    fn num_actions(&self) -> usize {
        self.na
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> usize {
        draw_cum(rng, &self.mu_cum)
    }

    fn initial_from_uniform(&self, u: f64) -> usize {
        self.mu_cum
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.ns - 1)
    }

    fn transition_row(&self, s: usize, a: usize, out: &mut [f64]) -> bool {
        let cum = &self.p_cum[(s * self.na + a) * self.ns..(s * self.na + a + 1) * self.ns];
        let mut prev = 0.0;
        for (o, &c) in out.iter_mut().zip(cum) {
            *o = c - prev;
            prev = c;
        }
        true
    }

    fn sample_transition(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
        draw_cum(rng, &self.p_cum[(s * self.na + a) * self.ns..(s * self.na + a + 1) * self.ns])
    }

    fn transition_from_uniform(&self, s: usize, a: usize, u: f64) -> usize {
        let cum = &self.p_cum[(s * self.na + a) * self.ns..(s * self.na + a + 1) * self.ns];
        cum.iter().position(|&c| u < c).unwrap_or(self.ns - 1)
    }

    /// Maximal coupling of the two transition rows: the chains move to a
    /// common successor with the largest probability any joint law with
    /// the correct marginals permits (the overlap mass sum_j min(p1_j,
    /// p2_j)), and otherwise draw independently from the residuals.
    fn coupled_transition(
        &self,
        s1: usize,
        a1: usize,
        s2: usize,
        a2: usize,
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize) {
        let u: f64 = rng.random();
        if s1 == s2 && a1 == a2 {
            let s = self.transition_from_uniform(s1, a1, u);
            return (s, s);
        }
        let c1 = &self.p_cum[(s1 * self.na + a1) * self.ns..(s1 * self.na + a1 + 1) * self.ns];
        let c2 = &self.p_cum[(s2 * self.na + a2) * self.ns..(s2 * self.na + a2 + 1) * self.ns];
        let prob = |c: &[f64], j: usize| if j == 0 { c[0] } else { c[j] - c[j - 1] };
        let mut overlap = 0.0;
        for j in 0..self.ns {
            overlap += prob(c1, j).min(prob(c2, j));
        }
        if u < overlap {
            let mut acc = 0.0;
            for j in 0..self.ns {
                acc += prob(c1, j).min(prob(c2, j));
                if u < acc {
                    return (j, j);
                }
            }
            return (self.ns - 1, self.ns - 1);
        }
        let residual = 1.0 - overlap;
        let mut draw = |target: f64, c: &[f64], other: &[f64]| {
            let mut acc = 0.0;
            for j in 0..self.ns {
                acc += prob(c, j) - prob(c, j).min(prob(other, j));
                if target < acc {
                    return j;
                }
            }
            self.ns - 1
        };
        let t1 = u - overlap; // uniform on [0, residual) given the branch
        let t2 = rng.random::<f64>() * residual;
        (draw(t1, c1, c2), draw(t2, c2, c1))
    }

    fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.na + a]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    /// Episode count K_eval.
    pub k_eval: usize,
    /// Rollout horizon H; truncation bias is at most gamma^H / (1-gamma).
    pub horizon: usize,
}

/// Empirical discounted visitation `(1/K) E-hat[sum_{k<H} gamma^k 1{(s_k,a_k)=(s,a)}]`.
///
/// Any fixed-horizon Monte-Carlo value estimate is a dot product against
/// this table, so one episode batch serves every candidate cost function —
/// the violation search over many `y` reuses the same trajectories.
///
/// Two standard variance reductions are applied, neither of which changes
/// the estimator's expectation:
///
/// * episodes are stratified over the initial distribution (systematic
///   sampling of the inverse CDF), removing the initial-state component
///   of the variance;
/// * when the sampler exposes its transition rows, each step adds the
///   conditional distribution `gamma^k P(. | s_{k-1}, a_{k-1}) pi(. | .)`
///   instead of the realized indicator (one-step Rao-Blackwellization);
///   the realized path still drives the episode forward.
pub fn discounted_visits(
    sampler: &dyn EnvSampler,
    probs: &[Vec<f64>],
    gamma: f64,
    cfg: &EvalConfig,
    seed: u64,
) -> Vec<f64> {
    let (ns, na) = (sampler.num_states(), sampler.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut action_cum = vec![0.0; ns * na];
    for s in 0..ns {
        let mut acc = 0.0;
        for a in 0..na {
            acc += probs[s][a];
            action_cum[s * na + a] = acc;
        }
    }
    let mut m = vec![0.0; ns * na];
    let mut row = vec![0.0; ns];
    let smoothed = sampler.transition_row(0, 0, &mut row);
    let offset: f64 = rng.random();
    for i in 0..cfg.k_eval {
        let u = (i as f64 + offset) / cfg.k_eval as f64;
        let mut s = sampler.initial_from_uniform(u);
        if smoothed {
            // Expected action at the realized state, conditional state
            // distribution for every later step.
            for a2 in 0..na {
                m[s * na + a2] += probs[s][a2];
            }
            let mut w = 1.0;
            for _ in 1..cfg.horizon {
                let a = draw_cum(&mut rng, &action_cum[s * na..(s + 1) * na]);
                w *= gamma;
                sampler.transition_row(s, a, &mut row);
                for (s2, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        let pw = w * p;
                        for a2 in 0..na {
                            m[s2 * na + a2] += pw * probs[s2][a2];
                        }
                    }
                }
                s = sampler.sample_transition(s, a, &mut rng);
            }
        } else {
            let mut w = 1.0;
            for _ in 0..cfg.horizon {
                let a = draw_cum(&mut rng, &action_cum[s * na..(s + 1) * na]);
                m[s * na + a] += w;
                w *= gamma;
                s = sampler.sample_transition(s, a, &mut rng);
            }
        }
    }
    let inv = 1.0 / cfg.k_eval as f64;
    for v in m.iter_mut() {
        *v *= inv;
    }
    m
}

/// Mean fixed-horizon discounted return of `cost` over `K_eval` episodes
/// from the initial distribution. Deterministic given the seed.
pub fn mc_evaluate(
    sampler: &dyn EnvSampler,
    policy: &SoftmaxPolicy,
    cost: &dyn Fn(usize, usize) -> f64,
    gamma: f64,
    cfg: &EvalConfig,
    seed: u64,
) -> f64 {
    let na = sampler.num_actions();
    let m = discounted_visits(sampler, &policy.probs(), gamma, cfg, seed);
    m.iter()
        .enumerate()
        .map(|(i, &w)| w * cost(i / na, i % na))
        .sum()
}

/// SGD step-size schedule for the direction estimator.
#[derive(Clone, Copy, Debug)]
pub enum SgdSchedule {
    Constant(f64),
    /// The theory-facing diminishing schedule `2 / ((1-gamma)^2 mu_f (k+1))`.
    Diminishing { mu_f: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct NPGConfig {
    /// SGD path length K_sgd.
    pub k_sgd: usize,
    /// Rollout horizon H for the advantage estimates.
    pub horizon: usize,
    /// Projection radius: the direction is kept in the l2 ball of radius W.
    pub w_radius: f64,
    pub schedule: SgdSchedule,
    /// Policy step size alpha applied by the outer loop.
    pub alpha: f64,
}

impl NPGConfig {
    /// The benchmark defaults: K_sgd=1000, H=100, W=1000, constant SGD
    /// step 1, alpha=1.
    pub fn standard() -> Self {
        NPGConfig {
            k_sgd: 1000,
            horizon: 100,
            w_radius: 1000.0,
            schedule: SgdSchedule::Constant(1.0),
            alpha: 1.0,
        }
    }

    fn step(&self, k: usize, gamma: f64) -> f64 {
        match self.schedule {
            SgdSchedule::Constant(s) => s,
            SgdSchedule::Diminishing { mu_f } => {
                2.0 / ((1.0 - gamma).powi(2) * mu_f * (k + 1) as f64)
            }
        }
    }
}

/// The projected-SGD core of the direction estimator: minimizes the
/// compatible-function-approximation loss `E[(A - w . grad log pi)^2]` over
/// the given `(s, a, advantage)` samples and returns the weighted average
/// `sum_k (2k / K(K+1)) w^{(k)}`, whose norm stays within the W-ball.
pub fn npg_sgd(
    policy: &SoftmaxPolicy,
    samples: &[(usize, usize, f64)],
    cfg: &NPGConfig,
    gamma: f64,
) -> Vec<f64> {
    let (ns, na) = (policy.num_states, policy.num_actions);
    let probs = policy.probs();
    let dim = ns * na;
    let mut w = vec![0.0; dim];
    let mut avg = vec![0.0; dim];
    let k_total = samples.len();
    let weight_denom = (k_total * (k_total + 1)) as f64;
    for (k, &(s, a, adv)) in samples.iter().enumerate() {
        // phi = e_{s,a} - pi(.|s) on the block of s; w.phi touches only
        // that block.
        let mut w_phi = w[s * na + a];
        for a2 in 0..na {
            w_phi -= probs[s][a2] * w[s * na + a2];
        }
        let scale = 2.0 * (w_phi - adv) * cfg.step(k, gamma);
        for a2 in 0..na {
            let phi = if a2 == a { 1.0 } else { 0.0 } - probs[s][a2];
            w[s * na + a2] -= scale * phi;
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cfg.w_radius {
            let shrink = cfg.w_radius / norm;
            for v in w.iter_mut() {
                *v *= shrink;
            }
        }
        let gk = 2.0 * (k + 1) as f64 / weight_denom;
        for (acc, v) in avg.iter_mut().zip(&w) {
            *acc += gk * v;
        }
    }
    avg
}

/// Draws `(s,a) ~ nu_theta` (geometric stopping with rate 1-gamma, capped
/// at the horizon), estimates the advantage of that pair from two H-step
/// rollouts, and feeds the stream into [`npg_sgd`].
pub fn sample_npg_direction(
    sampler: &dyn EnvSampler,
    policy: &SoftmaxPolicy,
    signal: &dyn Fn(usize, usize) -> f64,
    gamma: f64,
    cfg: &NPGConfig,
    seed: u64,
) -> Vec<f64> {
    let (ns, na) = (sampler.num_states(), sampler.num_actions());
    let probs = policy.probs();
    let mut action_cum = vec![0.0; ns * na];
    for s in 0..ns {
        let mut acc = 0.0;
        for a in 0..na {
            acc += probs[s][a];
            action_cum[s * na + a] = acc;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_action =
        |s: usize, rng: &mut ChaCha8Rng| draw_cum(rng, &action_cum[s * na..(s + 1) * na]);
    let action_from_uniform = |s: usize, u: f64| {
        let block = &action_cum[s * na..(s + 1) * na];
        block.iter().position(|&c| u < c).unwrap_or(na - 1)
    };
    let mut samples = Vec::with_capacity(cfg.k_sgd);
    for _ in 0..cfg.k_sgd {
        // (s,a) ~ nu_theta.
        let mut s = sampler.sample_initial(&mut rng);
        let mut a = draw_action(s, &mut rng);
        for _ in 0..cfg.horizon {
            if rng.random::<f64>() < 1.0 - gamma {
                break;
            }
            s = sampler.sample_transition(s, a, &mut rng);
            a = draw_action(s, &mut rng);
        }
        // The advantage Q(s,a) - V(s) is estimated from a coupled pair
        // of rollouts: the Q chain starts with the forced action, the V
        // chain with a policy draw. Transitions are jointly sampled so
        // the chains meet as early as possible, and action uniforms are
        // shared so they stay together once met; from that point every
        // remaining term cancels, so only the pre-meeting segment
        // contributes variance. Per-step contributions use the
        // policy-expected signal at the visited state (the realized
        // action only advances the chain), which is unbiased by the
        // tower property and removes the action-draw variance. Each
        // chain is marginally an ordinary policy rollout, so the
        // estimate is unbiased up to the horizon truncation.
        let exp_sig = |s: usize| -> f64 {
            (0..na).map(|a2| probs[s][a2] * signal(s, a2)).sum()
        };
        let a2 = draw_action(s, &mut rng);
        let mut diff = signal(s, a) - exp_sig(s);
        let (mut s1, mut s2) = sampler.coupled_transition(s, a, s, a2, &mut rng);
        let mut w = gamma;
        for _ in 1..cfg.horizon {
            if s1 == s2 {
                break;
            }
            diff += w * (exp_sig(s1) - exp_sig(s2));
            w *= gamma;
            let ua: f64 = rng.random();
            let a1 = action_from_uniform(s1, ua);
            let a2 = action_from_uniform(s2, ua);
            let (n1, n2) = sampler.coupled_transition(s1, a1, s2, a2, &mut rng);
            s1 = n1;
            s2 = n2;
        }
        samples.push((s, a, diff));
    }
    npg_sgd(policy, &samples, cfg, gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Violation within tolerance: reward-ascent step.
    Good,
    /// Violation above tolerance: constraint-descent step.
    Bad,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SicpoIterate {
    pub iter: usize,
    pub branch: Branch,
    pub est_violation: f64,
    pub y: Vec<f64>,
    /// Exact reward value of the iterate, filled when a true model is
    /// available for auditing.
    pub reward_value_exact: Option<f64>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct SICPOState {
    pub records: Vec<SicpoIterate>,
    pub good_set: Vec<usize>,
    pub bad_set: Vec<usize>,
    /// theta^{(t)} before the update of iteration t.
    pub thetas: Vec<Vec<f64>>,
    /// Index of the iterate the returned policy was drawn from.
    pub chosen: usize,
}

impl SICPOState {
    /// Per-iteration CSV; numbers in shortest round-trip decimal form.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iter,branch,est_violation,y_coords,reward_value_exact,elapsed_ms\n");
        for r in &self.records {
            let y_coords = r
                .y
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";");
            let audit = r
                .reward_value_exact
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter,
                match r.branch {
                    Branch::Good => "B",
                    Branch::Bad => "N",
                },
                r.est_violation,
                y_coords,
                audit,
                r.elapsed_ms
            ));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SicpoConfig {
    /// Violation tolerance eta.
    pub eta: f64,
    /// Outer iteration count T.
    pub iterations: usize,
    pub npg: NPGConfig,
    pub eval: EvalConfig,
    pub inner: InnerSolverConfig,
    pub seed: u64,
    /// Return the last good iterate instead of a uniform draw from the
    /// good set.
    pub return_last_good: bool,
    /// Record wall-clock per iteration; off by default so traces are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl SicpoConfig {
    pub fn new(eta: f64, iterations: usize, inner: InnerSolverConfig, seed: u64) -> Self {
        SicpoConfig {
            eta,
            iterations,
            npg: NPGConfig::standard(),
            eval: EvalConfig {
                k_eval: 10_000,
                horizon: 100,
            },
            inner,
            seed,
            return_last_good: false,
            record_timing: false,
        }
    }
}

fn mix_seed(base: u64, stream: u64, t: usize) -> u64 {
    base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((t as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// The good-set/bad-set policy-optimization loop.
///
/// Each iteration estimates the worst constraint violation by Monte Carlo;
/// within tolerance it takes a natural-gradient ascent step on the reward
/// (a "good" iteration), otherwise a descent step on the violated
/// constraint's cost. The returned policy is a seeded uniform draw from
/// the good iterates. `audit` optionally supplies the true model so each
/// iterate's exact reward value lands in the trace.
pub fn run_sicpo(
    sampler: &dyn EnvSampler,
    gamma: f64,
    family: &ConstraintFamily,
    config: &SicpoConfig,
    audit: Option<&TabularSicmdp>,
) -> Result<(SoftmaxPolicy, SICPOState), SicmdpError> {
    if config.iterations == 0 {
        return Err(SicmdpError::InvalidInput("iterations must be >= 1".into()));
    }
    let (ns, na) = (sampler.num_states(), sampler.num_actions());
    let mut policy = SoftmaxPolicy::zeros(ns, na);
    let mut records = Vec::with_capacity(config.iterations);
    let mut good_set = Vec::new();
    let mut bad_set = Vec::new();
    let mut thetas = Vec::with_capacity(config.iterations);
    let reward_flat: Option<Vec<f64>> = audit.map(|m| {
        (0..ns * na)
            .map(|i| m.reward[i / na][i % na])
            .collect()
    });
    let start = std::time::Instant::now();

    for t in 0..config.iterations {
        thetas.push(policy.theta.clone());
        let probs = policy.probs();
        // Split the evaluation budget: one half selects the worst-looking y,
        // the other half re-estimates its violation. Taking the max of the
        // selection batch itself would inflate the estimate by the maximum
        // of the batch noise, which at desk-scale K_eval is on the order of
        // eta and would starve the good set.
        let select_cfg = EvalConfig {
            k_eval: (config.eval.k_eval / 2).max(1),
            horizon: config.eval.horizon,
        };
        let visits = discounted_visits(
            sampler,
            &probs,
            gamma,
            &select_cfg,
            mix_seed(config.seed, 1, t),
        );
        let violation_with = |table: &[f64], y: &[f64]| {
            let mut v = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    let w = table[s * na + a];
                    if w != 0.0 {
                        v += w * family.cost(y, s, a);
                    }
                }
            }
            v - family.threshold(y)
        };
        let violation_at = |y: &[f64]| violation_with(&visits, y);
        let mut inner = config.inner.clone();
        inner.seed = mix_seed(config.seed, 2, t);
        let (y_t, _) = inner_max(family, &violation_at, None, &inner)?;
        let holdout = discounted_visits(
            sampler,
            &probs,
            gamma,
            &select_cfg,
            mix_seed(config.seed, 5, t),
        );
        let violation = violation_with(&holdout, &y_t);

        let branch;
        if violation <= config.eta {
            branch = Branch::Good;
            good_set.push(t);
            let w = sample_npg_direction(
                sampler,
                &policy,
                &|s, a| sampler.reward(s, a),
                gamma,
                &config.npg,
                mix_seed(config.seed, 3, t),
            );
            for (th, d) in policy.theta.iter_mut().zip(&w) {
                *th += config.npg.alpha * d;
            }
        } else {
            branch = Branch::Bad;
            bad_set.push(t);
            let y = y_t.clone();
            let cost_signal = |s: usize, a: usize| family.cost(&y, s, a);
            let w = sample_npg_direction(
                sampler,
                &policy,
                &cost_signal,
                gamma,
                &config.npg,
                mix_seed(config.seed, 3, t),
            );
            for (th, d) in policy.theta.iter_mut().zip(&w) {
                *th -= config.npg.alpha * d;
            }
        }

        let reward_value_exact = match (&reward_flat, audit) {
            (Some(r), Some(m)) => {
                let pi = SoftmaxPolicy {
                    theta: thetas[t].clone(),
                    num_states: ns,
                    num_actions: na,
                }
                .to_policy();
                Some(exact_value_mu(m, &pi, r)?)
            }
            _ => None,
        };
        let elapsed_ms = if config.record_timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        records.push(SicpoIterate {
            iter: t,
            branch,
            est_violation: violation,
            y: y_t,
            reward_value_exact,
            elapsed_ms,
        });
    }

    if good_set.is_empty() {
        return Err(SicmdpError::EmptyGoodSet);
    }
    let chosen = if config.return_last_good {
        *good_set.last().unwrap()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 4, 0));
        good_set[rng.random_range(0..good_set.len())]
    };
    let result = SoftmaxPolicy {
        theta: thetas[chosen].clone(),
        num_states: ns,
        num_actions: na,
    };
    let state = SICPOState {
        records,
        good_set,
        bad_set,
        thetas,
        chosen,
    };
    Ok((result, state))
}

/// The naive-discretization baseline: the same loop, but the violation
/// search only ever looks at `n_baseline` fixed lattice points.
pub fn run_fixed_grid_baseline(
    sampler: &dyn EnvSampler,
    gamma: f64,
    family: &ConstraintFamily,
    n_baseline: usize,
    config: &SicpoConfig,
    audit: Option<&TabularSicmdp>,
) -> Result<(SoftmaxPolicy, SICPOState), SicmdpError> {
    let mut config = config.clone();
    config.inner = InnerSolverConfig::fixed_grid(family.lattice(n_baseline));
    run_sicpo(sampler, gamma, family, &config, audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::ConstraintDescriptor;
    use crate::model::policy_to_occupancy;
    use std::sync::Arc;

    fn self_loop_model() -> TabularSicmdp {
        TabularSicmdp::new(
            1,
            1,
            0.9,
            vec![vec![vec![1.0]]],
            vec![vec![1.0]],
            vec![1.0],
            ConstraintDescriptor::none(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut pi = SoftmaxPolicy::zeros(2, 3);
        pi.theta = vec![0.3, -1.2, 2.0, 0.0, 0.0, 5.0];
        for row in pi.probs() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_log_gradient_matches_finite_differences() {
        let mut pi = SoftmaxPolicy::zeros(2, 3);
        pi.theta = vec![0.5, -0.7, 1.1, 0.0, 0.3, -0.2];
        let (s, a) = (1, 2);
        let grad = pi.log_prob_grad(s, a);
        const STEP: f64 = 1e-6;
        for i in 0..pi.theta.len() {
            let mut hi = pi.clone();
            hi.theta[i] += STEP;
            let mut lo = pi.clone();
            lo.theta[i] -= STEP;
            let fd = (hi.probs()[s][a].ln() - lo.probs()[s][a].ln()) / (2.0 * STEP);
            assert!(
                (grad[i] - fd).abs() < 1e-6,
                "coordinate {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn mc_evaluate_deterministic_self_loop() {
        let model = self_loop_model();
        let sampler = ModelSampler::new(&model);
        let pi = SoftmaxPolicy::zeros(1, 1);
        let cfg = EvalConfig {
            k_eval: 10,
            horizon: 3,
        };
        let v = mc_evaluate(&sampler, &pi, &|_, _| 1.0, 0.9, &cfg, 0);
        assert!((v - 2.71).abs() < 1e-12);
        let z = mc_evaluate(&sampler, &pi, &|_, _| 0.0, 0.9, &cfg, 0);
        assert_eq!(z, 0.0);
    }

    fn random_model(seed: u64, ns: usize, na: usize, gamma: f64) -> TabularSicmdp {
        crate::bench::generate_sewage_env(&crate::bench::SewageSpec {
            num_states: ns,
            num_actions: na,
            gamma,
            delta_margin: 1e-6,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn mc_evaluate_within_noise_envelope() {
        let model = random_model(2, 3, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let pi = SoftmaxPolicy::zeros(3, 2);
        let reward: Vec<f64> = (0..6).map(|i| model.reward[i / 2][i % 2]).collect();
        let exact = exact_value_mu(&model, &pi.to_policy(), &reward).unwrap();
        let cfg = EvalConfig {
            k_eval: 2000,
            horizon: 50,
        };
        let envelope =
            3.0 / ((1.0 - 0.9) * (2.0 * cfg.k_eval as f64).sqrt()) + 0.9f64.powi(50) / 0.1;
        let mut hits = 0;
        for seed in 0..30u64 {
            let est = mc_evaluate(
                &sampler,
                &pi,
                &|s, a| model.reward[s][a],
                0.9,
                &cfg,
                seed,
            );
            if (est - exact).abs() <= envelope {
                hits += 1;
            }
        }
        assert!(hits >= 29, "only {hits}/30 inside the envelope");
    }

    #[test]
    fn occupancy_sampler_matches_linear_solve() {
        // The geometric-stopping draw of (s,a) should reproduce nu_theta:
        // compare the empirical discounted-visit distribution against the
        // exact occupancy in total variation.
        let model = random_model(6, 3, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let pi = SoftmaxPolicy::zeros(3, 2);
        let nu = policy_to_occupancy(&model, &pi.to_policy()).unwrap();
        let cfg = EvalConfig {
            k_eval: 20_000,
            horizon: 200,
        };
        let m = discounted_visits(&sampler, &pi.probs(), 0.9, &cfg, 7);
        let total: f64 = m.iter().sum();
        let tv: f64 = m
            .iter()
            .zip(&nu.nu)
            .map(|(&emp, &ex)| (emp / total - ex).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.02, "total variation {tv}");
    }

    #[test]
    fn zero_signal_gives_zero_direction() {
        let model = random_model(1, 2, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let pi = SoftmaxPolicy::zeros(2, 2);
        let mut cfg = NPGConfig::standard();
        cfg.k_sgd = 50;
        cfg.horizon = 20;
        let w = sample_npg_direction(&sampler, &pi, &|_, _| 0.0, 0.9, &cfg, 3);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    /// Closed-form minimizer of `sum_i (A_i - w . phi_i)^2` via normal
    /// equations, the oracle for the SGD path.
    fn least_squares_direction(
        policy: &SoftmaxPolicy,
        samples: &[(usize, usize, f64)],
    ) -> Vec<f64> {
        use crate::linalg::{solve, Matrix};
        let dim = policy.theta.len();
        let mut ata = Matrix::zeros(dim, dim);
        let mut atb = vec![0.0; dim];
        for &(s, a, adv) in samples {
            let phi = policy.log_prob_grad(s, a);
            for i in 0..dim {
                if phi[i] == 0.0 {
                    continue;
                }
                atb[i] += phi[i] * adv;
                for j in 0..dim {
                    let v = ata.at(i, j) + phi[i] * phi[j];
                    ata.set(i, j, v);
                }
            }
        }
        // Softmax features are rank-deficient (rows sum to zero); ridge
        // regularization picks the minimum-norm solution.
        for i in 0..dim {
            let v = ata.at(i, i) + 1e-9;
            ata.set(i, i, v);
        }
        solve(&ata, &atb).unwrap()
    }

    #[test]
    fn sgd_path_matches_least_squares_on_injected_advantages() {
        // Single state, two actions, theta = 0, exact advantages +-0.5.
        let policy = SoftmaxPolicy::zeros(1, 2);
        let mut samples = Vec::new();
        for i in 0..2000 {
            let a = i % 2;
            let adv = if a == 0 { 0.5 } else { -0.5 };
            samples.push((0usize, a, adv));
        }
        let mut cfg = NPGConfig::standard();
        cfg.schedule = SgdSchedule::Constant(0.5);
        let w = npg_sgd(&policy, &samples, &cfg, 0.9);
        let exact = least_squares_direction(&policy, &samples);
        let dist: f64 = w
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-2, "SGD {w:?} vs least squares {exact:?}");
        // The fitted direction reproduces the advantages through the
        // features.
        for (a, adv) in [(0usize, 0.5), (1usize, -0.5)] {
            let phi = policy.log_prob_grad(0, a);
            let fit: f64 = w.iter().zip(&phi).map(|(x, y)| x * y).sum();
            assert!((fit - adv).abs() <= 1e-2);
        }
    }

    #[test]
    fn direction_norm_respects_projection_radius() {
        let policy = SoftmaxPolicy::zeros(1, 2);
        let samples: Vec<_> = (0..500).map(|i| (0usize, i % 2, 100.0)).collect();
        let mut cfg = NPGConfig::standard();
        cfg.w_radius = 2.0;
        let w = npg_sgd(&policy, &samples, &cfg, 0.9);
        let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 2.0 + 1e-12);
    }

    #[test]
    fn ascent_step_improves_reward() {
        let model = random_model(9, 3, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let pi = SoftmaxPolicy::zeros(3, 2);
        let reward: Vec<f64> = (0..6).map(|i| model.reward[i / 2][i % 2]).collect();
        let before = exact_value_mu(&model, &pi.to_policy(), &reward).unwrap();
        let mut cfg = NPGConfig::standard();
        cfg.k_sgd = 400;
        cfg.horizon = 60;
        let w = sample_npg_direction(&sampler, &pi, &|s, a| model.reward[s][a], 0.9, &cfg, 1);
        let mut stepped = pi.clone();
        for (th, d) in stepped.theta.iter_mut().zip(&w) {
            *th += 0.1 * d;
        }
        let after = exact_value_mu(&model, &stepped.to_policy(), &reward).unwrap();
        assert!(after > before, "value {before} -> {after}");
    }

    #[test]
    fn vacuous_constraints_put_every_iteration_in_the_good_set() {
        let model = random_model(4, 2, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let family = ConstraintDescriptor::none().build().unwrap();
        let mut config = SicpoConfig::new(0.1, 5, InnerSolverConfig::random_search(16, 0), 11);
        config.eval = EvalConfig {
            k_eval: 50,
            horizon: 30,
        };
        config.npg.k_sgd = 50;
        config.npg.horizon = 30;
        let (_, state) = run_sicpo(&sampler, 0.9, &family, &config, Some(&model)).unwrap();
        assert_eq!(state.good_set.len(), 5);
        assert!(state.bad_set.is_empty());
        // Partition invariants and branch correctness.
        assert_eq!(state.good_set.len() + state.bad_set.len(), 5);
        for r in &state.records {
            assert!(r.est_violation <= 0.1);
        }
    }

    #[test]
    fn impossible_constraint_empties_the_good_set() {
        let model = random_model(5, 2, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let family = ConstraintFamily::new(
            vec![(0.0, 1.0)],
            1.0,
            Arc::new(|_y: &[f64], _s, _a| 1.0),
            Arc::new(|_y: &[f64]| 0.0),
        )
        .unwrap();
        let mut config = SicpoConfig::new(1.0, 3, InnerSolverConfig::random_search(8, 0), 2);
        config.eval = EvalConfig {
            k_eval: 50,
            horizon: 30,
        };
        config.npg.k_sgd = 20;
        config.npg.horizon = 20;
        let err = run_sicpo(&sampler, 0.9, &family, &config, Some(&model)).unwrap_err();
        assert!(matches!(err, SicmdpError::EmptyGoodSet));
    }

    #[test]
    fn trace_is_deterministic_and_well_formed() {
        let model = random_model(8, 2, 2, 0.9);
        let sampler = ModelSampler::new(&model);
        let family = model.family().unwrap();
        let mut config = SicpoConfig::new(0.05, 4, InnerSolverConfig::random_search(32, 5), 3);
        config.eval = EvalConfig {
            k_eval: 100,
            horizon: 30,
        };
        config.npg.k_sgd = 50;
        config.npg.horizon = 30;
        let run = |_: ()| {
            run_sicpo(&sampler, 0.9, &family, &config, Some(&model))
                .unwrap()
                .1
                .to_csv()
        };
        let a = run(());
        assert_eq!(a, run(()));
        assert!(a.starts_with(
            "iter,branch,est_violation,y_coords,reward_value_exact,elapsed_ms\n"
        ));
        assert_eq!(a.lines().count(), 5);
        // Branch labels are consistent with the tolerance.
        for line in a.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let viol: f64 = cols[2].parse().unwrap();
            match cols[1] {
                "B" => assert!(viol <= 0.05),
                "N" => assert!(viol > 0.05),
                other => panic!("unexpected branch {other}"),
            }
        }
    }
}
