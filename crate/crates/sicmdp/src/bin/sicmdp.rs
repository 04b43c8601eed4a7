//! Command-line harness: environment generation, dataset sampling, both
//! solver pipelines, baselines, evaluation, and sweeps. Every command is
//! deterministic given (seed, config) and exits with 0 on success, 2 on
//! usage errors, 3 on I/O errors, and 4 on solver errors, printing a
//! machine-readable error line on failure.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sicmdp::bench::{
    generate_sewage_env, sample_dataset, solve_reference, DatasetMode, DatasetSpec, SewageSpec,
};
use sicmdp::constraint::InnerSolverConfig;
use sicmdp::model::{error_term, exact_value_mu, policy_to_occupancy, Policy, TabularSicmdp};
use sicmdp::sicpo::{run_fixed_grid_baseline, run_sicpo, ModelSampler, SicpoConfig};
use sicmdp::sicrl::{
    estimate_model_with, run_sicrl, EmpiricalModel, SicrlConfig, TransitionDataset,
    WidthDenominator,
};
use sicmdp::SicmdpError;

#[derive(Parser)]
#[command(name = "sicmdp", version, about = "Solver toolkit for semi-infinitely constrained MDPs")]
struct Cli {
    /// Flat `key = value` config file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sewage-discharge environment as model JSON.
    GenEnv(GenEnvArgs),
    /// Sample an offline transition dataset from a model.
    SampleData(SampleDataArgs),
    /// Solve the true-model program over a fine constraint grid.
    SolveExact(SolveExactArgs),
    /// Model-based exchange solver (offline dataset or exact model).
    Sicrl(SicrlArgs),
    /// Model-free good-set/bad-set policy optimization.
    Sicpo(SicpoArgs),
    /// Fixed-grid discretization baseline for the policy optimizer.
    Baseline(BaselineArgs),
    /// Evaluate a saved policy against a reference solution.
    Eval(EvalArgs),
    /// Error-vs-budget sweep across seeds for the model-based solvers.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InnerChoice {
    Random,
    Pga,
    Grid,
}

#[derive(Args)]
struct GenEnvArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta_margin: Option<f64>,
}

#[derive(Args)]
struct SampleDataArgs {
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generative draws per (s,a) pair; mutually exclusive with --m.
    #[arg(long)]
    n_per_pair: Option<usize>,
    /// Total draws under the uniform sampling measure over (s,a).
    #[arg(long)]
    m: Option<usize>,
    /// Write packed binary instead of JSON.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct SolveExactArgs {
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Constraint lattice size.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct SicrlArgs {
    #[arg(long)]
    env: Option<PathBuf>,
    /// Offline dataset (JSON or packed binary); exact model when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    inner: Option<InnerChoice>,
    /// Random-search sample count / PGA iterations / grid lattice size.
    #[arg(long)]
    inner_budget: Option<usize>,
    /// Divide confidence widths by the per-successor count instead of the
    /// per-pair count.
    #[arg(long)]
    literal_width_denominator: bool,
    /// Record wall-clock timings in the trace (breaks byte determinism).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SicpoArgs {
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k_eval: Option<usize>,
    #[arg(long)]
    k_sgd: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    w_radius: Option<f64>,
    #[arg(long, value_enum)]
    inner: Option<InnerChoice>,
    #[arg(long)]
    inner_budget: Option<usize>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    sicpo: SicpoArgs,
    #[arg(long = "N-baseline")]
    n_baseline: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    env: Option<PathBuf>,
    /// Policy JSON (row-stochastic `probs`).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation lattice size.
    #[arg(long)]
    grid: Option<usize>,
    /// Reference value override; computed from the grid when absent.
    #[arg(long)]
    reference: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated: sicrl, baseline.
    #[arg(long)]
    algo: Option<String>,
    /// Budget range `lo..hi` (inclusive) or a single value; the exchange
    /// iteration cap and the baseline grid size share this budget.
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    /// Evaluation lattice size for the error metric.
    #[arg(long)]
    grid: Option<usize>,
}

/// Flat `key = value` config file; `#` starts a comment.
struct Config(HashMap<String, String>);

impl Config {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("read {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(CliError::usage(format!(
                        "{}:{}: expected 'key = value'",
                        path.display(),
                        lineno + 1
                    )));
                };
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Config(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::usage(format!("config key '{key}': bad value '{raw}'"))),
        }
    }
}

struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn usage(message: String) -> Self {
        CliError {
            code: 2,
            kind: "usage",
            message,
        }
    }

    fn io(message: String) -> Self {
        CliError {
            code: 3,
            kind: "io",
            message,
        }
    }

    fn solver(message: String) -> Self {
        CliError {
            code: 4,
            kind: "solver",
            message,
        }
    }
}

impl From<SicmdpError> for CliError {
    fn from(e: SicmdpError) -> Self {
        match e {
            SicmdpError::InvalidInput(m) => CliError::usage(m),
            other => CliError::solver(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let result = match cli.command {
        Command::GenEnv(args) => cmd_gen_env(args, &config),
        Command::SampleData(args) => cmd_sample_data(args, &config),
        Command::SolveExact(args) => cmd_solve_exact(args, &config),
        Command::Sicrl(args) => cmd_sicrl(args, &config),
        Command::Sicpo(args) => cmd_sicpo(args, &config, None),
        Command::Baseline(args) => match args
            .n_baseline
            .map(Ok)
            .or_else(|| config.get("N-baseline").transpose())
            .transpose()
        {
            Ok(n) => cmd_sicpo(args.sicpo, &config, Some(n.unwrap_or(9))),
            Err(e) => Err(e),
        },
        Command::Eval(args) => cmd_eval(args, &config),
        Command::Sweep(args) => cmd_sweep(args, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error kind={} code={} msg={:?}", e.kind, e.code, e.message);
    ExitCode::from(e.code)
}

fn write_out(path: Option<&Path>, content: &[u8]) -> Result<(), CliError> {
    match path {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::io(format!("write {}: {e}", path.display()))),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(content)
                .map_err(|e| CliError::io(format!("stdout: {e}")))
        }
    }
}

fn load_model(path: Option<&Path>, config: &Config) -> Result<TabularSicmdp, CliError> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => config
            .get::<PathBuf>("env")?
            .ok_or_else(|| CliError::usage("--env (or config key 'env') is required".into()))?,
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::io(format!("read {}: {e}", path.display())))?;
    Ok(TabularSicmdp::from_json(&text)?)
}

fn cmd_gen_env(args: GenEnvArgs, config: &Config) -> Result<(), CliError> {
    let spec = SewageSpec {
        num_states: args.states.or(config.get("states")?).unwrap_or(8),
        num_actions: args.actions.or(config.get("actions")?).unwrap_or(4),
        gamma: args.gamma.or(config.get("gamma")?).unwrap_or(0.9),
        delta_margin: args
            .delta_margin
            .or(config.get("delta_margin")?)
            .unwrap_or(1e-6),
        seed: args.seed.or(config.get("seed")?).unwrap_or(0),
    };
    let model = generate_sewage_env(&spec)?;
    let out = args.out.or(config.get("out")?);
    write_out(out.as_deref(), model.to_json().as_bytes())
}

fn cmd_sample_data(args: SampleDataArgs, config: &Config) -> Result<(), CliError> {
    let model = load_model(args.env.as_deref(), config)?;
    let n_per_pair = args.n_per_pair.or(config.get("n_per_pair")?);
    let m = args.m.or(config.get("m")?);
    let mode = match (n_per_pair, m) {
        (Some(n), None) => DatasetMode::GenerativeModel { n_per_pair: n },
        (None, Some(m)) => DatasetMode::NuMeasure {
            nu: vec![1.0 / (model.num_states * model.num_actions) as f64;
                model.num_states * model.num_actions],
            m,
        },
        _ => {
            return Err(CliError::usage(
                "exactly one of --n-per-pair and --m is required".into(),
            ))
        }
    };
    let spec = DatasetSpec {
        mode,
        seed: args.seed.or(config.get("seed")?).unwrap_or(0),
    };
    let dataset = sample_dataset(&model, &spec)?;
    let out = args.out.or(config.get("out")?);
    if args.binary {
        write_out(out.as_deref(), &dataset.to_packed_bytes())
    } else {
        let json = serde_json::to_string_pretty(&dataset)
            .map_err(|e| CliError::io(format!("serialize dataset: {e}")))?;
        write_out(out.as_deref(), json.as_bytes())
    }
}

fn cmd_solve_exact(args: SolveExactArgs, config: &Config) -> Result<(), CliError> {
    let model = load_model(args.env.as_deref(), config)?;
    let family = model.family()?;
    let grid = args.grid.or(config.get("grid")?).unwrap_or(10_000);
    let reference = solve_reference(&model, &family, grid)?;
    let doc = serde_json::json!({
        "value": reference.value,
        "lp_objective": reference.lp_objective,
        "grid_points": reference.grid_points,
        "iterations": reference.iterations,
        "policy": reference.policy,
    });
    let out = args.out.or(config.get("out")?);
    write_out(
        out.as_deref(),
        serde_json::to_string_pretty(&doc)
            .map_err(|e| CliError::io(format!("serialize: {e}")))?
            .as_bytes(),
    )
}

fn load_dataset(path: &Path) -> Result<TransitionDataset, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::io(format!("read {}: {e}", path.display())))?;
    if bytes.first() == Some(&b'{') {
        let ds: TransitionDataset = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::usage(format!("dataset JSON: {e}")))?;
        Ok(ds)
    } else {
        Ok(TransitionDataset::from_packed_bytes(&bytes)?)
    }
}

fn inner_config(
    choice: Option<InnerChoice>,
    budget: Option<usize>,
    seed: u64,
    family: &sicmdp::constraint::ConstraintFamily,
) -> InnerSolverConfig {
    match choice.unwrap_or(InnerChoice::Random) {
        InnerChoice::Random => InnerSolverConfig::random_search(budget.unwrap_or(10_000), seed),
        InnerChoice::Pga => InnerSolverConfig::pga(budget.unwrap_or(200), true, seed),
        InnerChoice::Grid => InnerSolverConfig::fixed_grid(family.lattice(budget.unwrap_or(100))),
    }
}

fn cmd_sicrl(args: SicrlArgs, config: &Config) -> Result<(), CliError> {
    let model = load_model(args.env.as_deref(), config)?;
    let family = model.family()?;
    let seed = args.seed.or(config.get("seed")?).unwrap_or(0);
    let estimate = match args.data.or(config.get("data")?) {
        Some(path) => {
            let dataset = load_dataset(&path)?;
            let delta = args.delta.or(config.get("delta")?).unwrap_or(0.01);
            let denom = if args.literal_width_denominator {
                WidthDenominator::TripleCount
            } else {
                WidthDenominator::PairCount
            };
            estimate_model_with(&dataset, delta, denom)?
        }
        None => EmpiricalModel::exact(&model),
    };
    let inner = inner_config(
        args.inner.or(inner_from_config(config)?),
        args.inner_budget.or(config.get("inner_budget")?),
        seed,
        &family,
    );
    let mut solver_config = SicrlConfig::new(
        args.eta.or(config.get("eta")?).unwrap_or(1e-4),
        args.t.or(config.get("T")?).unwrap_or(64),
        inner,
    );
    solver_config.record_timing = args.timing;
    let (policy, state) = run_sicrl(&model, &estimate, &family, &solver_config)?;
    if let Some(path) = args.policy_out {
        let json = serde_json::to_string_pretty(&policy)
            .map_err(|e| CliError::io(format!("serialize policy: {e}")))?;
        write_out(Some(&path), json.as_bytes())?;
    }
    let out = args.out.or(config.get("out")?);
    write_out(out.as_deref(), state.to_csv().as_bytes())
}

fn inner_from_config(config: &Config) -> Result<Option<InnerChoice>, CliError> {
    Ok(match config.0.get("inner").map(String::as_str) {
        None => None,
        Some("random") => Some(InnerChoice::Random),
        Some("pga") => Some(InnerChoice::Pga),
        Some("grid") => Some(InnerChoice::Grid),
        Some(other) => {
            return Err(CliError::usage(format!(
                "config key 'inner': expected random|pga|grid, got '{other}'"
            )))
        }
    })
}

fn cmd_sicpo(
    args: SicpoArgs,
    config: &Config,
    n_baseline: Option<usize>,
) -> Result<(), CliError> {
    let model = load_model(args.env.as_deref(), config)?;
    let family = model.family()?;
    let seed = args.seed.or(config.get("seed")?).unwrap_or(0);
    let inner = inner_config(
        args.inner.or(inner_from_config(config)?),
        args.inner_budget.or(config.get("inner_budget")?),
        seed,
        &family,
    );
    let mut run_config = SicpoConfig::new(
        args.eta.or(config.get("eta")?).unwrap_or(0.013),
        args.t.or(config.get("T")?).unwrap_or(2000),
        inner,
        seed,
    );
    run_config.npg.alpha = args.alpha.or(config.get("alpha")?).unwrap_or(1.0);
    run_config.npg.k_sgd = args.k_sgd.or(config.get("k_sgd")?).unwrap_or(1000);
    run_config.eval.k_eval = args.k_eval.or(config.get("k_eval")?).unwrap_or(10_000);
    if let Some(w) = args.w_radius.or(config.get("w_radius")?) {
        run_config.npg.w_radius = w;
    }
    let horizon = args.horizon.or(config.get("horizon")?).unwrap_or(100);
    run_config.npg.horizon = horizon;
    run_config.eval.horizon = horizon;
    run_config.record_timing = args.timing;
    let sampler = ModelSampler::new(&model);
    let (policy, state) = match n_baseline {
        Some(n) => run_fixed_grid_baseline(
            &sampler,
            model.gamma,
            &family,
            n,
            &run_config,
            Some(&model),
        )?,
        None => run_sicpo(&sampler, model.gamma, &family, &run_config, Some(&model))?,
    };
    if let Some(path) = args.policy_out {
        let json = serde_json::to_string_pretty(&policy.to_policy())
            .map_err(|e| CliError::io(format!("serialize policy: {e}")))?;
        write_out(Some(&path), json.as_bytes())?;
    }
    let out = args.out.or(config.get("out")?);
    write_out(out.as_deref(), state.to_csv().as_bytes())
}

fn cmd_eval(args: EvalArgs, config: &Config) -> Result<(), CliError> {
    let model = load_model(args.env.as_deref(), config)?;
    let family = model.family()?;
    let policy_path = args
        .policy
        .or(config.get("policy")?)
        .ok_or_else(|| CliError::usage("--policy is required".into()))?;
    let text = std::fs::read_to_string(&policy_path)
        .map_err(|e| CliError::io(format!("read {}: {e}", policy_path.display())))?;
    let policy: Policy = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("policy JSON: {e}")))?;
    let grid_size = args.grid.or(config.get("grid")?).unwrap_or(10_000);
    let grid = family.lattice(grid_size);
    let reference = match args.reference.or(config.get("reference")?) {
        Some(v) => v,
        None => solve_reference(&model, &family, grid_size)?.value,
    };
    let error = error_term(&model, &family, &policy, reference, &grid)?;
    let reward_flat: Vec<f64> = (0..model.num_states * model.num_actions)
        .map(|i| model.reward[i / model.num_actions][i % model.num_actions])
        .collect();
    let value = exact_value_mu(&model, &policy, &reward_flat)?;
    let nu = policy_to_occupancy(&model, &policy)?;
    let scale = 1.0 / (1.0 - model.gamma);
    let mut sup_violation = f64::NEG_INFINITY;
    for y in &grid {
        let mut v = 0.0;
        for s in 0..model.num_states {
            for a in 0..model.num_actions {
                v += nu.at(s, a) * family.cost(y, s, a);
            }
        }
        sup_violation = sup_violation.max(v * scale - family.threshold(y));
    }
    let csv = format!(
        "reference_value,policy_value,error_term,sup_violation\n{},{},{},{}\n",
        reference, value, error, sup_violation
    );
    let out = args.out.or(config.get("out")?);
    write_out(out.as_deref(), csv.as_bytes())
}

fn parse_range(raw: &str) -> Result<Vec<usize>, CliError> {
    if let Some((lo, hi)) = raw.split_once("..") {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad range '{raw}'")))?;
        let hi: usize = hi
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad range '{raw}'")))?;
        if lo == 0 || hi < lo {
            return Err(CliError::usage(format!("bad range '{raw}'")));
        }
        Ok((lo..=hi).collect())
    } else {
        let v: usize = raw
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad range '{raw}'")))?;
        Ok(vec![v])
    }
}

fn cmd_sweep(args: SweepArgs, config: &Config) -> Result<(), CliError> {
    let algos: Vec<String> = args
        .algo
        .or(config.get("algo")?)
        .unwrap_or_else(|| "sicrl,baseline".into())
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    for a in &algos {
        if a != "sicrl" && a != "baseline" {
            return Err(CliError::usage(format!(
                "unknown sweep algorithm '{a}' (expected sicrl, baseline)"
            )));
        }
    }
    let budgets = parse_range(
        &args
            .t
            .or(config.get("T")?)
            .unwrap_or_else(|| "1..16".into()),
    )?;
    let reps = args.reps.or(config.get("reps")?).unwrap_or(20);
    let base_seed = args.seed.or(config.get("seed")?).unwrap_or(0);
    let eta = args.eta.or(config.get("eta")?).unwrap_or(1e-4);
    let grid_size = args.grid.or(config.get("grid")?).unwrap_or(10_000);

    let mut csv = String::from("algo,seed,budget,error_term,active_constraints,value\n");
    for rep in 0..reps {
        let seed = base_seed + rep as u64;
        let model = generate_sewage_env(&SewageSpec::standard(seed))?;
        let family = model.family()?;
        let grid = family.lattice(grid_size);
        let reference = solve_reference(&model, &family, grid_size)?;
        let estimate = EmpiricalModel::exact(&model);
        for &budget in &budgets {
            for algo in &algos {
                let (policy, active, value) = match algo.as_str() {
                    "sicrl" => {
                        let inner = InnerSolverConfig::random_search(10_000, seed);
                        let run_config = SicrlConfig::new(eta, budget, inner);
                        let (policy, state) =
                            run_sicrl(&model, &estimate, &family, &run_config)?;
                        let value = state
                            .history
                            .last()
                            .map(|it| it.lp_objective / (1.0 - model.gamma))
                            .unwrap_or(f64::NAN);
                        (policy, state.active_set.len(), value)
                    }
                    _ => {
                        let lattice = family.lattice(budget);
                        let solved = sicmdp::bench::solve_on_grid(&model, &family, &lattice)?;
                        (solved.policy, lattice.len(), solved.value)
                    }
                };
                let error = error_term(&model, &family, &policy, reference.value, &grid)?;
                csv.push_str(&format!(
                    "{algo},{seed},{budget},{error},{active},{value}\n"
                ));
            }
        }
    }
    let out = args.out.or(config.get("out")?);
    write_out(out.as_deref(), csv.as_bytes())
}
