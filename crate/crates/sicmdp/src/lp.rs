//! Self-contained dense revised-simplex engine with warm-started
//! re-optimization after appending one inequality row.
//!
//! The design targets the LPs this crate produces: a few hundred to a few
//! thousand rows/variables, dense enough that explicit basis-inverse
//! maintenance (with periodic refactorization) beats sparse factorization,
//! and a workload where determinism matters more than raw speed. Columns are
//! stored sparsely; the basis inverse is dense.

use crate::error::SicmdpError;
use crate::linalg::{self, Matrix};

const RC_TOL: f64 = 1e-9; // reduced-cost optimality tolerance
const PIVOT_TOL: f64 = 1e-9; // minimum acceptable ratio-test pivot
const PIVOT_HARD_TOL: f64 = 1e-11; // below this a pivot is a breakdown
const FEAS_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Debug)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub rel: Relation,
    pub rhs: f64,
}

impl Row {
    pub fn le(coeffs: Vec<f64>, rhs: f64) -> Self {
        Row {
            coeffs,
            rel: Relation::Le,
            rhs,
        }
    }

    pub fn ge(coeffs: Vec<f64>, rhs: f64) -> Self {
        Row {
            coeffs,
            rel: Relation::Ge,
            rhs,
        }
    }

    pub fn eq(coeffs: Vec<f64>, rhs: f64) -> Self {
        Row {
            coeffs,
            rel: Relation::Eq,
            rhs,
        }
    }
}

/// A maximization LP: `max c.x` subject to rows and per-variable bounds
/// `[low, high]` (low finite, high may be +inf).
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// LP with the default bounds `x >= 0`.
    pub fn new(objective: Vec<f64>, rows: Vec<Row>) -> Self {
        let n = objective.len();
        LinearProgram {
            objective,
            rows,
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<(), SicmdpError> {
        if self.objective.is_empty() {
            return Err(SicmdpError::InvalidInput("LP needs at least one variable".into()));
        }
        if self.bounds.len() != self.objective.len() {
            return Err(SicmdpError::InvalidInput("bounds/objective length mismatch".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !lo.is_finite() || hi < lo {
                return Err(SicmdpError::InvalidInput(format!(
                    "bad variable bounds [{lo}, {hi}]"
                )));
            }
        }
        for row in &self.rows {
            if row.coeffs.len() != self.objective.len() {
                return Err(SicmdpError::InvalidInput("row length mismatch".into()));
            }
            if row.coeffs.iter().any(|c| !c.is_finite()) || !row.rhs.is_finite() {
                return Err(SicmdpError::InvalidInput("non-finite coefficient".into()));
            }
        }
        Ok(())
    }

    /// Fixed-point decimal dump of the row list, for debugging.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        write!(out, "max").unwrap();
        for c in &self.objective {
            write!(out, " {c:.6}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "row:").unwrap();
            for c in &row.coeffs {
                write!(out, " {c:.6}").unwrap();
            }
            let rel = match row.rel {
                Relation::Le => "<=",
                Relation::Eq => "==",
                Relation::Ge => ">=",
            };
            writeln!(out, " {} {:.6}", rel, row.rhs).unwrap();
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            writeln!(out, "bound x{j}: [{lo:.6}, {hi:.6}]").unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Identity of an internal column, stable across row appends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VarRef {
    Structural(usize),
    /// Slack or surplus of row `i` (user rows first, then upper-bound rows,
    /// then appended rows in append order).
    Slack(usize),
    Artificial(usize),
}

/// Opaque warm-start token: the optimal basis, by column identity.
#[derive(Clone, Debug)]
pub struct Basis(Vec<VarRef>);

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective_value: f64,
    /// Dual values for the user-supplied rows (maximization convention).
    pub dual: Vec<f64>,
    pub basis: Basis,
    /// Simplex pivots performed (both phases, or dual-simplex pivots on a
    /// warm restart).
    pub pivots: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pricing {
    /// Bland's anti-cycling rule: guaranteed termination.
    Bland,
    /// Most-positive reduced cost, with an automatic switch to Bland's rule
    /// after a run of degenerate pivots.
    Dantzig,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub pricing: Pricing,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            pricing: Pricing::Bland,
        }
    }
}

/// Seam for swapping in an external LP engine without touching callers.
pub trait LpBackend {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution, SicmdpError>;
    fn resolve_with_row(
        &self,
        lp: &LinearProgram,
        solution: &LpSolution,
        new_row: &Row,
    ) -> Result<LpSolution, SicmdpError>;
}

/// The built-in dense revised simplex backend.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseSimplex {
    pub options: SolverOptions,
}

impl LpBackend for DenseSimplex {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution, SicmdpError> {
        solve_with(lp, self.options)
    }

    fn resolve_with_row(
        &self,
        lp: &LinearProgram,
        solution: &LpSolution,
        new_row: &Row,
    ) -> Result<LpSolution, SicmdpError> {
        resolve_with_row_opts(lp, solution, new_row, self.options)
    }
}

/// Solves the LP from scratch with default options (Bland pricing).
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, SicmdpError> {
    solve_with(lp, SolverOptions::default())
}

pub fn solve_with(lp: &LinearProgram, options: SolverOptions) -> Result<LpSolution, SicmdpError> {
    lp.validate()?;
    let mut solver = IncrementalSolver::with_options(lp.clone(), options)?;
    solver.solve()
}

/// Re-optimizes `lp + new_row` warm-starting from `solution`'s basis with
/// dual-simplex pivots; falls back to a cold solve on numerical breakdown.
pub fn resolve_with_row(
    lp: &LinearProgram,
    solution: &LpSolution,
    new_row: &Row,
) -> Result<LpSolution, SicmdpError> {
    resolve_with_row_opts(lp, solution, new_row, SolverOptions::default())
}

pub fn resolve_with_row_opts(
    lp: &LinearProgram,
    solution: &LpSolution,
    new_row: &Row,
    options: SolverOptions,
) -> Result<LpSolution, SicmdpError> {
    let mut augmented = lp.clone();
    augmented.rows.push(new_row.clone());
    if solution.status != LpStatus::Optimal || new_row.rel == Relation::Eq {
        return solve_with(&augmented, options);
    }
    match warm_resolve(&augmented, &solution.basis, options) {
        Ok(sol) => Ok(sol),
        Err(SicmdpError::NumericalBreakdown(_)) | Err(SicmdpError::SingularSystem(_)) => {
            solve_with(&augmented, options)
        }
        Err(e) => Err(e),
    }
}

fn warm_resolve(
    augmented: &LinearProgram,
    basis: &Basis,
    options: SolverOptions,
) -> Result<LpSolution, SicmdpError> {
    augmented.validate()?;
    let mut solver = IncrementalSolver::with_options(augmented.clone(), options)?;
    // The appended row sits at the end of the user rows, pushing every
    // internal upper-bound row one slot down; shift the token to match.
    let new_internal = augmented.rows.len() - 1;
    let token: Vec<VarRef> = basis
        .0
        .iter()
        .map(|r| match *r {
            VarRef::Slack(i) if i >= new_internal => VarRef::Slack(i + 1),
            VarRef::Artificial(i) if i >= new_internal => VarRef::Artificial(i + 1),
            other => other,
        })
        .collect();
    solver.install_basis(&token, new_internal)?;
    solver.dual_reoptimize()
}

/// Stateful solver that keeps its factorization alive across `add_row`
/// calls, so each exchange cut costs only the dual-simplex cleanup.
pub struct IncrementalSolver {
    options: SolverOptions,
    num_structural: usize,
    obj_offset: f64,
    lows: Vec<f64>,
    num_user_rows: usize,
    /// User rows present at build time (before any `add_row` appends).
    num_initial_user_rows: usize,
    /// Count of internal upper-bound rows, which sit between the original
    /// user rows and any rows appended by `add_row`.
    num_bound_rows: usize,
    /// Internal rows: (sparse coeffs over structural vars, rhs, negated?).
    /// All internal rows are stated with rhs >= 0 at build time.
    rhs: Vec<f64>,
    negated: Vec<bool>,
    cols: Vec<SparseCol>,
    refs: Vec<VarRef>,
    cost: Vec<f64>, // phase-2 objective per column
    usable: Vec<bool>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    b_inv: Matrix,
    xb: Vec<f64>,
    pivots_since_refactor: usize,
    total_pivots: usize,
    solved: bool,
}

#[derive(Clone, Debug, Default)]
struct SparseCol {
    entries: Vec<(usize, f64)>,
}

impl SparseCol {
    fn push(&mut self, row: usize, val: f64) {
        if val != 0.0 {
            self.entries.push((row, val));
        }
    }
}

enum Phase {
    One,
    Two,
}

impl IncrementalSolver {
    pub fn new(lp: LinearProgram) -> Result<Self, SicmdpError> {
        Self::with_options(lp, SolverOptions::default())
    }

    pub fn with_options(lp: LinearProgram, options: SolverOptions) -> Result<Self, SicmdpError> {
        lp.validate()?;
        let n = lp.num_vars();
        let lows: Vec<f64> = lp.bounds.iter().map(|b| b.0).collect();
        let obj_offset: f64 = lp
            .objective
            .iter()
            .zip(&lows)
            .map(|(c, l)| c * l)
            .sum();

        // Internal rows: user rows (rhs shifted by the lower bounds), then
        // one upper-bound row per finitely bounded variable.
        struct RawRow {
            coeffs: Vec<(usize, f64)>,
            rel: Relation,
            rhs: f64,
        }
        let mut raw: Vec<RawRow> = Vec::with_capacity(lp.rows.len());
        for row in &lp.rows {
            let shift: f64 = row.coeffs.iter().zip(&lows).map(|(a, l)| a * l).sum();
            raw.push(RawRow {
                coeffs: row
                    .coeffs
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a != 0.0)
                    .map(|(j, &a)| (j, a))
                    .collect(),
                rel: row.rel,
                rhs: row.rhs - shift,
            });
        }
        for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
            if hi.is_finite() {
                raw.push(RawRow {
                    coeffs: vec![(j, 1.0)],
                    rel: Relation::Le,
                    rhs: hi - lo,
                });
            }
        }
        let m = raw.len();

        let mut solver = IncrementalSolver {
            options,
            num_structural: n,
            obj_offset,
            lows,
            num_user_rows: lp.rows.len(),
            num_initial_user_rows: lp.rows.len(),
            num_bound_rows: m - lp.rows.len(),
            rhs: Vec::with_capacity(m),
            negated: Vec::with_capacity(m),
            cols: Vec::new(),
            refs: Vec::new(),
            cost: Vec::new(),
            usable: Vec::new(),
            basis: vec![usize::MAX; m],
            in_basis: Vec::new(),
            b_inv: Matrix::identity(m),
            xb: Vec::with_capacity(m),
            pivots_since_refactor: 0,
            total_pivots: 0,
            solved: false,
        };

        // Structural columns.
        for j in 0..n {
            solver.cols.push(SparseCol::default());
            solver.refs.push(VarRef::Structural(j));
            solver.cost.push(lp.objective[j]);
            solver.usable.push(true);
        }
        // Normalize rhs signs and fill structural entries.
        for (i, r) in raw.iter().enumerate() {
            let flip = r.rhs < 0.0;
            let sign = if flip { -1.0 } else { 1.0 };
            solver.rhs.push(sign * r.rhs);
            solver.negated.push(flip);
            for &(j, a) in &r.coeffs {
                solver.cols[j].push(i, sign * a);
            }
        }
        // Slack/surplus columns, then artificials; initial basis.
        let mut artificial_rows = Vec::new();
        for (i, r) in raw.iter().enumerate() {
            let rel = if solver.negated[i] {
                match r.rel {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                }
            } else {
                r.rel
            };
            match rel {
                Relation::Le => {
                    let idx = solver.push_col(VarRef::Slack(i), 0.0, true);
                    solver.cols[idx].push(i, 1.0);
                    solver.basis[i] = idx;
                }
                Relation::Ge => {
                    let idx = solver.push_col(VarRef::Slack(i), 0.0, true);
                    solver.cols[idx].push(i, -1.0);
                    artificial_rows.push(i);
                }
                Relation::Eq => {
                    artificial_rows.push(i);
                }
            }
        }
        for &i in &artificial_rows {
            let idx = solver.push_col(VarRef::Artificial(i), 0.0, false);
            solver.cols[idx].push(i, 1.0);
            solver.basis[i] = idx;
        }
        solver.in_basis = vec![false; solver.cols.len()];
        for &b in &solver.basis {
            solver.in_basis[b] = true;
        }
        solver.xb = solver.rhs.clone();
        Ok(solver)
    }

    fn push_col(&mut self, r: VarRef, cost: f64, usable: bool) -> usize {
        self.cols.push(SparseCol::default());
        self.refs.push(r);
        self.cost.push(cost);
        self.usable.push(usable);
        self.cols.len() - 1
    }

    fn num_rows(&self) -> usize {
        self.rhs.len()
    }

    /// Full cold solve: phase 1 to feasibility, then phase 2.
    pub fn solve(&mut self) -> Result<LpSolution, SicmdpError> {
        self.total_pivots = 0;
        if self
            .basis
            .iter()
            .any(|&b| matches!(self.refs[b], VarRef::Artificial(_)))
        {
            let phase1_obj: Vec<f64> = self
                .refs
                .iter()
                .map(|r| match r {
                    VarRef::Artificial(_) => -1.0,
                    _ => 0.0,
                })
                .collect();
            self.simplex(&phase1_obj, Phase::One)?;
            let infeas: f64 = self
                .basis
                .iter()
                .zip(&self.xb)
                .filter(|(b, _)| matches!(self.refs[**b], VarRef::Artificial(_)))
                .map(|(_, &v)| v)
                .sum();
            if infeas > 1e-9 {
                return Ok(self.report(LpStatus::Infeasible));
            }
            self.pivot_out_artificials()?;
        }
        let cost = self.cost.clone();
        match self.simplex(&cost, Phase::Two)? {
            LpStatus::Unbounded => Ok(self.report(LpStatus::Unbounded)),
            _ => {
                self.solved = true;
                Ok(self.report(LpStatus::Optimal))
            }
        }
    }

    /// Appends one inequality row to an already-solved program and
    /// re-optimizes with dual-simplex pivots from the current basis.
    pub fn add_row(&mut self, row: &Row) -> Result<LpSolution, SicmdpError> {
        assert!(self.solved, "add_row requires a prior Optimal solve");
        let mut coeffs = row.coeffs.clone();
        let mut rhs = row.rhs;
        match row.rel {
            Relation::Le => {}
            Relation::Ge => {
                for c in coeffs.iter_mut() {
                    *c = -*c;
                }
                rhs = -rhs;
            }
            Relation::Eq => {
                return Err(SicmdpError::InvalidInput(
                    "add_row supports inequality rows only".into(),
                ))
            }
        }
        let shift: f64 = coeffs.iter().zip(&self.lows).map(|(a, l)| a * l).sum();
        rhs -= shift;

        let i = self.num_rows();
        self.rhs.push(rhs);
        self.negated.push(false);
        self.num_user_rows += 1;
        for (j, &a) in coeffs.iter().enumerate() {
            if a != 0.0 {
                self.cols[j].push(i, a);
            }
        }
        let slack = self.push_col(VarRef::Slack(i), 0.0, true);
        self.cols[slack].push(i, 1.0);
        self.usable.push(true);
        self.usable.truncate(self.cols.len());
        self.in_basis.push(false);

        // Block-update the basis inverse:
        //   B' = [[B, 0], [a_B, 1]]  =>  B'^-1 = [[B^-1, 0], [-a_B B^-1, 1]]
        let m_old = i;
        let m_new = i + 1;
        let mut b_inv = Matrix::zeros(m_new, m_new);
        for r in 0..m_old {
            for c in 0..m_old {
                b_inv.set(r, c, self.b_inv.at(r, c));
            }
        }
        // a_B: coefficients of the new row on the old basic columns.
        let mut last = vec![0.0; m_new];
        for (r, &b) in self.basis.iter().enumerate() {
            if let VarRef::Structural(j) = self.refs[b] {
                let a = coeffs[j];
                if a != 0.0 {
                    for c in 0..m_old {
                        last[c] -= a * self.b_inv.at(r, c);
                    }
                }
            }
        }
        last[m_old] = 1.0;
        for c in 0..m_new {
            b_inv.set(m_old, c, last[c]);
        }
        self.b_inv = b_inv;
        self.basis.push(slack);
        self.in_basis[slack] = true;
        self.recompute_xb();
        self.pivots_since_refactor = 0;
        self.total_pivots = 0;
        self.dual_reoptimize()
    }

    /// Installs a basis by column identity (warm-start token) and
    /// refactorizes. `new_row` is the internal index of the freshly
    /// appended row, whose slack completes the basis.
    fn install_basis(&mut self, token: &[VarRef], new_row: usize) -> Result<(), SicmdpError> {
        let m = self.num_rows();
        if token.len() != m - 1 {
            return Err(SicmdpError::InvalidInput(
                "warm-start basis does not match the augmented program".into(),
            ));
        }
        let mut basis = Vec::with_capacity(m);
        for r in token {
            let idx = self
                .refs
                .iter()
                .position(|have| have == r)
                .ok_or_else(|| {
                    SicmdpError::InvalidInput("warm-start basis names an unknown column".into())
                })?;
            basis.push(idx);
        }
        let last_slack = self
            .refs
            .iter()
            .position(|r| *r == VarRef::Slack(new_row))
            .expect("appended row always has a slack");
        basis.push(last_slack);
        self.basis = basis;
        self.in_basis = vec![false; self.cols.len()];
        for &b in &self.basis {
            self.in_basis[b] = true;
        }
        self.refactorize()?;
        self.total_pivots = 0;
        Ok(())
    }

    /// Dual-simplex loop: the basis is dual feasible; pivot until primal
    /// feasible (or the appended cuts prove infeasibility).
    fn dual_reoptimize(&mut self) -> Result<LpSolution, SicmdpError> {
        let m = self.num_rows();
        let cost = self.cost.clone();
        let max_pivots = 10_000 + 50 * (m + self.cols.len());
        loop {
            // Leaving row: most negative basic value (smallest row on ties).
            let mut leave = None;
            let mut worst = -FEAS_TOL;
            for (r, &v) in self.xb.iter().enumerate() {
                if v < worst {
                    worst = v;
                    leave = Some(r);
                }
            }
            let Some(r) = leave else {
                self.solved = true;
                return Ok(self.report(LpStatus::Optimal));
            };
            if self.total_pivots >= max_pivots {
                return Err(SicmdpError::NumericalBreakdown(
                    "dual simplex pivot limit".into(),
                ));
            }
            // Row r of B^-1 A over nonbasic usable columns.
            let y = self.dual_prices(&cost);
            let mut enter = None;
            let mut best_ratio = f64::INFINITY;
            for j in 0..self.cols.len() {
                if self.in_basis[j] || !self.usable[j] {
                    continue;
                }
                let mut alpha = 0.0;
                let mut yaj = 0.0;
                for &(row, a) in &self.cols[j].entries {
                    alpha += self.b_inv.at(r, row) * a;
                    yaj += y[row] * a;
                }
                if alpha < -PIVOT_TOL {
                    let d = self.cost[j] - yaj; // <= tol by dual feasibility
                    let ratio = d / alpha; // >= 0
                    if ratio < best_ratio - 1e-12 {
                        best_ratio = ratio;
                        enter = Some(j);
                    }
                }
            }
            let Some(j) = enter else {
                return Ok(self.report(LpStatus::Infeasible));
            };
            let u = self.ftran(j);
            if u[r].abs() < PIVOT_HARD_TOL {
                return Err(SicmdpError::NumericalBreakdown(format!(
                    "dual pivot magnitude {:.3e}",
                    u[r].abs()
                )));
            }
            self.pivot(r, j, &u);
        }
    }

    /// Primal simplex on the given internal objective.
    fn simplex(&mut self, obj: &[f64], phase: Phase) -> Result<LpStatus, SicmdpError> {
        let m = self.num_rows();
        let max_pivots = 50_000 + 200 * (m + self.cols.len());
        let mut degenerate_run = 0usize;
        loop {
            if self.total_pivots >= max_pivots {
                return Err(SicmdpError::NumericalBreakdown("pivot limit".into()));
            }
            if self.pivots_since_refactor >= REFACTOR_EVERY {
                self.refactorize()?;
            }
            let y = self.dual_prices(obj);
            let bland = matches!(self.options.pricing, Pricing::Bland) || degenerate_run > 50;
            let mut enter = None;
            let mut best = RC_TOL;
            for j in 0..self.cols.len() {
                if self.in_basis[j] || !self.usable[j] {
                    continue;
                }
                if matches!(phase, Phase::Two)
                    && matches!(self.refs[j], VarRef::Artificial(_))
                {
                    continue;
                }
                let mut yaj = 0.0;
                for &(row, a) in &self.cols[j].entries {
                    yaj += y[row] * a;
                }
                let d = obj[j] - yaj;
                if d > best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(j) = enter else {
                return Ok(LpStatus::Optimal);
            };
            let u = self.ftran(j);
            // Kick a basic artificial sitting at zero whenever the entering
            // column touches its row; the pivot is degenerate and keeps the
            // artificial at zero forever after.
            let mut leave = None;
            if matches!(phase, Phase::Two) {
                for r in 0..m {
                    if matches!(self.refs[self.basis[r]], VarRef::Artificial(_))
                        && self.xb[r].abs() <= FEAS_TOL
                        && u[r].abs() > PIVOT_TOL
                    {
                        leave = Some(r);
                        break;
                    }
                }
            }
            if leave.is_none() {
                let mut best_ratio = f64::INFINITY;
                let mut best_var = usize::MAX;
                for r in 0..m {
                    if u[r] > PIVOT_TOL {
                        let ratio = self.xb[r].max(0.0) / u[r];
                        if ratio < best_ratio - 1e-12
                            || (ratio < best_ratio + 1e-12 && self.basis[r] < best_var)
                        {
                            best_ratio = ratio;
                            best_var = self.basis[r];
                            leave = Some(r);
                        }
                    }
                }
                if leave.is_none() {
                    let max_u = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if max_u > PIVOT_HARD_TOL {
                        return Err(SicmdpError::NumericalBreakdown(format!(
                            "pivot candidates below tolerance (max {max_u:.3e})"
                        )));
                    }
                    return match phase {
                        Phase::One => Err(SicmdpError::NumericalBreakdown(
                            "phase-1 objective unbounded".into(),
                        )),
                        Phase::Two => Ok(LpStatus::Unbounded),
                    };
                }
            }
            let r = leave.unwrap();
            let theta = self.xb[r].max(0.0) / u[r];
            if theta.abs() <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, j, &u);
        }
    }

    /// y = c_B B^-1.
    fn dual_prices(&self, obj: &[f64]) -> Vec<f64> {
        let m = self.num_rows();
        let mut y = vec![0.0; m];
        for (r, &b) in self.basis.iter().enumerate() {
            let cb = obj[b];
            if cb != 0.0 {
                let row = self.b_inv.row(r);
                for c in 0..m {
                    y[c] += cb * row[c];
                }
            }
        }
        y
    }

    /// u = B^-1 A_j.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.num_rows();
        let mut u = vec![0.0; m];
        for &(row, a) in &self.cols[j].entries {
            for r in 0..m {
                u[r] += a * self.b_inv.at(r, row);
            }
        }
        u
    }

    fn pivot(&mut self, r: usize, j: usize, u: &[f64]) {
        let m = self.num_rows();
        let theta = self.xb[r] / u[r];
        for i in 0..m {
            if i != r {
                self.xb[i] -= theta * u[i];
            }
        }
        self.xb[r] = theta;
        let inv_ur = 1.0 / u[r];
        for c in 0..m {
            let v = self.b_inv.at(r, c) * inv_ur;
            self.b_inv.set(r, c, v);
        }
        for i in 0..m {
            if i == r || u[i] == 0.0 {
                continue;
            }
            let f = u[i];
            for c in 0..m {
                let v = self.b_inv.at(i, c) - f * self.b_inv.at(r, c);
                self.b_inv.set(i, c, v);
            }
        }
        self.in_basis[self.basis[r]] = false;
        self.basis[r] = j;
        self.in_basis[j] = true;
        self.pivots_since_refactor += 1;
        self.total_pivots += 1;
    }

    fn pivot_out_artificials(&mut self) -> Result<(), SicmdpError> {
        let m = self.num_rows();
        for r in 0..m {
            if !matches!(self.refs[self.basis[r]], VarRef::Artificial(_)) {
                continue;
            }
            let mut found = None;
            for j in 0..self.cols.len() {
                if self.in_basis[j]
                    || !self.usable[j]
                    || matches!(self.refs[j], VarRef::Artificial(_))
                {
                    continue;
                }
                let mut alpha = 0.0;
                for &(row, a) in &self.cols[j].entries {
                    alpha += self.b_inv.at(r, row) * a;
                }
                if alpha.abs() > 1e-7 {
                    found = Some(j);
                    break;
                }
            }
            if let Some(j) = found {
                let u = self.ftran(j);
                self.pivot(r, j, &u);
                // The leaving artificial was at zero, so this pivot is
                // degenerate and preserves feasibility.
            }
            // A row whose artificial cannot leave is redundant; the basic
            // artificial stays pinned at zero by the phase-2 kick rule.
        }
        Ok(())
    }

    fn refactorize(&mut self) -> Result<(), SicmdpError> {
        let m = self.num_rows();
        let mut b = Matrix::zeros(m, m);
        for (c, &idx) in self.basis.iter().enumerate() {
            for &(row, a) in &self.cols[idx].entries {
                b.set(row, c, a);
            }
        }
        self.b_inv = linalg::invert(&b)?;
        self.recompute_xb();
        self.pivots_since_refactor = 0;
        Ok(())
    }

    fn recompute_xb(&mut self) {
        let m = self.num_rows();
        let mut xb = vec![0.0; m];
        for r in 0..m {
            let row = self.b_inv.row(r);
            let mut acc = 0.0;
            for c in 0..m {
                acc += row[c] * self.rhs[c];
            }
            xb[r] = acc;
        }
        self.xb = xb;
    }

    fn report(&self, status: LpStatus) -> LpSolution {
        let n = self.num_structural;
        let mut x = self.lows.clone();
        let mut objective_value = self.obj_offset;
        if status == LpStatus::Optimal {
            for (r, &b) in self.basis.iter().enumerate() {
                if let VarRef::Structural(j) = self.refs[b] {
                    x[j] += self.xb[r].max(0.0);
                }
            }
            objective_value = (0..n).map(|j| x[j] * self.cost[j]).sum();
        }
        let y = self.dual_prices(&self.cost);
        let mut dual = vec![0.0; self.num_user_rows];
        for (i, d) in dual.iter_mut().enumerate() {
            // Rows appended after the initial build live past the internal
            // upper-bound rows; original user rows keep their index.
            let internal = if i < self.num_initial_user_rows {
                i
            } else {
                i + self.num_bound_rows
            };
            let sign = if self.negated[internal] { -1.0 } else { 1.0 };
            *d = sign * y[internal];
        }
        let token: Vec<VarRef> = self.basis.iter().map(|&b| self.refs[b]).collect();
        LpSolution {
            status,
            x,
            objective_value,
            dual,
            basis: Basis(token),
            pivots: self.total_pivots,
        }
    }
}
