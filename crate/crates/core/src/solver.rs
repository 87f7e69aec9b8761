//! Dynamic-programming solvers for the truncated AoI MDP.
//!
//! Two objectives are supported: the alpha-discounted cost, solved by plain
//! value iteration from `V_0 = 0`, and the long-run average cost, solved by
//! relative value iteration anchored at a reference state. Either sweep can
//! skip argmin evaluations by exploiting the monotone threshold structure of
//! the optimal policy (`SolveParams::use_structure`).

use nalgebra::{DMatrix, DVector};
use petgraph::algo::kosaraju_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, cost, is_valid, transition, Action, CompiledKernel, ModelError, ModelParams, State,
    StateSpace,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error("table has {got} entries but the model has {expected} states")]
    IncompleteTable { expected: usize, got: usize },
    #[error("policy violates the threshold structure in l at state {0}")]
    StructureViolation(State),
    #[error("stationary distribution did not reach residual {target:e} (last {residual:e} after {iterations} iterations)")]
    EvaluationFailed {
        residual: f64,
        target: f64,
        iterations: usize,
    },
}

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// Self-loop weight mixed into the average-cost sweep, see [`SolveParams::aperiodicity`].
pub const DEFAULT_APERIODICITY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveParams {
    /// Discount factor; `None` selects the average-cost objective.
    pub alpha: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Anchor `s0` of relative value iteration.
    pub reference_state: State,
    pub use_structure: bool,
    /// Weight `tau` in `tau * P + (1 - tau) * I` used by relative value
    /// iteration. Any `tau < 1` makes the iterated chain aperiodic while
    /// leaving the optimal policy and average cost unchanged; values are
    /// rescaled by `tau` on return. Ignored in discounted mode.
    pub aperiodicity: f64,
}

impl SolveParams {
    pub fn average(model: &ModelParams) -> Self {
        Self {
            alpha: None,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            reference_state: model.initial_state(),
            use_structure: false,
            aperiodicity: DEFAULT_APERIODICITY,
        }
    }

    pub fn discounted(model: &ModelParams, alpha: f64) -> Self {
        Self {
            alpha: Some(alpha),
            ..Self::average(model)
        }
    }

    pub fn structured(mut self, on: bool) -> Self {
        self.use_structure = on;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self, model: &ModelParams) -> Result<(), SolverError> {
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidParams(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(SolverError::InvalidParams("max_iter must be positive".into()));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(SolverError::InvalidParams(format!("alpha must lie in (0,1), got {alpha}")));
            }
        }
        if !(self.aperiodicity > 0.0 && self.aperiodicity <= 1.0) {
            return Err(SolverError::InvalidParams(format!(
                "aperiodicity must lie in (0,1], got {}",
                self.aperiodicity
            )));
        }
        if !is_valid(self.reference_state, model) {
            return Err(SolverError::InvalidParams(format!(
                "reference state {} is not in the state space",
                self.reference_state
            )));
        }
        Ok(())
    }
}

/// Real value for every state of `S_m`, stored in state-space order.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    model: ModelParams,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn new(model: ModelParams, values: Vec<f64>) -> Result<Self, SolverError> {
        let expected = model::state_count(&model);
        if values.len() != expected {
            return Err(SolverError::IncompleteTable {
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::InvalidParams(format!(
                "non-finite value at state {}",
                StateSpace::new(model).state(i)
            )));
        }
        Ok(Self { model, values })
    }

    pub fn zeros(model: ModelParams) -> Self {
        let n = model::state_count(&model);
        Self {
            model,
            values: vec![0.0; n],
        }
    }

    /// Builds a table by evaluating `f` on every state.
    pub fn from_fn(model: ModelParams, f: impl FnMut(State) -> f64) -> Self {
        let values = StateSpace::new(model).states().map(f).collect();
        Self { model, values }
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: State) -> Option<f64> {
        StateSpace::new(self.model)
            .index(s)
            .map(|i| self.values[i])
    }

    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Deterministic stationary policy over `S_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    model: ModelParams,
    actions: Vec<Action>,
}

impl Policy {
    pub fn new(model: ModelParams, actions: Vec<Action>) -> Result<Self, SolverError> {
        let expected = model::state_count(&model);
        if actions.len() != expected {
            return Err(SolverError::IncompleteTable {
                expected,
                got: actions.len(),
            });
        }
        Ok(Self { model, actions })
    }

    pub fn from_fn(model: ModelParams, f: impl FnMut(State) -> Action) -> Self {
        let actions = StateSpace::new(model).states().map(f).collect();
        Self { model, actions }
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn get(&self, s: State) -> Option<Action> {
        StateSpace::new(self.model)
            .index(s)
            .map(|i| self.actions[i])
    }

    pub fn set(&mut self, s: State, a: Action) -> Result<(), SolverError> {
        let i = StateSpace::new(self.model)
            .index(s)
            .ok_or(ModelError::InvalidState(s))?;
        self.actions[i] = a;
        Ok(())
    }

    /// States where the two policies choose differently.
    pub fn differences(&self, other: &Policy) -> Vec<State> {
        let space = StateSpace::new(self.model);
        self.actions
            .iter()
            .zip(&other.actions)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| space.state(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Sup-norm distance between the last two iterates.
    pub final_span: f64,
    /// Long-run average AoI estimate, average-cost mode only.
    pub average_cost: Option<f64>,
    pub converged: bool,
    /// Number of states at which both actions were evaluated and compared.
    pub argmin_evaluations: u64,
    /// Sup-norm distance after every sweep.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub values: ValueTable,
    pub policy: Policy,
    pub report: SolveReport,
}

/// `C(s) + alpha * E[V(s') | s, a]`.
pub fn bellman_q(v: &ValueTable, s: State, a: Action, alpha: f64) -> Result<f64, SolverError> {
    let space = StateSpace::new(v.model);
    let dist = transition(s, a, &v.model)?;
    let expected: f64 = dist
        .iter()
        .map(|(next, prob)| prob * v.values[space.index_unchecked(*next)])
        .sum();
    Ok(cost(s) + alpha * expected)
}

/// Greedy policy with respect to `v`; ties go to [`Action::Restart`].
pub fn extract_policy(v: &ValueTable, alpha: f64) -> Policy {
    let space = StateSpace::new(v.model);
    let actions = space
        .states()
        .map(|s| {
            let q0 = bellman_q(v, s, Action::Continue, alpha).expect("enumerated state is valid");
            let q1 = bellman_q(v, s, Action::Restart, alpha).expect("enumerated state is valid");
            if q0 < q1 {
                Action::Continue
            } else {
                Action::Restart
            }
        })
        .collect();
    Policy {
        model: v.model,
        actions,
    }
}

/// One synchronous Bellman sweep over a compiled kernel.
///
/// `q(s, a) = C(s) + alpha * (tau * E[V(s') | s, a] + (1 - tau) * V(s))`;
/// discounted mode uses `tau = 1`, average-cost mode `alpha = 1`.
struct Sweeper<'a> {
    kernel: &'a CompiledKernel,
    alpha: f64,
    tau: f64,
    structured: bool,
}

impl Sweeper<'_> {
    /// Writes `min_a q` into `out` and the chosen actions into `actions`;
    /// returns the number of argmin evaluations.
    fn sweep(&self, v: &[f64], out: &mut [f64], actions: &mut [Action]) -> u64 {
        let m = self.kernel.model();
        let (k, p) = (m.k(), m.p());
        let q = 1.0 - p;
        let space = self.kernel.space();
        let (alpha, tau) = (self.alpha, self.tau);
        let lazy = tau < 1.0;
        let qval = |c: f64, e: f64, vi: f64| {
            if lazy {
                c + alpha * (tau * e + (1.0 - tau) * vi)
            } else {
                c + alpha * e
            }
        };

        let mut evaluations = 0u64;
        let mut restart_at_l = vec![false; k as usize];
        // values of the fresh states (j, 0, 0) by j - k; decode successors
        // are scattered across layers, so keep them contiguous
        let fresh: Vec<f64> = (k..=m.delta_max()).map(|j| v[space.layer(j).start]).collect();
        for delta in k..=m.delta_max() {
            let c = f64::from(delta);
            let e_restart = self.kernel.restart_branch(delta).expect(v, p, q);
            restart_at_l.iter_mut().for_each(|f| *f = false);
            let mut idx = space.layer(delta).start;

            // (delta, 0, 0): idle or start a fresh update
            let vi = v[idx];
            let q1 = qval(c, e_restart, vi);
            let (a, val) = if self.structured {
                (Action::Restart, q1)
            } else {
                evaluations += 1;
                let q0 = qval(c, v[self.kernel.idle_target(delta)], vi);
                if q0 < q1 {
                    (Action::Continue, q0)
                } else {
                    (Action::Restart, q1)
                }
            };
            out[idx] = val;
            actions[idx] = a;
            idx += 1;

            if !self.structured {
                // rows of full width k in an interior layer share one successor shift
                let full_from = if delta < m.delta_max() && delta - k >= (k - 1).max(1) {
                    (k - 1).max(1)
                } else {
                    delta - k + 1
                };
                for d in 1..full_from {
                    let row = self.kernel.continuation_row(delta, d);
                    let width = (d.min(k - 1) + 1) as usize;
                    let decode = (width == k as usize).then(|| fresh[(d + 1 - k) as usize]);
                    let span = idx..idx + width;
                    let args = RowArgs {
                        c,
                        p,
                        q,
                        e_restart,
                        next: &v[row..row + width + usize::from(decode.is_none())],
                        decode,
                    };
                    if lazy {
                        plain_row::<true>(&args, alpha, tau, &v[span.clone()], &mut out[span.clone()], &mut actions[span]);
                    } else {
                        plain_row::<false>(&args, alpha, tau, &v[span.clone()], &mut out[span.clone()], &mut actions[span]);
                    }
                    evaluations += width as u64;
                    idx += width;
                }
                if full_from <= delta - k {
                    let ku = k as usize;
                    let rows = (delta - k - full_from + 1) as usize;
                    let end = idx + rows * ku;
                    let shift = space.layer(delta).len() + ku;
                    let fresh = &fresh[(full_from + 1 - k) as usize..][..rows];
                    let block = BlockArgs {
                        k: ku,
                        c,
                        p,
                        q,
                        e_restart,
                        next: &v[idx + shift..end + shift],
                        fresh,
                    };
                    if lazy {
                        full_rows::<true>(&block, alpha, tau, &v[idx..end], &mut out[idx..end], &mut actions[idx..end]);
                    } else {
                        full_rows::<false>(&block, alpha, tau, &v[idx..end], &mut out[idx..end], &mut actions[idx..end]);
                    }
                    evaluations += (end - idx) as u64;
                }
                continue;
            }

            for d in 1..=(delta - k) {
                let row = self.kernel.continuation_row(delta, d);
                let width = d.min(k - 1) + 1;
                let mut continue_seen = false;
                for l in 0..width {
                    let vi = v[idx];
                    let e_continue = || {
                        let fail = v[row + l as usize];
                        let succ = if l + 1 < k {
                            v[row + l as usize + 1]
                        } else {
                            fresh[(d + 1 - k) as usize]
                        };
                        p * succ + q * fail
                    };
                    let forced = if !self.structured {
                        None
                    } else if l == 0 {
                        Some(Action::Restart)
                    } else if continue_seen {
                        Some(Action::Continue)
                    } else if restart_at_l[l as usize] {
                        Some(Action::Restart)
                    } else {
                        None
                    };
                    let (a, val) = match forced {
                        Some(Action::Restart) => (Action::Restart, qval(c, e_restart, vi)),
                        Some(Action::Continue) => (Action::Continue, qval(c, e_continue(), vi)),
                        None => {
                            evaluations += 1;
                            let q0 = qval(c, e_continue(), vi);
                            let q1 = qval(c, e_restart, vi);
                            if q0 < q1 {
                                (Action::Continue, q0)
                            } else {
                                (Action::Restart, q1)
                            }
                        }
                    };
                    match a {
                        Action::Continue => continue_seen = true,
                        Action::Restart => restart_at_l[l as usize] = true,
                    }
                    out[idx] = val;
                    actions[idx] = a;
                    idx += 1;
                }
            }
        }
        evaluations
    }
}

struct RowArgs<'a> {
    c: f64,
    p: f64,
    q: f64,
    e_restart: f64,
    /// Continuation successors `(delta', d', 0..)` of the row.
    next: &'a [f64],
    /// Value of the decode successor when the row reaches `l = k - 1`.
    decode: Option<f64>,
}

/// Unpruned sweep over one row `(delta, d, *)` with `d >= 1`.
#[inline(always)]
fn plain_row<const LAZY: bool>(
    args: &RowArgs<'_>,
    alpha: f64,
    tau: f64,
    cur: &[f64],
    out: &mut [f64],
    actions: &mut [Action],
) {
    let RowArgs { c, p, q, e_restart, next, decode } = *args;
    let qval = |e: f64, vi: f64| {
        if LAZY {
            c + alpha * (tau * e + (1.0 - tau) * vi)
        } else {
            c + alpha * e
        }
    };
    let n = out.len();
    let plain = if decode.is_some() { n - 1 } else { n };
    for l in 0..plain {
        let q0 = qval(p * next[l + 1] + q * next[l], cur[l]);
        let q1 = qval(e_restart, cur[l]);
        let keep = q0 < q1;
        out[l] = if keep { q0 } else { q1 };
        actions[l] = if keep { Action::Continue } else { Action::Restart };
    }
    if let Some(succ) = decode {
        let l = n - 1;
        let q0 = qval(p * succ + q * next[l], cur[l]);
        let q1 = qval(e_restart, cur[l]);
        let keep = q0 < q1;
        out[l] = if keep { q0 } else { q1 };
        actions[l] = if keep { Action::Continue } else { Action::Restart };
    }
}

struct BlockArgs<'a> {
    k: usize,
    c: f64,
    p: f64,
    q: f64,
    e_restart: f64,
    /// Continuation successors, aligned with the block.
    next: &'a [f64],
    /// Decode successor value for each row.
    fresh: &'a [f64],
}

/// Unpruned sweep over consecutive full-width rows of one interior layer.
#[inline(always)]
fn full_rows<const LAZY: bool>(
    args: &BlockArgs<'_>,
    alpha: f64,
    tau: f64,
    cur: &[f64],
    out: &mut [f64],
    actions: &mut [Action],
) {
    let BlockArgs { k, c, p, q, e_restart, next, fresh } = *args;
    let qval = |e: f64, vi: f64| {
        if LAZY {
            c + alpha * (tau * e + (1.0 - tau) * vi)
        } else {
            c + alpha * e
        }
    };
    let rows = cur
        .chunks_exact(k)
        .zip(next.chunks_exact(k))
        .zip(out.chunks_exact_mut(k).zip(actions.chunks_exact_mut(k)))
        .zip(fresh);
    for (((cur, next), (out, actions)), &decode) in rows {
        for l in 0..k {
            let succ = if l + 1 < k { next[l + 1] } else { decode };
            let q0 = qval(p * succ + q * next[l], cur[l]);
            let q1 = qval(e_restart, cur[l]);
            let keep = q0 < q1;
            out[l] = if keep { q0 } else { q1 };
            actions[l] = if keep { Action::Continue } else { Action::Restart };
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Discounted value iteration from `V_0 = 0`.
pub fn discounted_vi(model: &ModelParams, sp: &SolveParams) -> Result<Solution, SolverError> {
    let kernel = CompiledKernel::new(*model);
    discounted_vi_with(&kernel, sp)
}

pub fn discounted_vi_with(kernel: &CompiledKernel, sp: &SolveParams) -> Result<Solution, SolverError> {
    let model = *kernel.model();
    sp.validate(&model)?;
    let alpha = sp
        .alpha
        .ok_or_else(|| SolverError::InvalidParams("discounted mode requires alpha".into()))?;
    let sweeper = Sweeper {
        kernel,
        alpha,
        tau: 1.0,
        structured: sp.use_structure,
    };
    let n = kernel.space().len();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut actions = vec![Action::Restart; n];
    let mut report = SolveReport {
        iterations: 0,
        final_span: f64::INFINITY,
        average_cost: None,
        converged: false,
        argmin_evaluations: 0,
        residuals: Vec::new(),
    };
    while report.iterations < sp.max_iter {
        report.argmin_evaluations += sweeper.sweep(&v, &mut next, &mut actions);
        report.iterations += 1;
        let diff = sup_diff(&next, &v);
        report.residuals.push(diff);
        report.final_span = diff;
        std::mem::swap(&mut v, &mut next);
        if diff <= sp.tol {
            report.converged = true;
            break;
        }
    }
    Ok(Solution {
        values: ValueTable { model, values: v },
        policy: Policy { model, actions },
        report,
    })
}

/// Relative value iteration for the average-cost objective.
///
/// Each sweep computes `W = min_a q` and subtracts `W(s0)`; at convergence
/// `W(s0)` is the optimal average AoI.
pub fn relative_vi(model: &ModelParams, sp: &SolveParams) -> Result<Solution, SolverError> {
    let kernel = CompiledKernel::new(*model);
    relative_vi_with(&kernel, sp)
}

pub fn relative_vi_with(kernel: &CompiledKernel, sp: &SolveParams) -> Result<Solution, SolverError> {
    let model = *kernel.model();
    sp.validate(&model)?;
    if sp.alpha.is_some() {
        return Err(SolverError::InvalidParams("average-cost mode takes no alpha".into()));
    }
    let tau = sp.aperiodicity;
    let sweeper = Sweeper {
        kernel,
        alpha: 1.0,
        tau,
        structured: sp.use_structure,
    };
    let anchor = kernel.space().index_unchecked(sp.reference_state);
    let n = kernel.space().len();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut actions = vec![Action::Restart; n];
    let mut gain = 0.0;
    let mut report = SolveReport {
        iterations: 0,
        final_span: f64::INFINITY,
        average_cost: None,
        converged: false,
        argmin_evaluations: 0,
        residuals: Vec::new(),
    };
    while report.iterations < sp.max_iter {
        report.argmin_evaluations += sweeper.sweep(&v, &mut next, &mut actions);
        report.iterations += 1;
        gain = next[anchor];
        let mut diff = 0.0f64;
        for (x, old) in next.iter_mut().zip(&v) {
            *x -= gain;
            diff = diff.max((*x - old).abs());
        }
        report.residuals.push(diff);
        report.final_span = diff;
        std::mem::swap(&mut v, &mut next);
        if diff <= sp.tol {
            report.converged = true;
            break;
        }
    }
    report.average_cost = Some(gain);
    if tau < 1.0 {
        v.iter_mut().for_each(|x| *x *= tau);
    }
    Ok(Solution {
        values: ValueTable { model, values: v },
        policy: Policy { model, actions },
        report,
    })
}

/// Dispatches on `sp.alpha`.
pub fn solve(model: &ModelParams, sp: &SolveParams) -> Result<Solution, SolverError> {
    match sp.alpha {
        Some(_) => discounted_vi(model, sp),
        None => relative_vi(model, sp),
    }
}

/// Per-`(delta0, d)` thresholds `tau = min{l : policy(delta0 + d, d, l) = Continue}`,
/// with `tau = k` when the policy restarts at every `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdTable {
    k: u32,
    delta_max: u32,
    /// `taus[delta0 - k][d - 1]` for `1 <= d <= delta_max - delta0`.
    taus: Vec<Vec<u32>>,
}

impl ThresholdTable {
    /// Table with the same threshold at every entry.
    pub fn constant(model: &ModelParams, tau: u32) -> Self {
        let (k, dm) = (model.k(), model.delta_max());
        let taus = (k..=dm).map(|delta0| vec![tau; (dm - delta0) as usize]).collect();
        Self { k, delta_max: dm, taus }
    }

    pub fn from_fn(model: &ModelParams, mut f: impl FnMut(u32, u32) -> u32) -> Self {
        let (k, dm) = (model.k(), model.delta_max());
        let taus = (k..=dm)
            .map(|delta0| (1..=dm - delta0).map(|d| f(delta0, d)).collect())
            .collect();
        Self { k, delta_max: dm, taus }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn delta_max(&self) -> u32 {
        self.delta_max
    }

    pub fn get(&self, delta0: u32, d: u32) -> Option<u32> {
        if delta0 < self.k || d == 0 {
            return None;
        }
        self.taus
            .get((delta0 - self.k) as usize)?
            .get((d - 1) as usize)
            .copied()
    }

    pub fn set(&mut self, delta0: u32, d: u32, tau: u32) -> bool {
        if delta0 < self.k || d == 0 {
            return false;
        }
        match self
            .taus
            .get_mut((delta0 - self.k) as usize)
            .and_then(|row| row.get_mut((d - 1) as usize))
        {
            Some(slot) => {
                *slot = tau;
                true
            }
            None => false,
        }
    }

    /// Thresholds for one starting AoI, ordered by `d = 1, 2, ...`.
    pub fn row(&self, delta0: u32) -> Option<&[u32]> {
        if delta0 < self.k {
            return None;
        }
        self.taus.get((delta0 - self.k) as usize).map(Vec::as_slice)
    }

    /// `(delta0, d, tau)` in ascending `(delta0, d)` order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.taus.iter().enumerate().flat_map(move |(i, row)| {
            let delta0 = self.k + i as u32;
            row.iter()
                .enumerate()
                .map(move |(j, &tau)| (delta0, j as u32 + 1, tau))
        })
    }
}

pub fn extract_thresholds(pi: &Policy) -> Result<ThresholdTable, SolverError> {
    let m = pi.model;
    let k = m.k();
    let space = StateSpace::new(m);
    let mut table = ThresholdTable::constant(&m, k);
    for delta in k..=m.delta_max() {
        for d in 1..=(delta - k) {
            let mut tau = None;
            for l in 0..=d.min(k - 1) {
                let s = State::new(delta, d, l);
                let a = pi.actions[space.index_unchecked(s)];
                match (a, tau) {
                    (Action::Continue, None) => tau = Some(l),
                    (Action::Restart, Some(_)) => return Err(SolverError::StructureViolation(s)),
                    _ => {}
                }
            }
            table.set(delta - d, d, tau.unwrap_or(k));
        }
    }
    Ok(table)
}

pub const EVAL_RESIDUAL: f64 = 1e-12;
const EVAL_MAX_ITER: usize = 1_000_000;
const SWEEP_MAX_ITER: usize = 10_000;
const STALL_WINDOW: usize = 256;

/// Exact long-run average AoI of a stationary policy on the truncated chain.
///
/// Computes the stationary distribution of the recurrent class reached from
/// `(k, 0, 0)` (see [`stationary_distribution`]) and averages the AoI over it.
pub fn evaluate_policy_exact(pi: &Policy) -> Result<f64, SolverError> {
    let kernel = CompiledKernel::new(pi.model);
    evaluate_policy_exact_with(&kernel, pi)
}

pub fn evaluate_policy_exact_with(kernel: &CompiledKernel, pi: &Policy) -> Result<f64, SolverError> {
    let dist = stationary_distribution(kernel, pi)?;
    Ok(average_aoi(kernel, &dist))
}

/// `sum_s dist(s) * delta(s)`.
pub fn average_aoi(kernel: &CompiledKernel, dist: &[f64]) -> f64 {
    let space = kernel.space();
    let m = kernel.model();
    (m.k()..=m.delta_max())
        .map(|delta| dist[space.layer(delta)].iter().sum::<f64>() * f64::from(delta))
        .sum()
}

/// Calls `f(from, to, prob)` for every transition of the chain induced by
/// `actions`, visiting source states in ascending index order.
#[inline]
fn visit_transitions(kernel: &CompiledKernel, actions: &[Action], mut f: impl FnMut(usize, usize, f64)) {
    let m = kernel.model();
    let space = kernel.space();
    let (k, p) = (m.k(), m.p());
    let q = 1.0 - p;
    for delta in k..=m.delta_max() {
        let restart = kernel.restart_branch(delta);
        let mut idx = space.layer(delta).start;
        match actions[idx] {
            Action::Continue => f(idx, kernel.idle_target(delta), 1.0),
            Action::Restart => {
                f(idx, restart.success as usize, p);
                f(idx, restart.failure as usize, q);
            }
        }
        idx += 1;
        for d in 1..=(delta - k) {
            let row = kernel.continuation_row(delta, d);
            for l in 0..=d.min(k - 1) {
                match actions[idx] {
                    Action::Continue => {
                        let succ = if l + 1 < k {
                            row + l as usize + 1
                        } else {
                            kernel.decode_target(d)
                        };
                        f(idx, succ, p);
                        f(idx, row + l as usize, q);
                    }
                    Action::Restart => {
                        f(idx, restart.success as usize, p);
                        f(idx, restart.failure as usize, q);
                    }
                }
                idx += 1;
            }
        }
    }
}

/// `|dist P - dist|_1` for the chain induced by `pi`.
pub fn stationary_residual(kernel: &CompiledKernel, pi: &Policy, dist: &[f64]) -> f64 {
    let mut image = vec![0.0; dist.len()];
    visit_transitions(kernel, &pi.actions, |i, j, w| image[j] += w * dist[i]);
    sup_l1(&image, dist)
}

fn check_model(kernel: &CompiledKernel, pi: &Policy) -> Result<(), SolverError> {
    if pi.model != *kernel.model() {
        return Err(SolverError::InvalidParams("policy was built for a different model".into()));
    }
    Ok(())
}

/// Limiting distribution of the chain started at `(k, 0, 0)`, to L1 residual
/// [`EVAL_RESIDUAL`].
///
/// The closed classes reachable from `(k, 0, 0)` are found first. With more
/// than one, the result is [`stationary_distribution_direct`]. Otherwise the
/// sweep below starts inside the single closed class.
///
/// Every transition moves to a higher state index except decodes, restarts
/// within the boundary layer and boundary self-loops. A Gauss-Seidel sweep
/// therefore pushes mass forward within the sweep and defers only the
/// backward pushes to the next one, so each sweep carries a full renewal
/// cycle. When the sweeps fail to settle (nearly decomposable chains) the
/// routine falls back to [`stationary_distribution_direct`].
pub fn stationary_distribution(kernel: &CompiledKernel, pi: &Policy) -> Result<Vec<f64>, SolverError> {
    check_model(kernel, pi)?;
    // a leak out of a transient class can sit below any residual target,
    // so the sweep starts inside the closed class
    let reps = closed_class_representatives(kernel, &pi.actions);
    if reps.len() != 1 {
        return stationary_distribution_direct(kernel, pi);
    }
    let n = kernel.space().len();
    let mut lag_in = vec![0.0; n];
    let mut lag_out = vec![0.0; n];
    let mut mass = vec![0.0; n];
    lag_in[reps[0]] = 1.0;

    let mut window_start = f64::INFINITY;
    for it in 0..SWEEP_MAX_ITER {
        mass.copy_from_slice(&lag_in);
        lag_out.iter_mut().for_each(|x| *x = 0.0);
        visit_transitions(kernel, &pi.actions, |i, j, w| {
            let moved = w * mass[i];
            if j > i {
                mass[j] += moved;
            } else {
                lag_out[j] += moved;
            }
        });
        std::mem::swap(&mut lag_in, &mut lag_out);
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|x| *x /= total);
        let residual = stationary_residual(kernel, pi, &mass);
        if residual <= EVAL_RESIDUAL {
            return Ok(mass);
        }
        if it % 64 == 63 {
            if residual > 0.5 * window_start {
                break;
            }
            window_start = residual;
        }
    }
    let returns = return_set(kernel, &pi.actions).iter().filter(|&&r| r).count();
    if (returns as u64).saturating_mul(n as u64) <= DIRECT_MAX_WORK {
        stationary_distribution_direct(kernel, pi)
    } else {
        stationary_distribution_power(kernel, pi)
    }
}

/// Bound on `|return set| * |S_m|` for the direct route inside [`stationary_distribution`].
const DIRECT_MAX_WORK: u64 = 4_000_000_000;
const DIRECT_RESIDUAL: f64 = 1e-10;

/// One state from each closed communicating class reachable from `(k, 0, 0)`.
fn closed_class_representatives(kernel: &CompiledKernel, actions: &[Action]) -> Vec<usize> {
    let n = kernel.space().len();
    let mut succ = vec![[u32::MAX; 2]; n];
    visit_transitions(kernel, actions, |i, j, w| {
        if w > 0.0 {
            let slot = if succ[i][0] == u32::MAX { 0 } else { 1 };
            succ[i][slot] = j as u32;
        }
    });
    let start = kernel.space().index_unchecked(kernel.model().initial_state());
    let mut node = vec![u32::MAX; n];
    let mut graph = DiGraph::<usize, ()>::new();
    node[start] = graph.add_node(start).index() as u32;
    let mut stack = vec![start];
    let mut edges = Vec::new();
    while let Some(i) = stack.pop() {
        for &j in succ[i].iter().filter(|&&j| j != u32::MAX) {
            let j = j as usize;
            if node[j] == u32::MAX {
                node[j] = graph.add_node(j).index() as u32;
                stack.push(j);
            }
            edges.push((node[i], node[j]));
        }
    }
    drop(succ);
    graph.extend_with_edges(&edges);
    let mut class_of = vec![usize::MAX; graph.node_count()];
    let mut reps = Vec::new();
    // components come out in reverse topological order, so successors are labelled first
    for (id, comp) in kosaraju_scc(&graph).into_iter().enumerate() {
        comp.iter().for_each(|v| class_of[v.index()] = id);
        let leaks = comp
            .iter()
            .any(|&v| graph.neighbors(v).any(|u| class_of[u.index()] != id));
        if !leaks {
            reps.push(graph[comp[0]]);
        }
    }
    reps
}

/// States entered by some non-forward transition, plus `(k, 0, 0)`.
fn return_set(kernel: &CompiledKernel, actions: &[Action]) -> Vec<bool> {
    let n = kernel.space().len();
    let mut is_ret = vec![false; n];
    is_ret[kernel.space().index_unchecked(kernel.model().initial_state())] = true;
    visit_transitions(kernel, actions, |i, j, _| {
        if j <= i {
            is_ret[j] = true;
        }
    });
    is_ret
}

/// Stationary distribution by censoring the chain on its return set `R`.
///
/// Outside `R` every transition moves to a higher index, so one forward pass
/// from each `r` in `R` yields row `r` of the censored chain on `R`. That
/// small dense chain is solved exactly (closed classes reached from
/// `(k, 0, 0)`, weighted by their absorption probabilities) and a final
/// forward pass spreads the mass to the remaining states. Cost is
/// `O(|R| |S_m| + |R|^3)` with `|R|` about `delta_max + k`.
pub fn stationary_distribution_direct(kernel: &CompiledKernel, pi: &Policy) -> Result<Vec<f64>, SolverError> {
    check_model(kernel, pi)?;
    let n = kernel.space().len();
    let actions = &pi.actions;
    let is_ret = return_set(kernel, actions);
    let ret: Vec<usize> = (0..n).filter(|&i| is_ret[i]).collect();
    let mut pos = vec![usize::MAX; n];
    for (r, &i) in ret.iter().enumerate() {
        pos[i] = r;
    }
    let r = ret.len();

    let mut censored = DMatrix::<f64>::zeros(r, r);
    let mut mass = vec![0.0; n];
    for (row, &src) in ret.iter().enumerate() {
        mass[src..].iter_mut().for_each(|x| *x = 0.0);
        mass[src] = 1.0;
        visit_transitions(kernel, actions, |i, j, w| {
            if i < src || (is_ret[i] && i != src) {
                return;
            }
            let here = mass[i];
            if here == 0.0 {
                return;
            }
            if is_ret[j] {
                censored[(row, pos[j])] += w * here;
            } else {
                mass[j] += w * here;
            }
        });
    }

    let start = pos[kernel.space().index_unchecked(kernel.model().initial_state())];
    let weights = limiting_distribution(&censored, start).ok_or_else(|| SolverError::EvaluationFailed {
        residual: f64::NAN,
        target: DIRECT_RESIDUAL,
        iterations: 0,
    })?;

    mass.iter_mut().for_each(|x| *x = 0.0);
    for (&i, &x) in ret.iter().zip(&weights) {
        mass[i] = x;
    }
    visit_transitions(kernel, actions, |i, j, w| {
        if !is_ret[j] {
            mass[j] += w * mass[i];
        }
    });
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|x| *x /= total);
    let residual = stationary_residual(kernel, pi, &mass);
    if residual > DIRECT_RESIDUAL {
        return Err(SolverError::EvaluationFailed {
            residual,
            target: DIRECT_RESIDUAL,
            iterations: 0,
        });
    }
    Ok(mass)
}

/// Limiting distribution of a small stochastic matrix started at `start`:
/// each closed class reached from `start` contributes its stationary
/// distribution weighted by the probability of being absorbed into it.
fn limiting_distribution(c: &DMatrix<f64>, start: usize) -> Option<Vec<f64>> {
    let r = c.nrows();
    let mut reach = vec![false; r];
    let mut stack = vec![start];
    reach[start] = true;
    while let Some(i) = stack.pop() {
        for j in 0..r {
            if c[(i, j)] > 0.0 && !reach[j] {
                reach[j] = true;
                stack.push(j);
            }
        }
    }
    let mut graph = DiGraph::<usize, ()>::new();
    let nodes: Vec<_> = (0..r).map(|i| graph.add_node(i)).collect();
    for i in (0..r).filter(|&i| reach[i]) {
        for j in 0..r {
            if c[(i, j)] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut class_of = vec![usize::MAX; r];
    let mut closed = Vec::new();
    for comp in kosaraju_scc(&graph) {
        let members: Vec<usize> = comp.iter().map(|&nd| graph[nd]).filter(|&i| reach[i]).collect();
        if members.is_empty() {
            continue;
        }
        let id = closed.len();
        members.iter().for_each(|&i| class_of[i] = id);
        let leaks = members
            .iter()
            .any(|&i| (0..r).any(|j| c[(i, j)] > 0.0 && class_of[j] != id));
        closed.push((members, !leaks));
    }

    // absorption weights from `start`
    let transient: Vec<usize> = (0..r)
        .filter(|&i| reach[i] && !closed[class_of[i]].1)
        .collect();
    let mut absorbed = vec![0.0; closed.len()];
    if transient.is_empty() {
        absorbed[class_of[start]] = 1.0;
    } else {
        // expected visits v solve v (I - C_TT) = e_start
        let t = transient.len();
        let a = DMatrix::from_fn(t, t, |x, y| {
            let id = if x == y { 1.0 } else { 0.0 };
            id - c[(transient[y], transient[x])]
        });
        let mut b = DVector::zeros(t);
        b[transient.iter().position(|&i| i == start)?] = 1.0;
        let visits = a.lu().solve(&b)?;
        for (x, &i) in transient.iter().enumerate() {
            for j in 0..r {
                let (id, is_closed) = (class_of[j], closed.get(class_of[j]).map_or(false, |c| c.1));
                if reach[j] && is_closed && c[(i, j)] > 0.0 {
                    absorbed[id] += visits[x] * c[(i, j)];
                }
            }
        }
    }

    let mut out = vec![0.0; r];
    for (id, (members, is_closed)) in closed.iter().enumerate() {
        if !is_closed || absorbed[id] == 0.0 {
            continue;
        }
        // xi (C_KK - I) = 0 with sum(xi) = 1: transpose, last equation replaced
        let m = members.len();
        let a = DMatrix::from_fn(m, m, |x, y| {
            if x == m - 1 {
                1.0
            } else {
                let id = if x == y { 1.0 } else { 0.0 };
                c[(members[y], members[x])] - id
            }
        });
        let mut b = DVector::zeros(m);
        b[m - 1] = 1.0;
        let xi = a.lu().solve(&b)?;
        for (x, &i) in members.iter().enumerate() {
            out[i] = absorbed[id] * xi[x].max(0.0);
        }
    }
    Some(out)
}

/// Power iteration from the point mass at `(k, 0, 0)`.
///
/// If the residual stalls (a periodic recurrent class) the iteration
/// switches to the lazy chain `(P + I) / 2`, which has the same stationary
/// distribution.
pub fn stationary_distribution_power(kernel: &CompiledKernel, pi: &Policy) -> Result<Vec<f64>, SolverError> {
    check_model(kernel, pi)?;
    let m = kernel.model();
    let n = kernel.space().len();
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    cur[kernel.space().index_unchecked(m.initial_state())] = 1.0;

    let mut lazy = false;
    let mut window_start = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for it in 0..EVAL_MAX_ITER {
        next.iter_mut().for_each(|x| *x = 0.0);
        visit_transitions(kernel, &pi.actions, |i, j, w| next[j] += w * cur[i]);
        // next = cur * P; residual of the undamped chain
        residual = sup_l1(&next, &cur);
        if residual <= EVAL_RESIDUAL {
            return Ok(next);
        }
        if lazy {
            for (x, c) in next.iter_mut().zip(&cur) {
                *x = 0.5 * (*x + c);
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        std::mem::swap(&mut cur, &mut next);

        if it % STALL_WINDOW == STALL_WINDOW - 1 {
            if !lazy && residual > 0.9 * window_start {
                lazy = true;
            }
            window_start = residual;
        }
    }
    Err(SolverError::EvaluationFailed {
        residual,
        target: EVAL_RESIDUAL,
        iterations: EVAL_MAX_ITER,
    })
}

fn sup_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
