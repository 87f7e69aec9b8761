//! State space, cost and transition kernel of the truncated AoI scheduling MDP.
//!
//! A state `(delta, d, l)` holds the age of information at the monitor, the
//! age of the update currently in flight and the number of its coded symbols
//! that have already been received. One coded symbol is sent per slot and
//! survives the erasure channel with probability `p`; an update decodes once
//! `k` symbols got through.
//!
//! The infinite state space is truncated at `delta_max`: any successor with a
//! larger AoI is mapped onto the capped boundary state
//! `(delta_max, min(d, delta_max - k), l)`.

use std::fmt;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for probability normalisation checks.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("update size k must be at least 1")]
    ZeroUpdateSize,
    #[error("symbol success probability {0} is outside (0, 1]")]
    BadProbability(f64),
    #[error("truncation boundary {delta_max} is below 2k = {min}")]
    BoundaryTooSmall { delta_max: u32, min: u32 },
    #[error("state {0} is not valid for this model")]
    InvalidState(State),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    /// Age of information at the monitor.
    pub delta: u32,
    /// Age of the update in flight; zero when nothing is in flight.
    pub d: u32,
    /// Symbols of the in-flight update received so far.
    pub l: u32,
}

impl State {
    pub const fn new(delta: u32, d: u32, l: u32) -> Self {
        Self { delta, d, l }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.delta, self.d, self.l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Keep sending the unfinished update, or stay idle when there is none.
    Continue,
    /// Drop whatever is in flight and start a fresh update.
    Restart,
}

impl Action {
    pub fn as_u8(self) -> u8 {
        match self {
            Action::Continue => 0,
            Action::Restart => 1,
        }
    }

    pub fn from_u8(a: u8) -> Option<Self> {
        match a {
            0 => Some(Action::Continue),
            1 => Some(Action::Restart),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelParams")]
pub struct ModelParams {
    k: u32,
    p: f64,
    delta_max: u32,
}

impl ModelParams {
    pub fn new(k: u32, p: f64, delta_max: u32) -> Result<Self, ModelError> {
        if k == 0 {
            return Err(ModelError::ZeroUpdateSize);
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(ModelError::BadProbability(p));
        }
        if delta_max < 2 * k {
            return Err(ModelError::BoundaryTooSmall {
                delta_max,
                min: 2 * k,
            });
        }
        Ok(Self { k, p, delta_max })
    }

    /// Model with the default truncation boundary `max(2k, ceil(30 k / p))`.
    pub fn with_default_boundary(k: u32, p: f64) -> Result<Self, ModelError> {
        if k == 0 {
            return Err(ModelError::ZeroUpdateSize);
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(ModelError::BadProbability(p));
        }
        Self::new(k, p, default_delta_max(k, p))
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn delta_max(&self) -> u32 {
        self.delta_max
    }

    pub fn with_delta_max(&self, delta_max: u32) -> Result<Self, ModelError> {
        Self::new(self.k, self.p, delta_max)
    }

    /// Smallest valid state, reached right after a `k`-slot error-free delivery.
    pub fn initial_state(&self) -> State {
        State::new(self.k, 0, 0)
    }
}

#[derive(Deserialize)]
struct RawModelParams {
    k: u32,
    p: f64,
    delta_max: u32,
}

impl TryFrom<RawModelParams> for ModelParams {
    type Error = ModelError;

    fn try_from(raw: RawModelParams) -> Result<Self, ModelError> {
        ModelParams::new(raw.k, raw.p, raw.delta_max)
    }
}

pub fn default_delta_max(k: u32, p: f64) -> u32 {
    let scaled = (30.0 * f64::from(k) / p).ceil() as u32;
    scaled.max(2 * k)
}

pub fn is_valid(s: State, m: &ModelParams) -> bool {
    let k = m.k;
    s.delta <= m.delta_max
        && s.delta >= s.d + k
        && s.l <= s.d.min(k - 1)
        && (s.d > 0 || s.l == 0)
}

pub fn cost(s: State) -> f64 {
    f64::from(s.delta)
}

/// Number of valid states with AoI `delta` (zero below `k`).
pub fn layer_size(delta: u32, k: u32) -> usize {
    if delta < k {
        return 0;
    }
    d_offset(delta - k + 1, k)
}

/// Number of valid `(d, l)` pairs with in-flight age strictly below `d`.
fn d_offset(d: u32, k: u32) -> usize {
    // sum_{j<d} (min(j, k-1) + 1)
    let d = d as usize;
    let k = k as usize;
    if d <= k {
        d * (d + 1) / 2
    } else {
        k * (k + 1) / 2 + (d - k) * k
    }
}

/// `|S_m|` from the counting formula.
pub fn state_count(m: &ModelParams) -> usize {
    (m.k..=m.delta_max).map(|delta| layer_size(delta, m.k)).sum()
}

/// All valid states in ascending `(delta, d, l)` order.
pub fn enumerate_states(m: &ModelParams) -> Vec<State> {
    let mut out = Vec::with_capacity(state_count(m));
    for delta in m.k..=m.delta_max {
        for d in 0..=(delta - m.k) {
            for l in 0..=d.min(m.k - 1) {
                out.push(State::new(delta, d, l));
            }
        }
    }
    out
}

/// Next-state distribution with at most two outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDist {
    entries: ArrayVec<(State, f64), 2>,
}

impl TransitionDist {
    fn single(s: State) -> Self {
        let mut entries = ArrayVec::new();
        entries.push((s, 1.0));
        Self { entries }
    }

    fn pair(success: State, failure: State, p: f64) -> Self {
        let mut entries = ArrayVec::new();
        if success == failure {
            entries.push((success, 1.0));
            return Self { entries };
        }
        entries.push((success, p));
        if p < 1.0 {
            entries.push((failure, 1.0 - p));
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[(State, f64)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &(State, f64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prob_of(&self, s: State) -> f64 {
        self.entries
            .iter()
            .filter(|(t, _)| *t == s)
            .map(|(_, p)| *p)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }
}

/// Outcome of one slot before truncation, as a pair of raw successors.
///
/// Returns `(on_success, on_erasure)`; the two coincide when nothing is sent.
pub fn raw_successors(s: State, a: Action, k: u32) -> (State, State) {
    let State { delta, d, l } = s;
    match a {
        Action::Restart => {
            let fail = State::new(delta + 1, 1, 0);
            if k == 1 {
                (State::new(1, 0, 0), fail)
            } else {
                (State::new(delta + 1, 1, 1), fail)
            }
        }
        Action::Continue if d == 0 => {
            let idle = State::new(delta + 1, 0, 0);
            (idle, idle)
        }
        Action::Continue if l + 1 < k => (
            State::new(delta + 1, d + 1, l + 1),
            State::new(delta + 1, d + 1, l),
        ),
        Action::Continue => (State::new(d + 1, 0, 0), State::new(delta + 1, d + 1, k - 1)),
    }
}

/// Maps a raw successor onto the truncated state space.
pub fn cap(s: State, m: &ModelParams) -> State {
    let delta = s.delta.min(m.delta_max);
    let d = s.d.min(delta - m.k);
    State::new(delta, d, s.l)
}

pub fn transition(s: State, a: Action, m: &ModelParams) -> Result<TransitionDist, ModelError> {
    if !is_valid(s, m) {
        return Err(ModelError::InvalidState(s));
    }
    let (success, failure) = raw_successors(s, a, m.k);
    if success == failure {
        return Ok(TransitionDist::single(cap(success, m)));
    }
    Ok(TransitionDist::pair(cap(success, m), cap(failure, m), m.p))
}

/// Dense indexing of `S_m` in ascending `(delta, d, l)` order.
#[derive(Debug, Clone)]
pub struct StateSpace {
    model: ModelParams,
    /// Offset of the first state of each AoI layer, indexed by `delta - k`,
    /// with a trailing entry equal to the total count.
    layer_start: Vec<usize>,
}

impl StateSpace {
    pub fn new(model: ModelParams) -> Self {
        let k = model.k;
        let mut layer_start = Vec::with_capacity((model.delta_max - k + 2) as usize);
        let mut acc = 0usize;
        for delta in k..=model.delta_max {
            layer_start.push(acc);
            acc += layer_size(delta, k);
        }
        layer_start.push(acc);
        Self { model, layer_start }
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn len(&self) -> usize {
        *self.layer_start.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index range occupied by layer `delta`.
    pub fn layer(&self, delta: u32) -> std::ops::Range<usize> {
        let i = (delta - self.model.k) as usize;
        self.layer_start[i]..self.layer_start[i + 1]
    }

    /// Index of a state that is already known to be valid.
    #[inline]
    pub fn index_unchecked(&self, s: State) -> usize {
        self.layer_start[(s.delta - self.model.k) as usize] + d_offset(s.d, self.model.k) + s.l as usize
    }

    pub fn index(&self, s: State) -> Option<usize> {
        is_valid(s, &self.model).then(|| self.index_unchecked(s))
    }

    pub fn state(&self, idx: usize) -> State {
        assert!(idx < self.len(), "state index {idx} out of range");
        let k = self.model.k;
        let layer = self.layer_start.partition_point(|&start| start <= idx) - 1;
        let delta = k + layer as u32;
        let mut rem = idx - self.layer_start[layer];
        // d_offset is piecewise: triangular for d <= k, linear afterwards.
        let tri = d_offset(k, k);
        let d = if rem < tri {
            let mut d = 0u32;
            while d_offset(d + 1, k) <= rem {
                d += 1;
            }
            d
        } else {
            k + ((rem - tri) / k as usize) as u32
        };
        rem -= d_offset(d, k);
        State::new(delta, d, rem as u32)
    }

    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        let k = self.model.k;
        (k..=self.model.delta_max).flat_map(move |delta| {
            (0..=(delta - k)).flat_map(move |d| (0..=d.min(k - 1)).map(move |l| State::new(delta, d, l)))
        })
    }
}

/// Successor indices of one action from one state.
///
/// `success == failure` encodes a deterministic move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    pub success: u32,
    pub failure: u32,
}

impl Branch {
    #[inline]
    pub fn expect(&self, values: &[f64], p: f64, q: f64) -> f64 {
        if self.success == self.failure {
            values[self.success as usize]
        } else {
            p * values[self.success as usize] + q * values[self.failure as usize]
        }
    }
}

/// Transition kernel compiled to index form for the sweep loops.
///
/// Continuation successors of a row `(delta, d, *)` are contiguous in the
/// next row `(delta', d', *)`, so only restart successors (which depend on
/// the AoI alone) are stored.
#[derive(Debug, Clone)]
pub struct CompiledKernel {
    space: StateSpace,
    restart: Vec<Branch>,
}

impl CompiledKernel {
    pub fn new(model: ModelParams) -> Self {
        let space = StateSpace::new(model);
        let m = *space.model();
        let restart = (m.k..=m.delta_max)
            .map(|delta| {
                let (succ, fail) = raw_successors(State::new(delta, 0, 0), Action::Restart, m.k);
                Branch {
                    success: space.index_unchecked(cap(succ, &m)) as u32,
                    failure: space.index_unchecked(cap(fail, &m)) as u32,
                }
            })
            .collect();
        Self { space, restart }
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn model(&self) -> &ModelParams {
        self.space.model()
    }

    /// Index of `(delta', d', 0)`, the capped row reached by continuing
    /// from any `(delta, d, l)` with `d >= 1`.
    #[inline]
    pub fn continuation_row(&self, delta: u32, d: u32) -> usize {
        let m = self.space.model();
        let next_delta = (delta + 1).min(m.delta_max);
        let next_d = (d + 1).min(next_delta - m.k);
        self.space.index_unchecked(State::new(next_delta, next_d, 0))
    }

    /// Index of `(d + 1, 0, 0)`, reached when an update of age `d` decodes.
    #[inline]
    pub fn decode_target(&self, d: u32) -> usize {
        self.space.index_unchecked(State::new(d + 1, 0, 0))
    }

    /// Index of the state reached by idling at `(delta, 0, 0)`.
    #[inline]
    pub fn idle_target(&self, delta: u32) -> usize {
        let next = (delta + 1).min(self.space.model().delta_max);
        self.space.layer(next).start
    }

    pub fn continue_branch(&self, s: State) -> Branch {
        let k = self.space.model().k;
        if s.d == 0 {
            let t = self.idle_target(s.delta) as u32;
            return Branch { success: t, failure: t };
        }
        let row = self.continuation_row(s.delta, s.d);
        let failure = (row + s.l as usize) as u32;
        let success = if s.l + 1 < k {
            failure + 1
        } else {
            self.decode_target(s.d) as u32
        };
        Branch { success, failure }
    }

    #[inline]
    pub fn restart_branch(&self, delta: u32) -> Branch {
        self.restart[(delta - self.model().k) as usize]
    }

    pub fn branch(&self, s: State, a: Action) -> Branch {
        match a {
            Action::Continue => self.continue_branch(s),
            Action::Restart => self.restart_branch(s.delta),
        }
    }
}
