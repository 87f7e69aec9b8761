//! Seeded Monte Carlo simulation of the erasure channel.
//!
//! The simulated state is never truncated: the AoI may exceed `delta_max`.
//! Policy lookups for such states use the capped state instead, and every
//! such lookup is counted as a clamp event.

use rand::distributions::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{cap, raw_successors, Action, ModelParams, State, StateSpace};
use crate::policies::{PolicyError, PolicySpec};
use crate::solver::Policy;

/// Generator recorded in simulation metadata.
pub const RNG_NAME: &str = "chacha8";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("no policy action for state {0}")]
    Lookup(State),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Slots simulated per seed, burn-in included.
    pub horizon: u64,
    pub burn_in: u64,
    pub seeds: Vec<u64>,
    pub initial_state: State,
}

impl SimConfig {
    /// `horizon` slots per seed from `(k, 0, 0)` with the default burn-in.
    pub fn new(model: &ModelParams, horizon: u64, seeds: Vec<u64>) -> Self {
        Self {
            horizon,
            burn_in: default_burn_in(model).min(horizon.saturating_sub(1)),
            seeds,
            initial_state: model.initial_state(),
        }
    }

    pub fn with_burn_in(mut self, burn_in: u64) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn validate(&self, model: &ModelParams) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::InvalidConfig("horizon must be positive".into()));
        }
        if self.burn_in >= self.horizon {
            return Err(SimError::InvalidConfig(format!(
                "burn-in {} must be below the horizon {}",
                self.burn_in, self.horizon
            )));
        }
        if self.seeds.is_empty() {
            return Err(SimError::InvalidConfig("at least one seed is required".into()));
        }
        if !structurally_valid(self.initial_state, model.k()) {
            return Err(SimError::InvalidConfig(format!(
                "initial state {} is not a valid state",
                self.initial_state
            )));
        }
        Ok(())
    }
}

/// `ceil(10 k / p)` slots.
pub fn default_burn_in(model: &ModelParams) -> u64 {
    (10.0 * f64::from(model.k()) / model.p()).ceil() as u64
}

/// Validity without the `delta_max` bound.
fn structurally_valid(s: State, k: u32) -> bool {
    s.delta >= s.d + k && s.l <= s.d.min(k - 1) && (s.d > 0 || s.l == 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub mean_aoi: f64,
    /// Standard error of `mean_aoi` from the spread of the per-seed means.
    pub stderr: f64,
    pub per_seed_means: Vec<f64>,
    pub slots_simulated: u64,
    /// Slots whose policy lookup had to clamp the AoI to `delta_max`.
    pub clamp_events: u64,
    pub rng: String,
}

impl SimResult {
    pub fn clamp_fraction(&self) -> f64 {
        self.clamp_events as f64 / self.slots_simulated as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolOutcome {
    Success,
    Erasure,
    Idle,
}

impl SymbolOutcome {
    pub fn label(self) -> &'static str {
        match self {
            SymbolOutcome::Success => "success",
            SymbolOutcome::Erasure => "erasure",
            SymbolOutcome::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// 1-based slot index.
    pub t: u64,
    pub delta: u32,
    pub d: u32,
    pub l: u32,
    pub action: Action,
    pub outcome: SymbolOutcome,
}

impl TrajectoryPoint {
    pub fn state(&self) -> State {
        State::new(self.delta, self.d, self.l)
    }
}

/// Policy table plus the indexing needed for clamped lookups.
struct Controller {
    model: ModelParams,
    space: StateSpace,
    policy: Policy,
}

impl Controller {
    fn new(spec: &PolicySpec, model: &ModelParams) -> Result<Self, SimError> {
        Ok(Self {
            model: *model,
            space: StateSpace::new(*model),
            policy: spec.materialize(model)?,
        })
    }

    /// Action for `s`, plus whether the lookup was clamped.
    #[inline]
    fn act(&self, s: State) -> Result<(Action, bool), SimError> {
        let clamped = s.delta > self.model.delta_max();
        let key = if clamped { cap(s, &self.model) } else { s };
        let idx = self.space.index(key).ok_or(SimError::Lookup(s))?;
        Ok((self.policy.actions()[idx], clamped))
    }
}

/// Advances one slot; returns the next state and the symbol outcome.
#[inline]
fn step(s: State, a: Action, k: u32, success: impl FnOnce() -> bool) -> (State, SymbolOutcome) {
    let (on_success, on_erasure) = raw_successors(s, a, k);
    if on_success == on_erasure {
        return (on_success, SymbolOutcome::Idle);
    }
    if success() {
        (on_success, SymbolOutcome::Success)
    } else {
        (on_erasure, SymbolOutcome::Erasure)
    }
}

struct SeedRun {
    mean: f64,
    clamps: u64,
}

fn run_seed(ctl: &Controller, cfg: &SimConfig, coin: Bernoulli, seed: u64) -> Result<SeedRun, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ctl.model.k();
    let mut s = cfg.initial_state;
    let mut sum = 0u128;
    let mut clamps = 0u64;
    for t in 0..cfg.horizon {
        if t >= cfg.burn_in {
            sum += u128::from(s.delta);
        }
        let (a, clamped) = ctl.act(s)?;
        clamps += u64::from(clamped);
        s = step(s, a, k, || coin.sample(&mut rng)).0;
    }
    Ok(SeedRun {
        mean: sum as f64 / (cfg.horizon - cfg.burn_in) as f64,
        clamps,
    })
}

pub fn simulate(spec: &PolicySpec, model: &ModelParams, cfg: &SimConfig) -> Result<SimResult, SimError> {
    cfg.validate(model)?;
    let ctl = Controller::new(spec, model)?;
    let coin = Bernoulli::new(model.p()).map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let workers = std::thread::available_parallelism().map_or(1, usize::from).min(cfg.seeds.len());
    let runs: Vec<Result<SeedRun, SimError>> = if workers <= 1 {
        cfg.seeds.iter().map(|&seed| run_seed(&ctl, cfg, coin, seed)).collect()
    } else {
        let chunk = cfg.seeds.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .chunks(chunk)
                .map(|seeds| {
                    let ctl = &ctl;
                    scope.spawn(move || {
                        seeds
                            .iter()
                            .map(|&seed| run_seed(ctl, cfg, coin, seed))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        })
    };

    let mut per_seed_means = Vec::with_capacity(runs.len());
    let mut clamp_events = 0;
    for run in runs {
        let run = run?;
        per_seed_means.push(run.mean);
        clamp_events += run.clamps;
    }
    let (mean_aoi, stderr) = mean_and_stderr(&per_seed_means);
    Ok(SimResult {
        mean_aoi,
        stderr,
        per_seed_means,
        slots_simulated: cfg.horizon * cfg.seeds.len() as u64,
        clamp_events,
        rng: RNG_NAME.to_string(),
    })
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-slot trajectory from `(k, 0, 0)`: the state at the start of each slot,
/// the action taken, and what happened to the transmitted symbol.
pub fn trace(spec: &PolicySpec, model: &ModelParams, slots: u64, seed: u64) -> Result<Vec<TrajectoryPoint>, SimError> {
    trace_from(spec, model, model.initial_state(), slots, seed)
}

pub fn trace_from(
    spec: &PolicySpec,
    model: &ModelParams,
    initial_state: State,
    slots: u64,
    seed: u64,
) -> Result<Vec<TrajectoryPoint>, SimError> {
    if slots == 0 {
        return Err(SimError::InvalidConfig("a trace needs at least one slot".into()));
    }
    if !structurally_valid(initial_state, model.k()) {
        return Err(SimError::InvalidConfig(format!(
            "initial state {initial_state} is not a valid state"
        )));
    }
    let ctl = Controller::new(spec, model)?;
    let coin = Bernoulli::new(model.p()).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = initial_state;
    let mut points = Vec::with_capacity(slots as usize);
    for t in 1..=slots {
        let (action, _) = ctl.act(s)?;
        let (next, outcome) = step(s, action, model.k(), || coin.sample(&mut rng));
        points.push(TrajectoryPoint {
            t,
            delta: s.delta,
            d: s.d,
            l: s.l,
            action,
            outcome,
        });
        s = next;
    }
    Ok(points)
}
