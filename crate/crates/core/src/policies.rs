//! Reference policies: the persistent baseline, threshold policies built from
//! a table, and tabulated (e.g. solver-produced) policies.

use thiserror::Error;

use crate::model::{Action, ModelParams, State};
use crate::solver::{Policy, ThresholdTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("threshold table built for k={table_k}, delta_max={table_dm} does not cover model k={k}, delta_max={dm}")]
    Coverage {
        table_k: u32,
        table_dm: u32,
        k: u32,
        dm: u32,
    },
    #[error("policy table belongs to a different model")]
    ModelMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    OptimalTable(Policy),
    Persistent,
    Threshold(ThresholdTable),
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::OptimalTable(_) => "optimal",
            PolicySpec::Persistent => "persistent",
            PolicySpec::Threshold(_) => "threshold",
        }
    }

    /// Expands the specification into a full action table over `model`.
    pub fn materialize(&self, model: &ModelParams) -> Result<Policy, PolicyError> {
        match self {
            PolicySpec::OptimalTable(pi) => {
                if pi.model() == model {
                    Ok(pi.clone())
                } else {
                    Err(PolicyError::ModelMismatch)
                }
            }
            PolicySpec::Persistent => Ok(persistent_policy(model)),
            PolicySpec::Threshold(table) => threshold_policy(model, table),
        }
    }
}

/// Never abandons an update in flight; a new one starts right after each decode.
pub fn persistent_policy(model: &ModelParams) -> Policy {
    Policy::from_fn(*model, |s| {
        if s.d == 0 {
            Action::Restart
        } else {
            Action::Continue
        }
    })
}

/// Continue at `(delta, d, l)` iff `l >= tau(delta - d, d)`; restart when idle.
pub fn threshold_policy(model: &ModelParams, table: &ThresholdTable) -> Result<Policy, PolicyError> {
    if table.k() != model.k() || table.delta_max() < model.delta_max() {
        return Err(PolicyError::Coverage {
            table_k: table.k(),
            table_dm: table.delta_max(),
            k: model.k(),
            dm: model.delta_max(),
        });
    }
    Ok(Policy::from_fn(*model, |State { delta, d, l }| {
        if d == 0 {
            return Action::Restart;
        }
        // covered: delta - d >= k and d <= delta_max - (delta - d)
        let tau = table.get(delta - d, d).unwrap_or(model.k());
        if l >= tau {
            Action::Continue
        } else {
            Action::Restart
        }
    }))
}

/// Closed-form average AoI of the persistent policy on the untruncated chain.
///
/// With service time `S` (slots to collect `k` symbols) this is
/// `E[S] + E[S^2] / (2 E[S]) - 1/2`.
pub fn persistent_avg_aoi(k: u32, p: f64) -> f64 {
    let k = f64::from(k);
    (3.0 * k + 1.0 - p) / (2.0 * p) - 0.5
}
