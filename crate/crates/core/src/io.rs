//! File formats: JSON policy documents and CSV experiment tables.
//!
//! All writes go through a temporary file in the target directory followed by
//! a rename, so readers never observe a partially written file.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{state_count, Action, ModelParams, State, StateSpace};
use crate::sim::{SymbolOutcome, TrajectoryPoint};
use crate::solver::{Policy, SolveParams, SolveReport, Solution, SolverError, ValueTable};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unsupported schema version {found:?} (expected {SCHEMA_VERSION:?})")]
    SchemaVersion { found: String },
    #[error("entry {0} is not a state of the model")]
    InvalidEntry(State),
    #[error("state {0} appears more than once")]
    DuplicateEntry(State),
    #[error("document covers {got} of {expected} states")]
    MissingEntries { expected: usize, got: usize },
    #[error("entry for {state} has action {action}; expected 0 or 1")]
    BadAction { state: State, action: u8 },
    #[error(transparent)]
    Table(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Average,
    Discounted,
}

/// Solver settings and outcome recorded alongside a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveEcho {
    pub mode: SolveMode,
    pub alpha: Option<f64>,
    pub tol: f64,
    pub iterations: usize,
    pub average_cost: Option<f64>,
    pub converged: bool,
}

impl SolveEcho {
    pub fn new(sp: &SolveParams, report: &SolveReport) -> Self {
        Self {
            mode: if sp.alpha.is_some() {
                SolveMode::Discounted
            } else {
                SolveMode::Average
            },
            alpha: sp.alpha,
            tol: sp.tol,
            iterations: report.iterations,
            average_cost: report.average_cost,
            converged: report.converged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub delta: u32,
    pub d: u32,
    pub l: u32,
    pub value: f64,
    /// 0 = continue, 1 = restart.
    pub action: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub schema_version: String,
    pub model: ModelParams,
    pub solve: SolveEcho,
    pub entries: Vec<Entry>,
}

impl PolicyDocument {
    pub fn from_tables(values: &ValueTable, policy: &Policy, solve: SolveEcho) -> Result<Self, DocumentError> {
        let model = *values.model();
        if policy.model() != &model {
            return Err(SolverError::InvalidParams("value table and policy use different models".into()).into());
        }
        let space = StateSpace::new(model);
        let entries = space
            .states()
            .zip(values.values().iter().zip(policy.actions()))
            .map(|(s, (&value, &a))| Entry {
                delta: s.delta,
                d: s.d,
                l: s.l,
                value,
                action: a.as_u8(),
            })
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION.to_string(),
            model,
            solve,
            entries,
        })
    }

    pub fn from_solution(sol: &Solution, sp: &SolveParams) -> Result<Self, DocumentError> {
        Self::from_tables(&sol.values, &sol.policy, SolveEcho::new(sp, &sol.report))
    }

    /// Rebuilds the value table and policy, checking that the entries cover
    /// every state exactly once.
    pub fn to_tables(&self) -> Result<(ValueTable, Policy), DocumentError> {
        let space = StateSpace::new(self.model);
        let n = state_count(&self.model);
        let mut values = vec![0.0; n];
        let mut actions = vec![Action::Restart; n];
        let mut seen = vec![false; n];
        for e in &self.entries {
            let s = State::new(e.delta, e.d, e.l);
            let idx = space.index(s).ok_or(DocumentError::InvalidEntry(s))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(DocumentError::DuplicateEntry(s));
            }
            values[idx] = e.value;
            actions[idx] = Action::from_u8(e.action).ok_or(DocumentError::BadAction {
                state: s,
                action: e.action,
            })?;
        }
        let covered = seen.iter().filter(|&&x| x).count();
        if covered != n {
            return Err(DocumentError::MissingEntries { expected: n, got: covered });
        }
        Ok((ValueTable::new(self.model, values)?, Policy::new(self.model, actions)?))
    }

    /// Pretty header with one entry per line.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), DocumentError> {
        writeln!(w, "{{")?;
        writeln!(w, "  \"schema_version\": {},", serde_json::to_string(&self.schema_version)?)?;
        writeln!(w, "  \"model\": {},", serde_json::to_string(&self.model)?)?;
        writeln!(w, "  \"solve\": {},", serde_json::to_string(&self.solve)?)?;
        write!(w, "  \"entries\": [")?;
        for (i, e) in self.entries.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            write!(w, "{sep}\n    {}", serde_json::to_string(e)?)?;
        }
        if !self.entries.is_empty() {
            write!(w, "\n  ")?;
        }
        writeln!(w, "]")?;
        writeln!(w, "}}")?;
        Ok(())
    }

    pub fn to_string(&self) -> Result<String, DocumentError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn write(&self, path: &Path) -> Result<(), DocumentError> {
        write_atomic(path, |w| self.write_to(w))
    }

    /// Parses a document, rejecting other schema versions before looking at
    /// the rest of the content.
    pub fn parse(text: &str) -> Result<Self, DocumentError> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: String,
        }
        let version: Version = serde_json::from_str(text)?;
        if version.schema_version != SCHEMA_VERSION {
            return Err(DocumentError::SchemaVersion {
                found: version.schema_version,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self, DocumentError> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::parse(&text)
    }
}

/// Writes through a sibling temporary file that is renamed into place.
pub fn write_atomic<E>(path: &Path, f: impl FnOnce(&mut BufWriter<&mut File>) -> Result<(), E>) -> Result<(), E>
where
    E: From<io::Error>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub k: u32,
    pub p: f64,
    pub delta_max: u32,
    pub policy: String,
    pub avg_exact: f64,
    pub avg_sim: f64,
    pub stderr: f64,
    /// Persistent minus optimal exact average AoI at this `p`.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub delta0: u32,
    pub d: u32,
    pub tau: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub delta: u32,
    pub d: u32,
    pub l: u32,
    pub action: u8,
    pub outcome: SymbolOutcome,
}

impl From<&TrajectoryPoint> for TraceRow {
    fn from(pt: &TrajectoryPoint) -> Self {
        Self {
            t: pt.t,
            delta: pt.delta,
            d: pt.d,
            l: pt.l,
            action: pt.action.as_u8(),
            outcome: pt.outcome,
        }
    }
}

pub fn write_csv_to<T: Serialize>(w: impl Write, rows: &[T]) -> Result<(), DocumentError> {
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DocumentError> {
    write_atomic(path, |w| write_csv_to(w, rows))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DocumentError> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}
