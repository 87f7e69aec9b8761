//! Executable checks of the monotonicity and threshold properties that the
//! optimal value function and policy are expected to satisfy.
//!
//! Violations are data: every check returns a [`ViolationReport`] listing
//! the offending states with both sides of the inequality.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{is_valid, Action, ModelParams, State, StateSpace};
use crate::solver::{Policy, ValueTable};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyId {
    /// `V` nondecreasing in the AoI.
    Lemma1,
    /// `V` nondecreasing in the in-flight age.
    Lemma2,
    /// `V(delta, d, l) <= V(delta, 0, 0)`.
    Lemma3,
    /// `V(delta, d, k-1) >= V(d, 0, 0)`.
    Lemma4,
    /// `V` nonincreasing in the delivered-symbol count.
    Lemma5,
    /// Restart right after a decode.
    Corollary1,
    /// `V(delta, d, 0) = V(delta, 0, 0)`.
    Corollary2,
    /// Restart decisions propagate to older in-flight updates.
    Theorem1,
    /// Continue decisions propagate to larger delivered counts.
    Theorem2,
    /// Continue decisions propagate along the diagonal `(+1, +1, +1)`.
    Theorem3,
    /// Thresholds are nondecreasing in `d` for a fixed starting AoI.
    Theorem4,
    /// Diagonal propagation on `l = k - 1`; reported, never gating.
    Theorem3Boundary,
}

impl PropertyId {
    pub const VALUE_CHECKS: [PropertyId; 6] = [
        PropertyId::Lemma1,
        PropertyId::Lemma2,
        PropertyId::Lemma3,
        PropertyId::Lemma4,
        PropertyId::Lemma5,
        PropertyId::Corollary2,
    ];

    pub const POLICY_CHECKS: [PropertyId; 5] = [
        PropertyId::Corollary1,
        PropertyId::Theorem1,
        PropertyId::Theorem2,
        PropertyId::Theorem3,
        PropertyId::Theorem4,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PropertyId::Lemma1 => "lemma1",
            PropertyId::Lemma2 => "lemma2",
            PropertyId::Lemma3 => "lemma3",
            PropertyId::Lemma4 => "lemma4",
            PropertyId::Lemma5 => "lemma5",
            PropertyId::Corollary1 => "corollary1",
            PropertyId::Corollary2 => "corollary2",
            PropertyId::Theorem1 => "theorem1",
            PropertyId::Theorem2 => "theorem2",
            PropertyId::Theorem3 => "theorem3",
            PropertyId::Theorem4 => "theorem4",
            PropertyId::Theorem3Boundary => "theorem3_boundary",
        }
    }

    pub fn is_informational(self) -> bool {
        self == PropertyId::Theorem3Boundary
    }
}

impl fmt::Display for PropertyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// The state (or ordered state pair) on which the property fails.
    pub states: Vec<State>,
    pub lhs: f64,
    pub rhs: f64,
    /// Amount by which `lhs <= rhs` (or the equality) is missed.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub property_id: PropertyId,
    pub violations: Vec<Violation>,
    pub epsilon: f64,
    /// Number of states or state pairs examined.
    pub checked: usize,
}

impl ViolationReport {
    fn new(property_id: PropertyId, epsilon: f64) -> Self {
        Self {
            property_id,
            violations: Vec::new(),
            epsilon,
            checked: 0,
        }
    }

    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    /// Records `lhs <= rhs` (up to epsilon) for the given states.
    fn le(&mut self, states: &[State], lhs: f64, rhs: f64) {
        self.checked += 1;
        if lhs > rhs + self.epsilon {
            self.violations.push(Violation {
                states: states.to_vec(),
                lhs,
                rhs,
                slack: lhs - rhs,
            });
        }
    }

    fn equal(&mut self, states: &[State], lhs: f64, rhs: f64) {
        self.checked += 1;
        if (lhs - rhs).abs() > self.epsilon {
            self.violations.push(Violation {
                states: states.to_vec(),
                lhs,
                rhs,
                slack: (lhs - rhs).abs(),
            });
        }
    }

    /// Records the implication `a(from) == premise => a(to) == premise`.
    fn implies(&mut self, from: State, to: State, premise: Action, a_from: Action, a_to: Action) {
        self.checked += 1;
        if a_from == premise && a_to != premise {
            let (lhs, rhs) = (f64::from(a_from.as_u8()), f64::from(a_to.as_u8()));
            self.violations.push(Violation {
                states: vec![from, to],
                lhs,
                rhs,
                slack: (lhs - rhs).abs(),
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub epsilon: f64,
    /// States with `delta > delta_max - margin` are left out of the checks
    /// whose comparisons cross into capped dynamics (lemmas 1-2, theorems 3-4).
    pub margin: u32,
}

impl VerifyOptions {
    pub fn for_model(model: &ModelParams) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            margin: model.k(),
        }
    }

    pub fn with_margin(mut self, margin: u32) -> Self {
        self.margin = margin;
        self
    }

    fn inside(&self, model: &ModelParams, s: State) -> bool {
        u64::from(s.delta) + u64::from(self.margin) <= u64::from(model.delta_max())
    }
}

pub fn check_value_structure(v: &ValueTable) -> Vec<ViolationReport> {
    check_value_structure_with(v, &VerifyOptions::for_model(v.model()))
}

pub fn check_value_structure_with(v: &ValueTable, opts: &VerifyOptions) -> Vec<ViolationReport> {
    let m = *v.model();
    let k = m.k();
    let space = StateSpace::new(m);
    let values = v.values();
    let val = |s: State| values[space.index_unchecked(s)];
    let eps = opts.epsilon;

    let mut lemma1 = ViolationReport::new(PropertyId::Lemma1, eps);
    let mut lemma2 = ViolationReport::new(PropertyId::Lemma2, eps);
    let mut lemma3 = ViolationReport::new(PropertyId::Lemma3, eps);
    let mut lemma4 = ViolationReport::new(PropertyId::Lemma4, eps);
    let mut lemma5 = ViolationReport::new(PropertyId::Lemma5, eps);
    let mut corollary2 = ViolationReport::new(PropertyId::Corollary2, eps);

    for s in space.states() {
        let State { delta, d, l } = s;
        let here = val(s);

        let up = State::new(delta + 1, d, l);
        if is_valid(up, &m) && opts.inside(&m, up) {
            lemma1.le(&[s, up], here, val(up));
        }
        let older = State::new(delta, d + 1, l);
        if is_valid(older, &m) && opts.inside(&m, older) {
            lemma2.le(&[s, older], here, val(older));
        }
        let fresh = State::new(delta, 0, 0);
        if d > 0 {
            lemma3.le(&[s, fresh], here, val(fresh));
        }
        if d > 0 && l == k - 1 {
            let decoded = State::new(d, 0, 0);
            if is_valid(decoded, &m) {
                // V(delta, d, k-1) >= V(d, 0, 0)
                lemma4.le(&[decoded, s], val(decoded), here);
            }
        }
        let more = State::new(delta, d, l + 1);
        if is_valid(more, &m) {
            lemma5.le(&[more, s], val(more), here);
        }
        if d > 0 && l == 0 {
            corollary2.equal(&[s, fresh], here, val(fresh));
        }
    }
    vec![lemma1, lemma2, lemma3, lemma4, lemma5, corollary2]
}

pub fn check_policy_structure(pi: &Policy) -> Vec<ViolationReport> {
    check_policy_structure_with(pi, &VerifyOptions::for_model(pi.model()))
}

/// Policy checks; the informational `theorem3_boundary` report comes last.
pub fn check_policy_structure_with(pi: &Policy, opts: &VerifyOptions) -> Vec<ViolationReport> {
    let m = *pi.model();
    let k = m.k();
    let space = StateSpace::new(m);
    let actions = pi.actions();
    let act = |s: State| actions[space.index_unchecked(s)];
    let eps = opts.epsilon;

    let mut corollary1 = ViolationReport::new(PropertyId::Corollary1, eps);
    let mut theorem1 = ViolationReport::new(PropertyId::Theorem1, eps);
    let mut theorem2 = ViolationReport::new(PropertyId::Theorem2, eps);
    let mut theorem3 = ViolationReport::new(PropertyId::Theorem3, eps);
    let mut boundary = ViolationReport::new(PropertyId::Theorem3Boundary, eps);

    for s in space.states() {
        let State { delta, d, l } = s;
        let a = act(s);
        if d == 0 {
            corollary1.checked += 1;
            if a != Action::Restart {
                corollary1.violations.push(Violation {
                    states: vec![s],
                    lhs: 0.0,
                    rhs: 1.0,
                    slack: 1.0,
                });
            }
        }
        let older = State::new(delta, d + 1, l);
        if is_valid(older, &m) {
            theorem1.implies(s, older, Action::Restart, a, act(older));
        }
        let more = State::new(delta, d, l + 1);
        if is_valid(more, &m) {
            theorem2.implies(s, more, Action::Continue, a, act(more));
        }
        if d > 0 {
            let diag = State::new(delta + 1, d + 1, l + 1);
            if l + 1 < k && is_valid(diag, &m) && opts.inside(&m, diag) {
                theorem3.implies(s, diag, Action::Continue, a, act(diag));
            }
            let flat = State::new(delta + 1, d + 1, k - 1);
            if l == k - 1 && is_valid(flat, &m) && opts.inside(&m, flat) {
                boundary.implies(s, flat, Action::Continue, a, act(flat));
            }
        }
    }

    let mut theorem4 = ViolationReport::new(PropertyId::Theorem4, eps);
    for delta0 in k..=m.delta_max() {
        let tau = |d: u32| {
            (0..=d.min(k - 1))
                .find(|&l| act(State::new(delta0 + d, d, l)) == Action::Continue)
                .unwrap_or(k)
        };
        let mut d = 1;
        while opts.inside(&m, State::new(delta0 + d + 1, d + 1, 0)) {
            let (a, b) = (State::new(delta0 + d, d, 0), State::new(delta0 + d + 1, d + 1, 0));
            theorem4.le(&[a, b], f64::from(tau(d)), f64::from(tau(d + 1)));
            d += 1;
        }
    }

    vec![corollary1, theorem1, theorem2, theorem3, theorem4, boundary]
}

/// All value and policy reports, value checks first.
pub fn check_all(v: &ValueTable, pi: &Policy, opts: &VerifyOptions) -> Vec<ViolationReport> {
    let mut reports = check_value_structure_with(v, opts);
    reports.extend(check_policy_structure_with(pi, opts));
    reports
}

/// True when every gating (non-informational) report is empty.
pub fn all_hold(reports: &[ViolationReport]) -> bool {
    reports
        .iter()
        .filter(|r| !r.property_id.is_informational())
        .all(ViolationReport::holds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{relative_vi, SolveParams};

    fn model(k: u32, p: f64, dm: u32) -> ModelParams {
        ModelParams::new(k, p, dm).unwrap()
    }

    fn report(reports: &[ViolationReport], id: PropertyId) -> &ViolationReport {
        reports.iter().find(|r| r.property_id == id).unwrap()
    }

    fn persistent(m: ModelParams) -> Policy {
        Policy::from_fn(m, |s| if s.d == 0 { Action::Restart } else { Action::Continue })
    }

    #[test]
    fn zero_table_passes_every_value_check() {
        let m = model(4, 0.5, 30);
        let reports = check_value_structure(&ValueTable::zeros(m));
        assert_eq!(reports.len(), 6);
        assert!(reports.iter().all(ViolationReport::holds));
    }

    #[test]
    fn constructed_lemma1_violation_is_reported() {
        let m = model(5, 0.5, 200);
        let v = ValueTable::from_fn(m, |s| match (s.delta, s.d, s.l) {
            (10, 2, 1) => 5.0,
            (11, 2, 1) => 4.0,
            _ => 0.0,
        });
        let reports = check_value_structure(&v);
        let lemma1 = report(&reports, PropertyId::Lemma1);
        assert!(lemma1.violations.contains(&Violation {
            states: vec![State::new(10, 2, 1), State::new(11, 2, 1)],
            lhs: 5.0,
            rhs: 4.0,
            slack: 1.0,
        }));
    }

    #[test]
    fn persistent_policy_only_breaks_restart_propagation_from_fresh_states() {
        let m = model(5, 0.5, 60);
        let reports = check_policy_structure(&persistent(m));
        for r in &reports {
            if r.property_id == PropertyId::Theorem1 {
                assert!(!r.holds());
                assert!(r.violations.iter().all(|v| v.states[0].d == 0 && v.states[1].d == 1));
            } else {
                assert!(r.holds(), "{}", r.property_id);
            }
        }
    }

    #[test]
    fn constructed_theorem1_violation_is_reported() {
        let m = model(5, 0.5, 60);
        let mut pi = persistent(m);
        pi.set(State::new(12, 2, 1), Action::Restart).unwrap();
        pi.set(State::new(12, 2, 0), Action::Restart).unwrap();
        pi.set(State::new(12, 3, 0), Action::Restart).unwrap();
        pi.set(State::new(12, 3, 1), Action::Continue).unwrap();
        let reports = check_policy_structure(&pi);
        let t1 = report(&reports, PropertyId::Theorem1);
        assert!(!t1.holds());
        assert!(t1
            .violations
            .iter()
            .any(|v| v.states == vec![State::new(12, 2, 1), State::new(12, 3, 1)]));
    }

    #[test]
    fn solved_policy_and_values_pass() {
        for (k, p) in [(2, 0.5), (3, 0.4), (4, 0.7)] {
            let m = ModelParams::with_default_boundary(k, p).unwrap();
            let sol = relative_vi(&m, &SolveParams::average(&m)).unwrap();
            let reports = check_all(&sol.values, &sol.policy, &VerifyOptions::for_model(&m));
            for r in reports.iter().filter(|r| !r.property_id.is_informational()) {
                assert!(r.holds(), "k={k} p={p} {}: {:?}", r.property_id, &r.violations[..r.violations.len().min(3)]);
            }
        }
    }

    fn brute_pairs(m: &ModelParams, step: impl Fn(State) -> State, keep: impl Fn(State, State) -> bool) -> usize {
        let mut n = 0;
        for delta in 0..=m.delta_max() + 1 {
            for d in 0..=m.delta_max() {
                for l in 0..=m.k() {
                    let s = State::new(delta, d, l);
                    let t = step(s);
                    if is_valid(s, m) && is_valid(t, m) && keep(s, t) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn pair_counts_match_enumeration() {
        for k in 1..=4 {
            for dm in [2 * k, 2 * k + 5, 19] {
                let m = model(k, 0.5, dm.max(2 * k));
                let opts = VerifyOptions::for_model(&m).with_margin(0);
                let v = ValueTable::zeros(m);
                let reports = check_value_structure_with(&v, &opts);
                // both shifts pair each state of S_{dm-1} with exactly one successor
                let below: usize = (k..m.delta_max()).map(|delta| crate::model::layer_size(delta, k)).sum();
                assert_eq!(report(&reports, PropertyId::Lemma1).checked, below);
                assert_eq!(report(&reports, PropertyId::Lemma2).checked, below);
                assert_eq!(
                    report(&reports, PropertyId::Lemma5).checked,
                    brute_pairs(&m, |s| State::new(s.delta, s.d, s.l + 1), |_, _| true)
                );
                assert_eq!(
                    report(&reports, PropertyId::Lemma4).checked,
                    brute_pairs(&m, |s| State::new(s.d, 0, 0), |s, _| s.d > 0 && s.l == k - 1)
                );
                let pi = persistent(m);
                let reports = check_policy_structure_with(&pi, &opts);
                assert_eq!(
                    report(&reports, PropertyId::Theorem3).checked,
                    brute_pairs(&m, |s| State::new(s.delta + 1, s.d + 1, s.l + 1), |s, _| s.d > 0)
                );
                assert_eq!(
                    report(&reports, PropertyId::Theorem1).checked,
                    brute_pairs(&m, |s| State::new(s.delta, s.d + 1, s.l), |_, _| true)
                );
            }
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let m = model(3, 0.5, 40);
        let sol = relative_vi(&m, &SolveParams::average(&m)).unwrap();
        let opts = VerifyOptions::for_model(&m);
        assert_eq!(check_all(&sol.values, &sol.policy, &opts), check_all(&sol.values, &sol.policy, &opts));
    }
}
