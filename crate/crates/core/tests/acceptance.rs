//! Acceptance suite: each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use aoi_core::io::PolicyDocument;
use aoi_core::model::{Action, ModelParams};
use aoi_core::policies::{persistent_avg_aoi, persistent_policy, threshold_policy, PolicySpec};
use aoi_core::sim::{simulate, SimConfig};
use aoi_core::solver::{
    discounted_vi, evaluate_policy_exact, extract_thresholds, relative_vi, SolveParams, Solution,
};
use aoi_core::verify::{all_hold, check_all, VerifyOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KS: [u32; 3] = [1, 2, 5];
const PS: [f64; 3] = [0.3, 0.5, 0.8];
const MC_HORIZON: u64 = 10_000_000;
const MC_BURN_IN: u64 = 10_000;
const MC_SEEDS: u64 = 20;

type Outcome = Result<String, String>;

struct Ctx {
    /// Relative-VI solutions on the default boundary, keyed by (k, p).
    optimal: BTreeMap<(u32, u64), (ModelParams, Solution)>,
}

impl Ctx {
    fn solution(&mut self, k: u32, p: f64) -> &(ModelParams, Solution) {
        self.optimal.entry((k, p.to_bits())).or_insert_with(|| {
            let m = ModelParams::with_default_boundary(k, p).unwrap();
            let sol = relative_vi(&m, &SolveParams::average(&m)).unwrap();
            assert!(sol.report.converged, "relative VI did not converge at k={k} p={p}");
            (m, sol)
        })
    }
}

fn grid() -> impl Iterator<Item = (u32, f64)> {
    KS.into_iter().flat_map(|k| PS.into_iter().map(move |p| (k, p)))
}

fn mc_config(m: &ModelParams) -> SimConfig {
    SimConfig::new(m, MC_HORIZON, (1..=MC_SEEDS).collect()).with_burn_in(MC_BURN_IN)
}

fn structural_suite(ctx: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut pairs = 0;
    for (k, p) in grid() {
        let (m, sol) = ctx.solution(k, p);
        let reports = check_all(&sol.values, &sol.policy, &VerifyOptions::for_model(m));
        pairs += reports.iter().map(|r| r.checked).sum::<usize>();
        if !all_hold(&reports) {
            let bad: Vec<String> = reports
                .iter()
                .filter(|r| !r.property_id.is_informational() && !r.holds())
                .map(|r| format!("{}x{}", r.property_id, r.violations.len()))
                .collect();
            failures.push(format!("k={k} p={p}: {}", bad.join(",")));
        }
    }
    if failures.is_empty() {
        Ok(format!("11 properties, 9 grid points, {pairs} comparisons, 0 violations"))
    } else {
        Err(failures.join("; "))
    }
}

/// Mean AoI of the persistent policy from a renewal-reward simulation that
/// draws each update's service time directly from Bernoulli symbol outcomes.
fn renewal_bruteforce(k: u32, p: f64, updates: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut service = || {
        let (mut n, mut got) = (0u64, 0u32);
        while got < k {
            n += 1;
            got += u32::from(rng.gen_bool(p));
        }
        n
    };
    let mut prev = service();
    let (mut area, mut slots) = (0u128, 0u128);
    for _ in 0..updates {
        let s = service();
        // AoI runs prev, prev + 1, ..., prev + s - 1 while the next update is in service
        area += u128::from(s * prev + s * (s - 1) / 2);
        slots += u128::from(s);
        prev = s;
    }
    area as f64 / slots as f64
}

/// `E[S] + E[S^2] / (2 E[S]) - 1/2` with moments summed from the
/// negative-binomial service-time distribution.
fn renewal_series(k: u32, p: f64) -> f64 {
    let (mut m1, mut m2) = (0.0, 0.0);
    let mut n = f64::from(k);
    let mut pmf = p.powi(k as i32);
    let mut mass = 0.0;
    while mass < 1.0 - 1e-15 && n < 1e7 {
        mass += pmf;
        m1 += n * pmf;
        m2 += n * n * pmf;
        pmf *= n / (n + 1.0 - f64::from(k)) * (1.0 - p);
        n += 1.0;
    }
    m1 + m2 / (2.0 * m1) - 0.5
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn persistent_oracle(_: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut worst_rel = 0.0f64;
    let mut worst_z = 0.0f64;
    for (k, p) in grid() {
        let formula = persistent_avg_aoi(k, p);

        let series = renewal_series(k, p);
        if (series - formula).abs() > 1e-9 * formula {
            failures.push(format!("k={k} p={p}: series {series} vs formula {formula}"));
        }
        let per_seed: Vec<f64> = (0..20).map(|s| renewal_bruteforce(k, p, 100_000, 1000 + s)).collect();
        let (bf, bf_se) = mean_se(&per_seed);
        if (bf - formula).abs() > 3.0 * bf_se {
            failures.push(format!("k={k} p={p}: renewal simulation {bf} (se {bf_se}) vs formula {formula}"));
        }

        let m = ModelParams::with_default_boundary(k, p).unwrap();
        let exact = evaluate_policy_exact(&persistent_policy(&m)).unwrap();
        let rel = (exact - formula).abs() / formula;
        worst_rel = worst_rel.max(rel);
        if rel > 2e-3 {
            failures.push(format!("k={k} p={p}: exact {exact} vs formula {formula}"));
        }

        let mc = simulate(&PolicySpec::Persistent, &m, &mc_config(&m)).unwrap();
        let z = (mc.mean_aoi - formula).abs() / mc.stderr;
        worst_z = worst_z.max(z);
        if !(z <= 3.0) {
            failures.push(format!(
                "k={k} p={p}: simulated {} (se {}) vs formula {formula}",
                mc.mean_aoi, mc.stderr
            ));
        }
    }
    if failures.is_empty() {
        Ok(format!(
            "max relative error exact vs formula {worst_rel:.1e}, max |z| simulation vs formula {worst_z:.2}"
        ))
    } else {
        Err(failures.join("; "))
    }
}

fn deterministic_anchors(_: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for (k, target, tol) in [(1, 1.0, 1e-9), (5, 7.0, 1e-6)] {
        let m = ModelParams::with_default_boundary(k, 1.0).unwrap();
        let sol = relative_vi(&m, &SolveParams::average(&m)).unwrap();
        let g = sol.report.average_cost.unwrap();
        let opt = evaluate_policy_exact(&sol.policy).unwrap();
        let per = evaluate_policy_exact(&persistent_policy(&m)).unwrap();
        for (what, x) in [("g", g), ("optimal", opt), ("persistent", per)] {
            if (x - target).abs() > tol {
                failures.push(format!("k={k} {what} = {x}, expected {target} +- {tol:e}"));
            }
            seen.push(format!("k={k} {what}={x}"));
        }
    }
    if failures.is_empty() {
        Ok(seen.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

fn dominance_and_gap(_: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut gaps = Vec::new();
    for i in 1..=9 {
        let p = f64::from(i) / 10.0;
        let m = ModelParams::with_default_boundary(5, p).unwrap();
        let sol = relative_vi(&m, &SolveParams::average(&m)).unwrap();
        if !sol.report.converged {
            failures.push(format!("p={p}: no convergence"));
            continue;
        }
        let opt = evaluate_policy_exact(&sol.policy).unwrap();
        let per = evaluate_policy_exact(&persistent_policy(&m)).unwrap();
        let gap = per - opt;
        if opt > per * (1.0 + 1e-12) {
            failures.push(format!("p={p}: optimal {opt} > persistent {per}"));
        }
        if p <= 0.8 + 1e-9 && !(gap > 0.0) {
            failures.push(format!("p={p}: gap {gap} not positive"));
        }
        gaps.push((i, gap));
    }
    let gap_at = |i| gaps.iter().find(|g| g.0 == i).map(|g| g.1);
    match (gap_at(5), gap_at(9)) {
        (Some(g5), Some(g9)) if g9 < g5 => {}
        (g5, g9) => failures.push(format!("gap(0.9) = {g9:?} not below gap(0.5) = {g5:?}")),
    }
    if failures.is_empty() {
        let list: Vec<String> = gaps.iter().map(|(i, g)| format!("{:.1}:{g:.4}", f64::from(*i) / 10.0)).collect();
        Ok(format!("gaps {}", list.join(" ")))
    } else {
        Err(failures.join("; "))
    }
}

fn structured_equivalence(ctx: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut ratios = Vec::new();
    for (k, p) in grid() {
        let (m, plain) = ctx.solution(k, p);
        let pruned = relative_vi(m, &SolveParams::average(m).structured(true)).unwrap();
        let diff = plain.policy.differences(&pruned.policy).len();
        let sup = plain.values.sup_distance(&pruned.values);
        let (a, b) = (plain.report.argmin_evaluations, pruned.report.argmin_evaluations);
        if diff != 0 || !(sup <= 1e-9) || b >= a {
            failures.push(format!("k={k} p={p}: {diff} policy differences, sup {sup:e}, evaluations {b} vs {a}"));
        }
        ratios.push(b as f64 / a as f64);
    }
    if failures.is_empty() {
        let worst = ratios.iter().cloned().fold(0.0, f64::max);
        Ok(format!("identical policies and values; structured runs use at most {:.1}% of the evaluations", 100.0 * worst))
    } else {
        Err(failures.join("; "))
    }
}

fn discount_consistency(ctx: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (k, p) in grid() {
        let (m, sol) = ctx.solution(k, p);
        let g = sol.report.average_cost.unwrap();
        let disc = discounted_vi(m, &SolveParams::discounted(m, 0.999).with_tol(1e-3)).unwrap();
        if !disc.report.converged {
            failures.push(format!("k={k} p={p}: discounted solve did not converge"));
            continue;
        }
        let avg = evaluate_policy_exact(&disc.policy).unwrap();
        let rel = (avg - g).abs() / g;
        worst = worst.max(rel);
        if rel > 1e-3 {
            failures.push(format!("k={k} p={p}: discounted policy {avg} vs g {g}"));
        }
    }
    if failures.is_empty() {
        Ok(format!("max relative difference {worst:.1e}"))
    } else {
        Err(failures.join("; "))
    }
}

fn truncation_robustness(ctx: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (k, p) in grid() {
        let (m, sol) = ctx.solution(k, p);
        let g = sol.report.average_cost.unwrap();
        let wide = m.with_delta_max(2 * m.delta_max()).unwrap();
        let g2 = relative_vi(&wide, &SolveParams::average(&wide))
            .unwrap()
            .report
            .average_cost
            .unwrap();
        let rel = (g2 - g).abs() / g;
        worst = worst.max(rel);
        if rel > 1e-3 {
            failures.push(format!("k={k} p={p}: g {g} at {} vs {g2} at {}", m.delta_max(), wide.delta_max()));
        }
    }
    if failures.is_empty() {
        Ok(format!("max relative change {worst:.1e}"))
    } else {
        Err(failures.join("; "))
    }
}

fn simulation_agreement(ctx: &mut Ctx) -> Outcome {
    let (m, sol) = ctx.solution(5, 0.5);
    let m = *m;
    let exact = evaluate_policy_exact(&sol.policy).unwrap();
    let mc = simulate(&PolicySpec::OptimalTable(sol.policy.clone()), &m, &mc_config(&m)).unwrap();
    let z = (mc.mean_aoi - exact).abs() / mc.stderr;
    let clamp = mc.clamp_fraction();
    let detail = format!(
        "exact {exact:.6}, simulated {:.6} (se {:.1e}, |z| {z:.2}), clamp fraction {clamp:.1e}",
        mc.mean_aoi, mc.stderr
    );
    if z <= 3.0 && clamp < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn round_trips(ctx: &mut Ctx) -> Outcome {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    for (k, p) in grid() {
        let (m, sol) = ctx.solution(k, p);
        let table = extract_thresholds(&sol.policy).unwrap();
        let rebuilt = threshold_policy(m, &table).unwrap();
        let mismatched = sol
            .policy
            .differences(&rebuilt)
            .into_iter()
            .filter(|s| s.d >= 1)
            .count();
        if mismatched > 0 {
            failures.push(format!("k={k} p={p}: threshold rebuild differs at {mismatched} states"));
        }
        // d = 0 states restart in both
        if sol.policy.differences(&rebuilt).iter().any(|s| rebuilt.get(*s) != Some(Action::Restart)) {
            failures.push(format!("k={k} p={p}: rebuilt policy does not restart at d = 0"));
        }

        let sp = SolveParams::average(m);
        let doc = PolicyDocument::from_solution(sol, &sp).unwrap();
        let first = dir.path().join(format!("k{k}_p{p}_a.json"));
        let second = dir.path().join(format!("k{k}_p{p}_b.json"));
        doc.write(&first).unwrap();
        PolicyDocument::read(&first).unwrap().write(&second).unwrap();
        if std::fs::read(&first).unwrap() != std::fs::read(&second).unwrap() {
            failures.push(format!("k={k} p={p}: document changed on write-read-write"));
        }
    }
    if failures.is_empty() {
        Ok("threshold reconstruction exact on d >= 1; documents byte-identical".into())
    } else {
        Err(failures.join("; "))
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 9] = [
        ("structural properties on the grid", structural_suite),
        ("persistent baseline oracle", persistent_oracle),
        ("deterministic-channel anchors", deterministic_anchors),
        ("dominance and gap trend at k=5", dominance_and_gap),
        ("structured sweep equals plain sweep", structured_equivalence),
        ("discounted alpha=0.999 policy matches average cost", discount_consistency),
        ("truncation robustness", truncation_robustness),
        ("simulation agrees with exact evaluation", simulation_agreement),
        ("round-trips", round_trips),
    ];
    let mut ctx = Ctx {
        optimal: BTreeMap::new(),
    };
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut ctx)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
