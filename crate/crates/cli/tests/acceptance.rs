//! Acceptance checks, one line per criterion. Exits non-zero if any fails.

mod common;
#[path = "../../core/tests/common/formulas.rs"]
mod formulas;
#[path = "../../core/tests/common/labeling.rs"]
mod labeling;
#[path = "../../core/tests/common/soundness.rs"]
mod soundness;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use actguard::actions::{ActionPair, Lat, Lon};
use actguard::decision::{decide, Choice, DecideConfig, HeuristicMaker, ScriptedMaker};
use actguard::prediction::{predict_all, PredictionMode};
use actguard::reach::verify;
use actguard::rules::{robustness_margin, rule_formulas, rule_holds, safe_distance, RuleId};
use actguard::scenario::EgoParams;
use actguard_sim::{
    agent_fn, close_leader_env, compute_metrics, episode_grid, run_batch, run_episode, EpisodeConfig, EpisodeLog,
    Guard, Setting, DEFAULT_SEEDS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1() -> Check {
    let p = EgoParams { a_min: -6.0, t_d: 0.4, ..Default::default() };
    let d = safe_distance(20.0, 20.0, &p, -12.0).map_err(|e| e.to_string())?;
    let z = safe_distance(0.0, 0.0, &p, -12.0).map_err(|e| e.to_string())?;
    let expected = -400.0 / 24.0 + 400.0 / 12.0 + 8.0;
    ensure((d - expected).abs() < 1e-9 && (d - 24.6667).abs() < 1e-4 && z == 0.0, format!("d(20,20)={d:.6} d(0,0)={z}"))
}

fn c2() -> Check {
    let t0 = Instant::now();
    let traces = formulas::all_traces(5);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let fs: Vec<_> = (0..250).map(|_| formulas::gen_formula(&mut rng)).collect();
    let bad: usize = fs.par_iter().map(|f| formulas::mismatches(f, &traces)).sum();
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        bad == 0 && secs < 30.0,
        format!("{} formulas x {} traces, {bad} mismatches, {secs:.1} s", fs.len(), traces.len()),
    )
}

fn c3() -> Check {
    let t0 = Instant::now();
    let reports: Vec<_> =
        soundness::fixtures().par_iter().enumerate().map(|(i, fx)| soundness::check(fx, 1000, 2_000_000, 100 + i as u64)).collect();
    let secs = t0.elapsed().as_secs_f64();
    let ok = reports.iter().all(|r| r.verified && r.accepted == 1000 && r.escapes == 0) && secs < 120.0;
    let detail: Vec<String> =
        reports.iter().map(|r| format!("{}: {}/{} accepted, {} escapes", r.fixture, r.accepted, r.tried, r.escapes)).collect();
    ensure(ok, format!("{}; {secs:.1} s", detail.join("; ")))
}

fn c4() -> Check {
    let sc = common::blocked_leader();
    let h = sc.horizon;
    let occ = predict_all(&sc, h, PredictionMode::SetBased).map_err(|e| e.to_string())?;
    let run = |pair, rules: &[_]| verify(&sc, pair, rules, &occ, h).map_err(|e| e.to_string());
    let acc = run(ActionPair::new(Lon::Accelerate, Lat::FollowLane), &[])?;
    let dec_pair = ActionPair::new(Lon::Decelerate, Lat::FollowLane);
    let dec = run(dec_pair, &[])?;
    let all = rule_formulas(&RuleId::ALL, &[1]);
    let dec_rules = run(dec_pair, &all)?;
    let maker = ScriptedMaker::from_pairs(&[vec![dec_pair]]);
    let cfg = DecideConfig { kappa: 1, rules: RuleId::ALL.to_vec(), horizon: h, ..Default::default() };
    let d = decide(&sc, &maker, &cfg);
    ensure(
        !acc.verified
            && acc.first_empty_step.is_some_and(|k| k < h)
            && dec.verified
            && !dec_rules.verified
            && d.chosen == Choice::FailSafe,
        format!(
            "ACC first empty step {:?} of {h}; DEC verified {}; DEC+rules verified {} (first empty {:?}); decision {:?}",
            acc.first_empty_step, dec.verified, dec_rules.verified, dec_rules.first_empty_step, d.chosen
        ),
    )
}

/// Guarded heuristic runs over the full grid, shared by criteria 5, 7 and 8.
fn guarded_logs() -> &'static Result<(Vec<EpisodeLog>, f64), String> {
    static LOGS: OnceLock<Result<(Vec<EpisodeLog>, f64), String>> = OnceLock::new();
    LOGS.get_or_init(|| {
        let t0 = Instant::now();
        let settings: Vec<Setting> = (1..=3).map(|i| Setting::standard(i).unwrap()).collect();
        let specs = episode_grid(&settings, &DEFAULT_SEEDS, 3);
        let mut logs = Vec::new();
        for rules in [vec![], RuleId::ALL.to_vec()] {
            let cfg = EpisodeConfig { rules: rules.clone(), horizon: 8 };
            let guard = Guard::Verified(DecideConfig { rules, mode: PredictionMode::SetBased, ..Default::default() });
            let name = if cfg.rules.is_empty() { "mock+set-based" } else { "mock+set-based+rules" };
            for r in run_batch(&specs, &cfg, &guard, name, |_| Box::new(HeuristicMaker::default())) {
                logs.push(r.map_err(|e| e.to_string())?);
            }
        }
        Ok((logs, t0.elapsed().as_secs_f64()))
    })
}

fn c5() -> Check {
    let (logs, secs) = guarded_logs().as_ref().map_err(Clone::clone)?;
    let mut parts = Vec::new();
    let mut ok = *secs < 300.0;
    for name in ["mock+set-based", "mock+set-based+rules"] {
        let subset: Vec<EpisodeLog> = logs.iter().filter(|l| l.agent == name).cloned().collect();
        let m = compute_metrics(&subset, &RuleId::ALL).map_err(|e| e.to_string())?;
        ok &= m.success_rate == 1.0 && m.collision_free_steps == 30.0;
        parts.push(format!(
            "{name}: {} episodes, success {:.3}, collision-free steps {:.2}, fail-safe rate {:.3}",
            m.episodes, m.success_rate, m.collision_free_steps, m.fail_safe_rate
        ));
    }
    ensure(ok, format!("{}; {secs:.1} s", parts.join("; ")))
}

fn c6() -> Check {
    let aggressive = || ScriptedMaker::from_pairs(&[vec![ActionPair::new(Lon::Accelerate, Lat::FollowLane)]]);
    let cfg = EpisodeConfig::default();
    let maker = aggressive();
    let mut agent = agent_fn(&maker, &Guard::None);
    let unguarded = run_episode(close_leader_env(5), &cfg, "aggressive", 0, &mut agent).map_err(|e| e.to_string())?;
    let maker = aggressive();
    let guard = Guard::Verified(DecideConfig { mode: PredictionMode::SetBased, ..Default::default() });
    let mut agent = agent_fn(&maker, &guard);
    let guarded = run_episode(close_leader_env(5), &cfg, "aggressive+set-based", 0, &mut agent).map_err(|e| e.to_string())?;
    let fs = guarded.actions.iter().filter(|a| **a == Choice::FailSafe).count();
    let maker = aggressive();
    let guard = Guard::Verified(DecideConfig { mode: PredictionMode::MostLikely, ..Default::default() });
    let mut agent = agent_fn(&maker, &guard);
    let likely = run_episode(close_leader_env(5), &cfg, "aggressive+most-likely", 0, &mut agent).map_err(|e| e.to_string())?;
    ensure(
        unguarded.collision_step.is_some() && guarded.collision_step.is_none() && guarded.completed(),
        format!(
            "unguarded collision step {:?}; set-based guard collision step {:?}, {} steps, {fs} fail-safe decisions; \
             most-likely guard (informational) collision step {:?}",
            unguarded.collision_step,
            guarded.collision_step,
            guarded.steps.len(),
            likely.collision_step
        ),
    )
}

fn c7() -> Check {
    let (logs, _) = guarded_logs().as_ref().map_err(Clone::clone)?;
    let mut worst = usize::MAX;
    for log in logs {
        let m = compute_metrics(std::slice::from_ref(log), &[RuleId::SpeedLimit]).map_err(|e| e.to_string())?;
        worst = worst.min(m.rule_compliant_steps["R_G3"] as usize);
    }
    ensure(worst == 30, format!("minimum R_G3 compliant steps over {} episodes: {worst}", logs.len()))
}

fn c8() -> Check {
    let (logs, _) = guarded_logs().as_ref().map_err(Clone::clone)?;
    let (mut checked, mut violations) = (0usize, 0usize);
    for log in logs {
        let ctx = log.context().map_err(|e| e.to_string())?;
        for rule in RuleId::ALL {
            let margins = robustness_margin(rule, &log.steps, &ctx.rule_config, &ctx).map_err(|e| e.to_string())?;
            for (step, m) in log.steps.iter().zip(margins) {
                let holds = rule_holds(rule, step, &ctx.rule_config, &ctx).map_err(|e| e.to_string())?;
                checked += 1;
                violations += usize::from((m > 0.0) != holds);
            }
        }
    }
    ensure(violations == 0, format!("{checked} step-rule pairs, {violations} sign mismatches"))
}

fn c9() -> Check {
    let (total, failures) = labeling::round_trip(100, &mut ChaCha8Rng::seed_from_u64(9));
    ensure(
        failures.is_empty(),
        format!("{total} trajectories, {} mislabeled{}", failures.len(), failures.first().map(|f| format!(", e.g. {f}")).unwrap_or_default()),
    )
}

fn c10() -> Check {
    let sc = common::busy_highway();
    let h = sc.horizon;
    let feasible = actguard::actions::feasible_actions(&sc, &sc.ego.state).map_err(|e| e.to_string())?;
    let (mut worst, mut worst_pair, mut verified) = (0.0f64, None, 0);
    for pair in feasible.pairs() {
        let t0 = Instant::now();
        let occ = predict_all(&sc, h, PredictionMode::SetBased).map_err(|e| e.to_string())?;
        let out = verify(&sc, pair, &[], &occ, h).map_err(|e| e.to_string())?;
        let secs = t0.elapsed().as_secs_f64();
        verified += usize::from(out.verified);
        if secs > worst {
            worst = secs;
            worst_pair = Some(pair);
        }
    }
    ensure(
        worst <= 0.5 && verified > 0,
        format!(
            "{h} steps, {} obstacles, {} pairs ({verified} verified): slowest {:.4} s for {}",
            sc.obstacles.len(),
            feasible.pairs().count(),
            worst,
            worst_pair.map(|p| p.to_string()).unwrap_or_default()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("safe distance formula", c1),
        ("automaton matches trace evaluation", c2),
        ("reachable sets contain sampled rollouts", c3),
        ("blocked leader case", c4),
        ("zero collisions with set-based guard", c5),
        ("close leader: unguarded collides, set-based guard does not", c6),
        ("speed limit compliance", c7),
        ("robustness sign coherence", c8),
        ("labeling round trip", c9),
        ("verification latency", c10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
