use std::collections::BTreeMap;

use actguard::decision::Choice;
use actguard::rules::{rule_holds, RuleId};
use serde::{Deserialize, Serialize};

use crate::episode::EpisodeLog;
use crate::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    /// Share of runs that finish the full duration without collision.
    pub success_rate: f64,
    /// Mean number of steps before the first collision.
    pub collision_free_steps: f64,
    /// Mean number of steps on which each rule holds.
    pub rule_compliant_steps: BTreeMap<String, f64>,
    /// Mean number of steps that are collision-free and comply with every listed rule.
    pub success_steps: f64,
    /// Mean distance over successful runs only; absent if none succeeded.
    pub traveled_distance: Option<f64>,
    /// Fail-safe decisions over all decisions.
    pub fail_safe_rate: f64,
}

/// Per-step compliance of each rule over one log.
pub fn compliance(log: &EpisodeLog, rules: &[RuleId]) -> Result<BTreeMap<RuleId, Vec<bool>>> {
    let ctx = log.context()?;
    let mut out = BTreeMap::new();
    for &r in rules {
        let holds = log
            .steps
            .iter()
            .map(|s| rule_holds(r, s, &ctx.rule_config, &ctx))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.insert(r, holds);
    }
    Ok(out)
}

pub fn compute_metrics(logs: &[EpisodeLog], rules: &[RuleId]) -> Result<Metrics> {
    if logs.is_empty() {
        return Err(SimError::NoEpisodes);
    }
    let n = logs.len() as f64;
    let mut compliant: BTreeMap<String, f64> = rules.iter().map(|r| (r.code().to_string(), 0.0)).collect();
    let (mut free, mut success_steps, mut successes) = (0.0, 0.0, 0usize);
    let (mut distance, mut fail_safe, mut decisions) = (0.0, 0usize, 0usize);
    for log in logs {
        let per_rule = compliance(log, rules)?;
        free += log.steps.len() as f64;
        for (r, holds) in &per_rule {
            *compliant.get_mut(r.code()).expect("listed rule") += holds.iter().filter(|h| **h).count() as f64;
        }
        success_steps += (0..log.steps.len()).filter(|&k| per_rule.values().all(|h| h[k])).count() as f64;
        if log.completed() {
            successes += 1;
            distance += log.traveled_distance;
        }
        fail_safe += log.actions.iter().filter(|a| **a == Choice::FailSafe).count();
        decisions += log.actions.len();
    }
    compliant.values_mut().for_each(|v| *v /= n);
    Ok(Metrics {
        episodes: logs.len(),
        success_rate: successes as f64 / n,
        collision_free_steps: free / n,
        rule_compliant_steps: compliant,
        success_steps: success_steps / n,
        traveled_distance: (successes > 0).then(|| distance / successes as f64),
        fail_safe_rate: if decisions == 0 { 0.0 } else { fail_safe as f64 / decisions as f64 },
    })
}
