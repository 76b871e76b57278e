//! Emergency braking plan and its invariable-safety check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::convex_intersects;
use crate::prediction::{OccupancySequence, PredictionMode};
use crate::scenario::{EgoState, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailSafePlan {
    /// Ego states from the current one to standstill.
    pub states: Vec<EgoState>,
    /// Acceleration applied after each state but the last.
    pub decel_profile: Vec<f64>,
}

impl FailSafePlan {
    /// State at step `k`, holding the final standstill afterwards.
    pub fn state_at(&self, k: usize) -> &EgoState {
        &self.states[k.min(self.states.len() - 1)]
    }
}

/// Brakes at `a_min` along the current lane at constant lateral offset.
/// The last step lands exactly on zero speed.
pub fn fail_safe_plan(scenario: &Scenario) -> FailSafePlan {
    let lane = scenario.ego_lane();
    let params = &scenario.ego.params;
    let dt = scenario.dt;
    let mut cur = scenario.ego.state;
    let mut states = vec![cur];
    let mut decel_profile = Vec::new();
    while cur.v > params.v_err {
        let a = params.a_min.max(-cur.v / dt);
        let s = cur.s + cur.v * dt + 0.5 * a * dt * dt;
        let v = (cur.v + a * dt).max(0.0);
        cur = EgoState { position: lane.point_at(s, cur.d), s, d: cur.d, v, theta: lane.heading_at(s), delta: 0.0, a };
        decel_profile.push(a);
        states.push(cur);
    }
    FailSafePlan { states, decel_profile }
}

/// True iff the plan, held at standstill once stopped, avoids every
/// set-based occupancy at every step up to `h`.
pub fn is_invariably_safe(
    scenario: &Scenario,
    plan: &FailSafePlan,
    occupancies: &[OccupancySequence],
    h: usize,
) -> Result<bool> {
    if occupancies.iter().any(|o| o.mode != PredictionMode::SetBased) {
        return Err(Error::MostLikelyOccupancy);
    }
    for k in 0..=h {
        let ego = scenario.ego.occupancy(plan.state_at(k));
        for occ in occupancies.iter().filter(|o| k <= o.horizon()) {
            if occ.at(k).iter().any(|poly| convex_intersects(&ego, poly)) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
