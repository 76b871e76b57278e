//! Atomic predicates, the safe-distance bound, the three general traffic
//! rules as LTL_f formulas, and their signed robustness margins.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::ltlf::{Assignment, Formula, Trace};
use crate::scenario::{polygon_touches_lane, EgoParams, EgoState, Lane, Scenario, Shape, VehicleState};

/// Margin reported when a rule holds vacuously.
pub const ROBUSTNESS_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleId {
    /// Keep a safe distance to the preceding vehicle.
    #[serde(rename = "R_G1")]
    SafeDistance,
    /// No abrupt braking without a reason.
    #[serde(rename = "R_G2")]
    UnnecessaryBraking,
    /// Respect the speed limits.
    #[serde(rename = "R_G3")]
    SpeedLimit,
}

impl RuleId {
    pub const ALL: [RuleId; 3] = [RuleId::SafeDistance, RuleId::UnnecessaryBraking, RuleId::SpeedLimit];

    pub fn code(self) -> &'static str {
        match self {
            RuleId::SafeDistance => "R_G1",
            RuleId::UnnecessaryBraking => "R_G2",
            RuleId::SpeedLimit => "R_G3",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleId::ALL
            .into_iter()
            .find(|r| r.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownRule(s.to_string()))
    }
}

/// Parses a comma-separated rule list; the empty string yields no rules.
pub fn parse_rule_list(text: &str) -> Result<Vec<RuleId>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleConfig {
    pub a_abrupt: f64,
    pub speed_limit_default: f64,
    pub fov_speed_cap: f64,
    pub type_speed_cap: f64,
    pub braking_speed_cap: f64,
    /// Braking capability assumed for other vehicles in the safe distance.
    pub a_obs_min: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            a_abrupt: 2.0,
            speed_limit_default: 36.11,
            fov_speed_cap: 50.0,
            type_speed_cap: 50.0,
            braking_speed_cap: 50.0,
            a_obs_min: -12.0,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.a_abrupt > 0.0, "a_abrupt > 0"),
            (self.speed_limit_default > 0.0, "speed_limit_default > 0"),
            (self.fov_speed_cap > 0.0, "fov_speed_cap > 0"),
            (self.type_speed_cap > 0.0, "type_speed_cap > 0"),
            (self.braking_speed_cap > 0.0, "braking_speed_cap > 0"),
            (self.a_obs_min < 0.0, "a_obs_min < 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(Error::Invariant(format!("rule config: {what}"))),
            None => Ok(()),
        }
    }
}

/// Registered atomic predicates. Atom names are identifiers; parameterized
/// atoms carry their lane or obstacle id as a suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Predicate {
    AccWithinLimit,
    AccAboveLimit,
    AccBelowNegLimit,
    InStandstill,
    InLane(u32),
    Precedes(u32),
    KeepsSafeDistance(u32),
    BrakesAbruptly,
    BrakingJustification,
    KeepsLaneSpeedLimit,
    KeepsFovSpeedLimit,
    KeepsTypeSpeedLimit,
    KeepsBrakingSpeedLimit,
}

impl Predicate {
    pub fn parse(name: &str) -> Result<Predicate> {
        let unknown = || Error::UnknownAtom(name.to_string());
        let id = |prefix: &str| -> Option<Result<u32>> {
            name.strip_prefix(prefix).map(|rest| rest.parse::<u32>().map_err(|_| unknown()))
        };
        if let Some(id) = id("in_lane_") {
            return Ok(Predicate::InLane(id?));
        }
        if let Some(id) = id("precedes_") {
            return Ok(Predicate::Precedes(id?));
        }
        if let Some(id) = id("keeps_safe_distance_") {
            return Ok(Predicate::KeepsSafeDistance(id?));
        }
        Ok(match name {
            "a_within_lim" => Predicate::AccWithinLimit,
            "a_above_lim" => Predicate::AccAboveLimit,
            "a_below_neg_lim" => Predicate::AccBelowNegLimit,
            "in_standstill" => Predicate::InStandstill,
            "brakes_abruptly" => Predicate::BrakesAbruptly,
            "braking_justification" => Predicate::BrakingJustification,
            "keeps_lane_speed_limit" => Predicate::KeepsLaneSpeedLimit,
            "keeps_fov_speed_limit" => Predicate::KeepsFovSpeedLimit,
            "keeps_type_speed_limit" => Predicate::KeepsTypeSpeedLimit,
            "keeps_braking_speed_limit" => Predicate::KeepsBrakingSpeedLimit,
            _ => return Err(unknown()),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Predicate::AccWithinLimit => "a_within_lim".into(),
            Predicate::AccAboveLimit => "a_above_lim".into(),
            Predicate::AccBelowNegLimit => "a_below_neg_lim".into(),
            Predicate::InStandstill => "in_standstill".into(),
            Predicate::InLane(id) => format!("in_lane_{id}"),
            Predicate::Precedes(id) => format!("precedes_{id}"),
            Predicate::KeepsSafeDistance(id) => format!("keeps_safe_distance_{id}"),
            Predicate::BrakesAbruptly => "brakes_abruptly".into(),
            Predicate::BrakingJustification => "braking_justification".into(),
            Predicate::KeepsLaneSpeedLimit => "keeps_lane_speed_limit".into(),
            Predicate::KeepsFovSpeedLimit => "keeps_fov_speed_limit".into(),
            Predicate::KeepsTypeSpeedLimit => "keeps_type_speed_limit".into(),
            Predicate::KeepsBrakingSpeedLimit => "keeps_braking_speed_limit".into(),
        }
    }

    pub fn atom(&self) -> Formula {
        Formula::Atom(self.name())
    }

    /// Predicates that depend on the applied input rather than the state.
    pub fn is_input_atom(&self) -> bool {
        matches!(
            self,
            Predicate::AccWithinLimit
                | Predicate::AccAboveLimit
                | Predicate::AccBelowNegLimit
                | Predicate::BrakesAbruptly
        )
    }
}

/// Lane ids around the ego vehicle at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LaneContext {
    pub current: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSnapshot {
    pub id: u32,
    pub state: VehicleState,
    pub shape: Shape,
}

/// Everything the predicates need at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldStep {
    pub step: usize,
    pub ego: EgoState,
    pub obstacles: Vec<ObstacleSnapshot>,
    pub lane_ctx: LaneContext,
    #[serde(default)]
    pub fail_safe_active: bool,
}

/// Safe distance between a following vehicle at `v` and a leader at
/// `v_obs`, given the follower's braking floor and reaction time and the
/// leader's braking capability `a_obs_min`.
pub fn safe_distance(v: f64, v_obs: f64, params: &EgoParams, a_obs_min: f64) -> Result<f64> {
    if !(a_obs_min < params.a_min && params.a_min < 0.0) {
        return Err(Error::ParameterOrder { a_obs_min, a_min: params.a_min });
    }
    Ok(v_obs * v_obs / (-2.0 * a_obs_min.abs()) - v * v / (-2.0 * params.a_min.abs()) + v * params.t_d)
}

/// Lane-frame footprint of a rectangle: center `(s, d)`, half extents along and across the lane.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    s: f64,
    d: f64,
    half_s: f64,
    half_d: f64,
    /// Cosine of the heading relative to the lane.
    cos_rel: f64,
}

fn footprint(lane: &Lane, center: Point, theta: f64, shape: Shape) -> Option<Footprint> {
    let (s, d) = lane.project(center, crate::scenario::DEFAULT_PROJECTION_BAND).ok()?;
    let rel = theta - lane.heading_at(s);
    let (sin, cos) = rel.sin_cos();
    Some(Footprint {
        s,
        d,
        half_s: (shape.length * cos.abs() + shape.width * sin.abs()) / 2.0,
        half_d: (shape.length * sin.abs() + shape.width * cos.abs()) / 2.0,
        cos_rel: cos,
    })
}

fn ego_footprint(scenario: &Scenario, lane: &Lane, ego: &EgoState) -> Option<Footprint> {
    let center = ego.position.add(Point::new(scenario.ego.axle_offset(), 0.0).rotate(ego.theta));
    footprint(lane, center, ego.theta, scenario.ego.shape)
}

struct Relation {
    precedes: bool,
    gap: f64,
    v_ego: f64,
    v_obs: f64,
}

fn relation(scenario: &Scenario, step: &WorldStep, id: u32) -> Result<Option<Relation>> {
    let obs = step.obstacles.iter().find(|o| o.id == id).ok_or(Error::MissingObstacle(id))?;
    let Some(lane) = scenario.network.lane(step.lane_ctx.current) else {
        return Ok(None);
    };
    let (Some(e), Some(o)) = (
        ego_footprint(scenario, lane, &step.ego),
        footprint(lane, obs.state.position, obs.state.theta, obs.shape),
    ) else {
        return Ok(None);
    };
    let gap = (o.s - o.half_s) - (e.s + e.half_s);
    let lateral_overlap = (o.d - e.d).abs() < o.half_d + e.half_d;
    Ok(Some(Relation {
        precedes: lateral_overlap && gap > 0.0 && o.cos_rel > 0.0,
        gap,
        v_ego: (step.ego.v * e.cos_rel).max(0.0),
        v_obs: (obs.state.v * o.cos_rel).max(0.0),
    }))
}

fn lane_speed_limit(scenario: &Scenario, step: &WorldStep, config: &RuleConfig) -> f64 {
    scenario
        .network
        .lane(step.lane_ctx.current)
        .and_then(|lane| {
            let (s, _) = lane.project(step.ego.position, f64::INFINITY).ok()?;
            scenario.network.speed_limit_at(lane, s)
        })
        .unwrap_or(config.speed_limit_default)
}

/// Pointwise truth of a registered predicate on one world step.
pub fn eval(pred: Predicate, step: &WorldStep, config: &RuleConfig, scenario: &Scenario) -> Result<bool> {
    let p = &scenario.ego.params;
    let v = step.ego.v;
    let a = step.ego.a;
    Ok(match pred {
        Predicate::AccWithinLimit => a.abs() <= p.a_lim,
        Predicate::AccAboveLimit => a > p.a_lim,
        Predicate::AccBelowNegLimit => a < -p.a_lim,
        Predicate::InStandstill => -p.v_err <= v && v <= p.v_err,
        Predicate::InLane(id) => {
            let lane = scenario.network.lane(id).ok_or_else(|| Error::UnknownAtom(pred.name()))?;
            polygon_touches_lane(&scenario.ego.occupancy(&step.ego), lane)
        }
        Predicate::Precedes(id) => relation(scenario, step, id)?.is_some_and(|r| r.precedes),
        Predicate::KeepsSafeDistance(id) => match relation(scenario, step, id)? {
            Some(r) => r.gap > safe_distance(r.v_ego, r.v_obs, p, config.a_obs_min)?,
            None => false,
        },
        Predicate::BrakesAbruptly => a < -config.a_abrupt,
        Predicate::BrakingJustification => step.fail_safe_active,
        Predicate::KeepsLaneSpeedLimit => v <= lane_speed_limit(scenario, step, config),
        Predicate::KeepsFovSpeedLimit => v <= config.fov_speed_cap,
        Predicate::KeepsTypeSpeedLimit => v <= config.type_speed_cap,
        Predicate::KeepsBrakingSpeedLimit => v <= config.braking_speed_cap,
    })
}

pub fn eval_predicate(name: &str, step: &WorldStep, config: &RuleConfig, scenario: &Scenario) -> Result<bool> {
    eval(Predicate::parse(name)?, step, config, scenario)
}

/// Assignment for every atom of `formula` at one step.
pub fn label_step(formula: &Formula, step: &WorldStep, config: &RuleConfig, scenario: &Scenario) -> Result<Assignment> {
    formula
        .atoms()
        .into_iter()
        .map(|a| eval_predicate(&a, step, config, scenario).map(|v| (a, v)))
        .collect()
}

pub fn trace_of(formula: &Formula, steps: &[WorldStep], config: &RuleConfig, scenario: &Scenario) -> Result<Trace> {
    steps.iter().map(|s| label_step(formula, s, config, scenario)).collect::<Result<_>>().map(Trace)
}

const SPEED_ATOMS: [Predicate; 4] = [
    Predicate::KeepsLaneSpeedLimit,
    Predicate::KeepsFovSpeedLimit,
    Predicate::KeepsTypeSpeedLimit,
    Predicate::KeepsBrakingSpeedLimit,
];

pub fn rule_formula_for_obstacle(id: u32) -> Formula {
    Formula::globally(Formula::implies(Predicate::Precedes(id).atom(), Predicate::KeepsSafeDistance(id).atom()))
}

pub fn braking_rule_formula() -> Formula {
    Formula::globally(Formula::implies(
        Predicate::BrakesAbruptly.atom(),
        Predicate::BrakingJustification.atom(),
    ))
}

pub fn speed_rule_formula() -> Formula {
    let atoms = SPEED_ATOMS.iter().map(Predicate::atom).collect();
    Formula::globally(crate::ltlf::conjoin(atoms).expect("four atoms"))
}

/// Rule formulas for the enabled rules; the safe-distance rule is
/// instantiated once per obstacle id.
pub fn rule_formulas(enabled: &[RuleId], obstacle_ids: &[u32]) -> Vec<Formula> {
    let mut out = Vec::new();
    for rule in enabled {
        match rule {
            RuleId::SafeDistance => out.extend(obstacle_ids.iter().map(|&id| rule_formula_for_obstacle(id))),
            RuleId::UnnecessaryBraking => out.push(braking_rule_formula()),
            RuleId::SpeedLimit => out.push(speed_rule_formula()),
        }
    }
    out
}

/// Whether the body of `rule` (the operand of its `G`) holds at `step`,
/// over all obstacles of the step.
pub fn rule_holds(rule: RuleId, step: &WorldStep, config: &RuleConfig, scenario: &Scenario) -> Result<bool> {
    Ok(match rule {
        RuleId::SafeDistance => {
            for o in &step.obstacles {
                if eval(Predicate::Precedes(o.id), step, config, scenario)?
                    && !eval(Predicate::KeepsSafeDistance(o.id), step, config, scenario)?
                {
                    return Ok(false);
                }
            }
            true
        }
        RuleId::UnnecessaryBraking => {
            !eval(Predicate::BrakesAbruptly, step, config, scenario)?
                || eval(Predicate::BrakingJustification, step, config, scenario)?
        }
        RuleId::SpeedLimit => {
            for p in SPEED_ATOMS {
                if !eval(p, step, config, scenario)? {
                    return Ok(false);
                }
            }
            true
        }
    })
}

/// Signed slack of the rule's defining inequality at one step.
pub fn step_margin(rule: RuleId, step: &WorldStep, config: &RuleConfig, scenario: &Scenario) -> Result<f64> {
    let p = &scenario.ego.params;
    Ok(match rule {
        RuleId::SafeDistance => {
            let mut m = ROBUSTNESS_CAP;
            for o in &step.obstacles {
                if let Some(r) = relation(scenario, step, o.id)? {
                    if r.precedes {
                        m = m.min(r.gap - safe_distance(r.v_ego, r.v_obs, p, config.a_obs_min)?);
                    }
                }
            }
            m
        }
        RuleId::UnnecessaryBraking if step.fail_safe_active => ROBUSTNESS_CAP,
        RuleId::UnnecessaryBraking => step.ego.a + config.a_abrupt,
        RuleId::SpeedLimit => {
            let v = step.ego.v;
            [
                lane_speed_limit(scenario, step, config),
                config.fov_speed_cap,
                config.type_speed_cap,
                config.braking_speed_cap,
            ]
            .into_iter()
            .map(|cap| cap - v)
            .fold(f64::INFINITY, f64::min)
            .min(ROBUSTNESS_CAP)
        }
    })
}

/// Per-step robustness series of a rule over a logged run.
pub fn robustness_margin(rule: RuleId, steps: &[WorldStep], config: &RuleConfig, scenario: &Scenario) -> Result<Vec<f64>> {
    if steps.is_empty() {
        return Err(Error::EmptyTrace);
    }
    steps.iter().map(|s| step_margin(rule, s, config, scenario)).collect()
}
