//! High-level action vocabulary, feasibility filtering, translation into
//! LTL_f, and labeling of recorded trajectories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltlf::{evaluate_trace, Formula};
use crate::rules::{trace_of, LaneContext, Predicate, WorldStep};
use crate::scenario::{EgoState, LaneletNetwork, RoadType, Scenario, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Lon {
    Keep,
    Accelerate,
    Decelerate,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lat {
    #[serde(rename = "FOLLOW-LANE")]
    FollowLane,
    #[serde(rename = "LEFT-LANE")]
    LeftLane,
    #[serde(rename = "RIGHT-LANE")]
    RightLane,
}

impl Lon {
    pub const ALL: [Lon; 4] = [Lon::Keep, Lon::Accelerate, Lon::Decelerate, Lon::Stop];

    pub fn name(self) -> &'static str {
        match self {
            Lon::Keep => "KEEP",
            Lon::Accelerate => "ACCELERATE",
            Lon::Decelerate => "DECELERATE",
            Lon::Stop => "STOP",
        }
    }
}

impl Lat {
    pub const ALL: [Lat; 3] = [Lat::FollowLane, Lat::LeftLane, Lat::RightLane];

    pub fn name(self) -> &'static str {
        match self {
            Lat::FollowLane => "FOLLOW-LANE",
            Lat::LeftLane => "LEFT-LANE",
            Lat::RightLane => "RIGHT-LANE",
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_ascii_uppercase().replace('_', "-")
}

impl FromStr for Lon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = normalize(s);
        Lon::ALL.into_iter().find(|l| l.name() == n).ok_or_else(|| Error::UnknownAction(s.to_string()))
    }
}

impl FromStr for Lat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = normalize(s);
        Lat::ALL.into_iter().find(|l| l.name() == n).ok_or_else(|| Error::UnknownAction(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionPair {
    #[serde(rename = "longitudinal")]
    pub lon: Lon,
    #[serde(rename = "lateral")]
    pub lat: Lat,
}

impl ActionPair {
    pub const fn new(lon: Lon, lat: Lat) -> Self {
        ActionPair { lon, lat }
    }

    /// All twelve pairs, longitudinal-major.
    pub fn all() -> impl Iterator<Item = ActionPair> {
        Lon::ALL.into_iter().flat_map(|lon| Lat::ALL.into_iter().map(move |lat| ActionPair { lon, lat }))
    }
}

impl fmt::Display for ActionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lon.name(), self.lat.name())
    }
}

/// Parses `LON,LAT`, e.g. `ACCELERATE,FOLLOW-LANE`.
impl FromStr for ActionPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lon, lat) = s.split_once(',').ok_or_else(|| Error::UnknownAction(s.to_string()))?;
        Ok(ActionPair { lon: lon.parse()?, lat: lat.parse()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleActions {
    pub lon_set: Vec<Lon>,
    pub lat_set: Vec<Lat>,
}

impl FeasibleActions {
    pub fn contains(&self, pair: &ActionPair) -> bool {
        self.lon_set.contains(&pair.lon) && self.lat_set.contains(&pair.lat)
    }

    pub fn pairs(&self) -> impl Iterator<Item = ActionPair> + '_ {
        self.lon_set.iter().flat_map(|&lon| self.lat_set.iter().map(move |&lat| ActionPair { lon, lat }))
    }
}

impl LaneContext {
    /// Current lane at the ego position and its same-direction neighbours.
    pub fn of(network: &LaneletNetwork, ego: &EgoState) -> Result<LaneContext> {
        let lane = network.current_lane(ego.position)?;
        let (s, _) = lane.project(ego.position, f64::INFINITY)?;
        let adj = |side| network.adjacent_lane(lane, s, side).filter(|(_, same)| *same).map(|(l, _)| l.id);
        Ok(LaneContext { current: lane.id, left: adj(Side::Left), right: adj(Side::Right) })
    }
}

pub fn feasible_actions(scenario: &Scenario, ego: &EgoState) -> Result<FeasibleActions> {
    let ctx = LaneContext::of(&scenario.network, ego)?;
    let mut lat_set = vec![Lat::FollowLane];
    if ctx.left.is_some() {
        lat_set.push(Lat::LeftLane);
    }
    if ctx.right.is_some() {
        lat_set.push(Lat::RightLane);
    }
    let lon_set = Lon::ALL
        .into_iter()
        .filter(|l| !(scenario.road_type == RoadType::Highway && *l == Lon::Stop))
        .collect();
    Ok(FeasibleActions { lon_set, lat_set })
}

pub fn lon_formula(lon: Lon) -> Formula {
    match lon {
        Lon::Keep => Formula::globally(Predicate::AccWithinLimit.atom()),
        Lon::Accelerate => Formula::globally(Predicate::AccAboveLimit.atom()),
        Lon::Decelerate => Formula::globally(Predicate::AccBelowNegLimit.atom()),
        Lon::Stop => Formula::eventually_always(Predicate::InStandstill.atom()),
    }
}

pub fn lat_formula(lat: Lat, ctx: &LaneContext) -> Result<Formula> {
    let missing = |side: Side| Error::MissingAdjacentLane { lane: ctx.current, side: side.name() };
    Ok(match lat {
        Lat::FollowLane => Formula::globally(Predicate::InLane(ctx.current).atom()),
        Lat::LeftLane => Formula::eventually_always(Predicate::InLane(ctx.left.ok_or(missing(Side::Left))?).atom()),
        Lat::RightLane => {
            Formula::eventually_always(Predicate::InLane(ctx.right.ok_or(missing(Side::Right))?).atom())
        }
    })
}

pub fn action_to_ltlf(pair: ActionPair, ctx: &LaneContext) -> Result<Formula> {
    Ok(Formula::and(lon_formula(pair.lon), lat_formula(pair.lat, ctx)?))
}

/// Labels a trajectory with the action pair whose formula its trace
/// satisfies. Ties go to STOP, DECELERATE, ACCELERATE, KEEP in that order
/// and to a lane change over FOLLOW-LANE. Position `k` carries the
/// acceleration applied from step `k`.
pub fn label_trajectory(traj: &[EgoState], scenario: &Scenario) -> Result<ActionPair> {
    if traj.len() < 2 {
        return Err(Error::NoLabel("trajectory shorter than two states".into()));
    }
    let ctx = LaneContext::of(&scenario.network, &traj[0])?;
    let steps: Vec<WorldStep> = traj
        .iter()
        .enumerate()
        .map(|(k, e)| WorldStep { step: k, ego: *e, obstacles: vec![], lane_ctx: ctx, fail_safe_active: false })
        .collect();
    let holds = |f: &Formula| -> Result<bool> {
        let trace = trace_of(f, &steps, &scenario.rule_config, scenario)?;
        evaluate_trace(f, &trace)
    };
    let mut lon = None;
    for l in [Lon::Stop, Lon::Decelerate, Lon::Accelerate, Lon::Keep] {
        if holds(&lon_formula(l))? {
            lon = Some(l);
            break;
        }
    }
    let lon = lon.ok_or_else(|| Error::NoLabel("no longitudinal formula holds".into()))?;
    let mut lat = None;
    for l in [Lat::LeftLane, Lat::RightLane, Lat::FollowLane] {
        match lat_formula(l, &ctx) {
            Ok(f) if holds(&f)? => {
                lat = Some(l);
                break;
            }
            _ => {}
        }
    }
    let lat = lat.ok_or_else(|| Error::NoLabel("no lateral formula holds".into()))?;
    Ok(ActionPair { lon, lat })
}
