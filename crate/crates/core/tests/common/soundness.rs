//! Sampling oracle for the reachable sets: random admissible rollouts in the
//! decoupled lane-frame model, filtered by collision, drivable area and the
//! formula, must stay inside the surviving boxes at every step.

#![allow(dead_code)]

use std::collections::BTreeMap;

use actguard::actions::{action_to_ltlf, ActionPair, Lat, Lon};
use actguard::geometry::Point;
use actguard::ltlf::{conjoin, evaluate_trace, Assignment, Formula, Trace};
use actguard::prediction::{predict_all, OccupancySequence, PredictionMode, SetPredictionParams};
use actguard::reach::{verify, ReachResult};
use actguard::rules::{rule_formulas, safe_distance, LaneContext, Predicate, RuleConfig, RuleId};
use actguard::scenario::{
    straight_road, Ego, EgoParams, EgoState, IdmParams, LaneletNetwork, Obstacle, ObstacleKind, RoadType,
    Scenario, Shape, VehicleState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub name: &'static str,
    pub scenario: Scenario,
    pub pair: ActionPair,
    pub rules: Vec<RuleId>,
    pub mode: PredictionMode,
    pub h: usize,
    pub lon: (f64, f64),
    pub lat: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoundnessReport {
    pub fixture: &'static str,
    pub verified: bool,
    pub tried: usize,
    pub accepted: usize,
    pub escapes: usize,
}

fn car(id: u32, x: f64, y: f64, v: f64) -> Obstacle {
    Obstacle {
        id,
        kind: if v == 0.0 { ObstacleKind::Static } else { ObstacleKind::Car },
        shape: Shape { length: 4.0, width: 2.0 },
        state: Some(VehicleState { position: Point::new(x, y), v, ..Default::default() }),
        trajectory: None,
        behavior: Some(IdmParams::default()),
    }
}

fn scenario(lanes: usize, ego_y: f64, v: f64, obstacles: Vec<Obstacle>, dt: f64, h: usize) -> Scenario {
    let network = LaneletNetwork::new(straight_road(lanes, 4.0, 0.0, 1000.0, Some(33.33))).unwrap();
    let ego = Ego {
        state: EgoState { position: Point::new(20.0, ego_y), v, ..Default::default() },
        shape: Shape { length: 4.0, width: 2.0 },
        params: EgoParams::default(),
        rear_axle_offset: None,
    };
    Scenario::build(
        network,
        ego,
        obstacles,
        dt,
        h,
        "DEU".into(),
        vec![],
        RuleConfig::default(),
        SetPredictionParams::default(),
        RoadType::Highway,
    )
    .unwrap()
}

/// Five fixtures covering free driving, a blocked lane, a lane change,
/// the safe-distance rule and all rules together.
pub fn fixtures() -> Vec<Fixture> {
    let front = 20.0 + 3.0;
    vec![
        Fixture {
            name: "empty-keep-follow",
            scenario: scenario(2, 0.0, 15.0, vec![], 0.2, 8),
            pair: ActionPair::new(Lon::Keep, Lat::FollowLane),
            rules: vec![],
            mode: PredictionMode::SetBased,
            h: 8,
            lon: (-0.2, 0.2),
            lat: (-1.0, 1.0),
        },
        Fixture {
            name: "blocked-decelerate",
            scenario: scenario(2, 4.0, 15.0, vec![car(1, front + 32.0, 4.0, 0.0)], 0.1, 25),
            pair: ActionPair::new(Lon::Decelerate, Lat::FollowLane),
            rules: vec![],
            mode: PredictionMode::SetBased,
            h: 25,
            lon: (-6.0, -0.2),
            lat: (-0.5, 0.5),
        },
        Fixture {
            name: "left-change-past-slow-leader",
            scenario: scenario(2, 0.0, 20.0, vec![car(1, front + 27.0, 0.0, 12.0), car(2, 2.0, 4.0, 15.0)], 0.2, 8),
            pair: ActionPair::new(Lon::Keep, Lat::LeftLane),
            rules: vec![],
            mode: PredictionMode::SetBased,
            h: 8,
            lon: (-0.2, 0.2),
            lat: (0.0, 4.0),
        },
        Fixture {
            name: "safe-distance-follow",
            scenario: scenario(1, 0.0, 18.0, vec![car(1, front + 52.0, 0.0, 20.0)], 0.2, 8),
            pair: ActionPair::new(Lon::Keep, Lat::FollowLane),
            rules: vec![RuleId::SafeDistance],
            mode: PredictionMode::MostLikely,
            h: 8,
            lon: (-0.2, 0.2),
            lat: (-0.5, 0.5),
        },
        Fixture {
            name: "all-rules-decelerate",
            scenario: scenario(2, 0.0, 20.0, vec![car(1, front + 70.0, 0.0, 15.0)], 0.2, 8),
            pair: ActionPair::new(Lon::Decelerate, Lat::FollowLane),
            rules: RuleId::ALL.to_vec(),
            mode: PredictionMode::MostLikely,
            h: 8,
            lon: (-2.0, -0.2),
            lat: (-0.5, 0.5),
        },
    ]
}

#[derive(Clone, Copy)]
struct State {
    s: f64,
    vs: f64,
    d: f64,
    vd: f64,
}

#[derive(Clone)]
struct ObsBox {
    s_lo: f64,
    s_hi: f64,
    d_lo: f64,
    d_hi: f64,
}

struct Frame {
    boxes: Vec<Vec<(u32, ObsBox)>>,
    speeds: BTreeMap<u32, Vec<f64>>,
}

fn frame(sc: &Scenario, occ: &[OccupancySequence], h: usize) -> Frame {
    let lane = sc.ego_lane();
    let mut boxes = vec![Vec::new(); h + 1];
    let mut speeds = BTreeMap::new();
    for o in occ {
        for (k, slot) in boxes.iter_mut().enumerate() {
            for poly in o.at(k) {
                let pts: Vec<(f64, f64)> = poly.iter().map(|p| lane.project(*p, f64::INFINITY).unwrap()).collect();
                let f = |g: fn(&(f64, f64)) -> f64, min: bool| {
                    pts.iter().map(g).fold(if min { f64::INFINITY } else { f64::NEG_INFINITY }, |a, b| if min { a.min(b) } else { a.max(b) })
                };
                slot.push((
                    o.obstacle_id,
                    ObsBox { s_lo: f(|p| p.0, true), s_hi: f(|p| p.0, false), d_lo: f(|p| p.1, true), d_hi: f(|p| p.1, false) },
                ));
            }
        }
        speeds.insert(o.obstacle_id, (0..=h).map(|k| o.speeds[k.min(o.speeds.len() - 1)][0]).collect());
    }
    Frame { boxes, speeds }
}

fn advance(x: State, a: f64, a_lat: f64, dt: f64, v_max: f64) -> State {
    let cap = v_max.max(x.vs);
    let (s, vs) = if a < 0.0 && x.vs + a * dt < 0.0 {
        (x.s + x.vs * x.vs / (2.0 * -a), 0.0)
    } else if a > 0.0 && x.vs + a * dt > cap {
        let t1 = (cap - x.vs) / a;
        (x.s + x.vs * t1 + 0.5 * a * t1 * t1 + cap * (dt - t1), cap)
    } else {
        (x.s + x.vs * dt + 0.5 * a * dt * dt, x.vs + a * dt)
    };
    State { s, vs, d: x.d + x.vd * dt + 0.5 * a_lat * dt * dt, vd: x.vd + a_lat * dt }
}

/// Pointwise atom values under the verification semantics: obstacles are
/// represented by the rear edge and slowest speed of their predicted set.
fn assignment(
    atoms: &[String],
    sc: &Scenario,
    fr: &Frame,
    k: usize,
    x: State,
    a: f64,
    lane_centers: &BTreeMap<u32, f64>,
) -> Assignment {
    let ego = &sc.ego;
    let p = &ego.params;
    let rc = &sc.rule_config;
    let hw = ego.shape.width / 2.0;
    let front = ego.front_extent();
    let view = |id: u32| {
        let bs: Vec<&ObsBox> = fr.boxes[k].iter().filter(|(i, _)| *i == id).map(|(_, b)| b).collect();
        (!bs.is_empty()).then(|| {
            let s_rear = bs.iter().map(|b| b.s_lo).fold(f64::INFINITY, f64::min);
            let d_lo = bs.iter().map(|b| b.d_lo).fold(f64::INFINITY, f64::min);
            let d_hi = bs.iter().map(|b| b.d_hi).fold(f64::NEG_INFINITY, f64::max);
            (s_rear, d_lo, d_hi, fr.speeds[&id][k])
        })
    };
    atoms
        .iter()
        .map(|name| {
            let v = match Predicate::parse(name).unwrap() {
                Predicate::AccWithinLimit => a.abs() <= p.a_lim,
                Predicate::AccAboveLimit => a > p.a_lim,
                Predicate::AccBelowNegLimit => a < -p.a_lim,
                Predicate::BrakesAbruptly => a < -rc.a_abrupt,
                Predicate::BrakingJustification => false,
                Predicate::InStandstill => x.vs <= p.v_err,
                Predicate::InLane(l) => {
                    let c = lane_centers[&l];
                    x.d + hw >= c - 2.0 && x.d - hw <= c + 2.0
                }
                Predicate::Precedes(id) => view(id).is_some_and(|(s_rear, d_lo, d_hi, _)| {
                    x.d - hw < d_hi && x.d + hw > d_lo && s_rear > x.s + front
                }),
                Predicate::KeepsSafeDistance(id) => view(id).is_some_and(|(s_rear, _, _, v_obs)| {
                    s_rear - (x.s + front) > safe_distance(x.vs, v_obs, p, rc.a_obs_min).unwrap()
                }),
                Predicate::KeepsLaneSpeedLimit => x.vs <= 33.33,
                Predicate::KeepsFovSpeedLimit => x.vs <= rc.fov_speed_cap,
                Predicate::KeepsTypeSpeedLimit => x.vs <= rc.type_speed_cap,
                Predicate::KeepsBrakingSpeedLimit => x.vs <= rc.braking_speed_cap,
            };
            (name.clone(), v)
        })
        .collect()
}

fn collides(fr: &Frame, k: usize, x: State, front: f64, back: f64, hw: f64) -> bool {
    fr.boxes[k].iter().any(|(_, b)| {
        x.s + front > b.s_lo && x.s - back < b.s_hi && x.d + hw > b.d_lo && x.d - hw < b.d_hi
    })
}

fn inside(result: &ReachResult, k: usize, x: State) -> bool {
    result.nodes[k].iter().any(|n| n.state.contains(x.s, x.vs, x.d, x.vd, 1e-7))
}

/// Samples rollouts until `n` pass the filters or `max_tries` is reached,
/// and counts those that leave the surviving sets.
pub fn check(fx: &Fixture, n: usize, max_tries: usize, seed: u64) -> SoundnessReport {
    let sc = &fx.scenario;
    let h = fx.h;
    let occ = predict_all(sc, h, fx.mode).unwrap();
    let ids: Vec<u32> = sc.obstacles.iter().map(|o| o.id).collect();
    let rules = rule_formulas(&fx.rules, &ids);
    let outcome = verify(sc, fx.pair, &rules, &occ, h).unwrap();
    let ctx = LaneContext::of(&sc.network, &sc.ego.state).unwrap();
    let mut parts = vec![action_to_ltlf(fx.pair, &ctx).unwrap()];
    parts.extend(rules);
    let formula: Formula = conjoin(parts).unwrap();
    let atoms: Vec<String> = formula.atoms().into_iter().collect();

    // Lane centers in the ego lane frame; all fixtures are straight roads
    // with 4 m lanes whose ids count up leftwards from y = 0.
    let y0 = sc.ego_lane().point_at(0.0, 0.0).y;
    let lane_centers: BTreeMap<u32, f64> =
        sc.network.lanes.iter().map(|l| (l.id, l.point_at(0.0, 0.0).y - y0)).collect();
    let mut lanes_used = vec![ctx.current];
    lanes_used.extend(atoms.iter().filter_map(|a| a.strip_prefix("in_lane_")).map(|i| i.parse::<u32>().unwrap()));
    let hw = sc.ego.shape.width / 2.0;
    let lo = lanes_used.iter().map(|l| lane_centers[l] - 2.0).fold(f64::INFINITY, f64::min);
    let hi = lanes_used.iter().map(|l| lane_centers[l] + 2.0).fold(f64::NEG_INFINITY, f64::max);
    let d0 = sc.ego.state.d;
    let (d_min, d_max) = ((lo + hw).min(d0), (hi - hw).max(d0));

    let fr = frame(sc, &occ, h);
    let (front, back) = (sc.ego.front_extent(), sc.ego.back_extent());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tried, mut accepted, mut escapes) = (0, 0, 0);
    while accepted < n && tried < max_tries {
        tried += 1;
        let piecewise = rng.gen_bool(0.5);
        let mut a_lon = rng.gen_range(fx.lon.0..=fx.lon.1);
        let mut a_lat = rng.gen_range(fx.lat.0..=fx.lat.1);
        let mut x = State { s: sc.ego.state.s, vs: sc.ego.state.v, d: d0, vd: 0.0 };
        let mut states = vec![x];
        let mut trace = Vec::with_capacity(h + 1);
        let mut ok = !collides(&fr, 0, x, front, back, hw);
        for k in 0..=h {
            if piecewise {
                a_lon = rng.gen_range(fx.lon.0..=fx.lon.1);
                a_lat = rng.gen_range(fx.lat.0..=fx.lat.1);
            }
            trace.push(assignment(&atoms, sc, &fr, k, x, a_lon, &lane_centers));
            if k == h || !ok {
                break;
            }
            x = advance(x, a_lon, a_lat, sc.dt, sc.ego.params.v_max);
            ok &= x.d >= d_min && x.d <= d_max && !collides(&fr, k + 1, x, front, back, hw);
            states.push(x);
        }
        if !ok || !evaluate_trace(&formula, &Trace(trace)).unwrap() {
            continue;
        }
        accepted += 1;
        if states.iter().enumerate().any(|(k, x)| !inside(&outcome.result, k, *x)) {
            escapes += 1;
        }
    }
    SoundnessReport { fixture: fx.name, verified: outcome.verified, tried, accepted, escapes }
}
