//! Scenario builders shared by the command-line tests.

#![allow(dead_code)]

use actguard::geometry::Point;
use actguard::prediction::SetPredictionParams;
use actguard::rules::RuleConfig;
use actguard::scenario::{
    straight_road, Ego, EgoParams, EgoState, IdmParams, LaneletNetwork, Obstacle, ObstacleKind, RoadType, Scenario,
    Shape, VehicleState,
};

pub fn car(id: u32, x: f64, y: f64, v: f64) -> Obstacle {
    Obstacle {
        id,
        kind: ObstacleKind::Car,
        shape: Shape { length: 4.0, width: 2.0 },
        state: Some(VehicleState { position: Point::new(x, y), v, ..Default::default() }),
        trajectory: None,
        behavior: Some(IdmParams::default()),
    }
}

pub fn road(lanes: usize, ego: (f64, f64, f64), obstacles: Vec<Obstacle>, dt: f64, h: usize, road: RoadType) -> Scenario {
    let network = LaneletNetwork::new(straight_road(lanes, 4.0, 0.0, 1500.0, Some(33.33))).unwrap();
    let ego = Ego {
        state: EgoState { position: Point::new(ego.0, ego.1), v: ego.2, ..Default::default() },
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
        road,
    )
    .unwrap()
}

pub fn empty_road() -> Scenario {
    road(2, (20.0, 0.0, 15.0), vec![], 0.2, 8, RoadType::Highway)
}

/// Ego at 15 m/s in the left of two lanes, a stopped car 30 m ahead
/// bumper to bumper, 25 steps of 0.1 s.
pub fn blocked_leader() -> Scenario {
    let sc = road(2, (20.0, 4.0, 15.0), vec![], 0.1, 25, RoadType::Urban);
    let front = 20.0 + sc.ego.front_extent();
    road(2, (20.0, 4.0, 15.0), vec![car(1, front + 30.0 + 2.0, 4.0, 0.0)], 0.1, 25, RoadType::Urban)
}

/// Three lanes, five moving cars around the ego, 30 steps of 0.2 s.
pub fn busy_highway() -> Scenario {
    let obstacles = vec![
        car(1, 260.0, 4.0, 20.0),
        car(2, 150.0, 4.0, 24.0),
        car(3, 230.0, 0.0, 22.0),
        car(4, 180.0, 8.0, 25.0),
        car(5, 300.0, 8.0, 18.0),
    ];
    road(3, (200.0, 4.0, 22.0), obstacles, 0.2, 30, RoadType::Highway)
}
