//! Trajectories synthesized to satisfy one action pair with wide margins.

#![allow(dead_code)]

use actguard::actions::{label_trajectory, ActionPair, Lat, Lon};
use actguard::geometry::Point;
use actguard::prediction::SetPredictionParams;
use actguard::rules::RuleConfig;
use actguard::scenario::{straight_road, Ego, EgoParams, EgoState, LaneletNetwork, RoadType, Scenario, Shape};
use rand::Rng;

/// Three 4 m lanes; the ego starts in the middle one at `y = 4`.
pub fn scenario() -> Scenario {
    let network = LaneletNetwork::new(straight_road(3, 4.0, 0.0, 2000.0, None)).unwrap();
    let ego = Ego {
        state: EgoState { position: Point::new(50.0, 4.0), v: 10.0, ..Default::default() },
        shape: Shape { length: 4.5, width: 2.0 },
        params: EgoParams::default(),
        rear_axle_offset: None,
    };
    Scenario::build(
        network,
        ego,
        vec![],
        0.2,
        10,
        "DEU".into(),
        vec![],
        RuleConfig::default(),
        SetPredictionParams::default(),
        RoadType::Urban,
    )
    .unwrap()
}

pub fn synthesize<R: Rng>(pair: ActionPair, sc: &Scenario, rng: &mut R) -> Vec<EgoState> {
    let p = &sc.ego.params;
    let dt = sc.dt;
    let n = rng.gen_range(10..=25);
    let (v0, accel): (f64, Box<dyn Fn(f64) -> f64>) = match pair.lon {
        Lon::Keep => {
            let a = rng.gen_range(-0.5..=0.5) * p.a_lim;
            (rng.gen_range(5.0..25.0), Box::new(move |_| a))
        }
        Lon::Accelerate => {
            let a = rng.gen_range(2.0 * p.a_lim..3.0);
            (rng.gen_range(0.0..20.0), Box::new(move |_| a))
        }
        Lon::Decelerate => {
            let a = -rng.gen_range(2.0 * p.a_lim..3.0);
            (-a * n as f64 * dt + rng.gen_range(2.0..10.0), Box::new(move |_| a))
        }
        Lon::Stop => {
            let b = rng.gen_range(1.0..4.0);
            let v0 = rng.gen_range(1.0..(b * (n - 3) as f64 * dt).max(1.5));
            (v0, Box::new(move |v: f64| if v > 0.0 { -(v / dt).min(b) } else { 0.0 }))
        }
    };
    let y0 = 4.0;
    let y1 = match pair.lat {
        Lat::FollowLane => y0,
        Lat::LeftLane => 8.0,
        Lat::RightLane => 0.0,
    };
    let noise = rng.gen_range(-0.25..0.25);
    let change_steps = rng.gen_range(4..=(n - 2).min(10));
    let start = rng.gen_range(0..=n - change_steps - 1);
    let y = |k: usize| {
        let t = ((k as f64 - start as f64) / change_steps as f64).clamp(0.0, 1.0);
        y0 + (y1 - y0) * t + noise * (k as f64 / n as f64)
    };
    let (mut x, mut v) = (50.0, v0);
    (0..n)
        .map(|k| {
            let a = accel(v);
            let st = EgoState { position: Point::new(x, y(k)), v, a, ..Default::default() };
            x += v * dt + 0.5 * a * dt * dt;
            v = (v + a * dt).max(0.0);
            st
        })
        .collect()
}

/// Returns the number of trajectories, out of `n` per pair, whose label
/// differs from the generating pair.
pub fn round_trip<R: Rng>(n: usize, rng: &mut R) -> (usize, Vec<String>) {
    let sc = scenario();
    let mut total = 0;
    let mut failures = Vec::new();
    for pair in ActionPair::all() {
        for _ in 0..n {
            total += 1;
            let traj = synthesize(pair, &sc, rng);
            match label_trajectory(&traj, &sc) {
                Ok(got) if got == pair => {}
                other => failures.push(format!("{pair}: {other:?}")),
            }
        }
    }
    (total, failures)
}
