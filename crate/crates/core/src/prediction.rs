//! Obstacle occupancy prediction: most-likely (recorded or constant
//! velocity) and set-based (bounded acceleration, lane following).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scenario::{occupancy_of, Lane, Obstacle, ObstacleKind, Reference, Scenario, Side, DEFAULT_PROJECTION_BAND};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetPredictionParams {
    pub a_max_abs: f64,
    pub v_max_obs: f64,
    pub lane_following_only: bool,
}

impl Default for SetPredictionParams {
    fn default() -> Self {
        SetPredictionParams { a_max_abs: 12.0, v_max_obs: 30.0, lane_following_only: true }
    }
}

impl SetPredictionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_max_abs > 0.0) {
            return Err(Error::Invariant("prediction: a_max_abs > 0".into()));
        }
        if !(self.v_max_obs > 0.0) {
            return Err(Error::Invariant("prediction: v_max_obs > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    MostLikely,
    SetBased,
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most-likely" => Ok(PredictionMode::MostLikely),
            "set-based" => Ok(PredictionMode::SetBased),
            _ => Err(Error::Parse(format!("unknown prediction mode `{s}`"))),
        }
    }
}

/// Predicted occupancy of one obstacle at steps `0..=h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancySequence {
    pub obstacle_id: u32,
    pub mode: PredictionMode,
    /// Convex polygons per step.
    pub steps: Vec<Vec<Vec<Point>>>,
    /// Bounds of the speed along the obstacle's lane per step.
    pub speeds: Vec<[f64; 2]>,
}

impl OccupancySequence {
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    /// Polygons at step `k`, holding the last step beyond the horizon.
    pub fn at(&self, k: usize) -> &[Vec<Point>] {
        &self.steps[k.min(self.steps.len() - 1)]
    }
}

fn obstacle_lane<'a>(obstacle: &Obstacle, scenario: &'a Scenario) -> Result<&'a Lane> {
    let p = obstacle.current_state().position;
    scenario.network.current_lane(p)
}

pub fn most_likely(obstacle: &Obstacle, scenario: &Scenario, h: usize) -> OccupancySequence {
    let poly = |p: Point, theta: f64| occupancy_of(p, theta, obstacle.shape, Reference::Center);
    if let Some(traj) = &obstacle.trajectory {
        let at = |k: usize| traj[k.min(traj.len() - 1)];
        return OccupancySequence {
            obstacle_id: obstacle.id,
            mode: PredictionMode::MostLikely,
            steps: (0..=h).map(|k| vec![poly(at(k).position, at(k).theta)]).collect(),
            speeds: (0..=h).map(|k| [at(k).v, at(k).v]).collect(),
        };
    }
    let st = obstacle.current_state();
    let moving = obstacle.kind != ObstacleKind::Static && st.v > 0.0;
    let lane = obstacle_lane(obstacle, scenario).ok();
    let steps = (0..=h)
        .map(|k| {
            let t = k as f64 * scenario.dt;
            match lane {
                Some(lane) if moving => {
                    let (s, d) = lane.project(st.position, DEFAULT_PROJECTION_BAND).unwrap_or((0.0, 0.0));
                    let s_k = s + st.v * t;
                    let rel = st.theta - lane.heading_at(s);
                    vec![poly(lane.point_at(s_k, d), lane.heading_at(s_k) + rel)]
                }
                _ if moving => {
                    let dir = Point::new(st.theta.cos(), st.theta.sin());
                    vec![poly(st.position.add(dir.scale(st.v * t)), st.theta)]
                }
                _ => vec![poly(st.position, st.theta)],
            }
        })
        .collect();
    let v = if moving { st.v } else { 0.0 };
    OccupancySequence {
        obstacle_id: obstacle.id,
        mode: PredictionMode::MostLikely,
        steps,
        speeds: vec![[v, v]; h + 1],
    }
}

/// Bounds on distance traveled and speed after time `t` starting at `v0`
/// with `|a| <= a_max`, speed kept in `[0, v_cap]`.
pub fn travel_bounds(v0: f64, t: f64, a_max: f64, v_cap: f64) -> ([f64; 2], [f64; 2]) {
    let v_cap = v_cap.max(v0);
    let t_acc = (v_cap - v0) / a_max;
    let (s_hi, v_hi) = if t <= t_acc {
        (v0 * t + 0.5 * a_max * t * t, v0 + a_max * t)
    } else {
        (v0 * t_acc + 0.5 * a_max * t_acc * t_acc + v_cap * (t - t_acc), v_cap)
    };
    let t_stop = v0 / a_max;
    let (s_lo, v_lo) = if t <= t_stop {
        (v0 * t - 0.5 * a_max * t * t, v0 - a_max * t)
    } else {
        (v0 * v0 / (2.0 * a_max), 0.0)
    };
    ([s_lo, s_hi], [v_lo, v_hi])
}

/// Longest piece of a sampled lane-aligned polygon, in meters.
const SAMPLE_LENGTH: f64 = 5.0;

fn lane_strip(lane: &Lane, s_lo: f64, s_hi: f64, d_lo: f64, d_hi: f64) -> Vec<Vec<Point>> {
    let n = ((s_hi - s_lo) / SAMPLE_LENGTH).ceil().max(1.0) as usize;
    let cut: Vec<f64> = (0..=n).map(|i| s_lo + (s_hi - s_lo) * i as f64 / n as f64).collect();
    cut.windows(2)
        .map(|w| {
            vec![
                lane.point_at(w[0], d_lo),
                lane.point_at(w[1], d_lo),
                lane.point_at(w[1], d_hi),
                lane.point_at(w[0], d_hi),
            ]
        })
        .collect()
}

/// Over-approximation of every occupancy reachable under `|a| <= a_max_abs`
/// while following the current lane.
pub fn set_based(
    obstacle: &Obstacle,
    scenario: &Scenario,
    h: usize,
    params: &SetPredictionParams,
) -> Result<OccupancySequence> {
    let st = obstacle.current_state();
    let lane = obstacle_lane(obstacle, scenario)?;
    let (s0, d0) = lane.project(st.position, DEFAULT_PROJECTION_BAND)?;
    let rel = st.theta - lane.heading_at(s0);
    let (sin, cos) = rel.sin_cos();
    let shape = obstacle.shape;
    let half_s = (shape.length * cos.abs() + shape.width * sin.abs()) / 2.0;
    let half_d = (shape.length * sin.abs() + shape.width * cos.abs()) / 2.0;
    let v0 = (st.v * cos).max(0.0);
    let a_max = if obstacle.kind == ObstacleKind::Static { 0.0 } else { params.a_max_abs };

    let half_width = |s: f64| {
        let (l, r) = lane.boundaries_at(s);
        l.dist(r) / 2.0
    };
    let widen = |side: Side, s: f64| -> f64 {
        if params.lane_following_only {
            return 0.0;
        }
        match scenario.network.adjacent_lane(lane, s, side) {
            Some((adj, true)) => {
                let p = lane.point_at(s, 0.0);
                adj.project(p, f64::INFINITY)
                    .map(|(sa, _)| {
                        let (l, r) = adj.boundaries_at(sa);
                        l.dist(r)
                    })
                    .unwrap_or(0.0)
            }
            _ => 0.0,
        }
    };

    let mut steps = Vec::with_capacity(h + 1);
    let mut speeds = Vec::with_capacity(h + 1);
    for k in 0..=h {
        let t = k as f64 * scenario.dt;
        let ([lo, hi], v) = if a_max > 0.0 {
            travel_bounds(v0, t, a_max, params.v_max_obs)
        } else {
            ([0.0, 0.0], [0.0, 0.0])
        };
        let s_lo = s0 + lo - half_s;
        let s_hi = s0 + hi + half_s;
        let s_mid = (s_lo + s_hi) / 2.0;
        let hw = half_width(s_mid);
        let d_lo = (-hw).min(d0 - half_d) - widen(Side::Right, s_mid);
        let d_hi = hw.max(d0 + half_d) + widen(Side::Left, s_mid);
        steps.push(lane_strip(lane, s_lo, s_hi, d_lo, d_hi));
        speeds.push(v);
    }
    Ok(OccupancySequence { obstacle_id: obstacle.id, mode: PredictionMode::SetBased, steps, speeds })
}

/// Predictions for all obstacles of a scenario.
pub fn predict_all(scenario: &Scenario, h: usize, mode: PredictionMode) -> Result<Vec<OccupancySequence>> {
    scenario
        .obstacles
        .iter()
        .map(|o| match mode {
            PredictionMode::MostLikely => Ok(most_likely(o, scenario, h)),
            PredictionMode::SetBased => set_based(o, scenario, h, &scenario.prediction),
        })
        .collect()
}
