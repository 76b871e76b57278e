use actguard::decision::Choice;
use actguard::actions::{Lat, Lon};
use actguard::geometry::{convex_intersects, oriented_rect, Point};
use actguard::prediction::SetPredictionParams;
use actguard::rules::{LaneContext, ObstacleSnapshot, RuleConfig, RuleId, WorldStep};
use actguard::scenario::{
    straight_road, Ego, EgoParams, EgoState, IdmParams, LaneletNetwork, Obstacle, ObstacleKind, RoadType,
    Scenario, Shape, VehicleState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

pub const LANE_WIDTH: f64 = 4.0;
pub const ROAD_LENGTH: f64 = 2000.0;
pub const SPEED_LIMIT: f64 = 33.33;
pub const VEHICLE_SHAPE: Shape = Shape { length: 4.5, width: 2.0 };
/// Obstacles farther than this from the ego are left out of decision scenarios.
pub const SCENARIO_RANGE: f64 = 150.0;
const EGO_X0: f64 = 300.0;

/// Low-level commands of the simulated ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaAction {
    LaneLeft,
    LaneRight,
    Faster,
    Slower,
    Idle,
    /// SLOWER with a larger speed step and a harder braking floor.
    FailSafe,
}

/// Lateral choice dominates; STOP has no highway counterpart.
pub fn map_action(choice: Choice) -> Result<MetaAction> {
    let pair = match choice {
        Choice::FailSafe => return Ok(MetaAction::FailSafe),
        Choice::Action(p) => p,
    };
    Ok(match (pair.lon, pair.lat) {
        (Lon::Stop, _) => return Err(SimError::UnsupportedAction(pair.to_string())),
        (_, Lat::LeftLane) => MetaAction::LaneLeft,
        (_, Lat::RightLane) => MetaAction::LaneRight,
        (Lon::Accelerate, Lat::FollowLane) => MetaAction::Faster,
        (Lon::Decelerate, Lat::FollowLane) => MetaAction::Slower,
        (Lon::Keep, Lat::FollowLane) => MetaAction::Idle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub speed_step: f64,
    pub tau: f64,
    pub a_bound: f64,
    pub v_cap: f64,
    pub fail_speed_step: f64,
    pub fail_tau: f64,
    pub fail_a_min: f64,
    /// Lateral proportional gain (1/s).
    pub k_lat: f64,
    /// Largest heading offset from the road direction (rad).
    pub max_heading: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            speed_step: 5.0,
            tau: 0.6,
            a_bound: 5.0,
            v_cap: 30.0,
            fail_speed_step: 15.0,
            fail_tau: 0.6,
            fail_a_min: -6.0,
            k_lat: 2.0,
            max_heading: 0.3,
        }
    }
}

/// Standard intelligent-driver-model acceleration, clamped to `[-8, max_accel]`.
pub fn idm_accel(gap: f64, v: f64, v_leader: f64, p: &IdmParams) -> Result<f64> {
    if gap <= 0.0 {
        return Err(SimError::NonPositiveGap(gap));
    }
    let dv = v - v_leader;
    let dynamic = v * p.time_headway + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt());
    let s_star = p.min_gap + dynamic.max(0.0);
    let a = p.max_accel * (1.0 - (v / p.desired_speed).powf(p.exponent) - (s_star / gap).powi(2));
    Ok(a.clamp(-8.0, p.max_accel))
}

/// A vehicle referenced at its geometric center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub heading: f64,
    pub a: f64,
    pub shape: Shape,
    pub idm: IdmParams,
}

impl Vehicle {
    pub fn polygon(&self) -> Vec<Point> {
        oriented_rect(Point::new(self.x, self.y), self.heading, self.shape.length, self.shape.width)
    }

    fn front(&self) -> f64 {
        self.x + self.shape.length / 2.0
    }

    fn rear(&self) -> f64 {
        self.x - self.shape.length / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub id: u32,
    pub lane_count: usize,
    pub density: u32,
}

impl Setting {
    /// The three evaluation settings: four lanes at density 2 and 3, five lanes at density 3.
    pub fn standard(id: u32) -> Option<Setting> {
        match id {
            1 => Some(Setting { id, lane_count: 4, density: 2 }),
            2 => Some(Setting { id, lane_count: 4, density: 3 }),
            3 => Some(Setting { id, lane_count: 5, density: 3 }),
            _ => None,
        }
    }

    /// Mean longitudinal spacing between spawned vehicles in one lane.
    pub fn spacing(&self) -> f64 {
        match self.density {
            0 | 1 => 80.0,
            2 => 60.0,
            _ => 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub setting: Setting,
    pub seed: u64,
    pub dt: f64,
    /// Physics substeps per policy step.
    pub substeps: usize,
    pub duration: usize,
    pub control: ControlParams,
}

impl EnvConfig {
    pub fn new(setting: Setting, seed: u64) -> Self {
        EnvConfig { setting, seed, dt: 0.2, substeps: 3, duration: 30, control: ControlParams::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HighwayEnv {
    pub config: EnvConfig,
    pub ego: Vehicle,
    pub obstacles: Vec<Vehicle>,
    pub step_index: usize,
    pub collision_step: Option<usize>,
    pub target_speed: f64,
    pub target_lane: usize,
    pub x_start: f64,
    #[serde(skip)]
    network: Option<LaneletNetwork>,
}

fn lane_center(i: usize) -> f64 {
    i as f64 * LANE_WIDTH
}

impl HighwayEnv {
    /// Seeded spawn: vehicles per lane spaced by the density class with
    /// ±20% jitter, initial speeds in [20, 25] m/s.
    pub fn new(config: EnvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.setting.lane_count;
        let spacing = config.setting.spacing();
        let ego_lane = rng.gen_range(0..n);
        let ego = Vehicle {
            id: 0,
            x: EGO_X0,
            y: lane_center(ego_lane),
            v: rng.gen_range(20.0..25.0),
            heading: 0.0,
            a: 0.0,
            shape: VEHICLE_SHAPE,
            idm: IdmParams::default(),
        };
        let mut obstacles = Vec::new();
        for lane in 0..n {
            let mut x = EGO_X0 - 150.0 + rng.gen_range(0.0..spacing);
            while x < EGO_X0 + 450.0 {
                let clear = lane != ego_lane || !(EGO_X0 - 25.0..EGO_X0 + 30.0).contains(&x);
                let v = rng.gen_range(20.0..25.0);
                let desired = rng.gen_range(21.0..27.0);
                if clear {
                    obstacles.push(Vehicle {
                        id: obstacles.len() as u32 + 1,
                        x,
                        y: lane_center(lane),
                        v,
                        heading: 0.0,
                        a: 0.0,
                        shape: VEHICLE_SHAPE,
                        idm: IdmParams { desired_speed: desired, ..IdmParams::default() },
                    });
                }
                x += spacing * rng.gen_range(0.8..1.2);
            }
        }
        Self::from_vehicles(config, ego, obstacles)
    }

    /// Environment from explicit vehicles, for hand-built fixtures.
    pub fn from_vehicles(config: EnvConfig, ego: Vehicle, obstacles: Vec<Vehicle>) -> Self {
        let target_lane = lane_index(ego.y, config.setting.lane_count);
        HighwayEnv {
            target_speed: ego.v,
            target_lane,
            x_start: ego.x,
            ego,
            obstacles,
            step_index: 0,
            collision_step: None,
            network: None,
            config,
        }
    }

    pub fn network(&mut self) -> &LaneletNetwork {
        let n = self.config.setting.lane_count;
        self.network.get_or_insert_with(|| {
            LaneletNetwork::new(straight_road(n, LANE_WIDTH, 0.0, ROAD_LENGTH, Some(SPEED_LIMIT)))
                .expect("straight road is well formed")
        })
    }

    pub fn terminated(&self) -> bool {
        self.collision_step.is_some() || self.step_index >= self.config.duration
    }

    pub fn traveled(&self) -> f64 {
        self.ego.x - self.x_start
    }

    fn apply(&mut self, meta: MetaAction) {
        let c = self.config.control;
        let n = self.config.setting.lane_count;
        let cur = lane_index(self.ego.y, n);
        let v = self.ego.v;
        // Follow commands keep an ongoing lane change; the fail-safe
        // settles in the lane holding the vehicle center.
        self.target_lane = match meta {
            MetaAction::LaneLeft => (cur + 1).min(n - 1),
            MetaAction::LaneRight => cur.saturating_sub(1),
            MetaAction::FailSafe => cur,
            _ => self.target_lane,
        };
        self.target_speed = match meta {
            MetaAction::Faster => (v + c.speed_step).min(c.v_cap),
            MetaAction::Slower => (v - c.speed_step).max(0.0),
            MetaAction::FailSafe => (v - c.fail_speed_step).max(0.0),
            MetaAction::Idle => v,
            MetaAction::LaneLeft | MetaAction::LaneRight => self.target_speed.min(c.v_cap),
        };
    }

    fn idm_leader(&self, i: usize) -> Option<(f64, f64)> {
        let me = &self.obstacles[i];
        let lane_y = me.y;
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |o: &Vehicle| {
            if o.x > me.x {
                let gap = o.rear() - me.front();
                if best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, o.v * o.heading.cos()));
                }
            }
        };
        for (j, o) in self.obstacles.iter().enumerate() {
            if j != i && (o.y - lane_y).abs() < 1e-6 {
                consider(o);
            }
        }
        let half = LANE_WIDTH / 2.0 + self.ego.shape.width / 2.0;
        if (self.ego.y - lane_y).abs() < half {
            consider(&self.ego);
        }
        best
    }

    /// One policy step: the meta-action is held for all physics substeps.
    pub fn step(&mut self, meta: MetaAction) -> Result<()> {
        if self.terminated() {
            return Err(SimError::Terminated);
        }
        self.apply(meta);
        let c = self.config.control;
        let h = self.config.dt / self.config.substeps as f64;
        let v_start = self.ego.v;
        for _ in 0..self.config.substeps {
            let accels: Vec<f64> = (0..self.obstacles.len())
                .map(|i| {
                    let o = &self.obstacles[i];
                    match self.idm_leader(i) {
                        Some((gap, vl)) => idm_accel(gap, o.v, vl, &o.idm).unwrap_or(-8.0),
                        None => idm_accel(f64::INFINITY, o.v, o.v, &o.idm).unwrap_or(0.0),
                    }
                })
                .collect();
            for (o, a) in self.obstacles.iter_mut().zip(accels) {
                let v1 = (o.v + a * h).max(0.0);
                o.x += 0.5 * (o.v + v1) * h;
                o.a = a;
                o.v = v1;
            }

            let (tau, lo) = if meta == MetaAction::FailSafe { (c.fail_tau, c.fail_a_min) } else { (c.tau, -c.a_bound) };
            let a = ((self.target_speed - self.ego.v) / tau).clamp(lo, c.a_bound);
            let v1 = (self.ego.v + a * h).max(0.0);
            let vy_max = v1 * c.max_heading.sin();
            let vy = (c.k_lat * (lane_center(self.target_lane) - self.ego.y)).clamp(-vy_max, vy_max);
            let heading = if v1 > 0.0 { (vy / v1).asin() } else { 0.0 };
            let dist = 0.5 * (self.ego.v + v1) * h;
            self.ego.x += dist * heading.cos();
            self.ego.y += dist * heading.sin();
            self.ego.heading = heading;
            self.ego.v = v1;

            let ego_poly = self.ego.polygon();
            if self.obstacles.iter().any(|o| (o.x - self.ego.x).abs() < 10.0 && convex_intersects(&ego_poly, &o.polygon())) {
                self.collision_step = Some(self.step_index);
                break;
            }
        }
        self.ego.a = (self.ego.v - v_start) / self.config.dt;
        self.step_index += 1;
        Ok(())
    }

    /// Current situation as a verification scenario. The ego reference
    /// point is the rear axle.
    pub fn scenario(&mut self, rules: &[RuleId], horizon: usize) -> Result<Scenario> {
        let e = &self.ego;
        let offset = e.shape.length / 4.0;
        let rear = Point::new(e.x - offset * e.heading.cos(), e.y - offset * e.heading.sin());
        let ego = Ego {
            state: EgoState { position: rear, v: e.v, theta: e.heading, a: e.a, ..Default::default() },
            shape: e.shape,
            params: EgoParams::default(),
            rear_axle_offset: None,
        };
        let x = e.x;
        let obstacles = self
            .obstacles
            .iter()
            .filter(|o| (o.x - x).abs() <= SCENARIO_RANGE)
            .map(|o| Obstacle {
                id: o.id,
                kind: ObstacleKind::Car,
                shape: o.shape,
                state: Some(VehicleState { position: Point::new(o.x, o.y), theta: o.heading, v: o.v, a: o.a, delta: 0.0 }),
                trajectory: None,
                behavior: Some(o.idm),
            })
            .collect();
        let dt = self.config.dt;
        let network = self.network().clone();
        Ok(Scenario::build(
            network,
            ego,
            obstacles,
            dt,
            horizon,
            "DEU".into(),
            rules.to_vec(),
            RuleConfig::default(),
            SetPredictionParams::default(),
            RoadType::Highway,
        )?)
    }
}

fn lane_index(y: f64, n: usize) -> usize {
    ((y / LANE_WIDTH).round().max(0.0) as usize).min(n - 1)
}

/// Snapshot of a scenario for the episode log.
pub fn world_step(scenario: &Scenario, step: usize, fail_safe_active: bool) -> Result<WorldStep> {
    Ok(WorldStep {
        step,
        ego: scenario.ego.state,
        obstacles: scenario
            .obstacles
            .iter()
            .map(|o| ObstacleSnapshot { id: o.id, state: o.current_state(), shape: o.shape })
            .collect(),
        lane_ctx: LaneContext::of(&scenario.network, &scenario.ego.state)?,
        fail_safe_active,
    })
}

/// Two-lane fixture with a slow leader close ahead of a fast ego vehicle
/// and traffic alongside in the other lane.
pub fn close_leader_env(seed: u64) -> HighwayEnv {
    let setting = Setting { id: 0, lane_count: 2, density: 3 };
    let car = |id, x, y, v: f64, desired| Vehicle {
        id,
        x,
        y,
        v,
        heading: 0.0,
        a: 0.0,
        shape: VEHICLE_SHAPE,
        idm: IdmParams { desired_speed: desired, ..IdmParams::default() },
    };
    let ego = car(0, EGO_X0, 0.0, 25.0, 25.0);
    let obstacles = vec![
        car(1, EGO_X0 + 25.0, 0.0, 12.0, 12.0),
        car(2, EGO_X0 - 2.0, LANE_WIDTH, 25.0, 25.0),
        car(3, EGO_X0 + 20.0, LANE_WIDTH, 25.0, 25.0),
    ];
    HighwayEnv::from_vehicles(EnvConfig::new(setting, seed), ego, obstacles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use actguard::actions::ActionPair;

    fn empty_env(lanes: usize, lane: usize, v: f64) -> HighwayEnv {
        let setting = Setting { id: 0, lane_count: lanes, density: 2 };
        let ego = Vehicle { id: 0, x: 100.0, y: lane_center(lane), v, heading: 0.0, a: 0.0, shape: VEHICLE_SHAPE, idm: IdmParams::default() };
        HighwayEnv::from_vehicles(EnvConfig::new(setting, 0), ego, vec![])
    }

    #[test]
    fn idm_examples() {
        let p = IdmParams::default();
        let eq = idm_accel(1e9, p.desired_speed, p.desired_speed, &p).unwrap();
        assert!(eq <= 0.0 && eq > -1e-6);
        assert!((idm_accel(1e9, 0.0, 0.0, &p).unwrap() - p.max_accel).abs() < 1e-9);
        assert!(idm_accel(20.0, 20.0, 10.0, &p).unwrap() < 0.0);
        assert!(matches!(idm_accel(0.0, 1.0, 1.0, &p), Err(SimError::NonPositiveGap(_))));
    }

    #[test]
    fn map_action_table() {
        let m = |lon, lat| map_action(Choice::Action(ActionPair::new(lon, lat))).unwrap();
        assert_eq!(m(Lon::Keep, Lat::FollowLane), MetaAction::Idle);
        assert_eq!(m(Lon::Decelerate, Lat::LeftLane), MetaAction::LaneLeft);
        assert_eq!(m(Lon::Accelerate, Lat::RightLane), MetaAction::LaneRight);
        assert_eq!(m(Lon::Accelerate, Lat::FollowLane), MetaAction::Faster);
        assert_eq!(m(Lon::Decelerate, Lat::FollowLane), MetaAction::Slower);
        assert_eq!(map_action(Choice::FailSafe).unwrap(), MetaAction::FailSafe);
        assert!(map_action(Choice::Action(ActionPair::new(Lon::Stop, Lat::FollowLane))).is_err());
    }

    #[test]
    fn idle_on_empty_road() {
        let mut env = empty_env(2, 0, 20.0);
        env.step(MetaAction::Idle).unwrap();
        assert!((env.ego.x - 104.0).abs() < 1e-9);
        assert_eq!(env.ego.y, 0.0);
    }

    #[test]
    fn lane_right_converges() {
        // After 2 s of repeated requests the ego has settled one lane over.
        let mut env = empty_env(2, 1, 20.0);
        for _ in 0..10 {
            env.step(MetaAction::LaneRight).unwrap();
        }
        assert!(env.ego.y.abs() < 0.3, "{}", env.ego.y);
        let mut env = empty_env(3, 2, 20.0);
        env.step(MetaAction::LaneRight).unwrap();
        for _ in 0..9 {
            env.step(MetaAction::Idle).unwrap();
        }
        assert!((env.ego.y - lane_center(1)).abs() < 0.3, "{}", env.ego.y);
    }

    #[test]
    fn forced_overlap_terminates() {
        let mut env = empty_env(1, 0, 10.0);
        env.obstacles.push(Vehicle { id: 1, x: 104.0, ..env.ego.clone() });
        env.obstacles[0].v = 0.0;
        env.step(MetaAction::Idle).unwrap();
        assert_eq!(env.collision_step, Some(0));
        assert!(env.terminated());
        assert!(matches!(env.step(MetaAction::Idle), Err(SimError::Terminated)));
    }

    #[test]
    fn spawn_is_valid_and_seeded() {
        for setting in [1, 2, 3].map(|i| Setting::standard(i).unwrap()) {
            for seed in 0..5 {
                let env = HighwayEnv::new(EnvConfig::new(setting, seed));
                let all: Vec<&Vehicle> = std::iter::once(&env.ego).chain(&env.obstacles).collect();
                for (i, a) in all.iter().enumerate() {
                    for b in &all[i + 1..] {
                        if (a.y - b.y).abs() < 1e-9 {
                            assert!((a.x - b.x).abs() > a.shape.length, "overlap at spawn");
                        }
                    }
                }
                let again = HighwayEnv::new(EnvConfig::new(setting, seed));
                assert_eq!(serde_json::to_string(&env).unwrap(), serde_json::to_string(&again).unwrap());
            }
        }
        assert!(Setting::standard(2).unwrap().spacing() < Setting::standard(1).unwrap().spacing());
    }

    #[test]
    fn scenario_uses_rear_axle() {
        let mut env = empty_env(2, 1, 20.0);
        let sc = env.scenario(&[], 8).unwrap();
        assert!((sc.ego.state.position.x - (100.0 - 4.5 / 4.0)).abs() < 1e-9);
        assert_eq!(sc.ego_lane().id, 2);
    }
}
