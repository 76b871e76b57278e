//! Lanelet road model, curvilinear frames, obstacles, and the scenario file.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{arclengths, convex_intersects, oriented_rect, point_in_polygon, polylines_intersect, Point};
use crate::prediction::SetPredictionParams;
use crate::rules::{RuleConfig, RuleId};

/// Lateral band around a centerline inside which projection is defined.
pub const DEFAULT_PROJECTION_BAND: f64 = 50.0;

/// Vertex-wise tolerance for two lanelet borders to count as shared.
pub const BORDER_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacentRef {
    pub id: u32,
    pub same_direction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lanelet {
    pub id: u32,
    pub left: Vec<Point>,
    pub right: Vec<Point>,
    #[serde(default)]
    pub successors: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacent_left: Option<AdjacentRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacent_right: Option<AdjacentRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<f64>,
}

impl Lanelet {
    /// Closed outline: left boundary followed by the reversed right boundary.
    pub fn polygon(&self) -> Vec<Point> {
        self.left.iter().chain(self.right.iter().rev()).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Chain of connected lanelets with a centerline-based curvilinear frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: u32,
    pub lanelets: Vec<u32>,
    pub centerline: Vec<Point>,
    pub arclengths: Vec<f64>,
    pub left: Vec<Point>,
    pub right: Vec<Point>,
    /// `(lanelet id, s_start, s_end)` along the centerline.
    spans: Vec<(u32, f64, f64)>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        *self.arclengths.last().unwrap_or(&0.0)
    }

    pub fn polygon(&self) -> Vec<Point> {
        self.left.iter().chain(self.right.iter().rev()).copied().collect()
    }

    /// Convex quadrilaterals between consecutive boundary vertices.
    pub fn quads(&self) -> impl Iterator<Item = [Point; 4]> + '_ {
        (0..self.left.len().saturating_sub(1))
            .map(|i| [self.right[i], self.right[i + 1], self.left[i + 1], self.left[i]])
    }

    /// Lanelet whose span covers arclength `s` (clamped to the lane).
    pub fn lanelet_at(&self, s: f64) -> u32 {
        self.spans
            .iter()
            .find(|(_, lo, hi)| s >= *lo && s <= *hi)
            .or_else(|| if s < 0.0 { self.spans.first() } else { self.spans.last() })
            .map(|(id, _, _)| *id)
            .unwrap_or(self.lanelets[0])
    }

    /// Nearest-point projection with endpoint clamping; ties go to the
    /// smaller arclength. `d` is positive left of the travel direction.
    pub fn project(&self, p: Point, band: f64) -> Result<(f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None; // (dist, s, d)
        for i in 0..self.centerline.len() - 1 {
            let a = self.centerline[i];
            let b = self.centerline[i + 1];
            let ab = b.sub(a);
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 { (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let foot = a.lerp(b, t);
            let dist = p.dist(foot);
            if best.is_none_or(|(bd, _, _)| dist < bd - 1e-12) {
                let s = self.arclengths[i] + t * len2.sqrt();
                let sign = if ab.cross(p.sub(foot)) < 0.0 { -1.0 } else { 1.0 };
                best = Some((dist, s, sign * dist));
            }
        }
        let (dist, s, d) = best.expect("lane has at least one segment");
        if dist > band {
            return Err(Error::OutOfBand { x: p.x, y: p.y, dist, band });
        }
        Ok((s, d))
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.centerline.len();
        match self.arclengths.partition_point(|&a| a <= s) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    /// Back-projection of curvilinear `(s, d)`; extrapolates past the ends.
    pub fn point_at(&self, s: f64, d: f64) -> Point {
        let i = self.segment_at(s);
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        let len = a.dist(b);
        let dir = b.sub(a).scale(1.0 / len);
        let normal = Point::new(-dir.y, dir.x);
        a.add(dir.scale(s - self.arclengths[i])).add(normal.scale(d))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        let d = self.centerline[i + 1].sub(self.centerline[i]);
        d.y.atan2(d.x)
    }

    /// Boundary points at arclength `s` as `(left, right)`, interpolated
    /// with the same segment parameter as the centerline.
    pub fn boundaries_at(&self, s: f64) -> (Point, Point) {
        let i = self.segment_at(s);
        let len = self.arclengths[i + 1] - self.arclengths[i];
        let t = (s - self.arclengths[i]) / len;
        (self.left[i].lerp(self.left[i + 1], t), self.right[i].lerp(self.right[i + 1], t))
    }
}

/// Lanelets plus the lanes assembled from their successor chains.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneletNetwork {
    pub lanelets: Vec<Lanelet>,
    pub lanes: Vec<Lane>,
}

fn borders_coincide(a: &[Point], b: &[Point]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.dist(*q) <= BORDER_TOLERANCE)
}

impl LaneletNetwork {
    pub fn new(lanelets: Vec<Lanelet>) -> Result<Self> {
        if lanelets.is_empty() {
            return Err(Error::Invariant("network has no lanelets".into()));
        }
        let by_id: BTreeMap<u32, &Lanelet> = lanelets.iter().map(|l| (l.id, l)).collect();
        if by_id.len() != lanelets.len() {
            return Err(Error::Invariant("duplicate lanelet ids".into()));
        }
        for l in &lanelets {
            if l.left.len() < 2 || l.right.len() < 2 {
                return Err(Error::Invariant(format!("lanelet {}: boundaries need at least 2 points", l.id)));
            }
            if l.left.len() != l.right.len() {
                return Err(Error::Invariant(format!("lanelet {}: boundaries have unequal point counts", l.id)));
            }
            if polylines_intersect(&l.left, &l.right) {
                return Err(Error::Invariant(format!("lanelet {}: left and right boundaries intersect", l.id)));
            }
            for s in &l.successors {
                if !by_id.contains_key(s) {
                    return Err(Error::DanglingReference { from: l.id, to: *s, field: "successors" });
                }
            }
            for (adj, field) in [(l.adjacent_left, "adjacent_left"), (l.adjacent_right, "adjacent_right")] {
                if let Some(a) = adj {
                    if !by_id.contains_key(&a.id) {
                        return Err(Error::DanglingReference { from: l.id, to: a.id, field });
                    }
                }
            }
        }
        for l in &lanelets {
            Self::check_adjacency(l, &by_id)?;
        }
        let lanes = Self::assemble_lanes(&lanelets, &by_id)?;
        Ok(LaneletNetwork { lanelets, lanes })
    }

    fn check_adjacency(l: &Lanelet, by_id: &BTreeMap<u32, &Lanelet>) -> Result<()> {
        for side in [Side::Left, Side::Right] {
            let adj = match side {
                Side::Left => l.adjacent_left,
                Side::Right => l.adjacent_right,
            };
            let Some(adj) = adj else { continue };
            let other = by_id[&adj.id];
            let (mine, back) = match side {
                Side::Left => (&l.left, other.adjacent_right),
                Side::Right => (&l.right, other.adjacent_left),
            };
            let symmetric = if adj.same_direction {
                back == Some(AdjacentRef { id: l.id, same_direction: true })
            } else {
                // opposite-direction neighbours face each other with the same side
                let back = match side {
                    Side::Left => other.adjacent_left,
                    Side::Right => other.adjacent_right,
                };
                back == Some(AdjacentRef { id: l.id, same_direction: false })
            };
            if !symmetric {
                return Err(Error::Invariant(format!(
                    "adjacency not symmetric: lanelet {} lists {} as adjacent_{} without the reverse entry",
                    l.id,
                    adj.id,
                    side.name()
                )));
            }
            let shared = if adj.same_direction {
                let theirs = match side {
                    Side::Left => &other.right,
                    Side::Right => &other.left,
                };
                borders_coincide(mine, theirs)
            } else {
                let theirs: Vec<Point> = match side {
                    Side::Left => other.left.iter().rev().copied().collect(),
                    Side::Right => other.right.iter().rev().copied().collect(),
                };
                borders_coincide(mine, &theirs)
            };
            if !shared {
                return Err(Error::Invariant(format!(
                    "lanelets {} and {} are declared adjacent but do not share a border",
                    l.id, adj.id
                )));
            }
        }
        Ok(())
    }

    fn assemble_lanes(lanelets: &[Lanelet], by_id: &BTreeMap<u32, &Lanelet>) -> Result<Vec<Lane>> {
        let has_pred: HashSet<u32> = lanelets.iter().flat_map(|l| l.successors.iter().copied()).collect();
        let mut starts: Vec<u32> = by_id.keys().copied().filter(|id| !has_pred.contains(id)).collect();
        if starts.is_empty() {
            starts.push(*by_id.keys().next().unwrap());
        }
        let mut chains = Vec::new();
        for s in starts {
            let mut stack = vec![vec![s]];
            while let Some(path) = stack.pop() {
                let last = by_id[path.last().unwrap()];
                let next: Vec<u32> = last.successors.iter().copied().filter(|n| !path.contains(n)).collect();
                if next.is_empty() {
                    chains.push(path);
                } else {
                    for n in next.into_iter().rev() {
                        let mut p = path.clone();
                        p.push(n);
                        stack.push(p);
                    }
                }
            }
        }
        chains
            .into_iter()
            .enumerate()
            .map(|(i, chain)| Self::build_lane(i as u32 + 1, chain, by_id))
            .collect()
    }

    fn build_lane(id: u32, chain: Vec<u32>, by_id: &BTreeMap<u32, &Lanelet>) -> Result<Lane> {
        let mut left: Vec<Point> = Vec::new();
        let mut right: Vec<Point> = Vec::new();
        let mut starts = Vec::new();
        for lid in &chain {
            let l = by_id[lid];
            starts.push(left.len().saturating_sub(1));
            for (p, q) in l.left.iter().zip(&l.right) {
                let dup = left.last().is_some_and(|lp: &Point| lp.dist(*p) < 1e-9)
                    && right.last().is_some_and(|rp: &Point| rp.dist(*q) < 1e-9);
                if !dup {
                    left.push(*p);
                    right.push(*q);
                }
            }
        }
        let centerline: Vec<Point> = left.iter().zip(&right).map(|(l, r)| l.lerp(*r, 0.5)).collect();
        let arc = arclengths(&centerline);
        if centerline.len() < 2 || arc.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invariant(format!("lane {id}: centerline arclengths not strictly increasing")));
        }
        let mut spans = Vec::new();
        for (k, lid) in chain.iter().enumerate() {
            let lo = arc[starts[k].min(arc.len() - 1)];
            let hi = if k + 1 < chain.len() { arc[starts[k + 1].min(arc.len() - 1)] } else { *arc.last().unwrap() };
            spans.push((*lid, lo, hi));
        }
        Ok(Lane { id, lanelets: chain, centerline, arclengths: arc, left, right, spans })
    }

    pub fn lanelet(&self, id: u32) -> Option<&Lanelet> {
        self.lanelets.iter().find(|l| l.id == id)
    }

    pub fn lane(&self, id: u32) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    /// All lanes whose outline contains the point, boundary inclusive.
    pub fn lanes_at(&self, p: Point) -> Vec<&Lane> {
        self.lanes.iter().filter(|l| point_in_polygon(p, &l.polygon(), 1e-9)).collect()
    }

    /// Lane containing `p` whose centerline is nearest.
    pub fn current_lane(&self, p: Point) -> Result<&Lane> {
        self.lanes_at(p)
            .into_iter()
            .map(|l| (l.project(p, f64::INFINITY).map(|(_, d)| d.abs()).unwrap_or(f64::INFINITY), l))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)))
            .map(|(_, l)| l)
            .ok_or(Error::OffRoad { x: p.x, y: p.y })
    }

    /// Lane adjacent to `lane` on `side`, read off the lanelet at arclength
    /// `s`, with its direction flag.
    pub fn adjacent_lane(&self, lane: &Lane, s: f64, side: Side) -> Option<(&Lane, bool)> {
        let lanelet = self.lanelet(lane.lanelet_at(s))?;
        let adj = match side {
            Side::Left => lanelet.adjacent_left,
            Side::Right => lanelet.adjacent_right,
        }?;
        self.lanes
            .iter()
            .find(|l| l.lanelets.contains(&adj.id))
            .map(|l| (l, adj.same_direction))
    }

    pub fn speed_limit_at(&self, lane: &Lane, s: f64) -> Option<f64> {
        self.lanelet(lane.lanelet_at(s)).and_then(|l| l.speed_limit)
    }
}

/// Kinematic state of any vehicle; `position` is the vehicle reference point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Point,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub delta: f64,
}

/// Ego state with curvilinear coordinates relative to its current lane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Point,
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub d: f64,
    pub v: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub a: f64,
}

impl EgoState {
    pub fn as_vehicle(&self) -> VehicleState {
        VehicleState { position: self.position, theta: self.theta, v: self.v, a: self.a, delta: self.delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub length: f64,
    pub width: f64,
}

/// Where a state's `position` sits on the vehicle body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Center,
    /// Rear axle, the given distance behind the geometric center.
    RearAxle(f64),
}

/// Oriented rectangle occupied by a vehicle in the given state.
pub fn occupancy_of(position: Point, theta: f64, shape: Shape, reference: Reference) -> Vec<Point> {
    let center = match reference {
        Reference::Center => position,
        Reference::RearAxle(offset) => position.add(Point::new(offset, 0.0).rotate(theta)),
    };
    oriented_rect(center, theta, shape.length, shape.width)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoParams {
    pub a_lon_range: [f64; 2],
    pub a_lat_range: [f64; 2],
    pub v_max: f64,
    pub a_min: f64,
    pub t_d: f64,
    pub a_lim: f64,
    pub v_err: f64,
}

impl Default for EgoParams {
    fn default() -> Self {
        EgoParams {
            a_lon_range: [-6.0, 6.0],
            a_lat_range: [-4.0, 4.0],
            v_max: 30.0,
            a_min: -6.0,
            t_d: 0.4,
            a_lim: 0.2,
            v_err: 0.1,
        }
    }
}

impl EgoParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.a_lon_range;
        let checks = [
            (lo < 0.0 && 0.0 < hi, "a_lon_range.min < 0 < a_lon_range.max"),
            (self.a_lat_range[0] < self.a_lat_range[1], "a_lat_range.min < a_lat_range.max"),
            (self.v_max > 0.0, "v_max > 0"),
            (self.a_min < 0.0, "a_min < 0"),
            (self.a_lim >= 0.0, "a_lim >= 0"),
            (self.v_err >= 0.0, "v_err >= 0"),
            (self.t_d >= 0.0, "t_d >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(Error::Invariant(format!("ego params: {what}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ego {
    pub state: EgoState,
    pub shape: Shape,
    #[serde(default)]
    pub params: EgoParams,
    /// Distance from the rear axle (the ego reference point) forward to
    /// the geometric center. Defaults to a quarter of the length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rear_axle_offset: Option<f64>,
}

impl Ego {
    pub fn axle_offset(&self) -> f64 {
        self.rear_axle_offset.unwrap_or(self.shape.length / 4.0)
    }

    /// Distance from the reference point to the front bumper.
    pub fn front_extent(&self) -> f64 {
        self.shape.length / 2.0 + self.axle_offset()
    }

    /// Distance from the reference point to the rear bumper.
    pub fn back_extent(&self) -> f64 {
        self.shape.length / 2.0 - self.axle_offset()
    }

    pub fn occupancy(&self, state: &EgoState) -> Vec<Point> {
        occupancy_of(state.position, state.theta, self.shape, Reference::RearAxle(self.axle_offset()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    Car,
    Truck,
    Static,
}

/// Intelligent-driver-model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams { desired_speed: 25.0, time_headway: 1.5, min_gap: 2.0, max_accel: 3.0, comfort_decel: 2.0, exponent: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: u32,
    pub kind: ObstacleKind,
    pub shape: Shape,
    /// Current state; required with `behavior`, implied by `trajectory[0]` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<VehicleState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<VehicleState>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<IdmParams>,
}

impl Obstacle {
    pub fn current_state(&self) -> VehicleState {
        self.trajectory
            .as_ref()
            .and_then(|t| t.first().copied())
            .or(self.state)
            .expect("validated obstacle has a state")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape.length > 0.0 && self.shape.width > 0.0) {
            return Err(Error::Invariant(format!("obstacle {}: shape dimensions must be > 0", self.id)));
        }
        match (&self.trajectory, &self.behavior) {
            (Some(t), None) if !t.is_empty() => Ok(()),
            (None, _) if self.state.is_some() => Ok(()),
            (None, _) => Err(Error::Invariant(format!("obstacle {}: needs a state or a trajectory", self.id))),
            _ => Err(Error::Invariant(format!(
                "obstacle {}: a trajectory excludes behavior parameters",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadType {
    Highway,
    Rural,
    #[default]
    Urban,
}

impl RoadType {
    pub fn name(self) -> &'static str {
        match self {
            RoadType::Highway => "highway",
            RoadType::Rural => "rural",
            RoadType::Urban => "urban",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkFile {
    lanelets: Vec<Lanelet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioFile {
    network: NetworkFile,
    ego: Ego,
    #[serde(default)]
    obstacles: Vec<Obstacle>,
    dt: f64,
    horizon: usize,
    #[serde(default = "default_country")]
    country: String,
    #[serde(default)]
    rules_enabled: Vec<RuleId>,
    #[serde(default)]
    rule_config: RuleConfig,
    #[serde(default)]
    prediction: SetPredictionParams,
    #[serde(default)]
    road_type: RoadType,
}

fn default_country() -> String {
    "DEU".into()
}

/// The world model consumed by every verification step. Immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: LaneletNetwork,
    pub ego: Ego,
    pub obstacles: Vec<Obstacle>,
    pub dt: f64,
    pub horizon: usize,
    pub country: String,
    pub rules_enabled: Vec<RuleId>,
    pub rule_config: RuleConfig,
    pub prediction: SetPredictionParams,
    pub road_type: RoadType,
}

impl Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = ScenarioFile::deserialize(deserializer)?;
        Scenario::from_file(file).map_err(serde::de::Error::custom)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            network: NetworkFile { lanelets: self.network.lanelets.clone() },
            ego: self.ego,
            obstacles: self.obstacles.clone(),
            dt: self.dt,
            horizon: self.horizon,
            country: self.country.clone(),
            rules_enabled: self.rules_enabled.clone(),
            rule_config: self.rule_config,
            prediction: self.prediction,
            road_type: self.road_type,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }

    fn from_file(f: ScenarioFile) -> Result<Self> {
        let network = LaneletNetwork::new(f.network.lanelets)?;
        Self::build(
            network,
            f.ego,
            f.obstacles,
            f.dt,
            f.horizon,
            f.country,
            f.rules_enabled,
            f.rule_config,
            f.prediction,
            f.road_type,
        )
    }

    /// Validates all invariants and fills the ego curvilinear coordinates.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        network: LaneletNetwork,
        mut ego: Ego,
        obstacles: Vec<Obstacle>,
        dt: f64,
        horizon: usize,
        country: String,
        rules_enabled: Vec<RuleId>,
        rule_config: RuleConfig,
        prediction: SetPredictionParams,
        road_type: RoadType,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Invariant("dt > 0".into()));
        }
        if horizon < 1 {
            return Err(Error::Invariant("horizon >= 1".into()));
        }
        if !(ego.shape.length > 0.0 && ego.shape.width > 0.0) {
            return Err(Error::Invariant("ego shape dimensions must be > 0".into()));
        }
        if ego.state.v < 0.0 {
            return Err(Error::Invariant("ego v >= 0".into()));
        }
        ego.params.validate()?;
        rule_config.validate()?;
        prediction.validate()?;
        for o in &obstacles {
            o.validate()?;
        }
        let lane = network.current_lane(ego.state.position).map_err(|_| {
            Error::Invariant("ego position does not project onto any lane".into())
        })?;
        let (s, d) = lane.project(ego.state.position, DEFAULT_PROJECTION_BAND)?;
        ego.state.s = s;
        ego.state.d = d;
        Ok(Scenario {
            network,
            ego,
            obstacles,
            dt,
            horizon,
            country,
            rules_enabled,
            rule_config,
            prediction,
            road_type,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Lane currently occupied by the ego vehicle.
    pub fn ego_lane(&self) -> &Lane {
        self.network.current_lane(self.ego.state.position).expect("validated on build")
    }

    pub fn obstacle(&self, id: u32) -> Option<&Obstacle> {
        self.obstacles.iter().find(|o| o.id == id)
    }
}

/// Occupancy of a lane intersects a convex polygon (lanelet disjunction).
pub fn polygon_touches_lane(poly: &[Point], lane: &Lane) -> bool {
    lane.quads().any(|q| convex_intersects(poly, &q))
}

/// Straight multi-lane road along +x; lane `i` (0 = rightmost) is centered
/// at `y = i * width`. Lanelet ids are `i + 1`.
pub fn straight_road(lane_count: usize, width: f64, x0: f64, x1: f64, speed_limit: Option<f64>) -> Vec<Lanelet> {
    let n_pts = 11;
    let xs: Vec<f64> = (0..n_pts).map(|k| x0 + (x1 - x0) * k as f64 / (n_pts - 1) as f64).collect();
    (0..lane_count)
        .map(|i| {
            let yc = i as f64 * width;
            let id = i as u32 + 1;
            Lanelet {
                id,
                left: xs.iter().map(|&x| Point::new(x, yc + width / 2.0)).collect(),
                right: xs.iter().map(|&x| Point::new(x, yc - width / 2.0)).collect(),
                successors: vec![],
                adjacent_left: (i + 1 < lane_count).then_some(AdjacentRef { id: id + 1, same_direction: true }),
                adjacent_right: (i > 0).then_some(AdjacentRef { id: id - 1, same_direction: true }),
                speed_limit,
            }
        })
        .collect()
}
