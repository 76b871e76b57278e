//! Scenario descriptions, decision makers, response parsing and the ranked
//! verification loop.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::actions::{feasible_actions, ActionPair, FeasibleActions, Lat, Lon};
use crate::error::{Error, Result, SchemaViolation};
use crate::failsafe::{fail_safe_plan, is_invariably_safe, FailSafePlan};
use crate::prediction::{predict_all, PredictionMode};
use crate::reach::{verify_with, ReachConfig};
use crate::rules::{rule_formulas, safe_distance, LaneContext, RuleId};
use crate::scenario::Scenario;

/// Obstacles farther than this along the ego lane are left out of prompts.
pub const RELEVANCE_RANGE: f64 = 100.0;
pub const HISTORY_LEN: usize = 5;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub ego: String,
    pub rules: String,
    pub obstacles: String,
    pub kappa: usize,
    pub user_command: Option<String>,
    pub previous_actions: Vec<ActionPair>,
}

impl PromptBundle {
    /// The three context blocks joined as one user message.
    pub fn user_message(&self) -> String {
        format!("{}\n\n{}\n\n{}", self.ego, self.rules, self.obstacles)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescribeConfig {
    pub kappa: usize,
    pub command: Option<String>,
    /// Adds time-to-collision to each obstacle line.
    pub criticality: bool,
    pub previous_actions: Vec<ActionPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneRelation {
    Same,
    Left,
    Right,
    Other,
}

/// An obstacle relative to the ego vehicle along the ego lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleRelation {
    pub id: u32,
    pub lane: LaneRelation,
    pub same_direction: bool,
    /// Bumper-to-bumper gap, positive ahead, zero when overlapping in `s`.
    pub ds: f64,
    /// Speed of the obstacle along the ego lane.
    pub v_along: f64,
    /// Time until the gap closes at current speeds, infinite if it does not.
    pub ttc: f64,
}

pub fn obstacle_relations(scenario: &Scenario) -> Result<Vec<ObstacleRelation>> {
    let ego = &scenario.ego;
    let lane = scenario.ego_lane();
    let ctx = LaneContext::of(&scenario.network, &ego.state)?;
    let e_center = ego.state.s + ego.axle_offset();
    let e_half = ego.shape.length / 2.0;
    let e_v = ego.state.v * (ego.state.theta - lane.heading_at(ego.state.s)).cos();
    let mut out = Vec::new();
    for o in &scenario.obstacles {
        let st = o.current_state();
        let (s, _) = lane.project(st.position, f64::INFINITY)?;
        let o_half = o.shape.length / 2.0;
        let ds = if s - o_half > e_center + e_half {
            s - o_half - (e_center + e_half)
        } else if s + o_half < e_center - e_half {
            s + o_half - (e_center - e_half)
        } else {
            0.0
        };
        let cos = (st.theta - lane.heading_at(s)).cos();
        let v_along = st.v * cos;
        let lanes: Vec<u32> = scenario.network.lanes_at(st.position).iter().map(|l| l.id).collect();
        let rel = if lanes.contains(&ctx.current) {
            LaneRelation::Same
        } else if ctx.left.is_some_and(|l| lanes.contains(&l)) {
            LaneRelation::Left
        } else if ctx.right.is_some_and(|l| lanes.contains(&l)) {
            LaneRelation::Right
        } else {
            LaneRelation::Other
        };
        let closing = if ds >= 0.0 { e_v - v_along } else { v_along - e_v };
        let ttc = if closing > 0.0 { ds.abs() / closing } else { f64::INFINITY };
        out.push(ObstacleRelation { id: o.id, lane: rel, same_direction: cos >= 0.0, ds, v_along, ttc });
    }
    Ok(out)
}

fn f2(x: f64) -> String {
    if x.is_infinite() {
        "inf".to_string()
    } else {
        // Avoid printing "-0.00".
        let r = format!("{x:.2}");
        if r == "-0.00" {
            "0.00".into()
        } else {
            r
        }
    }
}

fn names<T: Copy>(items: &[T], name: fn(T) -> &'static str) -> String {
    items.iter().map(|x| name(*x)).collect::<Vec<_>>().join(", ")
}

pub fn describe(scenario: &Scenario, cfg: &DescribeConfig) -> Result<PromptBundle> {
    if cfg.kappa == 0 {
        return Err(Error::Invariant("kappa must be at least 1".into()));
    }
    let ego = &scenario.ego;
    let feasible = feasible_actions(scenario, &ego.state)?;
    let ctx = LaneContext::of(&scenario.network, &ego.state)?;
    let lane = scenario.ego_lane();

    let history = if cfg.previous_actions.is_empty() {
        "none".to_string()
    } else {
        let start = cfg.previous_actions.len().saturating_sub(HISTORY_LEN);
        cfg.previous_actions[start..].iter().map(|p| format!("({p})")).collect::<Vec<_>>().join(" ")
    };
    let mut system = format!(
        "You pick high-level maneuvers for an automated car. Answer with JSON only: an array of at most {k} \
         objects, each with the keys \"longitudinal\" and \"lateral\", ordered from most to least preferred.\n\
         Longitudinal options: {lon}.\n\
         Lateral options: {lat}.\n\
         Earlier choices, oldest first: {history}.",
        k = cfg.kappa,
        lon = names(&feasible.lon_set, Lon::name),
        lat = names(&feasible.lat_set, Lat::name),
    );
    if let Some(cmd) = &cfg.command {
        system.push_str(&format!("\nPassenger request: {cmd}"));
    }

    let neighbour = |id: Option<u32>| id.map_or("none".to_string(), |l| format!("lane {l}, same direction"));
    let ego_block = format!(
        "Ego vehicle.\n\
         Road type: {road}. Country: {country}. Weather: clear.\n\
         Current lane: {cur}. Left neighbour: {left}. Right neighbour: {right}.\n\
         Speed: {v} m/s. Heading: {theta} rad. Steering angle: {delta} rad. Acceleration: {a} m/s^2.",
        road = scenario.road_type.name(),
        country = scenario.country,
        cur = ctx.current,
        left = neighbour(ctx.left),
        right = neighbour(ctx.right),
        v = f2(ego.state.v),
        theta = f2(ego.state.theta),
        delta = f2(ego.state.delta),
        a = f2(ego.state.a),
    );

    let rc = &scenario.rule_config;
    let mut rules = vec!["Traffic rules.".to_string()];
    for r in &scenario.rules_enabled {
        rules.push(match r {
            RuleId::SafeDistance => {
                let d = safe_distance(ego.state.v, ego.state.v, &ego.params, rc.a_obs_min)?;
                format!(
                    "{}: stay farther behind any vehicle directly ahead than the distance needed to stop after a \
                     {} s reaction; behind a vehicle at your own speed that is {} m.",
                    r.code(),
                    f2(ego.params.t_d),
                    f2(d)
                )
            }
            RuleId::UnnecessaryBraking => format!(
                "{}: do not brake harder than {} m/s^2 unless a hazard requires it.",
                r.code(),
                f2(rc.a_abrupt)
            ),
            RuleId::SpeedLimit => {
                let cap = scenario.network.speed_limit_at(lane, ego.state.s).unwrap_or(rc.speed_limit_default);
                format!("{}: keep your speed at or below {} m/s.", r.code(), f2(cap))
            }
        });
    }
    if scenario.rules_enabled.is_empty() {
        rules.push("No rules are enforced beyond collision avoidance.".into());
    }

    let mut lines = vec!["Surrounding vehicles.".to_string()];
    for rel in obstacle_relations(scenario)? {
        if rel.ds.abs() > RELEVANCE_RANGE {
            continue;
        }
        let o = scenario.obstacle(rel.id).ok_or(Error::MissingObstacle(rel.id))?;
        let st = o.current_state();
        let lane_txt = match rel.lane {
            LaneRelation::Same => "in your lane",
            LaneRelation::Left => "in the lane to your left",
            LaneRelation::Right => "in the lane to your right",
            LaneRelation::Other => "in another lane",
        };
        let dir = if rel.same_direction { "same direction" } else { "oncoming" };
        let mut line = format!(
            "Vehicle {id} ({kind}) {lane_txt}, {dir}, delta s {ds} m, speed {v} m/s, heading {theta} rad, \
             steering angle {delta} rad, acceleration {a} m/s^2",
            id = rel.id,
            kind = serde_json::to_value(o.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            ds = f2(rel.ds),
            v = f2(st.v),
            theta = f2(st.theta),
            delta = f2(st.delta),
            a = f2(st.a),
        );
        if cfg.criticality {
            line.push_str(&format!(", time to collision {} s", f2(rel.ttc)));
        }
        line.push('.');
        lines.push(line);
    }
    if lines.len() == 1 {
        lines.push("None relevant.".into());
    }

    Ok(PromptBundle {
        system,
        ego: ego_block,
        rules: rules.join("\n"),
        obstacles: lines.join("\n"),
        kappa: cfg.kappa,
        user_command: cfg.command.clone(),
        previous_actions: cfg.previous_actions.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedActions {
    pub pairs: Vec<ActionPair>,
}

#[derive(Deserialize)]
struct RawPair {
    longitudinal: String,
    lateral: String,
}

/// Reads a ranked list as either a bare array or `{"actions": [...]}`.
pub fn parse_response(
    text: &str,
    feasible: &FeasibleActions,
    kappa: usize,
) -> std::result::Result<RankedActions, SchemaViolation> {
    let value: Value = serde_json::from_str(text.trim()).map_err(|e| SchemaViolation::MalformedJson(e.to_string()))?;
    let list = match value {
        Value::Array(_) => value,
        Value::Object(mut m) => m.remove("actions").ok_or_else(|| SchemaViolation::MalformedJson("missing `actions`".into()))?,
        _ => return Err(SchemaViolation::MalformedJson("expected an array".into())),
    };
    let raw: Vec<RawPair> = serde_json::from_value(list).map_err(|e| SchemaViolation::MalformedJson(e.to_string()))?;
    if raw.len() > kappa {
        return Err(SchemaViolation::TooMany { len: raw.len(), kappa });
    }
    let mut pairs = Vec::with_capacity(raw.len());
    for r in raw {
        let lon = Lon::from_str(&r.longitudinal).map_err(|_| SchemaViolation::UnknownAction(r.longitudinal.clone()))?;
        let lat = Lat::from_str(&r.lateral).map_err(|_| SchemaViolation::UnknownAction(r.lateral.clone()))?;
        let pair = ActionPair::new(lon, lat);
        if !feasible.contains(&pair) {
            return Err(SchemaViolation::Infeasible(pair.to_string()));
        }
        if pairs.contains(&pair) {
            return Err(SchemaViolation::Duplicate(pair.to_string()));
        }
        pairs.push(pair);
    }
    Ok(RankedActions { pairs })
}

pub fn to_response(pairs: &[ActionPair]) -> String {
    serde_json::to_string(pairs).expect("serializable")
}

/// Anything that turns a prompt into a ranked list of action pairs.
pub trait DecisionMaker: Send + Sync {
    fn name(&self) -> &str;

    /// Returns the raw response text. Implementations should give up after
    /// `timeout`; callers also check the elapsed time.
    fn propose(&self, scenario: &Scenario, prompt: &PromptBundle, timeout: Duration) -> Result<String>;
}

/// Client for an OpenAI-style chat-completions endpoint with a
/// schema-constrained JSON answer.
pub struct RemoteMaker {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    replay: Option<PathBuf>,
    client: Mutex<reqwest::blocking::Client>,
}

impl RemoteMaker {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        RemoteMaker {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            replay: None,
            client: Mutex::new(reqwest::blocking::Client::new()),
        }
    }

    /// Appends every request/response pair as one JSON line to `path`.
    pub fn with_replay(mut self, path: impl Into<PathBuf>) -> Self {
        self.replay = Some(path.into());
        self
    }

    pub fn response_schema(kappa: usize) -> Value {
        json!({
            "type": "object",
            "properties": {
                "actions": {
                    "type": "array",
                    "maxItems": kappa,
                    "items": {
                        "type": "object",
                        "properties": {
                            "longitudinal": { "type": "string", "enum": Lon::ALL.map(Lon::name) },
                            "lateral": { "type": "string", "enum": Lat::ALL.map(Lat::name) }
                        },
                        "required": ["longitudinal", "lateral"],
                        "additionalProperties": false
                    }
                }
            },
            "required": ["actions"],
            "additionalProperties": false
        })
    }

    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": prompt.system },
                { "role": "user", "content": prompt.user_message() }
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": { "name": "ranked_actions", "strict": true, "schema": Self::response_schema(prompt.kappa) }
            }
        })
    }

    fn log_replay(&self, request: &Value, response: &Value) {
        let Some(path) = &self.replay else { return };
        let line = json!({ "request": request, "response": response }).to_string();
        let res = OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = res {
            warn!("cannot append to replay log {}: {e}", path.display());
        }
    }
}

impl DecisionMaker for RemoteMaker {
    fn name(&self) -> &str {
        "remote"
    }

    fn propose(&self, _scenario: &Scenario, prompt: &PromptBundle, timeout: Duration) -> Result<String> {
        let body = self.request_body(prompt);
        let client = self.client.lock().map_err(|_| Error::Maker("client lock poisoned".into()))?;
        let mut req = client.post(&self.endpoint).timeout(timeout).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| if e.is_timeout() { Error::Timeout(timeout) } else { Error::Maker(e.to_string()) })?;
        let status = resp.status();
        let value: Value = resp.json().map_err(|e| Error::Maker(e.to_string()))?;
        self.log_replay(&body, &value);
        if !status.is_success() {
            return Err(Error::Maker(format!("endpoint returned {status}")));
        }
        content_of(&value).ok_or_else(|| Error::Maker("response has no message content".into()))
    }
}

fn content_of(v: &Value) -> Option<String> {
    v.pointer("/choices/0/message/content").and_then(Value::as_str).map(String::from)
}

/// Replays responses from a file, one per query; the last one repeats.
pub struct ScriptedMaker {
    responses: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedMaker {
    pub fn new(responses: Vec<String>) -> Self {
        ScriptedMaker { responses, cursor: Mutex::new(0) }
    }

    pub fn constant(response: impl Into<String>) -> Self {
        Self::new(vec![response.into()])
    }

    pub fn from_pairs(rankings: &[Vec<ActionPair>]) -> Self {
        Self::new(rankings.iter().map(|r| to_response(r)).collect())
    }

    /// Accepts a JSON array of responses, or JSON lines where each line is
    /// a response or a replay record from [`RemoteMaker::with_replay`].
    pub fn parse(text: &str) -> Result<Self> {
        if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(text) {
            if items.iter().all(|i| i.is_array() || i.is_object()) && !items.is_empty() {
                return Ok(Self::new(items.iter().map(|i| i.to_string()).collect()));
            }
        }
        let mut responses = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse(format!("script line: {e}")))?;
            match v.get("response").and_then(content_of) {
                Some(c) => responses.push(c),
                None => responses.push(line.to_string()),
            }
        }
        if responses.is_empty() {
            return Err(Error::Parse("script contains no responses".into()));
        }
        Ok(Self::new(responses))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl DecisionMaker for ScriptedMaker {
    fn name(&self) -> &str {
        "scripted"
    }

    fn propose(&self, _scenario: &Scenario, _prompt: &PromptBundle, _timeout: Duration) -> Result<String> {
        let mut i = self.cursor.lock().map_err(|_| Error::Maker("cursor lock poisoned".into()))?;
        let r = self.responses[(*i).min(self.responses.len() - 1)].clone();
        *i += 1;
        Ok(r)
    }
}

/// Offline stand-in: cruises in lane, changes lanes around slow leaders
/// and brakes when boxed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicMaker {
    pub target_speed: f64,
    pub headway: f64,
    pub min_gap: f64,
}

impl Default for HeuristicMaker {
    fn default() -> Self {
        HeuristicMaker { target_speed: 25.0, headway: 1.5, min_gap: 10.0 }
    }
}

impl HeuristicMaker {
    pub fn rank(&self, scenario: &Scenario, kappa: usize) -> Result<Vec<ActionPair>> {
        let feasible = feasible_actions(scenario, &scenario.ego.state)?;
        let rels = obstacle_relations(scenario)?;
        let v = scenario.ego.state.v;
        let ahead = |lane: LaneRelation| {
            rels.iter().filter(|r| r.lane == lane && r.ds >= 0.0).map(|r| r.ds).fold(f64::INFINITY, f64::min)
        };
        let behind = |lane: LaneRelation| {
            rels.iter().filter(|r| r.lane == lane && r.ds < 0.0).map(|r| -r.ds).fold(f64::INFINITY, f64::min)
        };
        let need = self.min_gap + self.headway * v;
        let gap = ahead(LaneRelation::Same);
        let use_pair = |lon, lat| ActionPair::new(lon, lat);
        let mut ranked = Vec::new();
        if gap < need {
            let mut sides: Vec<(f64, Lat)> = [(LaneRelation::Left, Lat::LeftLane), (LaneRelation::Right, Lat::RightLane)]
                .into_iter()
                .filter(|(rel, lat)| {
                    feasible.lat_set.contains(lat) && ahead(*rel) > gap + self.min_gap && behind(*rel) > self.min_gap
                })
                .map(|(rel, lat)| (ahead(rel), lat))
                .collect();
            sides.sort_by(|a, b| b.0.total_cmp(&a.0));
            ranked.extend(sides.into_iter().map(|(_, lat)| use_pair(Lon::Keep, lat)));
            ranked.push(use_pair(Lon::Decelerate, Lat::FollowLane));
            ranked.push(use_pair(Lon::Keep, Lat::FollowLane));
        } else if v < self.target_speed {
            ranked.extend([Lon::Accelerate, Lon::Keep, Lon::Decelerate].map(|l| use_pair(l, Lat::FollowLane)));
        } else {
            ranked.extend([Lon::Keep, Lon::Decelerate, Lon::Accelerate].map(|l| use_pair(l, Lat::FollowLane)));
        }
        ranked.retain(|p| feasible.contains(p));
        ranked.truncate(kappa);
        Ok(ranked)
    }
}

impl DecisionMaker for HeuristicMaker {
    fn name(&self) -> &str {
        "mock"
    }

    fn propose(&self, scenario: &Scenario, prompt: &PromptBundle, _timeout: Duration) -> Result<String> {
        Ok(to_response(&self.rank(scenario, prompt.kappa)?))
    }
}

/// The selected pair, or the fail-safe fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Action(ActionPair),
    FailSafe,
}

impl Choice {
    pub fn pair(&self) -> Option<ActionPair> {
        match self {
            Choice::Action(p) => Some(*p),
            Choice::FailSafe => None,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Action(p) => p.fmt(f),
            Choice::FailSafe => f.write_str("FAIL_SAFE"),
        }
    }
}

impl FromStr for Choice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "FAIL_SAFE" {
            Ok(Choice::FailSafe)
        } else {
            s.parse().map(Choice::Action)
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub pair: ActionPair,
    pub verified: bool,
    pub first_empty_step: Option<usize>,
    pub node_counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailSafeReport {
    pub plan: FailSafePlan,
    /// Present only when the occupancies were set-based.
    pub invariably_safe: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub chosen: Choice,
    /// 1-based rank of the chosen pair.
    pub rank_used: Option<usize>,
    pub candidates: Vec<ActionPair>,
    pub outcomes: Vec<CandidateOutcome>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fail_safe: Option<FailSafeReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecideConfig {
    pub kappa: usize,
    pub rules: Vec<RuleId>,
    pub mode: PredictionMode,
    pub timeout: Duration,
    pub horizon: usize,
    pub criticality: bool,
    pub command: Option<String>,
    pub previous_actions: Vec<ActionPair>,
    pub reach: ReachConfig,
}

impl Default for DecideConfig {
    fn default() -> Self {
        DecideConfig {
            kappa: 3,
            rules: vec![],
            mode: PredictionMode::SetBased,
            timeout: DEFAULT_TIMEOUT,
            horizon: 8,
            criticality: true,
            command: None,
            previous_actions: vec![],
            reach: ReachConfig::default(),
        }
    }
}

fn query(scenario: &Scenario, maker: &dyn DecisionMaker, cfg: &DecideConfig) -> Result<RankedActions> {
    let prompt = describe(
        scenario,
        &DescribeConfig {
            kappa: cfg.kappa,
            command: cfg.command.clone(),
            criticality: cfg.criticality,
            previous_actions: cfg.previous_actions.clone(),
        },
    )?;
    let start = Instant::now();
    let text = maker.propose(scenario, &prompt, cfg.timeout)?;
    if start.elapsed() > cfg.timeout {
        return Err(Error::Timeout(cfg.timeout));
    }
    let feasible = feasible_actions(scenario, &scenario.ego.state)?;
    Ok(parse_response(&text, &feasible, cfg.kappa)?)
}

/// Verifies candidates in order, stopping after the first verified one
/// unless `all` is set.
pub fn verify_ranked(scenario: &Scenario, pairs: &[ActionPair], cfg: &DecideConfig, all: bool) -> Result<Vec<CandidateOutcome>> {
    let occ = predict_all(scenario, cfg.horizon, cfg.mode)?;
    let ids: Vec<u32> = scenario.obstacles.iter().map(|o| o.id).collect();
    let rules = rule_formulas(&cfg.rules, &ids);
    let mut out = Vec::with_capacity(pairs.len());
    for &pair in pairs {
        let outcome = match verify_with(scenario, pair, &rules, &occ, cfg.horizon, cfg.reach) {
            Ok(o) => CandidateOutcome {
                pair,
                verified: o.verified,
                first_empty_step: o.first_empty_step,
                node_counts: o.result.node_counts(),
                error: None,
            },
            Err(e) => {
                debug!("verification of {pair} failed: {e}");
                CandidateOutcome { pair, verified: false, first_empty_step: None, node_counts: vec![], error: Some(e.to_string()) }
            }
        };
        let done = outcome.verified && !all;
        out.push(outcome);
        if done {
            break;
        }
    }
    Ok(out)
}

fn fail_safe_report(scenario: &Scenario, cfg: &DecideConfig) -> Option<FailSafeReport> {
    let plan = fail_safe_plan(scenario);
    let invariably_safe = match cfg.mode {
        PredictionMode::SetBased => predict_all(scenario, cfg.horizon, cfg.mode)
            .ok()
            .and_then(|occ| is_invariably_safe(scenario, &plan, &occ, cfg.horizon).ok()),
        PredictionMode::MostLikely => None,
    };
    Some(FailSafeReport { plan, invariably_safe })
}

/// Asks the maker for a ranking and returns the best verified pair, or
/// the fail-safe fallback on any failure.
pub fn decide(scenario: &Scenario, maker: &dyn DecisionMaker, cfg: &DecideConfig) -> Decision {
    let fail = |candidates: Vec<ActionPair>, outcomes, failure: String| Decision {
        chosen: Choice::FailSafe,
        rank_used: None,
        candidates,
        outcomes,
        failure: Some(failure),
        fail_safe: fail_safe_report(scenario, cfg),
    };
    let ranked = match query(scenario, maker, cfg) {
        Ok(r) => r,
        Err(e) => return fail(vec![], vec![], e.to_string()),
    };
    let outcomes = match verify_ranked(scenario, &ranked.pairs, cfg, false) {
        Ok(o) => o,
        Err(e) => return fail(ranked.pairs, vec![], e.to_string()),
    };
    match outcomes.iter().position(|o| o.verified) {
        Some(i) => Decision {
            chosen: Choice::Action(outcomes[i].pair),
            rank_used: Some(i + 1),
            candidates: ranked.pairs,
            outcomes,
            failure: None,
            fail_safe: None,
        },
        None => fail(ranked.pairs, outcomes, "no candidate verified".into()),
    }
}

/// Baseline without verification: takes the maker's first pair as is.
pub fn decide_unguarded(scenario: &Scenario, maker: &dyn DecisionMaker, cfg: &DecideConfig) -> Decision {
    match query(scenario, maker, cfg) {
        Ok(r) if !r.pairs.is_empty() => Decision {
            chosen: Choice::Action(r.pairs[0]),
            rank_used: Some(1),
            candidates: r.pairs,
            outcomes: vec![],
            failure: None,
            fail_safe: None,
        },
        Ok(_) => Decision {
            chosen: Choice::FailSafe,
            rank_used: None,
            candidates: vec![],
            outcomes: vec![],
            failure: Some("empty ranking".into()),
            fail_safe: None,
        },
        Err(e) => Decision {
            chosen: Choice::FailSafe,
            rank_used: None,
            candidates: vec![],
            outcomes: vec![],
            failure: Some(e.to_string()),
            fail_safe: None,
        },
    }
}

/// Share of scenarios with at least one verified pair among the top `kappa`.
/// Each entry lists verification results of one ranking, best first.
pub fn safe_at_kappa(verified: &[Vec<bool>], kappa: usize) -> f64 {
    if verified.is_empty() {
        return 0.0;
    }
    let hits = verified.iter().filter(|v| v.iter().take(kappa).any(|x| *x)).count();
    hits as f64 / verified.len() as f64
}

/// Share of scenarios whose reference label appears among the top `kappa`.
pub fn top_kappa(labels: &[ActionPair], rankings: &[RankedActions], kappa: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(rankings).filter(|(l, r)| r.pairs.iter().take(kappa).any(|p| p == *l)).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::prediction::SetPredictionParams;
    use crate::rules::RuleConfig;
    use crate::scenario::{
        straight_road, Ego, EgoParams, EgoState, LaneletNetwork, Obstacle, ObstacleKind, RoadType, Shape, VehicleState,
    };

    fn pair(lon: Lon, lat: Lat) -> ActionPair {
        ActionPair::new(lon, lat)
    }

    fn car(id: u32, x: f64, y: f64, v: f64) -> Obstacle {
        Obstacle {
            id,
            kind: ObstacleKind::Car,
            shape: Shape { length: 4.0, width: 2.0 },
            state: Some(VehicleState { position: Point::new(x, y), v, ..Default::default() }),
            trajectory: None,
            behavior: None,
        }
    }

    fn scenario(lanes: usize, ego_y: f64, v: f64, a: f64, obstacles: Vec<Obstacle>, rules: Vec<RuleId>) -> Scenario {
        let network = LaneletNetwork::new(straight_road(lanes, 4.0, 0.0, 1000.0, None)).unwrap();
        let ego = Ego {
            state: EgoState { position: Point::new(20.0, ego_y), v, a, ..Default::default() },
            shape: Shape { length: 4.0, width: 2.0 },
            params: EgoParams::default(),
            rear_axle_offset: None,
        };
        Scenario::build(
            network,
            ego,
            obstacles,
            0.1,
            25,
            "DEU".into(),
            rules,
            RuleConfig::default(),
            SetPredictionParams::default(),
            RoadType::Highway,
        )
        .unwrap()
    }

    fn blocked() -> Scenario {
        // Stopped car 30 m ahead of the front bumper in the left of two lanes.
        scenario(2, 4.0, 15.0, 0.0, vec![car(1, 20.0 + 3.0 + 30.0 + 2.0, 4.0, 0.0)], RuleId::ALL.to_vec())
    }

    fn cfg(rules: Vec<RuleId>) -> DecideConfig {
        DecideConfig { horizon: 25, rules, ..Default::default() }
    }

    #[test]
    fn describe_case_study_ego() {
        let sc = scenario(2, 4.0, 7.7, -2.1, vec![], vec![]);
        let p = describe(&sc, &DescribeConfig { kappa: 3, ..Default::default() }).unwrap();
        assert!(p.ego.contains("7.70 m/s") && p.ego.contains("-2.10 m/s^2"), "{}", p.ego);
        assert!(p.system.contains("Lateral options: FOLLOW-LANE, RIGHT-LANE."), "{}", p.system);
        assert!(!p.system.contains("LEFT-LANE"));
        assert!(p.obstacles.contains("None relevant."));
        assert_eq!(p, describe(&sc, &DescribeConfig { kappa: 3, ..Default::default() }).unwrap());
    }

    #[test]
    fn describe_ttc_sentinel() {
        let sc = scenario(1, 0.0, 20.0, 0.0, vec![car(1, 20.0 + 3.0 + 30.0 + 2.0, 0.0, 20.0)], vec![]);
        let p = describe(&sc, &DescribeConfig { kappa: 3, criticality: true, ..Default::default() }).unwrap();
        assert!(p.obstacles.contains("delta s 30.00 m"), "{}", p.obstacles);
        assert!(p.obstacles.contains("time to collision inf s"), "{}", p.obstacles);
        let rel = obstacle_relations(&sc).unwrap();
        assert_eq!(rel[0].lane, LaneRelation::Same);
    }

    #[test]
    fn describe_rules_block() {
        let sc = blocked();
        let p = describe(&sc, &DescribeConfig { kappa: 2, ..Default::default() }).unwrap();
        for code in ["R_G1", "R_G2", "R_G3"] {
            assert!(p.rules.contains(code));
        }
        assert!(describe(&sc, &DescribeConfig { kappa: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn parse_valid_and_wrapped() {
        let sc = blocked();
        let f = feasible_actions(&sc, &sc.ego.state).unwrap();
        let text = r#"[{"longitudinal":"ACCELERATE","lateral":"FOLLOW-LANE"},
                       {"longitudinal":"KEEP","lateral":"FOLLOW-LANE"},
                       {"longitudinal":"DECELERATE","lateral":"RIGHT-LANE"}]"#;
        assert_eq!(parse_response(text, &f, 3).unwrap().pairs.len(), 3);
        let wrapped = format!("{{\"actions\": {text}}}");
        assert_eq!(parse_response(&wrapped, &f, 3).unwrap().pairs.len(), 3);
        assert_eq!(parse_response("[]", &f, 3).unwrap().pairs.len(), 0);
    }

    #[test]
    fn parse_rejections() {
        let sc = blocked();
        let f = feasible_actions(&sc, &sc.ego.state).unwrap();
        let one = |lon: &str, lat: &str| format!(r#"{{"longitudinal":"{lon}","lateral":"{lat}"}}"#);
        assert!(matches!(parse_response("nope", &f, 3), Err(SchemaViolation::MalformedJson(_))));
        assert!(matches!(
            parse_response(&format!("[{}]", one("KEEP", "LEFT-LANE")), &f, 3),
            Err(SchemaViolation::Infeasible(_))
        ));
        assert!(matches!(
            parse_response(&format!("[{}]", one("STOP", "FOLLOW-LANE")), &f, 3),
            Err(SchemaViolation::Infeasible(_))
        ));
        assert!(matches!(
            parse_response(&format!("[{}]", one("HOVER", "FOLLOW-LANE")), &f, 3),
            Err(SchemaViolation::UnknownAction(_))
        ));
        let k = one("KEEP", "FOLLOW-LANE");
        assert!(matches!(parse_response(&format!("[{k},{k}]"), &f, 3), Err(SchemaViolation::Duplicate(_))));
        let d = one("DECELERATE", "FOLLOW-LANE");
        assert!(matches!(parse_response(&format!("[{k},{d}]"), &f, 1), Err(SchemaViolation::TooMany { len: 2, kappa: 1 })));
    }

    #[test]
    fn case_study_rank_three() {
        let sc = blocked();
        let maker = ScriptedMaker::from_pairs(&[vec![
            pair(Lon::Accelerate, Lat::FollowLane),
            pair(Lon::Keep, Lat::FollowLane),
            pair(Lon::Decelerate, Lat::FollowLane),
        ]]);
        let d = decide(&sc, &maker, &cfg(vec![]));
        assert_eq!(d.chosen, Choice::Action(pair(Lon::Decelerate, Lat::FollowLane)));
        assert_eq!(d.rank_used, Some(3));
        assert!(d.outcomes[..2].iter().all(|o| !o.verified));
        let with_rules = decide(&sc, &maker, &cfg(RuleId::ALL.to_vec()));
        assert_eq!(with_rules.chosen, Choice::FailSafe);
        assert!(with_rules.fail_safe.is_some());
    }

    #[test]
    fn garbage_falls_back() {
        let sc = blocked();
        let d = decide(&sc, &ScriptedMaker::constant("I would slow down."), &cfg(vec![]));
        assert_eq!(d.chosen, Choice::FailSafe);
        assert!(d.failure.unwrap().contains("schema"));
    }

    #[test]
    fn empty_road_first_rank() {
        let sc = scenario(3, 4.0, 20.0, 0.0, vec![], vec![]);
        for p in [pair(Lon::Keep, Lat::FollowLane), pair(Lon::Accelerate, Lat::LeftLane), pair(Lon::Decelerate, Lat::RightLane)] {
            let d = decide(&sc, &ScriptedMaker::from_pairs(&[vec![p]]), &DecideConfig { horizon: 8, ..Default::default() });
            assert_eq!(d.rank_used, Some(1), "{p}");
        }
    }

    struct Slow;
    impl DecisionMaker for Slow {
        fn name(&self) -> &str {
            "slow"
        }
        fn propose(&self, _: &Scenario, _: &PromptBundle, _: Duration) -> Result<String> {
            std::thread::sleep(Duration::from_millis(30));
            Ok(to_response(&[pair(Lon::Keep, Lat::FollowLane)]))
        }
    }

    #[test]
    fn timeout_falls_back() {
        let sc = scenario(1, 0.0, 10.0, 0.0, vec![], vec![]);
        let d = decide(&sc, &Slow, &DecideConfig { timeout: Duration::from_millis(5), ..Default::default() });
        assert_eq!(d.chosen, Choice::FailSafe);
        assert!(d.failure.unwrap().contains("timed out"));
    }

    #[test]
    fn scripted_sequence_and_replay_lines() {
        let m = ScriptedMaker::parse(
            "{\"request\": {}, \"response\": {\"choices\": [{\"message\": {\"content\": \"[]\"}}]}}\n[{\"longitudinal\":\"KEEP\",\"lateral\":\"FOLLOW-LANE\"}]\n",
        )
        .unwrap();
        let sc = scenario(1, 0.0, 10.0, 0.0, vec![], vec![]);
        let p = describe(&sc, &DescribeConfig { kappa: 3, ..Default::default() }).unwrap();
        assert_eq!(m.propose(&sc, &p, DEFAULT_TIMEOUT).unwrap(), "[]");
        assert!(m.propose(&sc, &p, DEFAULT_TIMEOUT).unwrap().contains("KEEP"));
        assert!(m.propose(&sc, &p, DEFAULT_TIMEOUT).unwrap().contains("KEEP"));
    }

    #[test]
    fn heuristic_prefers_free_lane() {
        let sc = scenario(2, 0.0, 20.0, 0.0, vec![car(1, 40.0, 0.0, 10.0)], vec![]);
        let r = HeuristicMaker::default().rank(&sc, 3).unwrap();
        assert_eq!(r[0], pair(Lon::Keep, Lat::LeftLane));
        let free = scenario(2, 0.0, 20.0, 0.0, vec![], vec![]);
        assert_eq!(HeuristicMaker::default().rank(&free, 3).unwrap()[0], pair(Lon::Accelerate, Lat::FollowLane));
    }

    #[test]
    fn choice_serialization() {
        let c = Choice::Action(pair(Lon::Keep, Lat::FollowLane));
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"KEEP,FOLLOW-LANE\"");
        assert_eq!(serde_json::from_str::<Choice>("\"FAIL_SAFE\"").unwrap(), Choice::FailSafe);
    }

    #[test]
    fn request_body_shape() {
        let sc = blocked();
        let p = describe(&sc, &DescribeConfig { kappa: 3, ..Default::default() }).unwrap();
        let body = RemoteMaker::new("http://localhost:1/v1/chat/completions", "m", None).request_body(&p);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["response_format"]["json_schema"]["schema"]["properties"]["actions"]["maxItems"], 3);
    }

    #[test]
    fn unreachable_endpoint_is_maker_error() {
        let sc = blocked();
        let m = RemoteMaker::new("http://127.0.0.1:9/v1/chat/completions", "m", None);
        let d = decide(&sc, &m, &cfg(vec![]));
        assert_eq!(d.chosen, Choice::FailSafe);
    }

    #[test]
    fn kappa_metrics() {
        assert_eq!(safe_at_kappa(&[vec![false, true], vec![false, false]], 2), 0.5);
        assert_eq!(safe_at_kappa(&[vec![false, true], vec![false, false]], 1), 0.0);
        let k = pair(Lon::Keep, Lat::FollowLane);
        let a = pair(Lon::Accelerate, Lat::FollowLane);
        let r = RankedActions { pairs: vec![a, k] };
        assert_eq!(top_kappa(&[k], std::slice::from_ref(&r), 1), 0.0);
        assert_eq!(top_kappa(&[k], &[r], 2), 1.0);
    }
}
