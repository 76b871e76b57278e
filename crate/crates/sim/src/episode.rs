use std::io::{BufRead, Write};

use actguard::actions::ActionPair;
use actguard::decision::{decide, decide_unguarded, Choice, DecideConfig, Decision, DecisionMaker, HISTORY_LEN};
use actguard::geometry::Point;
use actguard::prediction::SetPredictionParams;
use actguard::rules::{RuleConfig, RuleId, WorldStep};
use actguard::scenario::{straight_road, Ego, EgoParams, LaneletNetwork, RoadType, Scenario};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{map_action, world_step, EnvConfig, HighwayEnv, MetaAction, Setting, LANE_WIDTH, ROAD_LENGTH, SPEED_LIMIT};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub setting: Setting,
    pub seed: u64,
    pub repeat: u32,
    pub agent: String,
    /// State at the start of each completed step; `ego.a` is the mean
    /// acceleration applied during that step.
    pub steps: Vec<WorldStep>,
    /// Step during which the ego vehicle collided.
    pub collision_step: Option<usize>,
    pub actions: Vec<Choice>,
    pub ranks: Vec<Option<usize>>,
    pub duration: usize,
    pub traveled_distance: f64,
}

impl EpisodeLog {
    pub fn completed(&self) -> bool {
        self.collision_step.is_none() && self.steps.len() >= self.duration
    }

    /// Road and ego model the log was recorded on, for rule evaluation.
    pub fn context(&self) -> Result<Scenario> {
        let network = LaneletNetwork::new(straight_road(
            self.setting.lane_count,
            LANE_WIDTH,
            0.0,
            ROAD_LENGTH,
            Some(SPEED_LIMIT),
        ))?;
        let first = self.steps.first().map(|s| s.ego).unwrap_or_default();
        let ego = Ego {
            state: actguard::scenario::EgoState { position: Point::new(first.position.x, first.position.y), ..first },
            shape: crate::env::VEHICLE_SHAPE,
            params: EgoParams::default(),
            rear_axle_offset: None,
        };
        Ok(Scenario::build(
            network,
            ego,
            vec![],
            0.2,
            8,
            "DEU".into(),
            RuleId::ALL.to_vec(),
            RuleConfig::default(),
            SetPredictionParams::default(),
            RoadType::Highway,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Rules placed in the decision scenarios.
    pub rules: Vec<RuleId>,
    pub horizon: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { rules: vec![], horizon: 8 }
    }
}

/// Runs until collision or the configured duration, consulting `agent`
/// once per policy step and holding its meta-action for the substeps.
pub fn run_episode<F>(mut env: HighwayEnv, cfg: &EpisodeConfig, agent_name: &str, repeat: u32, agent: &mut F) -> Result<EpisodeLog>
where
    F: FnMut(&Scenario, &[ActionPair]) -> Decision,
{
    let mut steps = Vec::with_capacity(env.config.duration);
    let mut actions = Vec::new();
    let mut ranks = Vec::new();
    let mut history: Vec<ActionPair> = Vec::new();
    while !env.terminated() {
        let scenario = env.scenario(&cfg.rules, cfg.horizon)?;
        let start = history.len().saturating_sub(HISTORY_LEN);
        let decision = agent(&scenario, &history[start..]);
        let meta = map_action(decision.chosen).unwrap_or(MetaAction::FailSafe);
        let mut record = world_step(&scenario, env.step_index, meta == MetaAction::FailSafe)?;
        env.step(meta)?;
        if env.collision_step.is_some() {
            actions.push(decision.chosen);
            ranks.push(decision.rank_used);
            break;
        }
        record.ego.a = env.ego.a;
        steps.push(record);
        actions.push(decision.chosen);
        ranks.push(decision.rank_used);
        if let Some(p) = decision.chosen.pair() {
            history.push(p);
        }
    }
    Ok(EpisodeLog {
        setting: env.config.setting,
        seed: env.config.seed,
        repeat,
        agent: agent_name.to_string(),
        steps,
        collision_step: env.collision_step,
        actions,
        ranks,
        duration: env.config.duration,
        traveled_distance: env.traveled(),
    })
}

/// How an agent's proposals reach the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    /// Execute the first proposal as is.
    None,
    /// Verify proposals and fall back to the fail-safe plan.
    Verified(DecideConfig),
}

pub fn agent_fn<'a>(
    maker: &'a dyn DecisionMaker,
    guard: &'a Guard,
) -> impl FnMut(&Scenario, &[ActionPair]) -> Decision + 'a {
    move |scenario, history| match guard {
        Guard::None => {
            let cfg = DecideConfig { previous_actions: history.to_vec(), ..Default::default() };
            decide_unguarded(scenario, maker, &cfg)
        }
        Guard::Verified(cfg) => {
            let cfg = DecideConfig { previous_actions: history.to_vec(), ..cfg.clone() };
            decide(scenario, maker, &cfg)
        }
    }
}

/// Default seed set for batch evaluation.
pub const DEFAULT_SEEDS: [u64; 10] = [11, 23, 37, 41, 53, 67, 79, 83, 97, 101];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub setting: Setting,
    pub seed: u64,
    pub repeat: u32,
}

/// All combinations of settings, seeds and repeats, in a fixed order.
pub fn episode_grid(settings: &[Setting], seeds: &[u64], repeats: u32) -> Vec<EpisodeSpec> {
    let mut out = Vec::new();
    for &setting in settings {
        for &seed in seeds {
            for repeat in 0..repeats {
                out.push(EpisodeSpec { setting, seed, repeat });
            }
        }
    }
    out
}

/// Runs episodes in parallel; `make_maker` builds one decision maker per
/// episode so stateful makers do not leak between runs.
pub fn run_batch<M>(
    specs: &[EpisodeSpec],
    cfg: &EpisodeConfig,
    guard: &Guard,
    agent_name: &str,
    make_maker: M,
) -> Vec<Result<EpisodeLog>>
where
    M: Fn(&EpisodeSpec) -> Box<dyn DecisionMaker> + Sync,
{
    specs
        .par_iter()
        .map(|spec| {
            let maker = make_maker(spec);
            let mut agent = agent_fn(maker.as_ref(), guard);
            let env = HighwayEnv::new(EnvConfig::new(spec.setting, spec.seed));
            run_episode(env, cfg, agent_name, spec.repeat, &mut agent)
        })
        .collect()
}

pub fn write_jsonl<W: Write>(logs: &[EpisodeLog], mut w: W) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut w, log)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EpisodeLog>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
