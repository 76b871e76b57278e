use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actguard::actions::{action_to_ltlf, feasible_actions, label_trajectory, ActionPair};
use actguard::decision::{
    describe, DecideConfig, DecisionMaker, DescribeConfig, FailSafeReport, HeuristicMaker, RemoteMaker, ScriptedMaker,
};
use actguard::failsafe::{fail_safe_plan, is_invariably_safe};
use actguard::prediction::{predict_all, PredictionMode};
use actguard::reach::{verify, ReachReport};
use actguard::rules::{parse_rule_list, robustness_margin, rule_formulas, LaneContext, RuleId};
use actguard::scenario::{EgoState, Scenario};
use actguard_sim::{
    compute_metrics, episode_grid, read_jsonl, run_batch, write_jsonl, EpisodeConfig, EpisodeLog, Guard, Metrics,
    Setting, DEFAULT_SEEDS,
};
use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use log::{info, LevelFilter};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const API_KEY_VAR: &str = "ACTGUARD_API_KEY";

#[derive(Parser)]
#[command(name = "actguard", version, about = "Verify driving actions against traffic rules with reachable sets")]
struct Cli {
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,
    /// JSON file with defaults for shared command flags; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify action pairs on a scenario. Exits 1 if none is verified.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        /// Pairs as `LON,LAT`, separated by `;`. Defaults to every feasible pair.
        #[arg(long, alias = "pair")]
        actions: Option<String>,
        /// Comma-separated rule ids; defaults to the scenario's enabled rules.
        #[arg(long)]
        rules: Option<String>,
        #[arg(long)]
        prediction: Option<PredictionMode>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run closed-loop episodes and report metrics.
    Simulate {
        /// Comma-separated setting ids (1, 2, 3).
        #[arg(long)]
        setting: Option<String>,
        /// `mock`, `scripted:FILE` or `remote`.
        #[arg(long)]
        agent: Option<String>,
        /// `set-based`, `most-likely`, or `none` for an unguarded agent.
        #[arg(long)]
        prediction: Option<String>,
        #[arg(long)]
        rules: Option<String>,
        /// File with seeds as a JSON array or separated by whitespace or commas.
        #[arg(long)]
        seeds: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<u32>,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Episode logs as JSON lines.
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Request/response log for later scripted replays.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Print the prompt blocks for a scenario.
    Describe {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        command: Option<String>,
        #[arg(long)]
        previous: Option<String>,
        #[arg(long)]
        no_criticality: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label an ego trajectory with the action pair it performs.
    Label {
        #[arg(long)]
        scenario: PathBuf,
        /// JSON array of ego states.
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step robustness margins of episode logs as CSV.
    Robustness {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        rules: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    rules: Option<String>,
    prediction: Option<String>,
    horizon: Option<usize>,
    kappa: Option<usize>,
    setting: Option<String>,
    agent: Option<String>,
    seeds: Option<PathBuf>,
    repeats: Option<u32>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    logs: Option<PathBuf>,
    endpoint: Option<String>,
    model: Option<String>,
    replay: Option<PathBuf>,
}

/// Input problems exit with 2; other failures with 3.
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
struct InputError(anyhow::Error);

fn input<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> anyhow::Result<T> {
    r.map_err(|e| InputError(e.into()).into())
}

fn input_err(msg: String) -> anyhow::Error {
    InputError(anyhow!(msg)).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => {
            let text = input(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))?;
            input(serde_json::from_str::<FileConfig>(&text).context("config file"))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Verify { scenario, actions, rules, prediction, horizon, out } => {
            let prediction = match prediction {
                Some(p) => p,
                None => input(file.prediction.as_deref().unwrap_or("set-based").parse::<PredictionMode>())?,
            };
            let out = out.or(file.out);
            check_output(out.as_deref())?;
            let sc = load_scenario(&scenario)?;
            let rules = match rules.or(file.rules) {
                Some(r) => input(parse_rule_list(&r))?,
                None => sc.rules_enabled.clone(),
            };
            let h = horizon.or(file.horizon).unwrap_or(sc.horizon);
            if h == 0 {
                return Err(input_err("horizon must be at least 1".into()));
            }
            cmd_verify(&sc, actions.as_deref(), &rules, prediction, h, out.as_deref())
        }
        Command::Simulate {
            setting,
            agent,
            prediction,
            rules,
            seeds,
            repeats,
            kappa,
            horizon,
            jobs,
            out,
            logs,
            endpoint,
            model,
            replay,
        } => {
            let opts = SimOptions {
                settings: parse_settings(setting.or(file.setting).as_deref().unwrap_or("1,2,3"))?,
                agent: agent.or(file.agent).unwrap_or_else(|| "mock".into()),
                guard: prediction.or(file.prediction).unwrap_or_else(|| "set-based".into()),
                rules: input(parse_rule_list(rules.or(file.rules).as_deref().unwrap_or("")))?,
                seeds: match seeds.or(file.seeds) {
                    Some(p) => read_seeds(&p)?,
                    None => DEFAULT_SEEDS.to_vec(),
                },
                repeats: repeats.or(file.repeats).unwrap_or(1),
                kappa: kappa.or(file.kappa).unwrap_or(3),
                horizon: horizon.or(file.horizon).unwrap_or(8),
                jobs: jobs.or(file.jobs),
                out: out.or(file.out),
                logs: logs.or(file.logs),
                endpoint: endpoint.or(file.endpoint),
                model: model.or(file.model),
                replay: replay.or(file.replay),
            };
            check_output(opts.out.as_deref())?;
            check_output(opts.logs.as_deref())?;
            cmd_simulate(opts)
        }
        Command::Describe { scenario, kappa, command, previous, no_criticality, out } => {
            let out = out.or(file.out);
            check_output(out.as_deref())?;
            let sc = load_scenario(&scenario)?;
            let cfg = DescribeConfig {
                kappa: kappa.or(file.kappa).unwrap_or(3),
                command,
                criticality: !no_criticality,
                previous_actions: parse_pairs(previous.as_deref().unwrap_or(""))?,
            };
            let bundle = input(describe(&sc, &cfg))?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&bundle)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Label { scenario, trajectory, out } => {
            let out = out.or(file.out);
            check_output(out.as_deref())?;
            let sc = load_scenario(&scenario)?;
            let text = input(std::fs::read_to_string(&trajectory).with_context(|| format!("reading {}", trajectory.display())))?;
            let traj: Vec<EgoState> = input(serde_json::from_str(&text).context("trajectory file"))?;
            let (report, code) = match label_trajectory(&traj, &sc) {
                Ok(pair) => {
                    let ctx = input(LaneContext::of(&sc.network, &traj[0]))?;
                    let formula = action_to_ltlf(pair, &ctx)?.to_string();
                    (json!({ "label": pair, "formula": formula }), ExitCode::SUCCESS)
                }
                Err(actguard::Error::NoLabel(reason)) => (json!({ "label": null, "reason": reason }), ExitCode::FAILURE),
                Err(e) => return Err(input_err(e.to_string())),
            };
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
            Ok(code)
        }
        Command::Robustness { log, rules, out } => {
            let out = out.or(file.out);
            check_output(out.as_deref())?;
            let rules = match rules.or(file.rules) {
                Some(r) => input(parse_rule_list(&r))?,
                None => RuleId::ALL.to_vec(),
            };
            let f = input(File::open(&log).with_context(|| format!("opening {}", log.display())))?;
            let logs = input(read_jsonl(BufReader::new(f)))?;
            emit(out.as_deref(), &robustness_csv(&logs, &rules)?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    input(Scenario::load(path).with_context(|| format!("scenario {}", path.display())))
}

fn check_output(path: Option<&Path>) -> anyhow::Result<()> {
    if let Some(dir) = path.and_then(Path::parent).filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(input_err(format!("output directory {} does not exist", dir.display())));
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

fn parse_pairs(text: &str) -> anyhow::Result<Vec<ActionPair>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| input(s.parse::<ActionPair>()))
        .collect()
}

fn parse_settings(text: &str) -> anyhow::Result<Vec<Setting>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .ok()
                .and_then(Setting::standard)
                .ok_or_else(|| input_err(format!("unknown setting `{s}`; expected 1, 2 or 3")))
        })
        .collect()
}

fn read_seeds(path: &Path) -> anyhow::Result<Vec<u64>> {
    let text = input(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())))?;
    if let Ok(v) = serde_json::from_str::<Vec<u64>>(&text) {
        return Ok(v);
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| input_err(format!("bad seed `{s}` in {}", path.display()))))
        .collect()
}

#[derive(Serialize)]
struct VerifyReport {
    prediction: PredictionMode,
    rules: Vec<RuleId>,
    horizon: usize,
    candidates: Vec<Value>,
    verified: Vec<ActionPair>,
    fail_safe: FailSafeReport,
}

fn cmd_verify(
    sc: &Scenario,
    actions: Option<&str>,
    rules: &[RuleId],
    mode: PredictionMode,
    h: usize,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let feasible = input(feasible_actions(sc, &sc.ego.state))?;
    let pairs = match actions {
        Some(a) => parse_pairs(a)?,
        None => feasible.pairs().collect(),
    };
    if pairs.is_empty() {
        return Err(input_err("no action pairs to verify".into()));
    }
    let occ = predict_all(sc, h, mode)?;
    let ids: Vec<u32> = sc.obstacles.iter().map(|o| o.id).collect();
    let formulas = rule_formulas(rules, &ids);
    let mut candidates = Vec::new();
    let mut verified = Vec::new();
    for pair in pairs {
        if !feasible.contains(&pair) {
            candidates.push(json!({ "pair": pair, "verified": false, "error": "infeasible in this scenario" }));
            continue;
        }
        match verify(sc, pair, &formulas, &occ, h) {
            Ok(o) => {
                info!("{pair}: verified={} first_empty_step={:?}", o.verified, o.first_empty_step);
                if o.verified {
                    verified.push(pair);
                }
                candidates.push(serde_json::to_value(ReachReport::from(&o))?);
            }
            Err(e) => candidates.push(json!({ "pair": pair, "verified": false, "error": e.to_string() })),
        }
    }
    let plan = fail_safe_plan(sc);
    let invariably_safe = match mode {
        PredictionMode::SetBased => Some(is_invariably_safe(sc, &plan, &occ, h)?),
        PredictionMode::MostLikely => None,
    };
    let report = VerifyReport {
        prediction: mode,
        rules: rules.to_vec(),
        horizon: h,
        candidates,
        verified: verified.clone(),
        fail_safe: FailSafeReport { plan, invariably_safe },
    };
    emit(out, &serde_json::to_string_pretty(&report)?)?;
    Ok(if verified.is_empty() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

struct SimOptions {
    settings: Vec<Setting>,
    agent: String,
    guard: String,
    rules: Vec<RuleId>,
    seeds: Vec<u64>,
    repeats: u32,
    kappa: usize,
    horizon: usize,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    logs: Option<PathBuf>,
    endpoint: Option<String>,
    model: Option<String>,
    replay: Option<PathBuf>,
}

enum AgentKind {
    Mock,
    Scripted(String),
    Remote { endpoint: String, model: String, api_key: Option<String>, replay: Option<PathBuf> },
}

impl AgentKind {
    fn make(&self) -> Box<dyn DecisionMaker> {
        match self {
            AgentKind::Mock => Box::new(HeuristicMaker::default()),
            AgentKind::Scripted(text) => Box::new(ScriptedMaker::parse(text).expect("validated before the run")),
            AgentKind::Remote { endpoint, model, api_key, replay } => {
                let m = RemoteMaker::new(endpoint.clone(), model.clone(), api_key.clone());
                Box::new(match replay {
                    Some(p) => m.with_replay(p.clone()),
                    None => m,
                })
            }
        }
    }
}

#[derive(Serialize)]
struct SimReport {
    agent: String,
    prediction: String,
    rules: Vec<RuleId>,
    seeds: Vec<u64>,
    repeats: u32,
    overall: Metrics,
    per_setting: BTreeMap<u32, Metrics>,
}

fn cmd_simulate(o: SimOptions) -> anyhow::Result<ExitCode> {
    let kind = match o.agent.split_once(':') {
        None if o.agent == "mock" => AgentKind::Mock,
        None if o.agent == "remote" => AgentKind::Remote {
            endpoint: o.endpoint.clone().ok_or_else(|| input_err("remote agent needs --endpoint".into()))?,
            model: o.model.clone().ok_or_else(|| input_err("remote agent needs --model".into()))?,
            api_key: std::env::var(API_KEY_VAR).ok(),
            replay: o.replay.clone(),
        },
        Some(("scripted", path)) => {
            let text = input(std::fs::read_to_string(path).with_context(|| format!("reading {path}")))?;
            input(ScriptedMaker::parse(&text))?;
            AgentKind::Scripted(text)
        }
        _ => return Err(input_err(format!("unknown agent `{}`", o.agent))),
    };
    let guard = match o.guard.as_str() {
        "none" => Guard::None,
        mode => Guard::Verified(DecideConfig {
            kappa: o.kappa,
            rules: o.rules.clone(),
            mode: input(mode.parse::<PredictionMode>())?,
            horizon: o.horizon,
            ..Default::default()
        }),
    };
    if o.kappa == 0 || o.horizon == 0 || o.repeats == 0 || o.seeds.is_empty() || o.settings.is_empty() {
        bail!(InputError(anyhow!("kappa, horizon, repeats, seeds and settings must be non-empty and positive")));
    }
    let cfg = EpisodeConfig { rules: o.rules.clone(), horizon: o.horizon };
    let specs = episode_grid(&o.settings, &o.seeds, o.repeats);
    let agent_name = format!("{}+{}", o.agent, o.guard);
    info!("running {} episodes", specs.len());
    let batch = || run_batch(&specs, &cfg, &guard, &agent_name, |_| kind.make());
    let results = match o.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(batch),
        None => batch(),
    };
    let logs: Vec<EpisodeLog> = results.into_iter().collect::<Result<_, _>>()?;
    if let Some(p) = &o.logs {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_jsonl(&logs, std::io::BufWriter::new(f))?;
    }
    let mut per_setting = BTreeMap::new();
    for s in &o.settings {
        let subset: Vec<EpisodeLog> = logs.iter().filter(|l| l.setting.id == s.id).cloned().collect();
        per_setting.insert(s.id, compute_metrics(&subset, &RuleId::ALL)?);
    }
    let report = SimReport {
        agent: o.agent,
        prediction: o.guard,
        rules: o.rules,
        seeds: o.seeds,
        repeats: o.repeats,
        overall: compute_metrics(&logs, &RuleId::ALL)?,
        per_setting,
    };
    emit(o.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

fn robustness_csv(logs: &[EpisodeLog], rules: &[RuleId]) -> anyhow::Result<String> {
    let mut csv = String::from("episode,setting,seed,repeat,agent,step");
    for r in rules {
        csv.push(',');
        csv.push_str(r.code());
    }
    csv.push('\n');
    for (i, log) in logs.iter().enumerate() {
        if log.steps.is_empty() {
            continue;
        }
        let ctx = log.context()?;
        let series = rules
            .iter()
            .map(|&r| robustness_margin(r, &log.steps, &ctx.rule_config, &ctx))
            .collect::<Result<Vec<_>, _>>()?;
        for (k, step) in log.steps.iter().enumerate() {
            csv.push_str(&format!("{i},{},{},{},{},{}", log.setting.id, log.seed, log.repeat, log.agent, step.step));
            for s in &series {
                csv.push_str(&format!(",{}", s[k]));
            }
            csv.push('\n');
        }
    }
    Ok(csv.trim_end().to_string())
}
