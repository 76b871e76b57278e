//! Closed-loop multi-lane highway with IDM traffic for evaluating guarded
//! and unguarded driving agents.

pub mod env;
pub mod episode;
pub mod metrics;

pub use env::{close_leader_env, idm_accel, map_action, EnvConfig, HighwayEnv, MetaAction, Setting};
pub use episode::{agent_fn, read_jsonl, write_jsonl, DEFAULT_SEEDS, episode_grid, run_batch, run_episode, EpisodeConfig, EpisodeLog, EpisodeSpec, Guard};
pub use metrics::{compute_metrics, Metrics};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("episode already terminated")]
    Terminated,
    #[error("gap must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("action {0} has no highway meta-action")]
    UnsupportedAction(String),
    #[error("no episodes to evaluate")]
    NoEpisodes,
    #[error(transparent)]
    Core(#[from] actguard::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
