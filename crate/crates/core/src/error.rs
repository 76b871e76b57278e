use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dangling reference: lanelet {from} refers to missing lanelet {to} ({field})")]
    DanglingReference { from: u32, to: u32, field: &'static str },

    #[error("point ({x:.3}, {y:.3}) is {dist:.3} m from the centerline, outside the {band} m band")]
    OutOfBand { x: f64, y: f64, dist: f64, band: f64 },

    #[error("position ({x:.3}, {y:.3}) is off-road")]
    OffRoad { x: f64, y: f64 },

    #[error("unknown atom `{0}`")]
    UnknownAtom(String),

    #[error("formula outside the supported fragment: {0}")]
    UnsupportedFragment(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("a_obs_min ({a_obs_min}) must be strictly below a_min ({a_min}) and both negative")]
    ParameterOrder { a_obs_min: f64, a_min: f64 },

    #[error("unknown rule id `{0}`")]
    UnknownRule(String),

    #[error("unknown obstacle {0}")]
    MissingObstacle(u32),

    #[error("no {side} adjacent lane for lane {lane}")]
    MissingAdjacentLane { lane: u32, side: &'static str },

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("trajectory matches no action label: {0}")]
    NoLabel(String),

    #[error("response violates the action schema: {0}")]
    Schema(#[from] SchemaViolation),

    #[error("cannot split base set on `{0}`")]
    Unsplittable(String),

    #[error("atom `{0}` cannot be decided on a base set")]
    NotBoxDecidable(String),

    #[error("ego vehicle initially collides with obstacle occupancy")]
    DegenerateScenario,

    #[error("reachability result is not verified")]
    Unverified,

    #[error("set-based occupancies required, got most-likely")]
    MostLikelyOccupancy,

    #[error("decision maker failed: {0}")]
    Maker(String),

    #[error("decision maker timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Defect classes of a malformed decision-maker response.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("unknown action name `{0}`")]
    UnknownAction(String),
    #[error("infeasible pair {0}")]
    Infeasible(String),
    #[error("duplicate pair {0}")]
    Duplicate(String),
    #[error("{len} pairs exceed kappa = {kappa}")]
    TooMany { len: usize, kappa: usize },
}
