//! Operator surface for the layer-decomposition RL pipeline: configuration,
//! run directories, subcommands and plotting.

pub mod commands;
pub mod config;
pub mod plot;
pub mod rundir;

use std::path::PathBuf;

use layerlab::flow::FlowError;
use layerlab::grpo::GrpoError;
use layerlab::layers::LayerError;
use layerlab::metrics::MetricsError;
use layerlab::numerics::NumericsError;
use layerlab::policy::PolicyError;
use layerlab::reward::RewardError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("judge: {0}")]
    Judge(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{0} already exists (use --force to overwrite or --resume to continue)")]
    Exists(PathBuf),
    #[error("{0} is locked by another run")]
    Locked(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status: 2 config, 3 judge, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Judge(_) => 3,
            CliError::Numeric(_) => 4,
            _ => 1,
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            FlowError::Numerics(n) => n.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Diverged { .. } => CliError::Numeric(e.to_string()),
            PolicyError::Numerics(n) => n.into(),
            PolicyError::Flow(f) => f.into(),
            PolicyError::Config(m) => CliError::Config(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<RewardError> for CliError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::Layers(l) => l.into(),
            RewardError::Io(io) => CliError::Io(io),
            other => CliError::Judge(other.to_string()),
        }
    }
}

impl From<LayerError> for CliError {
    fn from(e: LayerError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Policy(p) => p.into(),
            MetricsError::Reward(r) => r.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Judge(r) => CliError::Judge(r.to_string()),
            GrpoError::NonFiniteRatio { .. } | GrpoError::NonFiniteRollout { .. } => {
                CliError::Numeric(e.to_string())
            }
            GrpoError::Numerics(n) => n.into(),
            GrpoError::Flow(f) => f.into(),
            GrpoError::Policy(p) => p.into(),
            GrpoError::Config(m) => CliError::Config(m),
            other => CliError::Input(other.to_string()),
        }
    }
}
