use thiserror::Error;

use crate::autodiff::GradError;
use crate::envmap::EnvMapError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    EnvMap(#[from] EnvMapError),
    #[error("map width {width} is not divisible by {patches} patches")]
    PatchCount { width: usize, patches: usize },
    #[error("map is {got_h}x{got_w}, model expects {want_h}x{want_w}")]
    Resolution {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
