use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid timestep sequence: {0}")]
    Timesteps(String),

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("timestep {0} is not allowed here (alpha_bar must be strictly below 1)")]
    ZeroTimestep(usize),

    #[error("timestep ordering violated: expected t ({t}) > t_prev ({t_prev})")]
    Ordering { t: usize, t_prev: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid latent: {0}")]
    InvalidLatent(String),

    #[error("invalid sigma: {0}")]
    Sigma(String),

    #[error("denoiser `{denoiser}` does not support {capability}")]
    Capability { denoiser: String, capability: &'static str },

    #[error("invalid condition: {0}")]
    Condition(String),

    #[error("attention: {0}")]
    Attention(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("step {step} (t={t}, branch {branch}): {source}")]
    Step {
        step: usize,
        t: usize,
        branch: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize, t: usize, branch: &'static str) -> Self {
        Error::Step {
            step,
            t,
            branch,
            source: Box::new(self),
        }
    }
}
