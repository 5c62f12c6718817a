//! Diffusion and consistency sampling with closed-form consistent noise.
//!
//! The crate covers variance schedules, the generalized denoising step and its
//! DDCM special case, virtual inversion, dual-branch inversion-free editing,
//! unified attention control, analytic oracle denoisers, consistency metrics,
//! a binary latent format and an experiment harness driving the `infedit`
//! binary.

pub mod attention;
pub mod compare;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod infedit;
pub mod inversion;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod rng;
pub mod schedules;
pub mod uac;

pub use attention::{
    aggregate_maps, attention, cross_edit, local_blend, refine, self_edit, threshold_mask, AlignmentMap, BlendSpec,
    ControlSchedule, CrossAttentionMap, SelfAttentionPack,
};
pub use denoiser::{
    Capabilities, Condition, ConditionalDenoiser, ControlledPrediction, GaussianComponent, GaussianOracle, Injection,
    MixtureOracle, ToyAttentionDenoiser, ToyDenoiserConfig,
};
pub use diffusion::{consistency_sample, ddcm_step, forward_noise, generalized_step, predict_x0, SigmaChoice};
pub use error::{Error, Result};
pub use infedit::{
    calibrated_initial, edit_step, infedit_run, BranchState, EditOutcome, NoiseRefiner, RefineContext, Refinement,
    StepDiagnostics, VanillaRefiner,
};
pub use inversion::{epsilon_cons, virtual_invert, virtual_invert_strided, InversionTrace};
pub use io::{read_latent, write_latent, LatentFileError};
pub use latent::Latent;
pub use metrics::{mse, psnr, ssim};
pub use rng::{NoiseStreams, Purpose};
pub use schedules::{make_linear_schedule, make_timesteps, TimestepSequence, VarianceSchedule};
pub use uac::{uac_step, UacRefiner};
