//! Dual-branch inversion-free editing.
//!
//! Both branches start from one shared terminal noise and are re-noised with
//! one shared fresh noise per step. The source branch is a virtual-inversion
//! branch; the target branch calibrates its predicted initial with the gap
//! between the source prediction and the consistent noise.

use ndarray::ArrayD;

use crate::denoiser::{Condition, ConditionalDenoiser, ControlledPrediction, Injection};
use crate::diffusion::{ddcm_step, predict_x0};
use crate::error::{Error, Result};
use crate::inversion::epsilon_cons;
use crate::latent::Latent;
use crate::rng::{NoiseStreams, Purpose};
use crate::schedules::{TimestepSequence, VarianceSchedule};
use crate::attention::local_blend;

/// Latents of the source, target and (optional) layout branches at one
/// timestep, plus the reference and current calibrated initials.
#[derive(Debug, Clone)]
pub struct BranchState {
    pub timestep: usize,
    pub step_index: usize,
    pub z_src: Latent,
    pub z_tgt: Latent,
    pub z_lay: Option<Latent>,
    z0_src: Latent,
    pub z0_tgt: Latent,
    pub z0_lay: Option<Latent>,
}

impl BranchState {
    /// Initial state: every branch sits on the same terminal noise and the
    /// target initial starts at the source reference.
    pub fn new(z0_src: Latent, terminal: Latent, timestep: usize, with_layout: bool) -> Result<Self> {
        z0_src.ensure_same_shape(&terminal)?;
        Ok(Self {
            timestep,
            step_index: 0,
            z_src: terminal.clone(),
            z_lay: with_layout.then(|| terminal.clone()),
            z_tgt: terminal,
            z0_tgt: z0_src.clone(),
            z0_lay: with_layout.then(|| z0_src.clone()),
            z0_src,
        })
    }

    pub fn z0_src(&self) -> &Latent {
        &self.z0_src
    }

    fn check_shapes(&self) -> Result<()> {
        self.z_src.ensure_same_shape(&self.z0_src)?;
        self.z_tgt.ensure_same_shape(&self.z0_src)?;
        self.z0_tgt.ensure_same_shape(&self.z0_src)?;
        if let Some(z) = &self.z_lay {
            z.ensure_same_shape(&self.z0_src)?;
        }
        Ok(())
    }
}

/// Everything a refiner may look at while producing the target noise.
pub struct RefineContext<'a> {
    pub step: usize,
    pub t: usize,
    pub state: &'a BranchState,
    pub c_src: &'a Condition,
    pub c_tgt: &'a Condition,
    pub denoiser: &'a dyn ConditionalDenoiser,
    pub eps_src: &'a Latent,
    /// Source prediction internals, present when the refiner asked for capture.
    pub source_capture: Option<&'a ControlledPrediction>,
}

/// Binary masks for the post-step local blend.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMasks {
    pub m_tgt: ArrayD<f64>,
    pub m_src: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub eps_tgt: Latent,
    /// Layout-branch noise, required when the state carries a layout branch.
    pub eps_lay: Option<Latent>,
    pub blend: Option<BlendMasks>,
}

/// Produces the (possibly attention-controlled) target noise for a step.
pub trait NoiseRefiner: Send + Sync {
    /// Whether the source prediction must be made with attention capture.
    fn needs_capture(&self) -> bool {
        false
    }

    fn has_layout_branch(&self) -> bool {
        false
    }

    /// Checked once before a run.
    fn validate(&self, _denoiser: &dyn ConditionalDenoiser, _c_src: &Condition, _c_tgt: &Condition) -> Result<()> {
        Ok(())
    }

    fn refine(&self, ctx: &RefineContext<'_>) -> Result<Refinement>;
}

/// Plain target prediction, no attention control.
#[derive(Debug, Clone, Copy, Default)]
pub struct VanillaRefiner;

impl NoiseRefiner for VanillaRefiner {
    fn refine(&self, ctx: &RefineContext<'_>) -> Result<Refinement> {
        let eps_tgt = ctx
            .denoiser
            .predict(&ctx.state.z_tgt, ctx.t, ctx.c_tgt)
            .map_err(|e| e.at_step(ctx.step, ctx.t, "target"))?;
        let eps_lay = match &ctx.state.z_lay {
            Some(z) => Some(
                ctx.denoiser
                    .predict(z, ctx.t, ctx.c_src)
                    .map_err(|e| e.at_step(ctx.step, ctx.t, "layout"))?,
            ),
            None => None,
        };
        Ok(Refinement { eps_tgt, eps_lay, blend: None })
    }
}

/// `predict_x0(z_tgt, t, eps_tgt - eps_src + eps_cons)`.
pub fn calibrated_initial(
    z_tgt_t: &Latent,
    t: usize,
    eps_tgt: &Latent,
    eps_src: &Latent,
    eps_cons: &Latent,
    schedule: &VarianceSchedule,
) -> Result<Latent> {
    let shifted = eps_tgt.zip_map(eps_src, |a, b| a - b)?.add(eps_cons)?;
    predict_x0(z_tgt_t, t, &shifted, schedule)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub timestep: usize,
    /// `||z0_tgt - z0_src||_2` after the step.
    pub z0_distance: f64,
    /// `||eps_tgt - eps_src||_2` with the refined target noise.
    pub eps_gap: f64,
    /// Key of the shared re-noising draw, `None` on the final step.
    pub noise_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub z0_tgt: Latent,
    pub states: Vec<BranchState>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// One editing step from `state.timestep` down to `t_prev`.
///
/// Source prediction, consistent noise, refined target noise, calibration of
/// the target (and layout) initial, shared-noise re-noising of every branch,
/// then the optional local blend.
#[allow(clippy::too_many_arguments)]
pub fn edit_step(
    state: &BranchState,
    t_prev: usize,
    c_src: &Condition,
    c_tgt: &Condition,
    denoiser: &dyn ConditionalDenoiser,
    schedule: &VarianceSchedule,
    refiner: &dyn NoiseRefiner,
    noise: &Latent,
) -> Result<(BranchState, StepDiagnostics)> {
    let (t, step) = (state.timestep, state.step_index);
    if t <= t_prev {
        return Err(Error::Ordering { t, t_prev });
    }
    state.check_shapes().map_err(|e| e.at_step(step, t, "state"))?;
    state.z_src.ensure_same_shape(noise).map_err(|e| e.at_step(step, t, "noise"))?;
    if refiner.has_layout_branch() && state.z_lay.is_none() {
        return Err(Error::InvalidLatent("refiner needs a layout branch but the state has none".into())
            .at_step(step, t, "layout"));
    }

    let capture = if refiner.needs_capture() {
        Some(
            denoiser
                .predict_controlled(&state.z_src, t, c_src, &Injection::none())
                .map_err(|e| e.at_step(step, t, "source"))?,
        )
    } else {
        None
    };
    let eps_src = match &capture {
        Some(c) => c.eps.clone(),
        None => denoiser.predict(&state.z_src, t, c_src).map_err(|e| e.at_step(step, t, "source"))?,
    };
    eps_src.ensure_same_shape(&state.z_src).map_err(|e| e.at_step(step, t, "source"))?;
    let eps_cons = epsilon_cons(&state.z_src, t, &state.z0_src, schedule).map_err(|e| e.at_step(step, t, "source"))?;

    let ctx = RefineContext {
        step,
        t,
        state,
        c_src,
        c_tgt,
        denoiser,
        eps_src: &eps_src,
        source_capture: capture.as_ref(),
    };
    let refined = refiner.refine(&ctx)?;
    refined.eps_tgt.ensure_same_shape(&state.z_tgt).map_err(|e| e.at_step(step, t, "target"))?;

    let mut z0_tgt = calibrated_initial(&state.z_tgt, t, &refined.eps_tgt, &eps_src, &eps_cons, schedule)
        .map_err(|e| e.at_step(step, t, "target"))?;
    let z0_lay = match (&state.z_lay, &refined.eps_lay) {
        (Some(z), Some(eps)) => Some(
            calibrated_initial(z, t, eps, &eps_src, &eps_cons, schedule).map_err(|e| e.at_step(step, t, "layout"))?,
        ),
        (Some(_), None) => {
            return Err(Error::InvalidLatent("refiner returned no layout noise".into()).at_step(step, t, "layout"))
        }
        (None, _) => None,
    };

    let z_src = ddcm_step(&state.z0_src, t_prev, noise, schedule)?;
    let mut z_tgt = ddcm_step(&z0_tgt, t_prev, noise, schedule)?;
    let z_lay = z0_lay.as_ref().map(|z| ddcm_step(z, t_prev, noise, schedule)).transpose()?;

    if let Some(masks) = &refined.blend {
        z_tgt = local_blend(&z_tgt, &z_src, &masks.m_tgt, &masks.m_src).map_err(|e| e.at_step(step, t, "target"))?;
        z0_tgt = local_blend(&z0_tgt, &state.z0_src, &masks.m_tgt, &masks.m_src)
            .map_err(|e| e.at_step(step, t, "target"))?;
    }

    let diagnostics = StepDiagnostics {
        step,
        timestep: t,
        z0_distance: z0_tgt.sub(&state.z0_src)?.l2_norm(),
        eps_gap: refined.eps_tgt.sub(&eps_src)?.l2_norm(),
        noise_step: None,
    };
    let next = BranchState {
        timestep: t_prev,
        step_index: step + 1,
        z_src,
        z_tgt,
        z_lay,
        z0_src: state.z0_src.clone(),
        z0_tgt,
        z0_lay,
    };
    Ok((next, diagnostics))
}

/// Runs the full editing loop over `taus`.
///
/// The first step always uses the vanilla target prediction; `refiner`
/// applies from the second step on.
#[allow(clippy::too_many_arguments)]
pub fn infedit_run(
    z0_src: &Latent,
    c_src: &Condition,
    c_tgt: &Condition,
    denoiser: &dyn ConditionalDenoiser,
    taus: &TimestepSequence,
    schedule: &VarianceSchedule,
    refiner: &dyn NoiseRefiner,
    streams: &NoiseStreams,
) -> Result<EditOutcome> {
    refiner.validate(denoiser, c_src, c_tgt)?;
    let shape = z0_src.shape().to_vec();
    let terminal = streams.normal(Purpose::Terminal, 0, &shape);
    let mut state = BranchState::new(z0_src.clone(), terminal, taus.first(), refiner.has_layout_branch())?;
    let zeros = Latent::zeros(&shape);

    let mut states = Vec::with_capacity(taus.len());
    let mut diagnostics = Vec::with_capacity(taus.len());
    for (n, (_, t_prev)) in taus.transitions().enumerate() {
        let key = (t_prev > 0).then_some(n as u64 + 1);
        let noise = match key {
            Some(k) => streams.normal(Purpose::StepNoise, k, &shape),
            None => zeros.clone(),
        };
        let active: &dyn NoiseRefiner = if n == 0 { &VanillaRefiner } else { refiner };
        let (next, mut diag) = edit_step(&state, t_prev, c_src, c_tgt, denoiser, schedule, active, &noise)?;
        diag.noise_step = key;
        diagnostics.push(diag);
        states.push(next.clone());
        state = next;
    }
    Ok(EditOutcome { z0_tgt: state.z0_tgt, states, diagnostics })
}
