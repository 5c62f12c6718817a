//! Unified attention control: a three-branch refiner that routes mutual
//! self-attention through a layout branch and refines the target's
//! cross-attention against the layout maps.

use ndarray::{ArrayD, IxDyn};

use crate::attention::{
    cross_edit, self_edit, threshold_mask, AlignmentMap, BlendSpec, ControlSchedule, CrossAttentionMap,
};
use crate::denoiser::{Condition, ConditionalDenoiser, Injection};
use crate::error::{Error, Result};
use crate::infedit::{edit_step, BlendMasks, BranchState, NoiseRefiner, RefineContext, Refinement};
use crate::latent::Latent;
use crate::schedules::VarianceSchedule;

/// Attention-control settings for one edit.
#[derive(Debug, Clone)]
pub struct UacRefiner {
    pub alignment: AlignmentMap,
    pub blend: BlendSpec,
    pub schedule: ControlSchedule,
}

impl UacRefiner {
    pub fn new(alignment: AlignmentMap, blend: BlendSpec, schedule: ControlSchedule) -> Self {
        Self { alignment, blend, schedule }
    }

    fn masks(
        &self,
        m_src: &CrossAttentionMap,
        m_tgt: &CrossAttentionMap,
        latent_shape: &[usize],
    ) -> Result<Option<BlendMasks>> {
        if self.blend.is_empty() {
            return Ok(None);
        }
        let spatial = spatial_shape(latent_shape, m_tgt.num_pixels())?;
        let m_tgt = if self.blend.w_tgt.is_empty() {
            ArrayD::from_elem(IxDyn(&spatial), 1.0)
        } else {
            let mass = m_tgt.token_mass(&self.blend.w_tgt)?;
            threshold_mask(&to_spatial(mass.to_vec(), &spatial)?, self.blend.a_tgt)?
        };
        let m_src = if self.blend.w_src.is_empty() {
            ArrayD::zeros(IxDyn(&spatial))
        } else {
            let mass = m_src.token_mass(&self.blend.w_src)?;
            threshold_mask(&to_spatial(mass.to_vec(), &spatial)?, self.blend.a_src)?
        };
        Ok(Some(BlendMasks { m_tgt, m_src }))
    }
}

/// Trailing latent dimensions holding `pixels` elements.
fn spatial_shape(latent_shape: &[usize], pixels: usize) -> Result<Vec<usize>> {
    let mut prod = 1;
    for k in (0..latent_shape.len()).rev() {
        prod *= latent_shape[k];
        if prod == pixels {
            return Ok(latent_shape[k..].to_vec());
        }
        if prod > pixels {
            break;
        }
    }
    Err(Error::Attention(format!(
        "no trailing dimensions of latent {latent_shape:?} hold {pixels} pixels"
    )))
}

fn to_spatial(values: Vec<f64>, spatial: &[usize]) -> Result<ArrayD<f64>> {
    ArrayD::from_shape_vec(IxDyn(spatial), values).map_err(|e| Error::Attention(e.to_string()))
}

fn require_stochastic(m: &CrossAttentionMap, branch: &str) -> Result<()> {
    if m.is_row_stochastic() {
        Ok(())
    } else {
        Err(Error::Attention(format!("captured {branch} cross-attention map is not row-stochastic")))
    }
}

impl NoiseRefiner for UacRefiner {
    fn needs_capture(&self) -> bool {
        true
    }

    fn has_layout_branch(&self) -> bool {
        true
    }

    fn validate(&self, denoiser: &dyn ConditionalDenoiser, c_src: &Condition, c_tgt: &Condition) -> Result<()> {
        let caps = denoiser.capabilities();
        if !caps.capture || !caps.inject {
            return Err(Error::Capability {
                denoiser: denoiser.name().to_string(),
                capability: "attention capture/injection (required by unified attention control)",
            });
        }
        if self.alignment.target_len() != c_tgt.tokens().len() || self.alignment.source_len() != c_src.tokens().len() {
            return Err(Error::Attention(format!(
                "alignment covers {} target / {} source tokens, prompts have {} / {}",
                self.alignment.target_len(),
                self.alignment.source_len(),
                c_tgt.tokens().len(),
                c_src.tokens().len()
            )));
        }
        if let Some(&bad) = self.blend.w_tgt.iter().find(|&&j| j >= c_tgt.tokens().len()) {
            return Err(Error::Attention(format!("target blend token {bad} out of range")));
        }
        if let Some(&bad) = self.blend.w_src.iter().find(|&&j| j >= c_src.tokens().len()) {
            return Err(Error::Attention(format!("source blend token {bad} out of range")));
        }
        Ok(())
    }

    fn refine(&self, ctx: &RefineContext<'_>) -> Result<Refinement> {
        let (step, t) = (ctx.step, ctx.t);
        let src = ctx
            .source_capture
            .ok_or_else(|| Error::Attention("source capture missing".into()).at_step(step, t, "source"))?;
        let z_lay = ctx
            .state
            .z_lay
            .as_ref()
            .ok_or_else(|| Error::Attention("layout branch missing".into()).at_step(step, t, "layout"))?;
        require_stochastic(&src.cross_map, "source").map_err(|e| e.at_step(step, t, "source"))?;

        let tgt = ctx
            .denoiser
            .predict_controlled(&ctx.state.z_tgt, t, ctx.c_tgt, &Injection::none())
            .map_err(|e| e.at_step(step, t, "target"))?;
        require_stochastic(&tgt.cross_map, "target").map_err(|e| e.at_step(step, t, "target"))?;

        let lay_pack = self_edit(&src.self_pack, &tgt.self_pack, t, self.schedule.tau_s)
            .map_err(|e| e.at_step(step, t, "layout"))?;
        let lay = ctx
            .denoiser
            .predict_controlled(z_lay, t, ctx.c_src, &Injection { self_attention: Some(lay_pack), cross_attention: None })
            .map_err(|e| e.at_step(step, t, "layout"))?;

        let m_hat = cross_edit(&lay.cross_map, &tgt.cross_map, &self.alignment, t, self.schedule.tau_c)
            .map_err(|e| e.at_step(step, t, "target"))?;
        let eps_tgt = ctx
            .denoiser
            .predict_controlled(&ctx.state.z_tgt, t, ctx.c_tgt, &Injection { self_attention: None, cross_attention: Some(m_hat) })
            .map_err(|e| e.at_step(step, t, "target"))?
            .eps;

        let blend = self
            .masks(&src.cross_map, &tgt.cross_map, ctx.state.z_tgt.shape())
            .map_err(|e| e.at_step(step, t, "target"))?;
        Ok(Refinement { eps_tgt, eps_lay: Some(lay.eps), blend })
    }
}

/// One unified-attention-control step from `state.timestep` to `t_prev`,
/// re-noising all three branches with the shared `noise`.
#[allow(clippy::too_many_arguments)]
pub fn uac_step(
    state: &BranchState,
    t_prev: usize,
    c_src: &Condition,
    c_tgt: &Condition,
    refiner: &UacRefiner,
    denoiser: &dyn ConditionalDenoiser,
    schedule: &VarianceSchedule,
    noise: &Latent,
) -> Result<BranchState> {
    refiner.validate(denoiser, c_src, c_tgt)?;
    Ok(edit_step(state, t_prev, c_src, c_tgt, denoiser, schedule, refiner, noise)?.0)
}
