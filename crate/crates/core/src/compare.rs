//! Reconstruction-error curves for explicit DDIM inversion versus virtual
//! inversion.

use rand::Rng;

use crate::denoiser::{Condition, ConditionalDenoiser};
use crate::diffusion::{generalized_step, SigmaChoice};
use crate::error::{Error, Result};
use crate::inversion::virtual_invert;
use crate::latent::Latent;
use crate::metrics::mse;
use crate::schedules::{TimestepSequence, VarianceSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// DDIM inversion followed by deterministic DDIM resampling.
    DdimInversion,
    /// Virtual inversion with consistent noise.
    Ddcm,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DdimInversion => "ddim_inversion",
            Strategy::Ddcm => "ddcm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPoint {
    pub strategy: Strategy,
    pub step: usize,
    pub timestep: usize,
    pub max_abs_error: f64,
    pub mse: f64,
}

/// One DDIM inversion step `t_cur -> t_next` with the noise evaluated at the
/// destination timestep on the current latent.
pub fn ddim_inversion_step(
    z: &Latent,
    t_cur: usize,
    t_next: usize,
    eps: &Latent,
    schedule: &VarianceSchedule,
) -> Result<Latent> {
    if t_next <= t_cur {
        return Err(Error::Ordering { t: t_next, t_prev: t_cur });
    }
    let a_cur = schedule.alpha_bar(t_cur)?;
    let a_next = schedule.alpha_bar(t_next)?;
    let x0 = z.zip_map(eps, |zv, e| (zv - (1.0 - a_cur).sqrt() * e) / a_cur.sqrt())?;
    x0.axpby(a_next.sqrt(), eps, (1.0 - a_next).sqrt())
}

/// DDIM inversion of `z0` up to `tau_1`, then DDIM resampling back down.
///
/// Step `n` of the resampling pass is compared with the inversion latent at
/// the same timestep, and the last step with `z0`.
pub fn ddim_round_trip(
    z0: &Latent,
    denoiser: &dyn ConditionalDenoiser,
    c: &Condition,
    taus: &TimestepSequence,
    schedule: &VarianceSchedule,
) -> Result<Vec<ErrorPoint>> {
    let up: Vec<usize> = taus.as_slice().iter().rev().copied().collect();
    let mut anchors = vec![(0usize, z0.clone())];
    let mut z = z0.clone();
    let mut t_cur = 0;
    for &t_next in &up {
        let eps = denoiser.predict(&z, t_next, c)?;
        z = ddim_inversion_step(&z, t_cur, t_next, &eps, schedule)?;
        anchors.push((t_next, z.clone()));
        t_cur = t_next;
    }
    let anchor_at = |t: usize| {
        anchors
            .iter()
            .find(|(ta, _)| *ta == t)
            .map(|(_, a)| a)
            .expect("every timestep has an inversion anchor")
    };

    let zeros = Latent::zeros(z0.shape());
    let mut points = Vec::with_capacity(taus.len());
    for (n, (t, t_prev)) in taus.transitions().enumerate() {
        let eps = denoiser.predict(&z, t, c)?;
        z = generalized_step(&z, t, t_prev, &eps, SigmaChoice::Deterministic, &zeros, schedule)?;
        let reference = anchor_at(t_prev);
        points.push(ErrorPoint {
            strategy: Strategy::DdimInversion,
            step: n,
            timestep: t_prev,
            max_abs_error: z.max_abs_diff(reference)?,
            mse: mse(&z, reference)?,
        });
    }
    Ok(points)
}

/// Per-step error of the virtual-inversion reconstruction against `z0`.
pub fn ddcm_curve<R: Rng + ?Sized>(
    z0: &Latent,
    taus: &TimestepSequence,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ErrorPoint>> {
    let (_, trace) = virtual_invert(z0, taus, schedule, rng)?;
    trace
        .records
        .iter()
        .map(|r| {
            Ok(ErrorPoint {
                strategy: Strategy::Ddcm,
                step: r.step,
                timestep: r.timestep,
                max_abs_error: r.z.max_abs_diff(z0)?,
                mse: mse(&r.z, z0)?,
            })
        })
        .collect()
}

pub fn compare_samplers<R: Rng + ?Sized>(
    z0: &Latent,
    denoiser: &dyn ConditionalDenoiser,
    c: &Condition,
    taus: &TimestepSequence,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ErrorPoint>> {
    let mut rows = ddim_round_trip(z0, denoiser, c, taus, schedule)?;
    rows.extend(ddcm_curve(z0, taus, schedule, rng)?);
    Ok(rows)
}
