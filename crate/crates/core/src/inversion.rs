//! Closed-form consistent noise and virtual inversion.
//!
//! Reconstruction never runs an explicit inversion pass: each step re-noises
//! the running reconstruction and solves for the noise that points straight
//! back at the reference latent.

use rand::Rng;

use crate::diffusion::{forward_noise, predict_x0};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedules::{TimestepSequence, VarianceSchedule};

/// Timesteps whose `alpha_bar` is this close to 1 are rejected.
pub const MIN_NOISE_LEVEL: f64 = 1e-12;

/// `(z_t - sqrt(alpha_bar[t]) z0) / sqrt(1 - alpha_bar[t])`.
pub fn epsilon_cons(z_t: &Latent, t: usize, z0: &Latent, schedule: &VarianceSchedule) -> Result<Latent> {
    let a = schedule.noisy_alpha_bar(t)?;
    if a >= 1.0 - MIN_NOISE_LEVEL {
        return Err(Error::ZeroTimestep(t));
    }
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    z_t.zip_map(z0, |z, x| (z - sa * x) / sb)
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub step: usize,
    pub timestep: usize,
    pub z_t: Latent,
    pub eps_cons: Latent,
    /// Running reconstruction after this step.
    pub z: Latent,
}

/// Per-step intermediates of [`virtual_invert`], optionally strided.
#[derive(Debug, Clone, Default)]
pub struct InversionTrace {
    pub records: Vec<TraceRecord>,
}

impl InversionTrace {
    /// Largest deviation of any recorded reconstruction from `z0`.
    pub fn max_error(&self, z0: &Latent) -> Result<f64> {
        self.records
            .iter()
            .try_fold(0.0f64, |m, r| Ok(m.max(r.z.max_abs_diff(z0)?)))
    }
}

pub fn virtual_invert<R: Rng + ?Sized>(
    z0: &Latent,
    taus: &TimestepSequence,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<(Latent, InversionTrace)> {
    virtual_invert_strided(z0, taus, schedule, rng, 1)
}

/// Virtual inversion keeping every `stride`-th step (and always the last) in
/// the trace. `stride == 0` keeps no trace.
pub fn virtual_invert_strided<R: Rng + ?Sized>(
    z0: &Latent,
    taus: &TimestepSequence,
    schedule: &VarianceSchedule,
    rng: &mut R,
    stride: usize,
) -> Result<(Latent, InversionTrace)> {
    let steps = taus.as_slice();
    if let Some(&bad) = steps.iter().find(|&&t| t > schedule.total_steps()) {
        return Err(Error::TimestepOutOfRange { t: bad, max: schedule.total_steps() });
    }
    let mut trace = InversionTrace::default();
    let shape = z0.shape().to_vec();

    let mut z_t = Latent::randn(&shape, rng);
    let mut z = z0.clone();
    for (n, &t) in steps.iter().enumerate() {
        if n > 0 {
            let eps = Latent::randn(&shape, rng);
            z_t = forward_noise(&z, t, &eps, schedule)?;
        }
        let eps_cons = epsilon_cons(&z_t, t, z0, schedule)?;
        z = predict_x0(&z_t, t, &eps_cons, schedule)?;
        let last = n + 1 == steps.len();
        if stride > 0 && (n % stride == 0 || last) {
            trace.records.push(TraceRecord {
                step: n,
                timestep: t,
                z_t: z_t.clone(),
                eps_cons,
                z: z.clone(),
            });
        }
    }
    Ok((z, trace))
}
