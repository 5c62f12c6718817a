//! Stateless diffusion kernels: forward noising, x0 reconstruction, the
//! generalized (DDIM/DDPM/DDCM) denoising step and multistep consistency
//! sampling.
//!
//! Every kernel takes its noise as an argument. Only [`consistency_sample`]
//! draws, and it does so from an explicit RNG handle.

use rand::Rng;

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedules::{TimestepSequence, VarianceSchedule};

/// Choice of the stochasticity `sigma_t` in the generalized step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaChoice {
    /// `sigma_t = 0` (DDIM).
    Deterministic,
    /// Standard DDPM posterior variance.
    Ancestral,
    /// `sigma_t = sqrt(1 - alpha_bar[t_prev])` (DDCM); the direction term vanishes.
    Consistent,
    /// User-provided `sigma_t >= 0`, with `sigma_t^2 <= 1 - alpha_bar[t_prev]`.
    Explicit(f64),
}

impl SigmaChoice {
    /// Returns `(sigma, direction coefficient)` for a step `t -> t_prev`.
    pub fn coefficients(self, alpha_t: f64, alpha_prev: f64) -> Result<(f64, f64)> {
        let budget = 1.0 - alpha_prev;
        match self {
            SigmaChoice::Deterministic => Ok((0.0, budget.sqrt())),
            SigmaChoice::Consistent => Ok((budget.sqrt(), 0.0)),
            SigmaChoice::Ancestral => {
                let var = budget / (1.0 - alpha_t) * (1.0 - alpha_t / alpha_prev);
                let var = var.clamp(0.0, budget);
                Ok((var.sqrt(), (budget - var).max(0.0).sqrt()))
            }
            SigmaChoice::Explicit(sigma) => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::Sigma(format!("sigma must be finite and >= 0, got {sigma}")));
                }
                let rest = budget - sigma * sigma;
                if rest < 0.0 {
                    return Err(Error::Sigma(format!(
                        "sigma^2 = {} exceeds 1 - alpha_bar[t_prev] = {budget}; direction coefficient would be imaginary",
                        sigma * sigma
                    )));
                }
                Ok((sigma, rest.sqrt()))
            }
        }
    }
}

/// `sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps`.
pub fn forward_noise(z0: &Latent, t: usize, eps: &Latent, schedule: &VarianceSchedule) -> Result<Latent> {
    let a = schedule.alpha_bar(t)?;
    z0.axpby(a.sqrt(), eps, (1.0 - a).sqrt())
}

/// `(z_t - sqrt(1 - alpha_bar[t]) eps_pred) / sqrt(alpha_bar[t])`.
pub fn predict_x0(z_t: &Latent, t: usize, eps_pred: &Latent, schedule: &VarianceSchedule) -> Result<Latent> {
    let a = schedule.noisy_alpha_bar(t)?;
    if a <= 0.0 {
        return Err(Error::Schedule(format!("alpha_bar[{t}] = 0 cannot be inverted")));
    }
    let sa = a.sqrt();
    let out = z_t.zip_map(eps_pred, |z, e| (z - (1.0 - a).sqrt() * e) / sa)?;
    out.ensure_finite()?;
    Ok(out)
}

/// `sqrt(alpha_bar[t_prev]) z0_pred + sqrt(1 - alpha_bar[t_prev]) noise`.
///
/// Same form as the multistep consistency re-noising update.
pub fn ddcm_step(
    z0_pred: &Latent,
    t_prev: usize,
    noise: &Latent,
    schedule: &VarianceSchedule,
) -> Result<Latent> {
    let a = schedule.alpha_bar(t_prev)?;
    let (signal, sigma) = (a.sqrt(), (1.0 - a).sqrt());
    z0_pred.zip_map(noise, |x, n| signal * x + sigma * n)
}

/// One generalized denoising step `t -> t_prev`.
#[allow(clippy::too_many_arguments)]
pub fn generalized_step(
    z_t: &Latent,
    t: usize,
    t_prev: usize,
    eps_pred: &Latent,
    sigma: SigmaChoice,
    noise: &Latent,
    schedule: &VarianceSchedule,
) -> Result<Latent> {
    if t <= t_prev {
        return Err(Error::Ordering { t, t_prev });
    }
    z_t.ensure_same_shape(noise)?;
    let alpha_t = schedule.noisy_alpha_bar(t)?;
    let alpha_prev = schedule.alpha_bar(t_prev)?;
    let (sigma, direction) = sigma.coefficients(alpha_t, alpha_prev)?;
    let x0 = predict_x0(z_t, t, eps_pred, schedule)?;
    // direction term vanishes: the step is the DDCM update
    if direction == 0.0 && sigma == (1.0 - alpha_prev).sqrt() {
        return ddcm_step(&x0, t_prev, noise, schedule);
    }
    let signal = alpha_prev.sqrt();
    let mut out = x0.into_array();
    ndarray::Zip::from(&mut out)
        .and(eps_pred.array())
        .and(noise.array())
        .for_each(|x, &e, &n| *x = signal * *x + direction * e + sigma * n);
    Latent::from_array(out)
}

/// Multistep consistency sampling along `taus`.
///
/// Draws the terminal noise, evaluates `f` at `tau_1`, then alternates
/// re-noising with [`ddcm_step`] and evaluating `f`. Returns the last `f`
/// output.
pub fn consistency_sample<F, R>(
    mut f: F,
    taus: &TimestepSequence,
    shape: &[usize],
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Latent>
where
    F: FnMut(&Latent, usize) -> Result<Latent>,
    R: Rng + ?Sized,
{
    let steps = taus.as_slice();
    let z = Latent::randn(shape, rng);
    let mut x = f(&z, steps[0])?;
    for &t in &steps[1..] {
        let noise = Latent::randn(shape, rng);
        let z = ddcm_step(&x, t, &noise, schedule)?;
        x = f(&z, t)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::make_linear_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Schedule with alpha_bar = [1, 0.64, 0.5, 0.36, 0.25].
    fn toy_schedule() -> VarianceSchedule {
        VarianceSchedule::from_alpha_bar(&[0.64, 0.5, 0.36, 0.25]).unwrap()
    }

    #[test]
    fn forward_noise_examples() {
        let s = toy_schedule();
        let v = Latent::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Latent::from_vec(&[3], vec![0.3, 0.1, -0.7]).unwrap();
        assert_eq!(forward_noise(&v, 0, &w, &s).unwrap(), v);
        let scaled = forward_noise(&v, 2, &Latent::zeros(&[3]), &s).unwrap();
        assert_eq!(scaled, v.scale(0.5f64.sqrt()));
        let out = forward_noise(&Latent::zeros(&[2, 2]), 4, &Latent::filled(&[2, 2], 1.0), &s).unwrap();
        assert!(out.iter().all(|&x| (x - 0.866_025_403_784_438_6).abs() < 1e-15));
        assert!(forward_noise(&v, 5, &w, &s).is_err());
        assert!(forward_noise(&v, 1, &Latent::zeros(&[4]), &s).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let s = toy_schedule();
        let v = Latent::from_vec(&[2], vec![1.5, -0.25]).unwrap();
        let z_t = v.scale(0.25f64.sqrt());
        let x0 = predict_x0(&z_t, 4, &Latent::zeros(&[2]), &s).unwrap();
        assert!(x0.max_abs_diff(&v).unwrap() < 1e-15);
        let out = predict_x0(&Latent::filled(&[1], 1.0), 4, &Latent::filled(&[1], 0.5), &s).unwrap();
        assert!((out.to_vec()[0] - 1.133_974_596_215_561_4).abs() < 1e-12);
        assert!(matches!(predict_x0(&v, 0, &v, &s), Err(Error::ZeroTimestep(0))));
    }

    #[test]
    fn ddcm_step_examples() {
        let s = toy_schedule();
        let ones = Latent::filled(&[2, 2], 1.0);
        let out = ddcm_step(&ones, 1, &ones, &s).unwrap();
        assert!(out.iter().all(|&x| (x - 1.4).abs() < 1e-15));
        assert_eq!(ddcm_step(&ones, 0, &Latent::filled(&[2, 2], 3.0), &s).unwrap(), ones);
        assert_eq!(ddcm_step(&ones, 2, &Latent::zeros(&[2, 2]), &s).unwrap(), ones.scale(0.5f64.sqrt()));
    }

    #[test]
    fn generalized_step_matches_scalar_oracle() {
        // alpha_t = 0.25 (t = 4), alpha_prev = 0.5 (t = 2), sigma = 0.3
        let s = toy_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Latent::randn(&[2, 2], &mut rng);
        let e = Latent::randn(&[2, 2], &mut rng);
        let n = Latent::randn(&[2, 2], &mut rng);
        let out = generalized_step(&z, 4, 2, &e, SigmaChoice::Explicit(0.3), &n, &s).unwrap();
        for (i, got) in out.iter().enumerate() {
            let (zv, ev, nv) = (z.to_vec()[i], e.to_vec()[i], n.to_vec()[i]);
            let x0 = (zv - (1.0f64 - 0.25).sqrt() * ev) / 0.25f64.sqrt();
            let want = 0.5f64.sqrt() * x0 + (1.0f64 - 0.5 - 0.09).sqrt() * ev + 0.3 * nv;
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn generalized_step_errors() {
        let s = toy_schedule();
        let z = Latent::zeros(&[2]);
        assert!(matches!(
            generalized_step(&z, 2, 2, &z, SigmaChoice::Deterministic, &z, &s),
            Err(Error::Ordering { .. })
        ));
        // 1 - alpha_bar[2] = 0.5 < 0.8^2
        assert!(matches!(
            generalized_step(&z, 4, 2, &z, SigmaChoice::Explicit(0.8), &z, &s),
            Err(Error::Sigma(_))
        ));
        assert!(generalized_step(&z, 4, 2, &z, SigmaChoice::Explicit(-0.1), &z, &s).is_err());
    }

    #[test]
    fn consistent_sigma_matches_ddcm_composition() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Latent::randn(&[3, 4], &mut rng);
        let e = Latent::randn(&[3, 4], &mut rng);
        let n = Latent::randn(&[3, 4], &mut rng);
        let a = generalized_step(&z, 700, 300, &e, SigmaChoice::Consistent, &n, &s).unwrap();
        let b = ddcm_step(&predict_x0(&z, 700, &e, &s).unwrap(), 300, &n, &s).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }

    #[test]
    fn ancestral_sigma_at_zero_is_deterministic() {
        let (sigma, dir) = SigmaChoice::Ancestral.coefficients(0.3, 1.0).unwrap();
        assert_eq!(sigma, 0.0);
        assert_eq!(dir, 0.0);
    }

    #[test]
    fn constant_consistency_function() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let taus = crate::schedules::make_timesteps(100, 6).unwrap();
        let z0 = Latent::from_vec(&[3], vec![0.1, 0.2, -0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = consistency_sample(|_, _| Ok(z0.clone()), &taus, &[3], &s, &mut rng).unwrap();
        assert_eq!(out, z0);
    }
}
