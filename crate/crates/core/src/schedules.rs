//! Variance schedules and sampling timestep sequences.

use crate::error::{Error, Result};

/// Cumulative signal coefficients `alpha_bar[t]` for `t = 0..=T`.
///
/// `alpha_bar[0]` is exactly 1 so that time zero is the noise-free identity.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    /// Builds a schedule from explicit coefficients for `t = 1..=T`.
    pub fn from_alpha_bar(tail: &[f64]) -> Result<Self> {
        if tail.is_empty() {
            return Err(Error::Schedule("at least one timestep is required".into()));
        }
        let mut alpha_bar = Vec::with_capacity(tail.len() + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend_from_slice(tail);
        for t in 1..alpha_bar.len() {
            let a = alpha_bar[t];
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Schedule(format!("alpha_bar[{t}] = {a} is outside (0, 1)")));
            }
            if a >= alpha_bar[t - 1] {
                return Err(Error::Schedule(format!(
                    "alpha_bar must strictly decrease, but alpha_bar[{t}] = {a} >= alpha_bar[{}] = {}",
                    t - 1,
                    alpha_bar[t - 1]
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.total_steps() })
    }

    /// `alpha_bar` for a timestep that must carry some noise (`t >= 1`).
    pub(crate) fn noisy_alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::ZeroTimestep(t));
        }
        self.alpha_bar(t)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        make_linear_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Linear-beta schedule: `alpha_bar[t] = prod_{s<=t} (1 - beta_s)` with `beta_s`
/// interpolated from `beta_start` (s = 1) to `beta_end` (s = T).
pub fn make_linear_schedule(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<VarianceSchedule> {
    if total_steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "betas must lie in (0, 1), got start={beta_start}, end={beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::Schedule(format!(
            "beta_start ({beta_start}) must not exceed beta_end ({beta_end})"
        )));
    }
    let denom = (total_steps.max(2) - 1) as f64;
    let mut prod = 1.0;
    let tail: Vec<f64> = (0..total_steps)
        .map(|i| {
            let beta = beta_start + (beta_end - beta_start) * (i as f64 / denom);
            prod *= 1.0 - beta;
            prod
        })
        .collect();
    VarianceSchedule::from_alpha_bar(&tail)
}

/// Strictly decreasing sampling timesteps `tau_1 > ... > tau_{N-1} >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSequence(Vec<usize>);

impl TimestepSequence {
    pub fn new(taus: Vec<usize>, total_steps: usize) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Timesteps("sequence is empty".into()));
        }
        if let Some(&bad) = taus.iter().find(|&&t| t == 0 || t > total_steps) {
            return Err(Error::Timesteps(format!("timestep {bad} outside [1, {total_steps}]")));
        }
        if taus.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Timesteps(format!("{taus:?} is not strictly decreasing")));
        }
        Ok(Self(taus))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> usize {
        self.0[0]
    }

    /// Pairs `(tau_n, tau_{n+1})`, with the final step landing on 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.0.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Leading spacing anchored at `T`: `tau_n = floor(T (N - n + 1) / N)` for
/// `n = 1..N-1`, deduplicated and clamped to `[1, T]`.
pub fn make_timesteps(total_steps: usize, n: usize) -> Result<TimestepSequence> {
    if n < 2 {
        return Err(Error::Timesteps(format!("N must be at least 2, got {n}")));
    }
    if total_steps == 0 || n - 1 > total_steps {
        return Err(Error::Timesteps(format!(
            "N - 1 = {} sampling steps exceed T = {total_steps}",
            n - 1
        )));
    }
    let mut taus: Vec<usize> = Vec::with_capacity(n - 1);
    for k in 1..n {
        // integer arithmetic keeps the floor exact
        let tau = (total_steps * (n - k + 1) / n).clamp(1, total_steps);
        if taus.last() != Some(&tau) {
            taus.push(tau);
        }
    }
    if taus.is_empty() {
        return Err(Error::Timesteps("sequence collapsed after deduplication".into()));
    }
    TimestepSequence::new(taus, total_steps)
}
