//! Conditional noise predictors that need no trained weights.
//!
//! [`GaussianOracle`] and [`MixtureOracle`] return the posterior-optimal noise
//! for Gaussian data in closed form. [`ToyAttentionDenoiser`] is a fixed-weight
//! single block with one self-attention and one cross-attention layer, enough
//! to exercise attention capture and injection.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attention, CrossAttentionMap, SelfAttentionPack};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedules::VarianceSchedule;

/// Opaque prompt: an ordered list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Condition {
    tokens: Vec<u32>,
    id: u64,
}

impl Condition {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Condition("token list must not be empty".into()));
        }
        // FNV-1a over the little-endian token bytes
        let mut id: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tokens.iter().flat_map(|t| t.to_le_bytes()) {
            id ^= u64::from(b);
            id = id.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(Self { tokens, id })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub capture: bool,
    pub inject: bool,
}

/// Replacement internals for a controlled prediction.
#[derive(Debug, Clone, Default)]
pub struct Injection {
    pub self_attention: Option<SelfAttentionPack>,
    pub cross_attention: Option<CrossAttentionMap>,
}

impl Injection {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.self_attention.is_none() && self.cross_attention.is_none()
    }
}

/// Noise prediction together with the attention internals that produced it.
#[derive(Debug, Clone)]
pub struct ControlledPrediction {
    pub eps: Latent,
    pub cross_map: CrossAttentionMap,
    pub self_pack: SelfAttentionPack,
}

/// `eps(z, t, c)`, optionally with attention capture and injection.
///
/// Implementations are immutable and deterministic. Capture and injection go
/// through [`ConditionalDenoiser::predict_controlled`]; a denoiser that does
/// not advertise them must fail with [`Error::Capability`].
pub trait ConditionalDenoiser: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn predict(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent>;

    fn predict_controlled(
        &self,
        _z: &Latent,
        _t: usize,
        _c: &Condition,
        _injection: &Injection,
    ) -> Result<ControlledPrediction> {
        Err(Error::Capability {
            denoiser: self.name().to_string(),
            capability: "attention capture/injection",
        })
    }
}

/// Component of a Gaussian data model: `N(mu, s^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mu: Latent,
    pub s: f64,
}

impl GaussianComponent {
    pub fn new(mu: Latent, s: f64) -> Result<Self> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidLatent(format!("component std must be finite and >= 0, got {s}")));
        }
        Ok(Self { mu, s })
    }

    /// `E[z0 | z_t]` for this component.
    pub fn posterior_mean(&self, z: &Latent, alpha_bar: f64) -> Result<Latent> {
        let sa = alpha_bar.sqrt();
        let var = self.s * self.s;
        let gain = sa * var / (alpha_bar * var + 1.0 - alpha_bar);
        z.zip_map(&self.mu, |zv, m| m + gain * (zv - sa * m))
    }

    /// Posterior-optimal noise `E[eps | z_t]`.
    pub fn optimal_eps(&self, z: &Latent, t: usize, schedule: &VarianceSchedule) -> Result<Latent> {
        z.ensure_same_shape(&self.mu)?;
        let a = schedule.noisy_alpha_bar(t)?;
        let x0 = self.posterior_mean(z, a)?;
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        z.zip_map(&x0, |zv, x| (zv - sa * x) / sb)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Latent {
        let noise = Latent::randn(self.mu.shape(), rng);
        self.mu.axpby(1.0, &noise, self.s).expect("same shape")
    }
}

/// Analytic oracle for data `~ N(mu, s^2 I)`; ignores the condition.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    component: GaussianComponent,
    schedule: VarianceSchedule,
}

impl GaussianOracle {
    pub fn new(mu: Latent, s: f64, schedule: VarianceSchedule) -> Result<Self> {
        Ok(Self { component: GaussianComponent::new(mu, s)?, schedule })
    }

    pub fn component(&self) -> &GaussianComponent {
        &self.component
    }
}

impl ConditionalDenoiser for GaussianOracle {
    fn name(&self) -> &str {
        "gaussian_oracle"
    }

    fn predict(&self, z: &Latent, t: usize, _c: &Condition) -> Result<Latent> {
        self.component.optimal_eps(z, t, &self.schedule)
    }
}

/// One Gaussian per condition; the condition's first token selects the component.
#[derive(Debug, Clone)]
pub struct MixtureOracle {
    components: Vec<GaussianComponent>,
    schedule: VarianceSchedule,
}

impl MixtureOracle {
    pub fn new(components: Vec<GaussianComponent>, schedule: VarianceSchedule) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Condition("mixture oracle needs at least one component".into()));
        }
        Ok(Self { components, schedule })
    }

    pub fn component_for(&self, c: &Condition) -> Result<&GaussianComponent> {
        let idx = c.tokens()[0] as usize;
        self.components.get(idx).ok_or_else(|| {
            Error::Condition(format!(
                "component index {idx} out of range ({} components)",
                self.components.len()
            ))
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }
}

impl ConditionalDenoiser for MixtureOracle {
    fn name(&self) -> &str {
        "conditional_mixture_oracle"
    }

    fn predict(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent> {
        self.component_for(c)?.optimal_eps(z, t, &self.schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDenoiserConfig {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub max_tokens: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self { seed: 0, grid_h: 8, grid_w: 8, channels: 4, token_dim: 16, max_tokens: 16 }
    }
}

/// Intermediate activations of one toy forward pass.
#[derive(Debug, Clone)]
pub struct ToyTrace {
    /// Residual stream after self-attention, `pixels x token_dim`.
    pub hidden: Array2<f64>,
    /// Cross-attention values, `tokens x token_dim`.
    pub cross_values: Array2<f64>,
    pub cross_map: CrossAttentionMap,
    pub self_pack: SelfAttentionPack,
    pub eps: Latent,
}

/// Fixed-weight attention block over a `[channels, grid_h, grid_w]` latent.
///
/// Pixel embedding, then self-attention over pixels, then cross-attention of
/// pixels against token embeddings, then a linear head back to noise. All
/// weights and token embeddings are derived from the seed.
#[derive(Debug, Clone)]
pub struct ToyAttentionDenoiser {
    cfg: ToyDenoiserConfig,
    total_steps: usize,
    w_in: Array2<f64>,
    pos: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_qc: Array2<f64>,
    w_kc: Array2<f64>,
    w_vc: Array2<f64>,
    w_out: Array2<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl ToyAttentionDenoiser {
    pub fn new(cfg: ToyDenoiserConfig, schedule: &VarianceSchedule) -> Result<Self> {
        if cfg.grid_h == 0 || cfg.grid_w == 0 || cfg.channels == 0 || cfg.token_dim == 0 || cfg.max_tokens == 0 {
            return Err(Error::InvalidLatent(format!("toy denoiser dimensions must be positive: {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c, d, p) = (cfg.channels, cfg.token_dim, cfg.grid_h * cfg.grid_w);
        let inv_c = 1.0 / (c as f64).sqrt();
        let inv_d = 1.0 / (d as f64).sqrt();
        Ok(Self {
            cfg,
            total_steps: schedule.total_steps(),
            w_in: gaussian_matrix(&mut rng, c, d, inv_c),
            pos: gaussian_matrix(&mut rng, p, d, 0.5),
            w_q: gaussian_matrix(&mut rng, d, d, inv_d),
            w_k: gaussian_matrix(&mut rng, d, d, inv_d),
            w_v: gaussian_matrix(&mut rng, d, d, inv_d),
            w_qc: gaussian_matrix(&mut rng, d, d, inv_d),
            w_kc: gaussian_matrix(&mut rng, d, d, inv_d),
            w_vc: gaussian_matrix(&mut rng, d, d, inv_d),
            w_out: gaussian_matrix(&mut rng, d, c, inv_d),
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.cfg
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.cfg.channels, self.cfg.grid_h, self.cfg.grid_w]
    }

    pub fn output_weights(&self) -> &Array2<f64> {
        &self.w_out
    }

    /// Seed-derived embedding of each token id, `tokens x token_dim`.
    pub fn token_embeddings(&self, c: &Condition) -> Result<Array2<f64>> {
        if c.tokens().len() > self.cfg.max_tokens {
            return Err(Error::Condition(format!(
                "{} tokens exceed the toy denoiser limit of {}",
                c.tokens().len(),
                self.cfg.max_tokens
            )));
        }
        let d = self.cfg.token_dim;
        let mut e = Array2::zeros((c.tokens().len(), d));
        for (mut row, &tok) in e.axis_iter_mut(Axis(0)).zip(c.tokens()) {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.cfg.seed ^ splitmix64(u64::from(tok))));
            row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        }
        Ok(e)
    }

    fn time_embedding(&self, t: usize) -> Array1<f64> {
        let d = self.cfg.token_dim;
        let x = t as f64 / self.total_steps.max(1) as f64;
        Array1::from_shape_fn(d, |k| {
            let freq = (1 + k / 2) as f64 * std::f64::consts::PI;
            if k % 2 == 0 { (freq * x).sin() } else { (freq * x).cos() }
        })
    }

    /// Full forward pass with optional injection, returning every intermediate.
    pub fn trace(&self, z: &Latent, t: usize, c: &Condition, injection: &Injection) -> Result<ToyTrace> {
        let shape = self.latent_shape();
        if z.shape() != shape {
            return Err(Error::ShapeMismatch { left: z.shape().to_vec(), right: shape.to_vec() });
        }
        if t > self.total_steps {
            return Err(Error::TimestepOutOfRange { t, max: self.total_steps });
        }
        let (ch, p) = (self.cfg.channels, self.cfg.grid_h * self.cfg.grid_w);
        let pixels = z
            .array()
            .to_shape((ch, p))
            .map_err(|e| Error::InvalidLatent(e.to_string()))?
            .t()
            .to_owned();

        let h = pixels.dot(&self.w_in) + &self.pos + &self.time_embedding(t);

        let computed = SelfAttentionPack::new(h.dot(&self.w_q), h.dot(&self.w_k), h.dot(&self.w_v))?;
        let self_pack = match &injection.self_attention {
            Some(pack) => {
                if pack.q.dim() != computed.q.dim() || pack.k.dim() != computed.k.dim() || pack.v.dim() != computed.v.dim() {
                    return Err(Error::Attention("injected self-attention pack has the wrong shape".into()));
                }
                pack.clone()
            }
            None => computed,
        };
        let (self_out, _) = attention(&self_pack.q, &self_pack.k, &self_pack.v)?;
        let hidden = &h + &self_out;

        let tokens = self.token_embeddings(c)?;
        let q_c = hidden.dot(&self.w_qc);
        let k_c = tokens.dot(&self.w_kc);
        let v_c = tokens.dot(&self.w_vc);
        let (cross_out, cross_map) = match &injection.cross_attention {
            Some(m) => {
                if m.matrix().dim() != (p, tokens.nrows()) {
                    return Err(Error::Attention(format!(
                        "injected cross map is {:?}, expected ({p}, {})",
                        m.matrix().dim(),
                        tokens.nrows()
                    )));
                }
                (m.matrix().dot(&v_c), m.clone())
            }
            None => attention(&q_c, &k_c, &v_c)?,
        };
        let out = (&hidden + &cross_out).dot(&self.w_out);
        let eps = Latent::from_vec(&shape, out.t().iter().copied().collect())?;
        Ok(ToyTrace { hidden, cross_values: v_c, cross_map, self_pack, eps })
    }
}

impl ConditionalDenoiser for ToyAttentionDenoiser {
    fn name(&self) -> &str {
        "toy_attention_denoiser"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { capture: true, inject: true }
    }

    fn predict(&self, z: &Latent, t: usize, c: &Condition) -> Result<Latent> {
        Ok(self.trace(z, t, c, &Injection::none())?.eps)
    }

    fn predict_controlled(
        &self,
        z: &Latent,
        t: usize,
        c: &Condition,
        injection: &Injection,
    ) -> Result<ControlledPrediction> {
        let tr = self.trace(z, t, c, injection)?;
        Ok(ControlledPrediction { eps: tr.eps, cross_map: tr.cross_map, self_pack: tr.self_pack })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::predict_x0;

    fn cond(tokens: &[u32]) -> Condition {
        Condition::new(tokens.to_vec()).unwrap()
    }

    #[test]
    fn condition_rules() {
        assert!(Condition::new(vec![]).is_err());
        assert_eq!(cond(&[1, 2]).id(), cond(&[1, 2]).id());
        assert_ne!(cond(&[1, 2]).id(), cond(&[2, 1]).id());
    }

    #[test]
    fn point_mass_oracle() {
        let s = VarianceSchedule::default();
        let mu = Latent::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let oracle = GaussianOracle::new(mu.clone(), 0.0, s.clone()).unwrap();
        let z = Latent::from_vec(&[3], vec![0.3, 0.9, -1.2]).unwrap();
        let t = 400;
        let a = s.alpha_bar(t).unwrap();
        let eps = oracle.predict(&z, t, &cond(&[0])).unwrap();
        let want = z.zip_map(&mu, |zv, m| (zv - a.sqrt() * m) / (1.0 - a).sqrt()).unwrap();
        assert!(eps.max_abs_diff(&want).unwrap() < 1e-14);
        let x0 = predict_x0(&z, t, &eps, &s).unwrap();
        assert!(x0.max_abs_diff(&mu).unwrap() < 1e-12);
        let on_mean = oracle.predict(&mu.scale(a.sqrt()), t, &cond(&[0])).unwrap();
        assert!(on_mean.iter().all(|v| v.abs() < 1e-15));
        assert!(oracle.predict(&z, 0, &cond(&[0])).is_err());
    }

    #[test]
    fn oracles_refuse_control() {
        let s = VarianceSchedule::default();
        let oracle = GaussianOracle::new(Latent::zeros(&[2]), 1.0, s).unwrap();
        assert_eq!(oracle.capabilities(), Capabilities::default());
        let err = oracle
            .predict_controlled(&Latent::zeros(&[2]), 10, &cond(&[0]), &Injection::none())
            .unwrap_err();
        assert!(err.to_string().contains("gaussian_oracle"));
    }

    #[test]
    fn mixture_point_masses_differ_linearly() {
        let s = VarianceSchedule::default();
        let mu = Latent::filled(&[4], 1.5);
        let comps = vec![
            GaussianComponent::new(mu.scale(-1.0), 0.0).unwrap(),
            GaussianComponent::new(mu.clone(), 0.0).unwrap(),
        ];
        let m = MixtureOracle::new(comps, s.clone()).unwrap();
        let z = Latent::from_vec(&[4], vec![0.1, -0.4, 2.0, 0.0]).unwrap();
        let t = 250;
        let a = s.alpha_bar(t).unwrap();
        let d = m.predict(&z, t, &cond(&[0])).unwrap().sub(&m.predict(&z, t, &cond(&[1])).unwrap()).unwrap();
        let want = 2.0 * a.sqrt() * 1.5 / (1.0 - a).sqrt();
        assert!(d.iter().all(|v| (v - want).abs() < 1e-12));
        assert!(m.predict(&z, t, &cond(&[2])).is_err());
        assert!(MixtureOracle::new(vec![], s).is_err());
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let s = VarianceSchedule::default();
        let mu = Latent::from_vec(&[2], vec![0.2, -0.7]).unwrap();
        let g = GaussianOracle::new(mu.clone(), 0.4, s.clone()).unwrap();
        let m = MixtureOracle::new(vec![GaussianComponent::new(mu, 0.4).unwrap()], s).unwrap();
        let z = Latent::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(g.predict(&z, 77, &cond(&[0])).unwrap(), m.predict(&z, 77, &cond(&[0])).unwrap());
    }

    fn toy() -> ToyAttentionDenoiser {
        let cfg = ToyDenoiserConfig { seed: 7, grid_h: 4, grid_w: 4, channels: 3, token_dim: 8, max_tokens: 5 };
        ToyAttentionDenoiser::new(cfg, &VarianceSchedule::default()).unwrap()
    }

    #[test]
    fn toy_self_injection_is_identity() {
        let d = toy();
        let z = Latent::randn(&[3, 4, 4], &mut ChaCha8Rng::seed_from_u64(1));
        let c = cond(&[3, 1, 4]);
        let plain = d.predict(&z, 600, &c).unwrap();
        let cap = d.predict_controlled(&z, 600, &c, &Injection::none()).unwrap();
        assert_eq!(cap.eps, plain);
        assert!(cap.cross_map.is_row_stochastic());
        let inj = Injection { self_attention: Some(cap.self_pack.clone()), cross_attention: Some(cap.cross_map.clone()) };
        assert_eq!(d.predict_controlled(&z, 600, &c, &inj).unwrap().eps, plain);
        assert_eq!(d.predict(&z, 600, &c).unwrap(), plain);
    }

    #[test]
    fn toy_conditions_matter() {
        let d = toy();
        let z = Latent::randn(&[3, 4, 4], &mut ChaCha8Rng::seed_from_u64(2));
        let a = d.predict(&z, 300, &cond(&[3, 1, 4])).unwrap();
        let b = d.predict(&z, 300, &cond(&[3, 9, 4])).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn toy_uniform_map_matches_matrix_oracle() {
        let d = toy();
        let z = Latent::randn(&[3, 4, 4], &mut ChaCha8Rng::seed_from_u64(3));
        let c = cond(&[0, 1]);
        let (p, l) = (16, 2);
        let uniform = CrossAttentionMap::new(Array2::from_elem((p, l), 0.5)).unwrap();
        let inj = Injection { self_attention: None, cross_attention: Some(uniform) };
        let tr = d.trace(&z, 500, &c, &inj).unwrap();
        let w = d.output_weights();
        let (dim, ch) = (w.nrows(), w.ncols());
        for pix in 0..p {
            for k in 0..ch {
                let mut acc = 0.0;
                for j in 0..dim {
                    let mut cross = 0.0;
                    for tok in 0..l {
                        cross += 0.5 * tr.cross_values[[tok, j]];
                    }
                    acc += (tr.hidden[[pix, j]] + cross) * w[[j, k]];
                }
                let got = tr.eps.array()[[k, pix / 4, pix % 4]];
                assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn toy_rejects_misuse() {
        let d = toy();
        let z = Latent::zeros(&[3, 4, 4]);
        assert!(d.predict(&z, 10, &cond(&[0, 1, 2, 3, 4, 5])).is_err());
        assert!(d.predict(&Latent::zeros(&[3, 4, 5]), 10, &cond(&[0])).is_err());
        let bad = CrossAttentionMap::new(Array2::from_elem((16, 3), 1.0 / 3.0)).unwrap();
        let inj = Injection { self_attention: None, cross_attention: Some(bad) };
        assert!(d.predict_controlled(&z, 10, &cond(&[0]), &inj).is_err());
    }
}
