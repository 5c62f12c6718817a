//! Attention-map operators: scaled dot-product attention, global refinement,
//! thresholding, local blending and the time-gated CrossEdit / SelfEdit
//! schedules.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Row-sum tolerance for cross-attention maps.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Pixel-by-token softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMap(Array2<f64>);

impl CrossAttentionMap {
    /// Wraps a matrix after checking it is non-negative and row-stochastic.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        check_row_stochastic(&m)?;
        Ok(Self(m))
    }

    /// Wraps a matrix without the row-sum check. Refined maps mix columns
    /// from two maps and are generally not row-stochastic.
    pub fn new_unchecked(m: Array2<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }

    pub fn num_pixels(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_tokens(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_row_stochastic(&self) -> bool {
        check_row_stochastic(&self.0).is_ok()
    }

    /// Per-pixel sum of the columns in `tokens`.
    pub fn token_mass(&self, tokens: &BTreeSet<usize>) -> Result<Array1<f64>> {
        if let Some(&bad) = tokens.iter().find(|&&j| j >= self.num_tokens()) {
            return Err(Error::Attention(format!(
                "blend token {bad} out of range for a map with {} tokens",
                self.num_tokens()
            )));
        }
        let mut out = Array1::zeros(self.num_pixels());
        for &j in tokens {
            out += &self.0.column(j);
        }
        Ok(out)
    }
}

fn check_row_stochastic(m: &Array2<f64>) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Attention(format!("row {i} has a negative or non-finite weight")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Attention(format!("row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Self-attention queries, keys and values for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionPack {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl SelfAttentionPack {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if q.ncols() != k.ncols() {
            return Err(Error::Attention(format!(
                "Q and K inner dimensions differ ({} vs {})",
                q.ncols(),
                k.ncols()
            )));
        }
        if v.nrows() != k.nrows() {
            return Err(Error::Attention(format!(
                "V has {} rows but K has {}",
                v.nrows(),
                k.nrows()
            )));
        }
        Ok(Self { q, k, v })
    }

    fn same_dims(&self, other: &Self) -> bool {
        self.q.dim() == other.q.dim() && self.k.dim() == other.k.dim() && self.v.dim() == other.v.dim()
    }
}

/// Target-token index `j` to optional source-token index `A(j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    targets: Vec<Option<usize>>,
    source_len: usize,
}

impl AlignmentMap {
    pub fn new(targets: Vec<Option<usize>>, source_len: usize) -> Result<Self> {
        if let Some(bad) = targets.iter().flatten().find(|&&j| j >= source_len) {
            return Err(Error::Attention(format!(
                "alignment points at source token {bad}, but the source has {source_len}"
            )));
        }
        Ok(Self { targets, source_len })
    }

    /// `A(j) = j` for every token.
    pub fn identity(len: usize) -> Self {
        Self { targets: (0..len).map(Some).collect(), source_len: len }
    }

    /// No token aligned.
    pub fn none(target_len: usize, source_len: usize) -> Self {
        Self { targets: vec![None; target_len], source_len }
    }

    /// From `(target, source)` index pairs; unmentioned targets map to `None`.
    pub fn from_pairs(pairs: &[(usize, usize)], target_len: usize, source_len: usize) -> Result<Self> {
        let mut targets = vec![None; target_len];
        for &(j, i) in pairs {
            let slot = targets.get_mut(j).ok_or_else(|| {
                Error::Attention(format!("alignment target {j} out of range for {target_len} tokens"))
            })?;
            *slot = Some(i);
        }
        Self::new(targets, source_len)
    }

    pub fn get(&self, j: usize) -> Option<usize> {
        self.targets.get(j).copied().flatten()
    }

    pub fn target_len(&self) -> usize {
        self.targets.len()
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }
}

/// Blend token sets and their thresholds.
///
/// An empty target set leaves the target unrestricted (mask of ones); an
/// empty source set preserves nothing (mask of zeros). With both empty the
/// blend is a no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendSpec {
    pub w_tgt: BTreeSet<usize>,
    pub w_src: BTreeSet<usize>,
    pub a_tgt: f64,
    pub a_src: f64,
}

impl BlendSpec {
    pub fn new(w_tgt: BTreeSet<usize>, w_src: BTreeSet<usize>, a_tgt: f64, a_src: f64) -> Result<Self> {
        for (name, a) in [("a_tgt", a_tgt), ("a_src", a_src)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Attention(format!("{name} = {a} must lie in (0, 1]")));
            }
        }
        Ok(Self { w_tgt, w_src, a_tgt, a_src })
    }

    pub fn empty() -> Self {
        Self { w_tgt: BTreeSet::new(), w_src: BTreeSet::new(), a_tgt: 0.3, a_src: 0.3 }
    }

    pub fn is_empty(&self) -> bool {
        self.w_tgt.is_empty() && self.w_src.is_empty()
    }
}

/// Control strengths: CrossEdit is active while `t >= tau_c`, full source
/// self-attention while `t >= tau_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlSchedule {
    pub tau_c: usize,
    pub tau_s: usize,
}

impl ControlSchedule {
    /// Both bounds may reach `T + 1`, which disables the gate entirely.
    pub fn new(tau_c: usize, tau_s: usize, total_steps: usize) -> Result<Self> {
        if tau_c > total_steps + 1 || tau_s > total_steps + 1 {
            return Err(Error::Attention(format!(
                "tau_c = {tau_c}, tau_s = {tau_s} must not exceed T + 1 = {}",
                total_steps + 1
            )));
        }
        Ok(Self { tau_c, tau_s })
    }
}

/// `M = softmax(Q K^T / sqrt(d))` row-wise, output `M V`.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<(Array2<f64>, CrossAttentionMap)> {
    SelfAttentionPack::new(q.clone(), k.clone(), v.clone())?;
    let d = q.ncols() as f64;
    let mut m = q.dot(&k.t()) / d.sqrt();
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    let out = m.dot(v);
    Ok((out, CrossAttentionMap::new(m)?))
}

/// Column `j` comes from `m_src[:, A(j)]` when aligned, else from `m_tgt[:, j]`.
pub fn refine(
    m_src: &CrossAttentionMap,
    m_tgt: &CrossAttentionMap,
    align: &AlignmentMap,
) -> Result<CrossAttentionMap> {
    if m_src.num_pixels() != m_tgt.num_pixels() {
        return Err(Error::Attention(format!(
            "pixel counts differ: source {} vs target {}",
            m_src.num_pixels(),
            m_tgt.num_pixels()
        )));
    }
    if align.target_len() != m_tgt.num_tokens() || align.source_len() != m_src.num_tokens() {
        return Err(Error::Attention(format!(
            "alignment covers {} target / {} source tokens, maps have {} / {}",
            align.target_len(),
            align.source_len(),
            m_tgt.num_tokens(),
            m_src.num_tokens()
        )));
    }
    let mut out = m_tgt.matrix().clone();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        if let Some(i) = align.get(j) {
            col.assign(&m_src.matrix().column(i));
        }
    }
    Ok(CrossAttentionMap::new_unchecked(out))
}

/// Binary mask of entries whose max-normalized value is at least `a`.
pub fn threshold_mask(m_agg: &ArrayD<f64>, a: f64) -> Result<ArrayD<f64>> {
    if !(a > 0.0) {
        return Err(Error::Attention(format!("threshold must be positive, got {a}")));
    }
    let max = m_agg.fold(0.0f64, |m, &x| m.max(x));
    if max <= 0.0 {
        return Ok(ArrayD::zeros(m_agg.raw_dim()));
    }
    Ok(m_agg.mapv(|x| if x / max >= a { 1.0 } else { 0.0 }))
}

/// `(1 - w) z_src + w z_tgt` with `w = clamp(m_tgt - m_src, 0, 1)`; masks
/// broadcast over the latent's leading dimensions.
pub fn local_blend(z_tgt: &Latent, z_src: &Latent, m_tgt: &ArrayD<f64>, m_src: &ArrayD<f64>) -> Result<Latent> {
    z_tgt.ensure_same_shape(z_src)?;
    let shape = IxDyn(z_tgt.shape());
    let broadcast_err = |m: &ArrayD<f64>| Error::Attention(format!(
        "mask of shape {:?} does not broadcast to latent {:?}",
        m.shape(),
        z_tgt.shape()
    ));
    let mt = m_tgt.broadcast(shape.clone()).ok_or_else(|| broadcast_err(m_tgt))?;
    let ms = m_src.broadcast(shape).ok_or_else(|| broadcast_err(m_src))?;
    let out = Zip::from(z_tgt.array())
        .and(z_src.array())
        .and(&mt)
        .and(&ms)
        .map_collect(|&t, &s, &a, &b| {
            let w = (a - b).clamp(0.0, 1.0);
            (1.0 - w) * s + w * t
        });
    Latent::from_array(out)
}

/// Refine while `t >= tau_c`, pass the target map through afterwards.
pub fn cross_edit(
    m_lay: &CrossAttentionMap,
    m_tgt: &CrossAttentionMap,
    align: &AlignmentMap,
    t: usize,
    tau_c: usize,
) -> Result<CrossAttentionMap> {
    if t >= tau_c {
        refine(m_lay, m_tgt, align)
    } else {
        Ok(m_tgt.clone())
    }
}

/// Full source pack while `t >= tau_s`, then target queries against source
/// keys and values.
pub fn self_edit(
    src: &SelfAttentionPack,
    tgt: &SelfAttentionPack,
    t: usize,
    tau_s: usize,
) -> Result<SelfAttentionPack> {
    if !src.same_dims(tgt) {
        return Err(Error::Attention("source and target self-attention packs differ in shape".into()));
    }
    if t >= tau_s {
        Ok(src.clone())
    } else {
        Ok(SelfAttentionPack { q: tgt.q.clone(), k: src.k.clone(), v: src.v.clone() })
    }
}

/// Arithmetic mean over heads/layers at a common resolution.
pub fn aggregate_maps(maps: &[CrossAttentionMap]) -> Result<CrossAttentionMap> {
    let first = maps.first().ok_or_else(|| Error::Attention("no maps to aggregate".into()))?;
    let mut acc = Array2::<f64>::zeros(first.matrix().raw_dim());
    for m in maps {
        if m.matrix().dim() != acc.dim() {
            return Err(Error::Attention("maps to aggregate differ in shape".into()));
        }
        acc += m.matrix();
    }
    acc /= maps.len() as f64;
    Ok(CrossAttentionMap::new_unchecked(acc))
}
