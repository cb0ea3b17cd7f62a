//! Semantic-activated attention: cross-attention whose per-query output is
//! scaled by an activation gate derived from min-max-normalized query-key
//! logit sums.
//!
//! The gate means injected reference features only land where queries are
//! semantically related to the reference keys, which is what preserves the
//! base model's behaviour elsewhere, and what makes layout control and
//! multi-identity generation possible by reweighting or suppressing gates
//! per region.

use crate::tensor::{c, Scalar, Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention width {d_a} not divisible by {heads} heads")]
    HeadMismatch { d_a: usize, heads: usize },
    #[error("attention output width {d_a} does not match latent width {d_z}")]
    WidthMismatch { d_a: usize, d_z: usize },
    #[error("gate length {got}, expected {expected} queries")]
    GateLength { expected: usize, got: usize },
    #[error("gate values outside the valid range for their stage")]
    GateRange,
    #[error("mask length {got}, expected {expected} queries")]
    MaskLength { expected: usize, got: usize },
    #[error("intervention intensity beta must be >= 0, got {0}")]
    NegativeBeta(f64),
    #[error("alpha must lie in [0,1], got {0}")]
    BadAlpha(f64),
    #[error("gating weights were already intervened")]
    AlreadyIntervened,
    #[error("region masks for identities {a} and {b} overlap")]
    OverlappingMasks { a: usize, b: usize },
    #[error("duplicate identity label {0} in layout policy")]
    DuplicateLabel(usize),
    #[error("empty region mask (box has zero area or lies outside the grid)")]
    EmptyMask,
    #[error("multi-identity forward needs at least one identity")]
    NoIdentities,
    #[error("layout policy provides {masks} masks for {identities} identities")]
    MaskCount { masks: usize, identities: usize },
}

/// Spread below which min-max normalization is considered degenerate and the
/// gate falls back to all-zero (no semantic contrast, keep the base model).
pub const DEGENERATE_SPREAD: f64 = 1e-12;

/// Projection weights for one gated cross-attention site, bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjection {
    /// `[d_z, d_a]` query projection.
    pub wq: TensorId,
    /// `[d_f, d_a]` key projection.
    pub wk: TensorId,
    /// `[d_f, d_a]` value projection.
    pub wv: TensorId,
    pub heads: usize,
}

impl AttentionProjection {
    pub fn new(wq: TensorId, wk: TensorId, wv: TensorId, heads: usize) -> Self {
        AttentionProjection { wq, wk, wv, heads }
    }
}

/// Where a gate vector is in its lifecycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateStage {
    /// Fresh out of min-max normalization; entries in [0, 1].
    Adaptive,
    /// After layout intervention / suppression; entries >= 0, may exceed 1.
    Intervened,
}

/// Per-query activation weights.
#[derive(Clone, Debug)]
pub struct GatingWeights<T> {
    values: Vec<T>,
    stage: GateStage,
}

impl<T: Scalar> GatingWeights<T> {
    pub fn adaptive(values: Vec<T>) -> Result<Self, SaaError> {
        if !values.iter().all(|&v| v >= T::zero() && v <= T::one()) {
            return Err(SaaError::GateRange);
        }
        Ok(GatingWeights {
            values,
            stage: GateStage::Adaptive,
        })
    }

    pub fn intervened(values: Vec<T>) -> Result<Self, SaaError> {
        if !values.iter().all(|&v| v >= T::zero()) {
            return Err(SaaError::GateRange);
        }
        Ok(GatingWeights {
            values,
            stage: GateStage::Intervened,
        })
    }

    /// An all-zero gate of length `n` (suppresses the whole injection).
    pub fn zeros(n: usize) -> Self {
        GatingWeights {
            values: vec![T::zero(); n],
            stage: GateStage::Adaptive,
        }
    }

    /// An all-one gate of length `n` (plain residual cross-attention).
    pub fn ones(n: usize) -> Self {
        GatingWeights {
            values: vec![T::one(); n],
            stage: GateStage::Adaptive,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn stage(&self) -> GateStage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero every entry strictly below `floor`. Used by the sampler to keep
    /// weakly activated queries untouched by the injection.
    pub fn apply_floor(&mut self, floor: f64) {
        let f: T = c(floor);
        for v in &mut self.values {
            if *v < f {
                *v = T::zero();
            }
        }
    }
}

/// Binary region of latent queries belonging to one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    bits: Vec<bool>,
    label: usize,
}

impl RegionMask {
    pub fn from_bits(bits: Vec<bool>, label: usize) -> Result<Self, SaaError> {
        if !bits.iter().any(|&b| b) {
            return Err(SaaError::EmptyMask);
        }
        Ok(RegionMask { bits, label })
    }

    /// Rasterize an axis-aligned box `(x0, y0, x1, y1)` (inclusive-exclusive)
    /// onto a `grid_w x grid_h` latent grid in row-major query order.
    pub fn from_box(
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        grid_w: usize,
        grid_h: usize,
        label: usize,
    ) -> Result<Self, SaaError> {
        let mut bits = vec![false; grid_w * grid_h];
        for y in y0..y1.min(grid_h) {
            for x in x0..x1.min(grid_w) {
                bits[y * grid_w + x] = true;
            }
        }
        Self::from_bits(bits, label)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn covers(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn cell_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn overlaps(&self, other: &RegionMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }
}

/// Layout-control policy: when and how strongly to intervene, and which
/// region belongs to which identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayoutPolicy {
    /// Fraction of denoising steps (from the noisiest) with intervention.
    pub alpha: f64,
    /// Intervention intensity.
    pub beta: f64,
    pub masks: Vec<RegionMask>,
    /// Adaptive gate values below this are zeroed during policy-driven
    /// sampling, so weakly related queries receive no injection at all.
    pub gate_floor: f64,
}

impl LayoutPolicy {
    pub fn new(alpha: f64, beta: f64, masks: Vec<RegionMask>) -> Result<Self, SaaError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(SaaError::BadAlpha(alpha));
        }
        if beta < 0.0 {
            return Err(SaaError::NegativeBeta(beta));
        }
        let policy = LayoutPolicy {
            alpha,
            beta,
            masks,
            gate_floor: 0.05,
        };
        policy.validate_masks()?;
        Ok(policy)
    }

    pub fn with_gate_floor(mut self, floor: f64) -> Self {
        self.gate_floor = floor;
        self
    }

    /// Pairwise disjointness; the error names the offending identity pair.
    pub fn validate_masks(&self) -> Result<(), SaaError> {
        for i in 0..self.masks.len() {
            for j in i + 1..self.masks.len() {
                if self.masks[i].overlaps(&self.masks[j]) {
                    return Err(SaaError::OverlappingMasks {
                        a: self.masks[i].label(),
                        b: self.masks[j].label(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of leading sampler steps with intervention: `ceil(alpha * total)`.
    pub fn window(&self, total_steps: usize) -> usize {
        (self.alpha * total_steps as f64).ceil() as usize
    }

    pub fn mask_for(&self, label: usize) -> Option<&RegionMask> {
        self.masks.iter().find(|m| m.label() == label)
    }
}

// ── Core operations ─────────────────────────────────────────────────────

/// Raw multi-head attention read: `softmax(Q K^T / sqrt(d)) V`, heads
/// re-concatenated to `[n, d_a]`.
pub fn attention_output<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    c_f: TensorId,
    proj: &AttentionProjection,
) -> Result<TensorId, SaaError> {
    let d_a = tape.value(proj.wq).shape()[1];
    if proj.heads == 0 || d_a % proj.heads != 0 {
        return Err(SaaError::HeadMismatch {
            d_a,
            heads: proj.heads,
        });
    }
    let d = d_a / proj.heads;
    let q = tape.matmul(z, proj.wq)?;
    let k = tape.matmul(c_f, proj.wk)?;
    let v = tape.matmul(c_f, proj.wv)?;
    let scale: T = c(1.0 / (d as f64).sqrt());
    let mut heads = Vec::with_capacity(proj.heads);
    for h in 0..proj.heads {
        let (c0, c1) = (h * d, (h + 1) * d);
        let (qh, kh, vh) = if proj.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, c0, c1)?,
                tape.slice_cols(k, c0, c1)?,
                tape.slice_cols(v, c0, c1)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.mul_scalar(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let mut out = heads[0];
    for &h in &heads[1..] {
        out = tape.concat_cols(out, h)?;
    }
    Ok(out)
}

/// Activation weights as a tape node (`[n]`), so gradients flow through the
/// gate during training. Per head: min-max normalize the query-key logit row
/// sums to [0, 1]; heads are then averaged into one gate per query. A spread
/// below [`DEGENERATE_SPREAD`] yields the all-zero gate.
pub fn activation_weights_node<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    c_f: TensorId,
    proj: &AttentionProjection,
) -> Result<TensorId, SaaError> {
    let d_a = tape.value(proj.wq).shape()[1];
    if proj.heads == 0 || d_a % proj.heads != 0 {
        return Err(SaaError::HeadMismatch {
            d_a,
            heads: proj.heads,
        });
    }
    let d = d_a / proj.heads;
    let n = tape.value(z).shape()[0];
    let q = tape.matmul(z, proj.wq)?;
    let k = tape.matmul(c_f, proj.wk)?;
    let mut acc: Option<TensorId> = None;
    for h in 0..proj.heads {
        let (c0, c1) = (h * d, (h + 1) * d);
        let (qh, kh) = if proj.heads == 1 {
            (q, k)
        } else {
            (tape.slice_cols(q, c0, c1)?, tape.slice_cols(k, c0, c1)?)
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let raw = tape.row_sums(logits)?;
        let mn = tape.vec_min(raw)?;
        let mx = tape.vec_max(raw)?;
        let spread = tape.value(mx).item()? - tape.value(mn).item()?;
        let w_h = if spread.as_f64() < DEGENERATE_SPREAD {
            tape.leaf(Tensor::zeros(vec![n]))
        } else {
            let shifted = tape.sub_bcast(raw, mn)?;
            let range = tape.sub(mx, mn)?;
            tape.div_bcast(shifted, range)?
        };
        acc = Some(match acc {
            None => w_h,
            Some(a) => tape.add(a, w_h)?,
        });
    }
    let summed = acc.expect("heads >= 1");
    if proj.heads == 1 {
        Ok(summed)
    } else {
        Ok(tape.mul_scalar(summed, c(1.0 / proj.heads as f64))?)
    }
}

/// Adaptive activation weights as plain values.
pub fn activation_weights<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    c_f: TensorId,
    proj: &AttentionProjection,
) -> Result<GatingWeights<T>, SaaError> {
    let node = activation_weights_node(tape, z, c_f, proj)?;
    Ok(GatingWeights {
        values: tape.value(node).data().to_vec(),
        stage: GateStage::Adaptive,
    })
}

/// Gated residual injection: `z + expand(w) * attention_output`. Queries
/// with `w[i] == 0` come back bit-identical to `z`.
pub fn saa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    c_f: TensorId,
    proj: &AttentionProjection,
    gating: &GatingWeights<T>,
) -> Result<TensorId, SaaError> {
    let (n, d_z) = tape.value(z).dims2("saa_forward")?;
    if gating.len() != n {
        return Err(SaaError::GateLength {
            expected: n,
            got: gating.len(),
        });
    }
    let d_a = tape.value(proj.wq).shape()[1];
    if d_a != d_z {
        return Err(SaaError::WidthMismatch { d_a, d_z });
    }
    let attn = attention_output(tape, z, c_f, proj)?;
    let w = tape.leaf(Tensor::vector(gating.values().to_vec())?);
    Ok(tape.gated_residual(z, attn, w)?)
}

/// Gated forward with the gate computed on-tape from the same inputs, so the
/// anchoring loss trains the gate path too. Returns `(z_new, gate_node)`.
pub fn saa_forward_adaptive<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    c_f: TensorId,
    proj: &AttentionProjection,
) -> Result<(TensorId, TensorId), SaaError> {
    let (_, d_z) = tape.value(z).dims2("saa_forward")?;
    let d_a = tape.value(proj.wq).shape()[1];
    if d_a != d_z {
        return Err(SaaError::WidthMismatch { d_a, d_z });
    }
    let w = activation_weights_node(tape, z, c_f, proj)?;
    let attn = attention_output(tape, z, c_f, proj)?;
    let out = tape.gated_residual(z, attn, w)?;
    Ok((out, w))
}

/// Layout intervention: `w_hat = M * (w + beta) + (1 - M) * (w / (beta + 1))`,
/// applied literally with no clamping.
pub fn intervene<T: Scalar>(
    w: &GatingWeights<T>,
    mask: &RegionMask,
    beta: f64,
) -> Result<GatingWeights<T>, SaaError> {
    if beta < 0.0 {
        return Err(SaaError::NegativeBeta(beta));
    }
    if w.stage() != GateStage::Adaptive {
        return Err(SaaError::AlreadyIntervened);
    }
    if mask.len() != w.len() {
        return Err(SaaError::MaskLength {
            expected: w.len(),
            got: mask.len(),
        });
    }
    let b: T = c(beta);
    let inv: T = T::one() / (b + T::one());
    let values = w
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &inside)| if inside { v + b } else { v * inv })
        .collect();
    Ok(GatingWeights {
        values,
        stage: GateStage::Intervened,
    })
}

/// Per-identity gate shaping for multi-identity generation:
///
/// 1. during the first `ceil(alpha * total_steps)` sampler steps (step 0 =
///    noisiest), the layout intervention is applied with the identity's own
///    mask and `beta`;
/// 2. outside that window the surviving entries keep their adaptive values;
/// 3. at *every* step, entries under any other identity's mask are hard
///    zeros, so reference features can never bleed into another face.
pub fn multi_id_gate<T: Scalar>(
    w: &GatingWeights<T>,
    policy: &LayoutPolicy,
    id_label: usize,
    step_index: usize,
    total_steps: usize,
) -> Result<GatingWeights<T>, SaaError> {
    policy.validate_masks()?;
    if w.stage() != GateStage::Adaptive {
        return Err(SaaError::AlreadyIntervened);
    }
    for m in &policy.masks {
        if m.len() != w.len() {
            return Err(SaaError::MaskLength {
                expected: w.len(),
                got: m.len(),
            });
        }
    }

    let in_window = step_index < policy.window(total_steps);
    let mut shaped = if in_window {
        match policy.mask_for(id_label) {
            Some(own) => intervene(w, own, policy.beta)?.values,
            None => w.values().to_vec(),
        }
    } else {
        w.values().to_vec()
    };

    for mask in policy.masks.iter().filter(|m| m.label() != id_label) {
        for (v, &covered) in shaped.iter_mut().zip(mask.bits()) {
            if covered {
                *v = T::zero();
            }
        }
    }

    Ok(GatingWeights {
        values: shaped,
        stage: GateStage::Intervened,
    })
}

/// One identity's conditioning inside a multi-identity forward.
#[derive(Clone, Copy, Debug)]
pub struct IdentityFeatures {
    /// `[k, d_f]` reference face tokens.
    pub tokens: TensorId,
    pub proj: AttentionProjection,
}

/// Multi-identity gated injection. Per-identity contributions are summed in
/// identity-label order, so the output is bit-identical under any
/// permutation of the input list. Masks pair with identities positionally.
/// Returns the new latent plus the effective gate per identity (input order).
pub fn saa_multi_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    faces: &[IdentityFeatures],
    policy: &LayoutPolicy,
    step_index: usize,
    total_steps: usize,
) -> Result<(TensorId, Vec<GatingWeights<T>>), SaaError> {
    if faces.is_empty() {
        return Err(SaaError::NoIdentities);
    }
    if policy.masks.len() != faces.len() {
        return Err(SaaError::MaskCount {
            masks: policy.masks.len(),
            identities: faces.len(),
        });
    }
    policy.validate_masks()?;

    let mut order: Vec<usize> = (0..faces.len()).collect();
    order.sort_by_key(|&i| policy.masks[i].label());
    for pair in order.windows(2) {
        if policy.masks[pair[0]].label() == policy.masks[pair[1]].label() {
            return Err(SaaError::DuplicateLabel(policy.masks[pair[0]].label()));
        }
    }

    let mut gates: Vec<Option<GatingWeights<T>>> = vec![None; faces.len()];
    let mut acc = z;
    for &i in &order {
        let label = policy.masks[i].label();
        let adaptive = activation_weights(tape, z, faces[i].tokens, &faces[i].proj)?;
        let mut gate = multi_id_gate(&adaptive, policy, label, step_index, total_steps)?;
        gate.apply_floor(policy.gate_floor);
        let attn = attention_output(tape, z, faces[i].tokens, &faces[i].proj)?;
        let w = tape.leaf(Tensor::vector(gate.values().to_vec())?);
        acc = tape.gated_residual(acc, attn, w)?;
        gates[i] = Some(gate);
    }
    Ok((acc, gates.into_iter().map(|g| g.expect("filled")).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Stream};
    use crate::tensor::ParamSet;

    fn leaf_mat(tape: &mut Tape<f64>, r: usize, c: usize, data: Vec<f64>) -> TensorId {
        tape.leaf(Tensor::matrix(r, c, data).unwrap())
    }

    fn identity_proj(tape: &mut Tape<f64>, d: usize) -> AttentionProjection {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let wq = leaf_mat(tape, d, d, eye.clone());
        let wk = leaf_mat(tape, d, d, eye.clone());
        let wv = leaf_mat(tape, d, d, eye);
        AttentionProjection::new(wq, wk, wv, 1)
    }

    fn random_case(seed: u64) -> (Tape<f64>, TensorId, TensorId, AttentionProjection) {
        let mut s = Stream::new(seed, Purpose::Eval, 0);
        let mut tape = Tape::new();
        let rand = |s: &mut Stream, n: usize| (0..n).map(|_| s.normal()).collect::<Vec<_>>();
        let zd = rand(&mut s, 12);
        let cfd = rand(&mut s, 6);
        let wqd = rand(&mut s, 9);
        let wkd = rand(&mut s, 9);
        let wvd = rand(&mut s, 9);
        let z = leaf_mat(&mut tape, 4, 3, zd);
        let cf = leaf_mat(&mut tape, 2, 3, cfd);
        let wq = leaf_mat(&mut tape, 3, 3, wqd);
        let wk = leaf_mat(&mut tape, 3, 3, wkd);
        let wv = leaf_mat(&mut tape, 3, 3, wvd);
        (tape, z, cf, AttentionProjection::new(wq, wk, wv, 1))
    }

    #[test]
    fn activation_weights_minmax_endpoints() {
        // Q = I2 queries, one key [2,0]: logit sums [2,0] -> w = [1,0].
        let mut tape = Tape::new();
        let z = leaf_mat(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let cf = leaf_mat(&mut tape, 1, 2, vec![2.0, 0.0]);
        let proj = identity_proj(&mut tape, 2);
        let w = activation_weights(&mut tape, z, cf, &proj).unwrap();
        assert_eq!(w.values(), &[1.0, 0.0]);
        assert_eq!(w.stage(), GateStage::Adaptive);
    }

    #[test]
    fn identical_queries_degenerate_to_zero_gate() {
        let mut tape = Tape::new();
        let z = leaf_mat(&mut tape, 3, 2, vec![0.7, -0.2, 0.7, -0.2, 0.7, -0.2]);
        let cf = leaf_mat(&mut tape, 2, 2, vec![1.0, 2.0, -0.5, 0.3]);
        let proj = identity_proj(&mut tape, 2);
        let w = activation_weights(&mut tape, z, cf, &proj).unwrap();
        assert_eq!(w.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gates_invariant_under_positive_logit_scaling() {
        // Scaling z by a power of two scales the logits exactly, and min-max
        // normalization is positive-affine invariant, so the gate is
        // bit-identical.
        let (mut tape, z, cf, proj) = random_case(41);
        let w1 = activation_weights(&mut tape, z, cf, &proj).unwrap();
        let z4 = tape.mul_scalar(z, 4.0).unwrap();
        let w2 = activation_weights(&mut tape, z4, cf, &proj).unwrap();
        let bits =
            |w: &GatingWeights<f64>| w.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w1), bits(&w2));

        // Non-power-of-two scaling (e.g. the 1/sqrt(d) factor) agrees to 1e-12.
        let scale = 1.0 / (3.0f64).sqrt();
        let zs = tape.mul_scalar(z, scale).unwrap();
        let w3 = activation_weights(&mut tape, zs, cf, &proj).unwrap();
        for (a, b) in w1.values().iter().zip(w3.values()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn adaptive_gate_hits_exact_endpoints() {
        let (mut tape, z, cf, proj) = random_case(7);
        let w = activation_weights(&mut tape, z, cf, &proj).unwrap();
        assert!(w.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(w.values().iter().filter(|&&v| v == 0.0).count(), 1);
        assert_eq!(w.values().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn saa_forward_zero_gate_is_bitwise_input() {
        let (mut tape, z, cf, proj) = random_case(11);
        let gate = GatingWeights::zeros(4);
        let out = saa_forward(&mut tape, z, cf, &proj, &gate).unwrap();
        let zb: Vec<u64> = tape.value(z).data().iter().map(|v| v.to_bits()).collect();
        let ob: Vec<u64> = tape.value(out).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(zb, ob);
    }

    #[test]
    fn saa_forward_unit_gate_is_residual_cross_attention() {
        let (mut tape, z, cf, proj) = random_case(13);
        let gate = GatingWeights::ones(4);
        let out = saa_forward(&mut tape, z, cf, &proj, &gate).unwrap();
        let attn = attention_output(&mut tape, z, cf, &proj).unwrap();
        let reference = tape.add(z, attn).unwrap();
        for (a, b) in tape
            .value(out)
            .data()
            .iter()
            .zip(tape.value(reference).data())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn saa_forward_scalar_hand_case() {
        // n=2, k=1, d=1: z = [1, 2], V = [3]; a single key makes softmax 1,
        // so each query reads 3; w = [1, 0] -> z_new = [4, 2].
        let mut tape = Tape::new();
        let z = leaf_mat(&mut tape, 2, 1, vec![1.0, 2.0]);
        let cf = leaf_mat(&mut tape, 1, 1, vec![3.0]);
        let proj = identity_proj(&mut tape, 1);
        let gate = GatingWeights::<f64>::adaptive(vec![1.0, 0.0]).unwrap();
        let out = saa_forward(&mut tape, z, cf, &proj, &gate).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 2.0]);
    }

    #[test]
    fn intervene_beta_zero_is_identity() {
        let w = GatingWeights::<f64>::adaptive(vec![0.3, 0.8, 0.0, 1.0]).unwrap();
        let mask = RegionMask::from_bits(vec![true, false, true, false], 0).unwrap();
        let out = intervene(&w, &mask, 0.0).unwrap();
        let wb: Vec<u64> = w.values().iter().map(|v| v.to_bits()).collect();
        let ob: Vec<u64> = out.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(wb, ob);
        assert_eq!(out.stage(), GateStage::Intervened);
    }

    #[test]
    fn intervene_hand_case() {
        let w = GatingWeights::<f64>::adaptive(vec![0.5, 0.2]).unwrap();
        let mask = RegionMask::from_bits(vec![true, false], 0).unwrap();
        let out = intervene(&w, &mask, 2.0).unwrap();
        assert!((out.values()[0] - 2.5).abs() < 1e-15);
        assert!((out.values()[1] - 0.2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn intervene_saturated_mask_adds_beta_everywhere() {
        let w = GatingWeights::<f64>::adaptive(vec![0.1, 0.9, 0.4]).unwrap();
        let mask = RegionMask::from_bits(vec![true, true, true], 0).unwrap();
        let out = intervene(&w, &mask, 2.0).unwrap();
        assert_eq!(out.values(), &[2.1, 2.9, 2.4]);
    }

    #[test]
    fn intervene_rejects_negative_beta_and_double_application() {
        let w = GatingWeights::<f64>::adaptive(vec![0.5]).unwrap();
        let mask = RegionMask::from_bits(vec![true], 0).unwrap();
        assert!(matches!(
            intervene(&w, &mask, -0.5),
            Err(SaaError::NegativeBeta(_))
        ));
        let once = intervene(&w, &mask, 1.0).unwrap();
        assert!(matches!(
            intervene(&once, &mask, 1.0),
            Err(SaaError::AlreadyIntervened)
        ));
    }

    fn six_query_policy() -> LayoutPolicy {
        let own =
            RegionMask::from_bits(vec![true, true, false, false, false, false], 0).unwrap();
        let other =
            RegionMask::from_bits(vec![false, false, true, true, false, false], 1).unwrap();
        LayoutPolicy::new(0.24, 2.0, vec![own, other]).unwrap()
    }

    #[test]
    fn multi_id_gate_inside_window() {
        // Step 0 of 50 with alpha 0.24, beta 2: own-mask entries w+2, other
        // identity's region hard-zeroed, background w/3.
        let w = GatingWeights::<f64>::adaptive(vec![0.5, 0.2, 0.9, 0.1, 0.6, 0.3]).unwrap();
        let policy = six_query_policy();
        let out = multi_id_gate(&w, &policy, 0, 0, 50).unwrap();
        let expected = [2.5, 2.2, 0.0, 0.0, 0.2, 0.1];
        for (a, e) in out.values().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn multi_id_gate_after_window_reverts_to_adaptive() {
        // ceil(0.24 * 50) = 12, so step 12 is outside the window: own and
        // background revert to adaptive, other's region stays zero.
        let w = GatingWeights::<f64>::adaptive(vec![0.5, 0.2, 0.9, 0.1, 0.6, 0.3]).unwrap();
        let policy = six_query_policy();
        assert_eq!(policy.window(50), 12);
        let out = multi_id_gate(&w, &policy, 0, 12, 50).unwrap();
        let expected = [0.5, 0.2, 0.0, 0.0, 0.6, 0.3];
        for (a, e) in out.values().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn multi_id_gate_single_identity_matches_intervene() {
        let w = GatingWeights::<f64>::adaptive(vec![0.5, 0.2, 0.7]).unwrap();
        let own = RegionMask::from_bits(vec![true, false, false], 0).unwrap();
        let policy = LayoutPolicy::new(0.5, 2.0, vec![own.clone()]).unwrap();
        let gated = multi_id_gate(&w, &policy, 0, 0, 10).unwrap();
        let direct = intervene(&w, &own, 2.0).unwrap();
        assert_eq!(gated.values(), direct.values());
        // Outside the window, with no other identities, it is a passthrough.
        let late = multi_id_gate(&w, &policy, 0, 9, 10).unwrap();
        assert_eq!(late.values(), w.values());
    }

    #[test]
    fn overlapping_masks_error_names_the_pair() {
        let a = RegionMask::from_bits(vec![true, true, false], 3).unwrap();
        let b = RegionMask::from_bits(vec![false, true, true], 7).unwrap();
        let policy = LayoutPolicy {
            alpha: 0.2,
            beta: 1.0,
            masks: vec![a, b],
            gate_floor: 0.0,
        };
        match policy.validate_masks() {
            Err(SaaError::OverlappingMasks { a: 3, b: 7 }) => {}
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    fn multi_setup(
        seed: u64,
        tape: &mut Tape<f64>,
    ) -> (TensorId, Vec<IdentityFeatures>, LayoutPolicy) {
        let mut s = Stream::new(seed, Purpose::Eval, 1);
        let rand = |n: usize, s: &mut Stream| (0..n).map(|_| s.normal()).collect::<Vec<_>>();
        let zd = rand(8, &mut s);
        let z = tape.leaf(Tensor::matrix(4, 2, zd).unwrap());
        let mut faces = Vec::new();
        for _ in 0..2 {
            let tok = rand(6, &mut s);
            let tokens = tape.leaf(Tensor::matrix(3, 2, tok).unwrap());
            let wq = rand(4, &mut s);
            let wk = rand(4, &mut s);
            let wv = rand(4, &mut s);
            let proj = AttentionProjection::new(
                tape.leaf(Tensor::matrix(2, 2, wq).unwrap()),
                tape.leaf(Tensor::matrix(2, 2, wk).unwrap()),
                tape.leaf(Tensor::matrix(2, 2, wv).unwrap()),
                1,
            );
            faces.push(IdentityFeatures { tokens, proj });
        }
        let m0 = RegionMask::from_bits(vec![true, false, false, false], 0).unwrap();
        let m1 = RegionMask::from_bits(vec![false, true, false, false], 1).unwrap();
        let policy = LayoutPolicy::new(0.25, 2.0, vec![m0, m1])
            .unwrap()
            .with_gate_floor(0.0);
        (z, faces, policy)
    }

    #[test]
    fn multi_forward_single_identity_matches_saa_forward() {
        let mut tape = Tape::new();
        let (z, faces, _) = multi_setup(21, &mut tape);
        let m0 = RegionMask::from_bits(vec![true, false, false, false], 0).unwrap();
        let policy = LayoutPolicy::new(0.25, 2.0, vec![m0])
            .unwrap()
            .with_gate_floor(0.0);
        let (out, gates) = saa_multi_forward(&mut tape, z, &faces[..1], &policy, 0, 8).unwrap();
        let direct =
            saa_forward(&mut tape, z, faces[0].tokens, &faces[0].proj, &gates[0]).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(direct).data());
    }

    #[test]
    fn multi_forward_is_order_invariant_bitwise() {
        let mut tape = Tape::new();
        let (z, faces, policy) = multi_setup(33, &mut tape);
        let (out_ab, _) = saa_multi_forward(&mut tape, z, &faces, &policy, 0, 8).unwrap();
        let swapped_faces = vec![faces[1], faces[0]];
        let swapped_policy = LayoutPolicy {
            masks: vec![policy.masks[1].clone(), policy.masks[0].clone()],
            ..policy.clone()
        };
        let (out_ba, _) =
            saa_multi_forward(&mut tape, z, &swapped_faces, &swapped_policy, 0, 8).unwrap();
        let bits = |id: TensorId, t: &Tape<f64>| {
            t.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(out_ab, &tape), bits(out_ba, &tape));
    }

    #[test]
    fn masked_rows_are_independent_of_other_identity_features() {
        let mut tape = Tape::new();
        let (z, mut faces, policy) = multi_setup(55, &mut tape);
        let (out1, _) = saa_multi_forward(&mut tape, z, &faces, &policy, 0, 8).unwrap();
        // Perturb identity 1's tokens; rows under identity 0's mask must not move.
        let perturbed: Vec<f64> = tape
            .value(faces[1].tokens)
            .data()
            .iter()
            .map(|v| v + 0.37)
            .collect();
        faces[1].tokens = tape.leaf(Tensor::matrix(3, 2, perturbed).unwrap());
        let (out2, _) = saa_multi_forward(&mut tape, z, &faces, &policy, 0, 8).unwrap();
        let row0_a = &tape.value(out1).data()[0..2];
        let row0_b = &tape.value(out2).data()[0..2];
        for (a, b) in row0_a.iter().zip(row0_b) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gate_floor_zeroes_weak_entries_only() {
        let mut g = GatingWeights::<f64>::adaptive(vec![0.01, 0.05, 0.2, 1.0]).unwrap();
        g.apply_floor(0.05);
        assert_eq!(g.values(), &[0.0, 0.05, 0.2, 1.0]);
    }

    #[test]
    fn saa_block_passes_grad_check() {
        use crate::tensor::grad_check;
        let mut s = Stream::new(77, Purpose::Eval, 2);
        let mut p = ParamSet::new();
        let rand =
            |n: usize, s: &mut Stream| (0..n).map(|_| s.normal() * 0.5).collect::<Vec<f64>>();
        let zd = rand(12, &mut s);
        let cfd = rand(6, &mut s);
        let wqd = rand(9, &mut s);
        let wkd = rand(9, &mut s);
        let wvd = rand(9, &mut s);
        p.insert("z", Tensor::matrix(4, 3, zd).unwrap()).unwrap();
        p.insert("cf", Tensor::matrix(2, 3, cfd).unwrap()).unwrap();
        p.insert("wq", Tensor::matrix(3, 3, wqd).unwrap()).unwrap();
        p.insert("wk", Tensor::matrix(3, 3, wkd).unwrap()).unwrap();
        p.insert("wv", Tensor::matrix(3, 3, wvd).unwrap()).unwrap();
        let err = grad_check(
            |tape, bind| {
                let proj =
                    AttentionProjection::new(bind.id("wq")?, bind.id("wk")?, bind.id("wv")?, 1);
                let (out, _) = saa_forward_adaptive(tape, bind.id("z")?, bind.id("cf")?, &proj)
                    .map_err(|e| match e {
                        SaaError::Tensor(t) => t,
                        _ => TensorError::NonFinite { op: "saa" },
                    })?;
                let sq = tape.mul(out, out)?;
                tape.mean_all(sq)
            },
            &mut p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "SAA block grad error {err}");
    }
}
