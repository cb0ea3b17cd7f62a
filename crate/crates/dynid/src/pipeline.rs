//! Toy latent diffusion: noise schedule, token-transformer denoiser with a
//! gated identity-injection branch in every block, and a deterministic DDIM
//! sampler with classifier-free guidance.
//!
//! The latent grid is flattened to `n = H x W` tokens of width `d_z`; there
//! is no VAE, the latent space is the model space. Each denoiser block runs
//! self-attention, text cross-attention, the gated identity branch, then an
//! MLP, all residual at width `d_z`, with a sinusoidal timestep embedding
//! added on entry and removed at readout so the initial network is the
//! identity map.

use crate::encoders::{FaceEncoder, TextEncoder};
use crate::rng::{Purpose, Stream};
use crate::saa::{
    attention_output, saa_forward_adaptive, saa_multi_forward, AttentionProjection,
    IdentityFeatures, LayoutPolicy, SaaError,
};
use crate::tensor::{c, NameTable, ParamSet, Scalar, Tape, Tensor, TensorError, TensorId};
use crate::world::{WorldError, WorldSample};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Saa(#[from] SaaError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("bad noise schedule: {0}")]
    BadSchedule(String),
    #[error("timestep {t} out of range (t_train = {t_train})")]
    TOutOfRange { t: usize, t_train: usize },
    #[error("sampler steps {steps} invalid for t_train = {t_train}")]
    BadSteps { steps: usize, t_train: usize },
    #[error("{what}: shape mismatch")]
    Mismatch { what: &'static str },
}

/// Forward-corruption schedule with cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `t_train` steps.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self, PipelineError> {
        if t_train < 2 {
            return Err(PipelineError::BadSchedule("t_train must be >= 2".into()));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (t_train - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, PipelineError> {
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(PipelineError::BadSchedule(
                "betas must lie strictly in (0,1)".into(),
            ));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0] || w[1] <= 0.0) {
            return Err(PipelineError::BadSchedule(
                "alpha_bars must be strictly decreasing in (0,1]".into(),
            ));
        }
        Ok(NoiseSchedule {
            t_train: betas.len(),
            betas,
            alpha_bars,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise<T: Scalar>(
        &self,
        z0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>, PipelineError> {
        if t >= self.t_train {
            return Err(PipelineError::TOutOfRange {
                t,
                t_train: self.t_train,
            });
        }
        add_noise_with(self.alpha_bars[t], z0, eps)
    }
}

/// The corruption formula for an explicit `alpha_bar`.
pub fn add_noise_with<T: Scalar>(
    alpha_bar: f64,
    z0: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<Tensor<T>, PipelineError> {
    if z0.shape() != eps.shape() {
        return Err(PipelineError::Mismatch { what: "add_noise" });
    }
    let a: T = c(alpha_bar.sqrt());
    let b: T = c((1.0 - alpha_bar).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Ok(Tensor::new(z0.shape().to_vec(), data)?)
}

/// Classifier-free guidance: `eps_u + scale * (eps_c - eps_u)`.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &Tensor<T>,
    eps_uncond: &Tensor<T>,
    scale: f64,
) -> Result<Tensor<T>, PipelineError> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(PipelineError::Mismatch { what: "cfg_combine" });
    }
    let s: T = c(scale);
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&cv, &uv)| uv + s * (cv - uv))
        .collect();
    Ok(Tensor::new(eps_cond.shape().to_vec(), data)?)
}

// ── Denoiser ────────────────────────────────────────────────────────────

/// Architecture of the token-transformer denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_z: usize,
    pub d_f: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_z: 32,
            d_f: 32,
            blocks: 2,
            heads: 1,
            mlp_hidden: 64,
        }
    }
}

/// How the identity branch is gated for one forward pass.
pub enum FaceGating<'a> {
    /// Gates computed on-tape from the current latent; used in training and
    /// plain conditional passes. Requires exactly one identity.
    Adaptive,
    /// Identity injection fully off (the unconditional CFG branch).
    Zero,
    /// Layout-policy shaping for multi-identity sampling.
    Policy {
        policy: &'a LayoutPolicy,
        step_index: usize,
        total_steps: usize,
    },
}

/// Conditioning inputs for one denoiser pass.
pub struct Conditioning<'a> {
    /// `[t, d_f]` text tokens (zeros for the unconditional branch).
    pub text: TensorId,
    /// Reference face tokens, one entry per identity.
    pub faces: Vec<TensorId>,
    pub gating: FaceGating<'a>,
}

/// Per-block gate values recorded during a forward pass, for tracing.
#[derive(Clone, Debug)]
pub struct BlockGates<T> {
    pub block: usize,
    /// One gate vector per identity (input order).
    pub gates: Vec<Vec<T>>,
}

pub struct Denoiser {
    cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Self {
        Denoiser { cfg }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..self.cfg.blocks {
            for site in ["self", "text", "saa"] {
                for w in ["wq", "wk", "wv"] {
                    names.push(format!("denoiser.b{b}.{site}.{w}"));
                }
            }
            for p in ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] {
                names.push(format!("denoiser.b{b}.{p}"));
            }
        }
        names
    }

    /// Initialize denoiser parameters. Value projections and the second MLP
    /// layer start at zero, so the whole network is the identity map on
    /// entry and the initial loss sits at the copy-the-input baseline.
    pub fn init_params<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        init: &mut Stream,
    ) -> Result<(), TensorError> {
        let d_z = self.cfg.d_z;
        let d_f = self.cfg.d_f;
        let h = self.cfg.mlp_hidden;
        let qk_scale = 1.0 / (d_z as f64).sqrt();
        for b in 0..self.cfg.blocks {
            for (site, kv_dim) in [("self", d_z), ("text", d_f), ("saa", d_f)] {
                for (w, dim_in) in [("wq", d_z), ("wk", kv_dim)] {
                    // The injection branch's key map starts near zero while
                    // its query map keeps a full random code: learned key
                    // structure then shapes the gate logits at first order
                    // instead of fighting a frozen random bilinear form, and
                    // min-max normalization keeps tiny logits gating fully.
                    let scale = if site == "saa" && w == "wk" {
                        1e-3 * qk_scale
                    } else {
                        qk_scale
                    };
                    let data: Vec<T> = (0..dim_in * d_z)
                        .map(|_| T::from_f64(init.normal() * scale))
                        .collect();
                    params.insert(
                        &format!("denoiser.b{b}.{site}.{w}"),
                        Tensor::new(vec![dim_in, d_z], data)?,
                    )?;
                }
                params.insert(
                    &format!("denoiser.b{b}.{site}.wv"),
                    Tensor::zeros(vec![kv_dim, d_z]),
                )?;
            }
            // Extra gain on the first MLP layer: richer hidden features for
            // the zero-initialized second layer to draw on.
            let w1: Vec<T> = (0..d_z * h)
                .map(|_| T::from_f64(init.normal() * 2.0 * qk_scale))
                .collect();
            params.insert(
                &format!("denoiser.b{b}.mlp.w1"),
                Tensor::new(vec![d_z, h], w1)?,
            )?;
            params.insert(&format!("denoiser.b{b}.mlp.b1"), Tensor::zeros(vec![h]))?;
            params.insert(
                &format!("denoiser.b{b}.mlp.w2"),
                Tensor::zeros(vec![h, d_z]),
            )?;
            params.insert(&format!("denoiser.b{b}.mlp.b2"), Tensor::zeros(vec![d_z]))?;
        }
        Ok(())
    }

    fn proj(
        &self,
        names: &NameTable,
        block: usize,
        site: &str,
    ) -> Result<AttentionProjection, TensorError> {
        Ok(AttentionProjection::new(
            names.id(&format!("denoiser.b{block}.{site}.wq"))?,
            names.id(&format!("denoiser.b{block}.{site}.wk"))?,
            names.id(&format!("denoiser.b{block}.{site}.wv"))?,
            self.cfg.heads,
        ))
    }

    /// Sinusoidal timestep embedding of width `d_z`.
    pub(crate) fn timestep_embedding<T: Scalar>(&self, t: usize, t_train: usize) -> Tensor<T> {
        let d = self.cfg.d_z;
        let half = d / 2;
        let pos = t as f64 / t_train as f64 * 1000.0;
        let mut data = vec![T::zero(); d];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data[2 * i] = T::from_f64((pos * freq).sin());
            data[2 * i + 1] = T::from_f64((pos * freq).cos());
        }
        Tensor::new(vec![d], data).expect("finite embedding")
    }

    /// Predict the noise in `z_t`. Returns the prediction and the per-block
    /// identity-gate values actually used.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        z_t: TensorId,
        t: usize,
        t_train: usize,
        cond: &Conditioning,
    ) -> Result<(TensorId, Vec<BlockGates<T>>), PipelineError> {
        let emb = self.timestep_embedding::<T>(t, t_train);
        let neg = Tensor::new(vec![self.cfg.d_z], emb.data().iter().map(|&v| -v).collect())?;
        let emb = tape.leaf(emb);
        let neg = tape.leaf(neg);

        let mut h = tape.add_row(z_t, emb)?;
        let mut traces = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let self_proj = self.proj(names, b, "self")?;
            let attn = attention_output(tape, h, h, &self_proj)?;
            h = tape.add(h, attn)?;

            let text_proj = self.proj(names, b, "text")?;
            let text_attn = attention_output(tape, h, cond.text, &text_proj)?;
            h = tape.add(h, text_attn)?;

            let saa_proj = self.proj(names, b, "saa")?;
            let mut gates = Vec::with_capacity(cond.faces.len());
            match &cond.gating {
                FaceGating::Zero => {
                    for _ in &cond.faces {
                        gates.push(vec![T::zero(); tape.value(h).shape()[0]]);
                    }
                }
                FaceGating::Adaptive => {
                    if cond.faces.len() != 1 {
                        return Err(PipelineError::Mismatch {
                            what: "adaptive gating expects one identity",
                        });
                    }
                    let (out, w) = saa_forward_adaptive(tape, h, cond.faces[0], &saa_proj)?;
                    gates.push(tape.value(w).data().to_vec());
                    h = out;
                }
                FaceGating::Policy {
                    policy,
                    step_index,
                    total_steps,
                } => {
                    let faces: Vec<IdentityFeatures> = cond
                        .faces
                        .iter()
                        .map(|&tokens| IdentityFeatures {
                            tokens,
                            proj: saa_proj,
                        })
                        .collect();
                    let (out, ws) =
                        saa_multi_forward(tape, h, &faces, policy, *step_index, *total_steps)?;
                    for w in &ws {
                        gates.push(w.values().to_vec());
                    }
                    h = out;
                }
            }
            traces.push(BlockGates { block: b, gates });

            let mlp = tape.mlp2(
                h,
                names.id(&format!("denoiser.b{b}.mlp.w1"))?,
                names.id(&format!("denoiser.b{b}.mlp.b1"))?,
                names.id(&format!("denoiser.b{b}.mlp.w2"))?,
                names.id(&format!("denoiser.b{b}.mlp.b2"))?,
            )?;
            h = tape.add(h, mlp)?;
        }
        let eps_hat = tape.add_row(h, neg)?;
        Ok((eps_hat, traces))
    }
}

/// Mean anchoring loss over a batch on one tape: fresh `(t, eps)` per
/// sample, `mse(eps_hat, eps)` averaged across samples. Face tokens are
/// produced on-tape so the projection trains; frozen pieces enter as
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn anchoring_loss<T: Scalar>(
    tape: &mut Tape<T>,
    names: &NameTable,
    denoiser: &Denoiser,
    face: &FaceEncoder,
    text: &TextEncoder,
    schedule: &NoiseSchedule,
    samples: &[&WorldSample],
    world: &crate::world::WorldConfig,
    noise: &mut Stream,
) -> Result<TensorId, PipelineError> {
    let mut acc: Option<TensorId> = None;
    for sample in samples {
        let z0: Tensor<T> = sample.latent(world);
        let t = noise.below(schedule.t_train());
        let eps = Tensor::new(
            z0.shape().to_vec(),
            (0..z0.numel())
                .map(|_| T::from_f64(noise.normal()))
                .collect(),
        )?;
        let z_t = schedule.add_noise(&z0, t, &eps)?;
        let z_t = tape.leaf(z_t);
        let eps_id = tape.leaf(eps);
        let xi = face.encode(tape, names, sample)?;
        let tau = text.tokens(tape, &sample.prompt)?;
        let cond = Conditioning {
            text: tau,
            faces: vec![xi],
            gating: FaceGating::Adaptive,
        };
        let (eps_hat, _) = denoiser.forward(tape, names, z_t, t, schedule.t_train(), &cond)?;
        let loss = tape.mse(eps_hat, eps_id)?;
        acc = Some(match acc {
            None => loss,
            Some(a) => tape.add(a, loss)?,
        });
    }
    let total = acc.ok_or(PipelineError::Mismatch {
        what: "empty batch",
    })?;
    Ok(tape.mul_scalar(total, c(1.0 / samples.len() as f64))?)
}

// ── DDIM sampling ───────────────────────────────────────────────────────

/// Anything that can predict noise for the sampler. Implementations build
/// their own tapes; the sampler works on plain tensors.
pub trait NoisePredictor<T: Scalar> {
    fn predict(
        &mut self,
        z_t: &Tensor<T>,
        t: usize,
        step_index: usize,
        total_steps: usize,
    ) -> Result<(Tensor<T>, Vec<BlockGates<T>>), PipelineError>;
}

/// Always predicts zero noise; the closed-form oracle case.
pub struct ZeroPredictor;

impl<T: Scalar> NoisePredictor<T> for ZeroPredictor {
    fn predict(
        &mut self,
        z_t: &Tensor<T>,
        _t: usize,
        _step_index: usize,
        _total_steps: usize,
    ) -> Result<(Tensor<T>, Vec<BlockGates<T>>), PipelineError> {
        Ok((Tensor::zeros(z_t.shape().to_vec()), Vec::new()))
    }
}

/// Knows the true clean latent and returns the exact noise implied by the
/// corruption formula; inverts the forward process step for step.
pub struct OraclePredictor<T> {
    pub z0: Tensor<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> NoisePredictor<T> for OraclePredictor<T> {
    fn predict(
        &mut self,
        z_t: &Tensor<T>,
        t: usize,
        _step_index: usize,
        _total_steps: usize,
    ) -> Result<(Tensor<T>, Vec<BlockGates<T>>), PipelineError> {
        let ab = self.schedule.alpha_bar(t);
        let sa: T = c(ab.sqrt());
        let sb: T = c((1.0 - ab).sqrt().max(f64::MIN_POSITIVE));
        let data = z_t
            .data()
            .iter()
            .zip(self.z0.data())
            .map(|(&zt, &z0)| (zt - sa * z0) / sb)
            .collect();
        Ok((Tensor::new(z_t.shape().to_vec(), data)?, Vec::new()))
    }
}

/// One recorded sampler step.
pub struct TraceStep<T> {
    pub step: usize,
    pub t: usize,
    pub gates: Vec<BlockGates<T>>,
    pub latent: Vec<T>,
}

/// Deterministic DDIM trajectory output.
pub struct SampleRun<T> {
    pub latent: Tensor<T>,
    pub trace: Option<Vec<TraceStep<T>>>,
}

/// The `steps` evenly spaced timesteps, noisiest first, hitting both ends
/// of the training range.
pub fn ddim_timesteps(t_train: usize, steps: usize) -> Result<Vec<usize>, PipelineError> {
    if steps == 0 || steps > t_train {
        return Err(PipelineError::BadSteps { steps, t_train });
    }
    if steps == 1 {
        return Ok(vec![t_train - 1]);
    }
    Ok((0..steps)
        .map(|i| {
            ((t_train - 1) as f64 * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize
        })
        .collect())
}

/// Deterministic (eta = 0) DDIM sampling from seeded Gaussian noise.
/// Per step: `z0_pred = (z - sqrt(1-abar) eps) / sqrt(abar)`, then
/// `z_next = sqrt(abar_prev) z0_pred + sqrt(1-abar_prev) eps`, with
/// `abar_prev = 1` on the final step.
pub fn ddim_sample<T: Scalar>(
    predictor: &mut dyn NoisePredictor<T>,
    schedule: &NoiseSchedule,
    shape: Vec<usize>,
    steps: usize,
    seed: u64,
    trajectory: u64,
    record_trace: bool,
) -> Result<SampleRun<T>, PipelineError> {
    let timesteps = ddim_timesteps(schedule.t_train(), steps)?;
    let mut noise = Stream::new(seed, Purpose::Sample, trajectory);
    let numel: usize = shape.iter().product();
    let mut z = Tensor::new(
        shape.clone(),
        (0..numel).map(|_| T::from_f64(noise.normal())).collect(),
    )?;
    let mut trace = record_trace.then(Vec::new);

    for (i, &t) in timesteps.iter().enumerate() {
        let (eps_hat, gates) = predictor.predict(&z, t, i, steps)?;
        if eps_hat.shape() != z.shape() {
            return Err(PipelineError::Mismatch { what: "predictor" });
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = if i + 1 < timesteps.len() {
            schedule.alpha_bar(timesteps[i + 1])
        } else {
            1.0
        };
        let sa: T = c(ab.sqrt());
        let sb: T = c((1.0 - ab).sqrt());
        let sa_prev: T = c(ab_prev.sqrt());
        let sb_prev: T = c((1.0 - ab_prev).sqrt());
        let data: Vec<T> = z
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&zt, &e)| {
                let z0_pred = (zt - sb * e) / sa;
                sa_prev * z0_pred + sb_prev * e
            })
            .collect();
        z = Tensor::new(shape.clone(), data)?;
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                step: i,
                t,
                gates,
                latent: z.data().to_vec(),
            });
        }
    }
    Ok(SampleRun { latent: z, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::tensor::grad_check;
    use crate::world::{make_dataset, FrozenWorldMaps, WorldConfig};

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        assert_eq!(s.t_train(), 200);
        assert!(s.alpha_bar(0) < 1.0 && s.alpha_bar(0) > 0.99);
        for t in 1..200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!(s.beta(0) > 0.0);
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
    }

    #[test]
    fn add_noise_limits_and_scalar_value() {
        let z0 = Tensor::<f64>::vector(vec![2.0]).unwrap();
        let eps = Tensor::<f64>::vector(vec![0.5]).unwrap();
        // alpha_bar = 1 keeps the sample.
        let same = add_noise_with(1.0, &z0, &eps).unwrap();
        assert_eq!(same.data(), &[2.0]);
        // alpha_bar -> 0 leaves pure noise.
        let noise = add_noise_with(0.0, &z0, &eps).unwrap();
        assert_eq!(noise.data(), &[0.5]);
        // alpha_bar = 0.25, z0 = 2, eps = 0 gives exactly 1.
        let eps0 = Tensor::<f64>::vector(vec![0.0]).unwrap();
        let half = add_noise_with(0.25, &z0, &eps0).unwrap();
        assert_eq!(half.data(), &[1.0]);
    }

    #[test]
    fn add_noise_range_check() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let z = Tensor::<f64>::vector(vec![0.0]).unwrap();
        assert!(matches!(
            s.add_noise(&z, 10, &z),
            Err(PipelineError::TOutOfRange { .. })
        ));
    }

    #[test]
    fn cfg_combine_values() {
        let cond = Tensor::<f64>::vector(vec![2.0]).unwrap();
        let uncond = Tensor::<f64>::vector(vec![1.0]).unwrap();
        assert_eq!(cfg_combine(&cond, &uncond, 1.0).unwrap().data(), &[2.0]);
        assert_eq!(cfg_combine(&cond, &uncond, 0.0).unwrap().data(), &[1.0]);
        assert_eq!(cfg_combine(&cond, &uncond, 5.0).unwrap().data(), &[6.0]);
        let bad = Tensor::<f64>::vector(vec![1.0, 2.0]).unwrap();
        assert!(cfg_combine(&cond, &bad, 1.0).is_err());
    }

    #[test]
    fn noise_mse_oracle_is_zero_and_zero_predictor_is_unit() {
        // mse(eps, eps) == 0 exactly; mse(0, eps) ~ 1 over 10k draws.
        let mut s = Stream::new(4, Purpose::Noise, 0);
        let eps: Vec<f64> = (0..10_000).map(|_| s.normal()).collect();
        let mut tape = Tape::new();
        let e = tape.input(vec![100, 100], eps).unwrap();
        let exact = tape.mse(e, e).unwrap();
        assert_eq!(tape.value(exact).item().unwrap(), 0.0);
        let zero = tape.leaf(Tensor::zeros(vec![100, 100]));
        let loss = tape.mse(zero, e).unwrap();
        let v = tape.value(loss).item().unwrap();
        assert!((v - 1.0).abs() < 0.05, "zero-predictor loss {v}");
        assert!(v >= 0.0);
    }

    #[test]
    fn ddim_timestep_grids() {
        assert_eq!(ddim_timesteps(200, 2).unwrap(), vec![199, 0]);
        let t20 = ddim_timesteps(200, 20).unwrap();
        assert_eq!(t20.len(), 20);
        assert_eq!(t20[0], 199);
        assert_eq!(*t20.last().unwrap(), 0);
        assert!(t20.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn zero_predictor_matches_closed_form() {
        // With eps_hat = 0 each update is z *= sqrt(abar_prev/abar), so the
        // final latent is z_T / sqrt(abar_{t0}).
        let schedule = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        for steps in [20usize, 50] {
            let run =
                ddim_sample::<f64>(&mut ZeroPredictor, &schedule, vec![3, 4], steps, 9, 0, false)
                    .unwrap();
            let mut noise = Stream::new(9, Purpose::Sample, 0);
            let init: Vec<f64> = (0..12).map(|_| noise.normal()).collect();
            let expected_scale = 1.0 / schedule.alpha_bar(199).sqrt();
            for (out, start) in run.latent.data().iter().zip(&init) {
                assert!(
                    (out - start * expected_scale).abs() < 1e-6,
                    "{out} vs {}",
                    start * expected_scale
                );
            }
        }
    }

    #[test]
    fn oracle_predictor_recovers_the_clean_latent() {
        let schedule = NoiseSchedule::linear(64, 1e-4, 2e-2).unwrap();
        let z0 = Tensor::<f64>::matrix(2, 3, vec![0.4, -1.2, 0.9, 2.0, -0.3, 0.05]).unwrap();
        let mut oracle = OraclePredictor {
            z0: z0.clone(),
            schedule: schedule.clone(),
        };
        let run = ddim_sample::<f64>(&mut oracle, &schedule, vec![2, 3], 64, 5, 3, false).unwrap();
        for (a, b) in run.latent.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let once =
            ddim_sample::<f64>(&mut ZeroPredictor, &schedule, vec![4, 4], 10, 77, 1, true).unwrap();
        let twice =
            ddim_sample::<f64>(&mut ZeroPredictor, &schedule, vec![4, 4], 10, 77, 1, true).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&once.latent), bits(&twice.latent));
        assert_eq!(once.trace.unwrap().len(), 10);
        let _ = twice.trace;
    }

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            grid_h: 6,
            grid_w: 6,
            d_z: 18,
            d_id: 4,
            expressions: 2,
            orientations: 2,
            scenes: 2,
            landmarks: 3,
            ..WorldConfig::default()
        }
    }

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            k: 2,
            c: 2,
            d_f: 6,
            proj_hidden: 8,
            landmark_dim: 4,
            landmark_hidden: 6,
            motion_hidden: 8,
        }
    }

    #[test]
    fn denoiser_preserves_shape_and_is_identity_at_init() {
        let world = tiny_world();
        let enc = tiny_enc();
        let den = Denoiser::new(DenoiserConfig {
            d_z: world.d_z,
            d_f: enc.d_f,
            blocks: 2,
            heads: 1,
            mlp_hidden: 8,
        });
        let maps = FrozenWorldMaps::new(&world).unwrap();
        let ds = make_dataset(2, 1, 0.5, 3, &maps).unwrap();
        let face = FaceEncoder::new(enc.clone(), world.clone());
        let text = TextEncoder::new(&enc, &world);
        let mut params = ParamSet::<f64>::new();
        let mut init = Stream::new(5, Purpose::Init, 0);
        den.init_params(&mut params, &mut init).unwrap();
        face.init_params(&mut params, &mut init).unwrap();

        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, &params, |_| false);
        let z = tape.leaf(ds.samples[0].latent::<f64>(&world));
        let xi = face.encode(&mut tape, &names, &ds.samples[0]).unwrap();
        let tau = text.tokens(&mut tape, &ds.samples[0].prompt).unwrap();
        let cond = Conditioning {
            text: tau,
            faces: vec![xi],
            gating: FaceGating::Adaptive,
        };
        let (eps_hat, traces) = den.forward(&mut tape, &names, z, 10, 100, &cond).unwrap();
        assert_eq!(tape.value(eps_hat).shape(), tape.value(z).shape());
        assert_eq!(traces.len(), 2);
        // Zero-init value paths make the initial network an exact identity.
        for (a, b) in tape.value(eps_hat).data().iter().zip(tape.value(z).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gating_matches_absent_face_branch() {
        let world = tiny_world();
        let enc = tiny_enc();
        let den = Denoiser::new(DenoiserConfig {
            d_z: world.d_z,
            d_f: enc.d_f,
            blocks: 1,
            heads: 1,
            mlp_hidden: 8,
        });
        let maps = FrozenWorldMaps::new(&world).unwrap();
        let ds = make_dataset(2, 1, 0.5, 3, &maps).unwrap();
        let face = FaceEncoder::new(enc.clone(), world.clone());
        let text = TextEncoder::new(&enc, &world);
        let mut params = ParamSet::<f64>::new();
        let mut init = Stream::new(5, Purpose::Init, 1);
        den.init_params(&mut params, &mut init).unwrap();
        face.init_params(&mut params, &mut init).unwrap();
        // Give the value paths real weights so branches would differ if the
        // gate were live.
        let mut s = Stream::new(9, Purpose::Init, 7);
        for site in ["self", "text", "saa"] {
            let name = format!("denoiser.b0.{site}.wv");
            let t = params.value_mut(&name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = s.normal() * 0.3);
        }
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, &params, |_| false);
        let z = tape.leaf(ds.samples[0].latent::<f64>(&world));
        let xi = face.encode(&mut tape, &names, &ds.samples[0]).unwrap();
        let tau = text.tokens(&mut tape, &ds.samples[0].prompt).unwrap();
        let zero_cond = Conditioning {
            text: tau,
            faces: vec![xi],
            gating: FaceGating::Zero,
        };
        let (eps_zero, _) = den.forward(&mut tape, &names, z, 3, 100, &zero_cond).unwrap();
        let no_face = Conditioning {
            text: tau,
            faces: vec![],
            gating: FaceGating::Zero,
        };
        let (eps_none, _) = den.forward(&mut tape, &names, z, 3, 100, &no_face).unwrap();
        assert_eq!(tape.value(eps_zero).data(), tape.value(eps_none).data());
    }

    #[test]
    fn denoiser_block_and_anchoring_loss_pass_grad_check() {
        let world = tiny_world();
        let enc = tiny_enc();
        let den = Denoiser::new(DenoiserConfig {
            d_z: world.d_z,
            d_f: enc.d_f,
            blocks: 1,
            heads: 2,
            mlp_hidden: 6,
        });
        let maps = FrozenWorldMaps::new(&world).unwrap();
        let ds = make_dataset(2, 1, 0.5, 11, &maps).unwrap();
        let face = FaceEncoder::new(enc.clone(), world.clone());
        let text = TextEncoder::new(&enc, &world);
        let mut params = ParamSet::<f64>::new();
        let mut init = Stream::new(5, Purpose::Init, 2);
        den.init_params(&mut params, &mut init).unwrap();
        face.init_params(&mut params, &mut init).unwrap();
        // Perturb the zero-init weights so the check explores a generic point.
        let mut jitter = Stream::new(6, Purpose::Init, 3);
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in &names {
            let t = params.value_mut(name).unwrap();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += jitter.normal() * 0.05);
        }
        let schedule = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
        let sample = &ds.samples[0];
        let err = grad_check(
            |tape, bind| {
                let table = NameTable::from_binding(bind);
                let mut noise = Stream::new(13, Purpose::Noise, 0);
                anchoring_loss(
                    tape, &table, &den, &face, &text, &schedule, &[sample], &world, &mut noise,
                )
                .map_err(|e| match e {
                    PipelineError::Tensor(t) => t,
                    other => panic!("unexpected {other}"),
                })
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "denoiser/anchoring grad error {err}");
    }
}
