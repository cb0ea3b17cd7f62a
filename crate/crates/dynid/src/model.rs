//! The assembled model: world maps, encoders, denoiser, reconfigurator and
//! schedule, built from one [`RunConfig`], plus the guided sampling
//! predictor that drives DDIM with classifier-free guidance.

use crate::config::RunConfig;
use crate::encoders::{FaceEncoder, MotionEncoder, TextEncoder};
use crate::imr::Imr;
use crate::pipeline::{
    cfg_combine, BlockGates, Conditioning, Denoiser, DenoiserConfig, FaceGating, NoisePredictor,
    NoiseSchedule, PipelineError,
};
use crate::rng::{Purpose, Stream};
use crate::saa::LayoutPolicy;
use crate::tensor::{NameTable, ParamSet, Scalar, Tape, Tensor, TensorId};
use crate::world::{PromptAttrs, WorldSample};

/// Parameter-name prefixes trained in the anchoring stage (denoiser with its
/// gated injection branches, plus the face-encoder projection).
pub const ANCHOR_PREFIXES: [&str; 2] = ["denoiser.", "face."];

/// Prefixes trained in the reconfiguration stage.
pub const RECONFIGURE_PREFIXES: [&str; 2] = ["imr.", "motion."];

pub fn is_anchor_param(name: &str) -> bool {
    ANCHOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn is_reconfigure_param(name: &str) -> bool {
    RECONFIGURE_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub struct Model {
    pub cfg: RunConfig,
    pub face: FaceEncoder,
    pub motion: MotionEncoder,
    pub text: TextEncoder,
    pub denoiser: Denoiser,
    pub imr: Imr,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        cfg.world.validate()?;
        let denoiser = Denoiser::new(DenoiserConfig {
            d_z: cfg.world.d_z,
            d_f: cfg.encoder.d_f,
            blocks: cfg.denoiser.blocks,
            heads: cfg.denoiser.heads,
            mlp_hidden: cfg.denoiser.mlp_hidden,
        });
        Ok(Model {
            cfg: cfg.clone(),
            face: FaceEncoder::new(cfg.encoder.clone(), cfg.world.clone()),
            motion: MotionEncoder::new(cfg.encoder.clone(), cfg.world.clone()),
            text: TextEncoder::new(&cfg.encoder, &cfg.world),
            denoiser,
            imr: Imr::new(cfg.encoder.clone(), cfg.imr.clone()),
            schedule: NoiseSchedule::linear(
                cfg.schedule.t_train,
                cfg.schedule.beta_start,
                cfg.schedule.beta_end,
            )?,
        })
    }

    /// Fresh parameters for every trainable module, in a fixed insertion
    /// order so initialization is a pure function of the seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut params = ParamSet::new();
        let mut init = Stream::new(seed, Purpose::Init, 0);
        self.denoiser
            .init_params(&mut params, &mut init)
            .expect("fresh set");
        self.face
            .init_params(&mut params, &mut init)
            .expect("fresh set");
        self.motion
            .init_params(&mut params, &mut init)
            .expect("fresh set");
        self.imr
            .init_params(&mut params, &mut init)
            .expect("fresh set");
        params
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.cfg.world.cells(), self.cfg.world.d_z]
    }

    /// Reference face tokens for a sample, as plain values.
    pub fn encode_reference<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        sample: &WorldSample,
    ) -> Result<Tensor<T>, PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, params, |_| false);
        let xi = self.face.encode(&mut tape, &names, sample)?;
        Ok(tape.value(xi).clone())
    }

    /// Motion tokens for (landmarks, expression, orientation), as values.
    pub fn encode_motion<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        landmarks: &[(f64, f64)],
        expression: usize,
        orientation: usize,
    ) -> Result<Tensor<T>, PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, params, |_| false);
        let psi = self
            .motion
            .encode(&mut tape, &names, &self.text, landmarks, expression, orientation)?;
        Ok(tape.value(psi).clone())
    }

    /// Run the reconfigurator on plain values: source tokens plus source and
    /// target motion tokens give predicted tokens.
    pub fn reconfigure_values<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        xi_src: &Tensor<T>,
        psi_src: &Tensor<T>,
        psi_tgt: &Tensor<T>,
    ) -> Result<Tensor<T>, PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, params, |_| false);
        let xi = tape.leaf(xi_src.clone());
        let ps = tape.leaf(psi_src.clone());
        let pt = tape.leaf(psi_tgt.clone());
        let out = self
            .imr
            .reconfigure(&mut tape, &names, xi, ps, pt)
            .map_err(|e| match e {
                crate::imr::ImrError::Tensor(t) => PipelineError::Tensor(t),
                crate::imr::ImrError::Saa(s) => PipelineError::Saa(s),
                crate::imr::ImrError::Pipeline(p) => p,
                other => panic!("reconfigure: {other}"),
            })?;
        Ok(tape.value(out).clone())
    }

    /// Identity latent (motion-stripped tokens) on plain values.
    pub fn disentangle_values<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        xi_src: &Tensor<T>,
        psi_src: &Tensor<T>,
    ) -> Result<Tensor<T>, PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, params, |_| false);
        let xi = tape.leaf(xi_src.clone());
        let ps = tape.leaf(psi_src.clone());
        let out = self
            .imr
            .disentangle(&mut tape, &names, xi, ps)
            .map_err(|e| match e {
                crate::imr::ImrError::Tensor(t) => PipelineError::Tensor(t),
                crate::imr::ImrError::Saa(s) => PipelineError::Saa(s),
                crate::imr::ImrError::Pipeline(p) => p,
                other => panic!("disentangle: {other}"),
            })?;
        Ok(tape.value(out).clone())
    }

    /// Entangle an identity latent with a target motion, on plain values.
    pub fn entangle_values<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        zeta: &Tensor<T>,
        psi_tgt: &Tensor<T>,
    ) -> Result<Tensor<T>, PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, params, |_| false);
        let z = tape.leaf(zeta.clone());
        let pt = tape.leaf(psi_tgt.clone());
        let out = self
            .imr
            .entangle(&mut tape, &names, z, pt)
            .map_err(|e| match e {
                crate::imr::ImrError::Tensor(t) => PipelineError::Tensor(t),
                crate::imr::ImrError::Saa(s) => PipelineError::Saa(s),
                crate::imr::ImrError::Pipeline(p) => p,
                other => panic!("entangle: {other}"),
            })?;
        Ok(tape.value(out).clone())
    }
}

/// How identities are gated during guided sampling.
#[derive(Clone)]
pub enum GateMode {
    /// Plain adaptive gates, no layout shaping. Works for any identity count;
    /// the ungated baseline in benchmarks.
    Adaptive,
    /// Full layout policy: intervention window, suppression, gate floor.
    Policy(LayoutPolicy),
}

/// Classifier-free-guided noise predictor over the trained model.
pub struct GuidedPredictor<'a, T: Scalar> {
    pub model: &'a Model,
    pub params: &'a ParamSet<T>,
    /// Reference face tokens per identity.
    pub faces: Vec<Tensor<T>>,
    /// Prompt tokens for the conditional branch.
    pub tau: Tensor<T>,
    pub mode: GateMode,
    pub cfg_scale: f64,
}

impl<'a, T: Scalar> GuidedPredictor<'a, T> {
    fn conditional(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        step_index: usize,
        total_steps: usize,
    ) -> Result<(Tensor<T>, Vec<BlockGates<T>>), PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, self.params, |_| false);
        let z = tape.leaf(z_t.clone());
        let tau = tape.leaf(self.tau.clone());
        let faces: Vec<TensorId> = self.faces.iter().map(|f| tape.leaf(f.clone())).collect();
        let gating = match &self.mode {
            GateMode::Adaptive => {
                if faces.len() == 1 {
                    FaceGating::Adaptive
                } else {
                    return self.adaptive_multi(z_t, t);
                }
            }
            GateMode::Policy(policy) => FaceGating::Policy {
                policy,
                step_index,
                total_steps,
            },
        };
        let cond = Conditioning {
            text: tau,
            faces,
            gating,
        };
        let (eps, gates) = self.model.denoiser.forward(
            &mut tape,
            &names,
            z,
            t,
            self.model.schedule.t_train(),
            &cond,
        )?;
        Ok((tape.value(eps).clone(), gates))
    }

    /// Multi-identity pass without any policy: every identity contributes
    /// through its own adaptive gate (the blending-prone baseline).
    fn adaptive_multi(
        &self,
        z_t: &Tensor<T>,
        t: usize,
    ) -> Result<(Tensor<T>, Vec<BlockGates<T>>), PipelineError> {
        use crate::saa::{activation_weights, attention_output};
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, self.params, |_| false);
        let z = tape.leaf(z_t.clone());
        let tau = tape.leaf(self.tau.clone());
        let faces: Vec<TensorId> = self.faces.iter().map(|f| tape.leaf(f.clone())).collect();

        // Mirror Denoiser::forward but with unshaped per-identity gates.
        let den = &self.model.denoiser;
        let t_train = self.model.schedule.t_train();
        let emb = den.timestep_embedding::<T>(t, t_train);
        let neg = Tensor::new(
            vec![den.config().d_z],
            emb.data().iter().map(|&v| -v).collect(),
        )?;
        let emb = tape.leaf(emb);
        let neg = tape.leaf(neg);
        let mut h = tape.add_row(z, emb)?;
        let mut traces = Vec::new();
        for b in 0..den.config().blocks {
            let proj = |names: &NameTable, site: &str| {
                Ok::<_, PipelineError>(crate::saa::AttentionProjection::new(
                    names.id(&format!("denoiser.b{b}.{site}.wq"))?,
                    names.id(&format!("denoiser.b{b}.{site}.wk"))?,
                    names.id(&format!("denoiser.b{b}.{site}.wv"))?,
                    den.config().heads,
                ))
            };
            let self_proj = proj(&names, "self")?;
            let attn = attention_output(&mut tape, h, h, &self_proj)?;
            h = tape.add(h, attn)?;
            let text_proj = proj(&names, "text")?;
            let text_attn = attention_output(&mut tape, h, tau, &text_proj)?;
            h = tape.add(h, text_attn)?;
            let saa_proj = proj(&names, "saa")?;
            let mut gates = Vec::new();
            for &xi in &faces {
                let w = activation_weights(&mut tape, h, xi, &saa_proj)?;
                let attn = attention_output(&mut tape, h, xi, &saa_proj)?;
                let wid = tape.leaf(Tensor::vector(w.values().to_vec())?);
                h = tape.gated_residual(h, attn, wid)?;
                gates.push(w.values().to_vec());
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
        let eps = tape.add_row(h, neg)?;
        Ok((tape.value(eps).clone(), traces))
    }

    fn unconditional(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>, PipelineError> {
        let mut tape = Tape::new();
        let (names, _) = NameTable::bind_model(&mut tape, self.params, |_| false);
        let z = tape.leaf(z_t.clone());
        let tau = self.model.text.null_tokens(&mut tape);
        let cond = Conditioning {
            text: tau,
            faces: Vec::new(),
            gating: FaceGating::Zero,
        };
        let (eps, _) = self.model.denoiser.forward(
            &mut tape,
            &names,
            z,
            t,
            self.model.schedule.t_train(),
            &cond,
        )?;
        Ok(tape.value(eps).clone())
    }
}

impl<'a, T: Scalar> NoisePredictor<T> for GuidedPredictor<'a, T> {
    fn predict(
        &mut self,
        z_t: &Tensor<T>,
        t: usize,
        step_index: usize,
        total_steps: usize,
    ) -> Result<(Tensor<T>, Vec<BlockGates<T>>), PipelineError> {
        let (eps_cond, gates) = self.conditional(z_t, t, step_index, total_steps)?;
        if self.cfg_scale == 1.0 {
            return Ok((eps_cond, gates));
        }
        let eps_uncond = self.unconditional(z_t, t)?;
        Ok((cfg_combine(&eps_cond, &eps_uncond, self.cfg_scale)?, gates))
    }
}

/// Prompt tokens helper for sampling.
pub fn prompt_tokens<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    prompt: &PromptAttrs,
) -> Result<Tensor<T>, PipelineError> {
    let mut tape = Tape::new();
    let (_names, _) = NameTable::bind_model(&mut tape, params, |_| false);
    let tau = model.text.tokens(&mut tape, prompt)?;
    Ok(tape.value(tau).clone())
}
