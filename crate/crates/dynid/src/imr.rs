//! Identity-motion reconfigurator.
//!
//! Two structurally identical blocks: the first strips the source motion out
//! of face tokens (producing a motion-free identity latent), the second
//! re-imposes a target motion. Each block is one cross-attention layer over
//! the motion tokens, one self-attention layer, and one MLP, all pre-norm
//! residual. Value paths start at zero, so an untrained reconfigurator is
//! exactly the identity map and training begins from a passthrough.

use crate::encoders::EncoderConfig;
use crate::pipeline::{Conditioning, Denoiser, FaceGating, NoiseSchedule, PipelineError};
use crate::rng::Stream;
use crate::saa::{attention_output, AttentionProjection, SaaError};
use crate::tensor::{c, NameTable, ParamSet, Scalar, Tape, Tensor, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Saa(#[from] SaaError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("lambda must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("mixing weight gamma must lie in [0,1], got {0}")]
    GammaOutOfRange(f64),
    #[error("edit loss needs at least one active term")]
    NoLossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImrConfig {
    pub mlp_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ImrConfig {
    fn default() -> Self {
        ImrConfig {
            mlp_hidden: 64,
            ln_eps: 1e-5,
        }
    }
}

/// The reconfigurator: block `phi1` disentangles, block `phi2` entangles.
pub struct Imr {
    enc: EncoderConfig,
    cfg: ImrConfig,
}

const BLOCKS: [&str; 2] = ["phi1", "phi2"];

impl Imr {
    pub fn new(enc: EncoderConfig, cfg: ImrConfig) -> Self {
        Imr { enc, cfg }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for blk in BLOCKS {
            for site in ["cross", "self"] {
                for w in ["wq", "wk", "wv"] {
                    names.push(format!("imr.{blk}.{site}.{w}"));
                }
            }
            for ln in ["ln1", "ln2", "ln3"] {
                names.push(format!("imr.{blk}.{ln}.g"));
                names.push(format!("imr.{blk}.{ln}.b"));
            }
            for p in ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] {
                names.push(format!("imr.{blk}.{p}"));
            }
        }
        names
    }

    /// Residual-zero initialization: attention value projections and the
    /// second MLP layer start at zero, so both blocks are passthrough maps.
    pub fn init_params<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        init: &mut Stream,
    ) -> Result<(), TensorError> {
        let d = self.enc.d_f;
        let h = self.cfg.mlp_hidden;
        let scale = 1.0 / (d as f64).sqrt();
        for blk in BLOCKS {
            for site in ["cross", "self"] {
                for w in ["wq", "wk"] {
                    let data: Vec<T> = (0..d * d)
                        .map(|_| T::from_f64(init.normal() * scale))
                        .collect();
                    params.insert(
                        &format!("imr.{blk}.{site}.{w}"),
                        Tensor::new(vec![d, d], data)?,
                    )?;
                }
                params.insert(&format!("imr.{blk}.{site}.wv"), Tensor::zeros(vec![d, d]))?;
            }
            for ln in ["ln1", "ln2", "ln3"] {
                params.insert(
                    &format!("imr.{blk}.{ln}.g"),
                    Tensor::new(vec![d], vec![T::one(); d])?,
                )?;
                params.insert(&format!("imr.{blk}.{ln}.b"), Tensor::zeros(vec![d]))?;
            }
            let w1: Vec<T> = (0..d * h)
                .map(|_| T::from_f64(init.normal() * scale))
                .collect();
            params.insert(&format!("imr.{blk}.mlp.w1"), Tensor::new(vec![d, h], w1)?)?;
            params.insert(&format!("imr.{blk}.mlp.b1"), Tensor::zeros(vec![h]))?;
            params.insert(&format!("imr.{blk}.mlp.w2"), Tensor::zeros(vec![h, d]))?;
            params.insert(&format!("imr.{blk}.mlp.b2"), Tensor::zeros(vec![d]))?;
        }
        Ok(())
    }

    fn block_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        blk: &str,
        tokens: TensorId,
        motion: TensorId,
    ) -> Result<TensorId, ImrError> {
        let eps = self.cfg.ln_eps;
        let ln = |tape: &mut Tape<T>, x: TensorId, which: &str| -> Result<TensorId, ImrError> {
            let g = names.id(&format!("imr.{blk}.{which}.g"))?;
            let b = names.id(&format!("imr.{blk}.{which}.b"))?;
            Ok(tape.layer_norm(x, g, b, eps)?)
        };
        let proj = |names: &NameTable, site: &str| -> Result<AttentionProjection, ImrError> {
            Ok(AttentionProjection::new(
                names.id(&format!("imr.{blk}.{site}.wq"))?,
                names.id(&format!("imr.{blk}.{site}.wk"))?,
                names.id(&format!("imr.{blk}.{site}.wv"))?,
                1,
            ))
        };

        // Cross-attention: queries are the face tokens, keys/values the
        // motion tokens, so the token count stays k throughout.
        let mut x = tokens;
        let normed = ln(tape, x, "ln1")?;
        let cross = attention_output(tape, normed, motion, &proj(names, "cross")?)?;
        x = tape.add(x, cross)?;

        let normed = ln(tape, x, "ln2")?;
        let selfa = attention_output(tape, normed, normed, &proj(names, "self")?)?;
        x = tape.add(x, selfa)?;

        let normed = ln(tape, x, "ln3")?;
        let mlp = tape.mlp2(
            normed,
            names.id(&format!("imr.{blk}.mlp.w1"))?,
            names.id(&format!("imr.{blk}.mlp.b1"))?,
            names.id(&format!("imr.{blk}.mlp.w2"))?,
            names.id(&format!("imr.{blk}.mlp.b2"))?,
        )?;
        Ok(tape.add(x, mlp)?)
    }

    /// Strip the source motion: `zeta = phi1(xi_src, psi_src)`.
    pub fn disentangle<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        xi_src: TensorId,
        psi_src: TensorId,
    ) -> Result<TensorId, ImrError> {
        self.block_forward(tape, names, "phi1", xi_src, psi_src)
    }

    /// Impose a target motion: `xi_pred = phi2(zeta, psi_tgt)`.
    pub fn entangle<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        zeta: TensorId,
        psi_tgt: TensorId,
    ) -> Result<TensorId, ImrError> {
        self.block_forward(tape, names, "phi2", zeta, psi_tgt)
    }

    /// Full reconfiguration: `phi2(phi1(xi_src, psi_src), psi_tgt)`.
    pub fn reconfigure<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        xi_src: TensorId,
        psi_src: TensorId,
        psi_tgt: TensorId,
    ) -> Result<TensorId, ImrError> {
        let zeta = self.disentangle(tape, names, xi_src, psi_src)?;
        self.entangle(tape, names, zeta, psi_tgt)
    }
}

/// Linear interpolation of two identity latents: `(1-gamma) a + gamma b`.
pub fn id_mix<T: Scalar>(
    zeta_a: &Tensor<T>,
    zeta_b: &Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>, ImrError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ImrError::GammaOutOfRange(gamma));
    }
    if zeta_a.shape() != zeta_b.shape() {
        return Err(ImrError::Tensor(TensorError::ShapeMismatch {
            op: "id_mix",
            lhs: zeta_a.shape().to_vec(),
            rhs: zeta_b.shape().to_vec(),
        }));
    }
    let g: T = c(gamma);
    let one_m: T = T::one() - g;
    let data = zeta_a
        .data()
        .iter()
        .zip(zeta_b.data())
        .map(|(&a, &b)| one_m * a + g * b)
        .collect();
    Ok(Tensor::new(zeta_a.shape().to_vec(), data)?)
}

/// Which edit-loss terms are active (ablation switches).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLossTerms {
    pub dfm: bool,
    pub ldc: bool,
}

impl Default for EditLossTerms {
    fn default() -> Self {
        EditLossTerms {
            dfm: true,
            ldc: true,
        }
    }
}

/// Scalar pieces of one edit-loss evaluation.
pub struct EditLoss {
    pub total: TensorId,
    pub dfm: f64,
    pub ldc: f64,
}

/// Dual-objective edit loss on one (source, target) pair:
///
/// - direct feature matching: `mse(xi_pred, xi_tgt)`;
/// - latent diffusion consistency under the frozen anchored model:
///   `mse(eps(z_t, t, xi_pred, tau), eps(z_t, t, xi_tgt, tau))`, where `z_t`
///   is built from the *target* sample's clean latent.
///
/// `xi_tgt`, `z_t` and `tau` must enter the tape as constants; whether
/// gradients reach the denoiser weights is decided by how the caller bound
/// them (frozen in stage two).
#[allow(clippy::too_many_arguments)]
pub fn edit_loss<T: Scalar>(
    tape: &mut Tape<T>,
    names: &NameTable,
    imr: &Imr,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    xi_src: TensorId,
    psi_src: TensorId,
    psi_tgt: TensorId,
    xi_tgt: TensorId,
    target_z0: &Tensor<T>,
    tau: TensorId,
    t: usize,
    eps: &Tensor<T>,
    lambda: f64,
    terms: EditLossTerms,
) -> Result<EditLoss, ImrError> {
    if lambda < 0.0 {
        return Err(ImrError::NegativeLambda(lambda));
    }
    if !terms.dfm && !terms.ldc {
        return Err(ImrError::NoLossTerms);
    }

    let xi_pred = imr.reconfigure(tape, names, xi_src, psi_src, psi_tgt)?;

    let dfm = tape.mse(xi_pred, xi_tgt)?;
    let mut dfm_val = 0.0;
    let mut ldc_val = 0.0;
    let mut total: Option<TensorId> = None;
    if terms.dfm {
        dfm_val = tape.value(dfm).item()?.as_f64();
        total = Some(dfm);
    }

    if terms.ldc {
        let z_t = schedule.add_noise(target_z0, t, eps)?;
        let z_t = tape.leaf(z_t);
        let t_train = schedule.t_train();
        let cond_pred = Conditioning {
            text: tau,
            faces: vec![xi_pred],
            gating: FaceGating::Adaptive,
        };
        let (eps_pred, _) = denoiser.forward(tape, names, z_t, t, t_train, &cond_pred)?;
        let cond_tgt = Conditioning {
            text: tau,
            faces: vec![xi_tgt],
            gating: FaceGating::Adaptive,
        };
        let (eps_tgt, _) = denoiser.forward(tape, names, z_t, t, t_train, &cond_tgt)?;
        let ldc = tape.mse(eps_pred, eps_tgt)?;
        ldc_val = tape.value(ldc).item()?.as_f64();
        let scaled = tape.mul_scalar(ldc, c(lambda))?;
        total = Some(match total {
            None => scaled,
            Some(d) => tape.add(d, scaled)?,
        });
    }

    Ok(EditLoss {
        total: total.expect("at least one term"),
        dfm: dfm_val,
        ldc: ldc_val,
    })
}
