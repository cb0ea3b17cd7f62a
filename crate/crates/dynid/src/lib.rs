//! A self-contained toy latent-diffusion stack for identity-conditioned image
//! generation, built around two mechanisms: query-gated cross-attention for
//! injecting reference-face features (with layout control and multi-identity
//! suppression), and a feature-space reconfigurator that disentangles and
//! re-entangles identity and motion so faces can be edited without retraining.
//!
//! Everything runs on CPU over a procedurally generated identity x motion
//! world with known ground truth, so gating behaviour, training stages and
//! disentanglement are all directly measurable. No pretrained weights are
//! involved anywhere.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation on a tape,
//!   plus a finite-difference gradient checker.
//! - [`rng`]: one seeded counter-based generator, split per purpose.
//! - [`saa`]: gated cross-attention, layout intervention, multi-ID gating.
//! - [`world`]: the synthetic identity x motion scene generator.
//! - [`encoders`]: face encoder (frozen extractors + trainable projection)
//!   and the motion encoder.
//! - [`pipeline`]: noise schedule, denoiser, DDIM sampler with
//!   classifier-free guidance.
//! - [`imr`]: the identity-motion reconfigurator and its edit loss.
//! - [`train`]: the two-stage training loop, optimizer and checkpoints.
//! - [`eval`]: analytic probes, blending metrics and parameter sweeps.
//! - [`cli`]: the `dynid` command-line entry point.
//!
//! See the crate examples for runnable demonstrations of each capability.

pub mod cli;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod gradsuite;
pub mod imr;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod saa;
pub mod tensor;
pub mod train;
pub mod world;

pub use config::RunConfig;
pub use tensor::{ParamSet, Precision, Scalar, Tape, Tensor, TensorError, TensorId};
