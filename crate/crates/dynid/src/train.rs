//! Two-stage training: the anchoring stage fits the denoiser (with its gated
//! injection branches) and the face projection under the diffusion noise
//! objective; the reconfiguration stage then freezes all of that and fits
//! only the reconfigurator and motion encoder under the dual edit loss.
//!
//! Everything is deterministic given (seed, config, dataset): batch picks,
//! noise draws and landmark perturbations come from indexed streams, and
//! batch gradients are reduced in sample-index order regardless of the
//! worker count.

use crate::config::RunConfig;
use crate::imr::{edit_loss, EditLossTerms, ImrError};
use crate::model::{is_anchor_param, is_reconfigure_param, Model};
use crate::pipeline::{anchoring_loss, PipelineError};
use crate::rng::{Purpose, Stream};
use crate::tensor::{NameTable, ParamSet, Precision, Scalar, Tape, Tensor, TensorError};
use crate::world::{Dataset, WorldError};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Imr(#[from] ImrError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint has bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {0} unsupported")]
    BadVersion(u32),
    #[error("checkpoint CRC mismatch (file corrupted)")]
    BadCrc,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has unknown dtype byte {0}")]
    BadDtype(u8),
    #[error("checkpoint has unknown stage byte {0}")]
    BadStage(u8),
    #[error("expected a {expected:?}-stage checkpoint, found {found:?}")]
    StageMismatch { expected: Stage, found: Stage },
    #[error("checkpoint stores {found:?} tensors but the run uses {expected:?}")]
    DtypeMismatch {
        expected: Precision,
        found: Precision,
    },
    #[error("checkpoint is missing {0}")]
    MissingMeta(&'static str),
    #[error("identity {id} has {have} images, need {need} per iteration")]
    NotEnoughImages { id: usize, have: usize, need: usize },
}

/// Which training stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Anchor,
    Reconfigure,
}

impl Stage {
    pub fn byte(self) -> u8 {
        match self {
            Stage::Anchor => 0,
            Stage::Reconfigure => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Stage> {
        match b {
            0 => Some(Stage::Anchor),
            1 => Some(Stage::Reconfigure),
            _ => None,
        }
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Decoupled-weight-decay adaptive-moment settings.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second-moment accumulators, keyed by parameter name.
pub struct OptState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> Default for OptState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> Self {
        OptState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over the parameters `trainable` accepts:
    /// `m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;`
    /// `p -= lr (m_hat / (sqrt(v_hat) + eps) + wd p)` with bias-corrected
    /// moments. Parameters outside the filter are untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        trainable: impl Fn(&str) -> bool,
        hp: &AdamW,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let b1: T = T::from_f64(hp.beta1);
        let b2: T = T::from_f64(hp.beta2);
        let one = T::one();
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        let lr: T = T::from_f64(hp.lr);
        let eps: T = T::from_f64(hp.eps);
        let wd: T = T::from_f64(hp.weight_decay);
        for (name, value, grad) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let numel = value.numel();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); numel]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); numel]);
            let data = value.data_mut();
            for i in 0..numel {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] = data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm` (0 disables).
pub fn clip_gradients<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = params.grad_norm();
    if norm > max_norm {
        params.scale_grads(T::from_f64(max_norm / norm));
    }
}

// ── Training loops ──────────────────────────────────────────────────────

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub dfm: Option<f64>,
    pub ldc: Option<f64>,
}

/// Render loss rows as the CSV the CLI writes: `step,loss[,dfm,ldc]`.
pub fn loss_csv(rows: &[LossRow]) -> String {
    let with_terms = rows.iter().any(|r| r.dfm.is_some() || r.ldc.is_some());
    let mut out = String::from(if with_terms {
        "step,loss,dfm,ldc\n"
    } else {
        "step,loss\n"
    });
    for r in rows {
        if with_terms {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step,
                r.loss,
                r.dfm.unwrap_or(0.0),
                r.ldc.unwrap_or(0.0)
            ));
        } else {
            out.push_str(&format!("{},{}\n", r.step, r.loss));
        }
    }
    out
}

type GradVecs<T> = Vec<(String, Option<Vec<T>>)>;

fn run_jobs<T, F>(workers: usize, jobs: Vec<F>) -> Result<Vec<(f64, GradVecs<T>, Vec<f64>)>, TrainError>
where
    T: Scalar,
    F: Fn() -> Result<(f64, GradVecs<T>, Vec<f64>), TrainError> + Send + Sync,
{
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| jobs.par_iter().map(|j| j()).collect())
}

fn accumulate_jobs<T: Scalar>(
    params: &mut ParamSet<T>,
    results: &[(f64, GradVecs<T>, Vec<f64>)],
) {
    // Index-ordered reduction keeps training bit-deterministic for any
    // worker count.
    for (_, grads, _) in results {
        for (name, grad) in grads {
            if let Some(g) = grad {
                params.accumulate_grad(name, g);
            }
        }
    }
}

fn extract_grads<T: Scalar>(
    tape: &Tape<T>,
    binding: &crate::tensor::Binding,
) -> GradVecs<T> {
    binding
        .names()
        .map(|n| {
            let id = binding.id(n).expect("bound");
            (n.to_string(), tape.grad(id).map(|g| g.to_vec()))
        })
        .collect()
}

/// Anchoring stage: denoiser + injection branches + face projection under
/// the noise-prediction objective. Returns the per-step loss log.
pub fn train_anchor<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    opt: &mut OptState<T>,
    dataset: &Dataset,
    cfg: &RunConfig,
    start_step: usize,
) -> Result<Vec<LossRow>, TrainError> {
    let pool = dataset.train_samples();
    let hp = AdamW::with_lr(cfg.anchor.lr, cfg.anchor.weight_decay);
    let mut rows = Vec::new();
    for step in start_step..cfg.anchor.steps {
        let mut pick = Stream::new(cfg.seed, Purpose::Data, 0x70_0000_0000 + step as u64);
        let batch: Vec<usize> = (0..cfg.anchor.batch)
            .map(|_| pool[pick.below(pool.len())])
            .collect();

        params.zero_grad();
        let jobs: Vec<_> = batch
            .iter()
            .enumerate()
            .map(|(i, &sample_idx)| {
                let sample = &dataset.samples[sample_idx];
                let noise_index = 0x4E_0000_0000 + (step * cfg.anchor.batch + i) as u64;
                let params_ref = &*params;
                move || {
                    let mut tape = Tape::new();
                    let (names, binding) =
                        NameTable::bind_model(&mut tape, params_ref, is_anchor_param);
                    let mut noise = Stream::new(cfg.seed, Purpose::Noise, noise_index);
                    let loss = anchoring_loss(
                        &mut tape,
                        &names,
                        &model.denoiser,
                        &model.face,
                        &model.text,
                        &model.schedule,
                        &[sample],
                        &cfg.world,
                        &mut noise,
                    )
                    .map_err(|e| match e {
                        PipelineError::Tensor(TensorError::NonFinite { .. }) => {
                            TrainError::NonFiniteLoss { step }
                        }
                        other => TrainError::Pipeline(other),
                    })?;
                    tape.backward(loss)?;
                    let loss_val = tape.value(loss).item()?.as_f64();
                    Ok((loss_val, extract_grads(&tape, &binding), Vec::new()))
                }
            })
            .collect();
        let results = run_jobs(cfg.workers, jobs)?;
        accumulate_jobs(params, &results);
        params.scale_grads(T::from_f64(1.0 / cfg.anchor.batch as f64));
        let mean_loss =
            results.iter().map(|(l, _, _)| *l).sum::<f64>() / cfg.anchor.batch as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        clip_gradients(params, cfg.anchor.clip_norm);
        opt.step(params, is_anchor_param, &hp);
        rows.push(LossRow {
            step,
            loss: mean_loss,
            dfm: None,
            ldc: None,
        });
    }
    Ok(rows)
}

/// Reconfiguration stage: with the anchored model frozen, train the
/// reconfigurator and motion encoder. Each iteration picks one individual
/// (from the auxiliary expression-rich set with small probability), draws
/// `m` of its images, designates one as the source and averages the edit
/// loss over the remaining targets.
pub fn train_reconfigure<T: Scalar>(
    model: &Model,
    params: &mut ParamSet<T>,
    opt: &mut OptState<T>,
    dataset: &Dataset,
    aux: Option<&Dataset>,
    cfg: &RunConfig,
    start_step: usize,
) -> Result<Vec<LossRow>, TrainError> {
    let hp = AdamW::with_lr(cfg.reconfigure.lr, cfg.reconfigure.weight_decay);
    let terms = EditLossTerms {
        dfm: cfg.reconfigure.dfm,
        ldc: cfg.reconfigure.ldc,
    };
    let m = cfg.reconfigure.m;
    let mut rows = Vec::new();
    for step in start_step..cfg.reconfigure.steps {
        let mut pick = Stream::new(cfg.seed, Purpose::Data, 0x71_0000_0000 + step as u64);
        let use_aux = aux
            .map(|a| !a.by_identity.is_empty() && pick.uniform() < cfg.reconfigure.aux_probability)
            .unwrap_or(false);
        let ds = if use_aux { aux.unwrap() } else { dataset };
        let id_pool = if use_aux {
            &ds.train_ids
        } else {
            &ds.train_ids
        };
        let id = id_pool[pick.below(id_pool.len())];
        let images = &ds.by_identity[&id];
        if images.len() < m {
            return Err(TrainError::NotEnoughImages {
                id,
                have: images.len(),
                need: m,
            });
        }
        let mut deck = images.clone();
        pick.shuffle(&mut deck);
        let source = deck[0];
        let targets: Vec<usize> = deck[1..m].to_vec();

        params.zero_grad();
        let jobs: Vec<_> = targets
            .iter()
            .enumerate()
            .map(|(j, &target_idx)| {
                let source_sample = &ds.samples[source];
                let target_sample = &ds.samples[target_idx];
                let noise_index = 0x52_0000_0000 + (step * 16 + j) as u64;
                let params_ref = &*params;
                move || {
                    let mut tape = Tape::new();
                    let (names, binding) =
                        NameTable::bind_model(&mut tape, params_ref, is_reconfigure_param);
                    let mut noise = Stream::new(cfg.seed, Purpose::Noise, noise_index);

                    let src_lm = crate::world::perturb_landmarks(
                        &source_sample.landmarks,
                        cfg.reconfigure.sigma,
                        &cfg.world,
                        &mut noise,
                    )?;
                    let tgt_lm = crate::world::perturb_landmarks(
                        &target_sample.landmarks,
                        cfg.reconfigure.sigma,
                        &cfg.world,
                        &mut noise,
                    )?;
                    let xi_src = model.face.encode(&mut tape, &names, source_sample)?;
                    let xi_tgt = model.face.encode(&mut tape, &names, target_sample)?;
                    let psi_src = model.motion.encode(
                        &mut tape,
                        &names,
                        &model.text,
                        &src_lm,
                        source_sample.prompt.expression,
                        source_sample.prompt.orientation,
                    )?;
                    let psi_tgt = model.motion.encode(
                        &mut tape,
                        &names,
                        &model.text,
                        &tgt_lm,
                        target_sample.prompt.expression,
                        target_sample.prompt.orientation,
                    )?;
                    let tau = model.text.tokens(&mut tape, &target_sample.prompt)?;
                    let t = noise.below(model.schedule.t_train());
                    let z0: Tensor<T> = target_sample.latent(&cfg.world);
                    let eps = Tensor::new(
                        z0.shape().to_vec(),
                        (0..z0.numel())
                            .map(|_| T::from_f64(noise.normal()))
                            .collect(),
                    )?;
                    let loss = edit_loss(
                        &mut tape,
                        &names,
                        &model.imr,
                        &model.denoiser,
                        &model.schedule,
                        xi_src,
                        psi_src,
                        psi_tgt,
                        xi_tgt,
                        &z0,
                        tau,
                        t,
                        &eps,
                        cfg.reconfigure.lambda,
                        terms,
                    )
                    .map_err(|e| match e {
                        ImrError::Tensor(TensorError::NonFinite { .. }) => {
                            TrainError::NonFiniteLoss { step }
                        }
                        other => TrainError::Imr(other),
                    })?;
                    tape.backward(loss.total)?;
                    let loss_val = tape.value(loss.total).item()?.as_f64();
                    Ok((
                        loss_val,
                        extract_grads(&tape, &binding),
                        vec![loss.dfm, loss.ldc],
                    ))
                }
            })
            .collect();
        let results = run_jobs(cfg.workers, jobs)?;
        accumulate_jobs(params, &results);
        let scale = 1.0 / targets.len() as f64;
        params.scale_grads(T::from_f64(scale));
        let mean = |sel: fn(&(f64, GradVecs<T>, Vec<f64>)) -> f64| {
            results.iter().map(sel).sum::<f64>() * scale
        };
        let mean_loss = mean(|r| r.0);
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        clip_gradients(params, cfg.reconfigure.clip_norm);
        opt.step(params, is_reconfigure_param, &hp);
        rows.push(LossRow {
            step,
            loss: mean_loss,
            dfm: Some(mean(|r| r.2[0])),
            ldc: Some(mean(|r| r.2[1])),
        });
    }
    Ok(rows)
}

/// CRC32 digest of a parameter subset, for frozen-weight checks.
pub fn params_digest<T: Scalar>(params: &ParamSet<T>, select: impl Fn(&str) -> bool) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for (name, value, _) in params.iter() {
        if select(name) {
            hasher.update(name.as_bytes());
            for v in value.data() {
                hasher.update(&v.as_f64().to_le_bytes());
            }
        }
    }
    hasher.finalize()
}

// ── Checkpoints ─────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"DYID";
const VERSION: u32 = 1;
const META_CONFIG: &str = "__meta.config";
const META_RNG: &str = "__meta.rng";
const META_OPT_T: &str = "__meta.opt_t";

/// RNG bookkeeping stored in a checkpoint: the run seed and the next
/// optimizer step (streams are derived per purpose and index, so this is
/// the complete generator state).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

/// A dtype-erased checkpoint as read from disk.
pub struct RawCheckpoint {
    pub stage: Stage,
    entries: Vec<(String, Precision, Vec<usize>, Vec<f64>)>,
}

fn f64_to_bytes(dtype: Precision, v: f64, out: &mut Vec<u8>) {
    match dtype {
        Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

/// Serialize a checkpoint: parameters, optimizer moments, the effective
/// config (bytes as f32 values) and the RNG state, in one tensor table.
///
/// Layout: magic `DYID`, u32 LE version, stage byte, u32 LE entry count,
/// then per entry u16 LE name length, UTF-8 name, dtype byte (0 = f32,
/// 1 = f64), rank byte, rank x u32 LE dims, raw little-endian values; a
/// trailing CRC32 of all preceding bytes closes the file.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    stage: Stage,
    params: &ParamSet<T>,
    opt: &OptState<T>,
    config_json: &str,
    rng: RngState,
) -> Result<(), TrainError> {
    let mut entries: BTreeMap<String, (Precision, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, value, _) in params.iter() {
        entries.insert(
            name.to_string(),
            (
                T::DTYPE,
                value.shape().to_vec(),
                value.data().iter().map(|v| v.as_f64()).collect(),
            ),
        );
    }
    for (prefix, table) in [("opt.m.", &opt.m), ("opt.v.", &opt.v)] {
        for (name, buf) in table {
            entries.insert(
                format!("{prefix}{name}"),
                (
                    T::DTYPE,
                    vec![buf.len()],
                    buf.iter().map(|v| v.as_f64()).collect(),
                ),
            );
        }
    }
    entries.insert(
        META_OPT_T.to_string(),
        (Precision::F64, vec![1], vec![opt.t as f64]),
    );
    let cfg_bytes: Vec<f64> = config_json.as_bytes().iter().map(|&b| b as f64).collect();
    entries.insert(
        META_CONFIG.to_string(),
        (Precision::F32, vec![cfg_bytes.len().max(1)], if cfg_bytes.is_empty() { vec![0.0] } else { cfg_bytes }),
    );
    entries.insert(
        META_RNG.to_string(),
        (
            Precision::F64,
            vec![3],
            vec![
                (rng.seed >> 32) as f64,
                (rng.seed & 0xFFFF_FFFF) as f64,
                rng.next_step as f64,
            ],
        ),
    );

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(stage.byte());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, (dtype, shape, values)) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype.dtype_byte());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in values {
            f64_to_bytes(*dtype, v, &mut buf);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RawCheckpoint, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 1 + 4 + 4 {
        return Err(TrainError::Truncated);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(TrainError::BadCrc);
    }
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], TrainError> {
        let s = body.get(*off..*off + n).ok_or(TrainError::Truncated)?;
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(TrainError::BadVersion(version));
    }
    let stage_byte = take(&mut off, 1)?[0];
    let stage = Stage::from_byte(stage_byte).ok_or(TrainError::BadStage(stage_byte))?;
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| TrainError::Truncated)?;
        let dtype_byte = take(&mut off, 1)?[0];
        let dtype = Precision::from_dtype_byte(dtype_byte).ok_or(TrainError::BadDtype(dtype_byte))?;
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        match dtype {
            Precision::F32 => {
                for _ in 0..numel {
                    values.push(
                        f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as f64
                    );
                }
            }
            Precision::F64 => {
                for _ in 0..numel {
                    values.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
                }
            }
        }
        entries.push((name, dtype, shape, values));
    }
    if off != body.len() {
        return Err(TrainError::Truncated);
    }
    Ok(RawCheckpoint { stage, entries })
}

impl RawCheckpoint {
    pub fn expect_stage(&self, expected: Stage) -> Result<(), TrainError> {
        if self.stage != expected {
            return Err(TrainError::StageMismatch {
                expected,
                found: self.stage,
            });
        }
        Ok(())
    }

    /// Precision of the stored parameters (meta entries excluded).
    pub fn precision(&self) -> Result<Precision, TrainError> {
        self.entries
            .iter()
            .find(|(name, ..)| !name.starts_with("__meta."))
            .map(|(_, dtype, ..)| *dtype)
            .ok_or(TrainError::MissingMeta("parameters"))
    }

    pub fn config_json(&self) -> Result<String, TrainError> {
        let (_, _, _, values) = self
            .entries
            .iter()
            .find(|(name, ..)| name == META_CONFIG)
            .ok_or(TrainError::MissingMeta(META_CONFIG))?;
        Ok(values.iter().map(|&b| b as u8 as char).collect())
    }

    pub fn rng_state(&self) -> Result<RngState, TrainError> {
        let (_, _, _, values) = self
            .entries
            .iter()
            .find(|(name, ..)| name == META_RNG)
            .ok_or(TrainError::MissingMeta(META_RNG))?;
        if values.len() != 3 {
            return Err(TrainError::MissingMeta(META_RNG));
        }
        Ok(RngState {
            seed: ((values[0] as u64) << 32) | values[1] as u64,
            next_step: values[2] as u64,
        })
    }

    /// Reassemble the parameter set and optimizer state in precision `T`,
    /// erroring if the stored dtype disagrees.
    pub fn unpack<T: Scalar>(&self) -> Result<(ParamSet<T>, OptState<T>), TrainError> {
        let mut params = ParamSet::new();
        let mut opt = OptState::new();
        for (name, dtype, shape, values) in &self.entries {
            if name == META_CONFIG || name == META_RNG {
                continue;
            }
            if name == META_OPT_T {
                opt.t = values[0] as u64;
                continue;
            }
            if *dtype != T::DTYPE {
                return Err(TrainError::DtypeMismatch {
                    expected: T::DTYPE,
                    found: *dtype,
                });
            }
            let data: Vec<T> = values.iter().map(|&v| T::from_f64(v)).collect();
            if let Some(param) = name.strip_prefix("opt.m.") {
                opt.m.insert(param.to_string(), data);
            } else if let Some(param) = name.strip_prefix("opt.v.") {
                opt.v.insert(param.to_string(), data);
            } else {
                params.insert(name, Tensor::new(shape.clone(), data)?)?;
            }
        }
        Ok((params, opt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::Model;
    use crate::world::{make_dataset, make_expression_aux, FrozenWorldMaps};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.world.grid_h = 6;
        cfg.world.grid_w = 6;
        cfg.world.d_z = 18;
        cfg.world.d_id = 4;
        cfg.world.expressions = 3;
        cfg.world.orientations = 2;
        cfg.world.scenes = 2;
        cfg.world.landmarks = 3;
        cfg.encoder.k = 2;
        cfg.encoder.c = 2;
        cfg.encoder.d_f = 8;
        cfg.encoder.proj_hidden = 8;
        cfg.encoder.landmark_dim = 4;
        cfg.encoder.landmark_hidden = 6;
        cfg.encoder.motion_hidden = 8;
        cfg.denoiser.blocks = 1;
        cfg.denoiser.mlp_hidden = 8;
        cfg.schedule.t_train = 30;
        cfg.sampling.steps = 5;
        cfg.dataset.n_ids = 4;
        cfg.dataset.n_motions = 4;
        cfg.dataset.aux_ids = 2;
        cfg.anchor.steps = 3;
        cfg.anchor.batch = 2;
        cfg.anchor.lr = 1e-3;
        cfg.reconfigure.steps = 3;
        cfg.reconfigure.m = 3;
        cfg.reconfigure.lr = 1e-3;
        cfg
    }

    fn setup(cfg: &RunConfig) -> (Model, Dataset, Dataset) {
        let model = Model::from_config(cfg).unwrap();
        let maps = FrozenWorldMaps::new(&cfg.world).unwrap();
        let ds = make_dataset(
            cfg.dataset.n_ids,
            cfg.dataset.n_motions,
            cfg.dataset.train_fraction,
            cfg.seed,
            &maps,
        )
        .unwrap();
        let aux = make_expression_aux(cfg.dataset.aux_ids, cfg.seed, &maps).unwrap();
        (model, ds, aux)
    }

    #[test]
    fn adamw_matches_scalar_reference_to_1e12() {
        // One parameter, three steps, against a hand-rolled update.
        let mut params = ParamSet::<f64>::new();
        params.insert("p", Tensor::scalar(0.7)).unwrap();
        let mut opt = OptState::new();
        let hp = AdamW {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.004,
        };
        let grads = [0.3, -0.15, 0.02];

        let mut p_ref = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            params.zero_grad();
            params.accumulate_grad("p", &[g]);
            opt.step(&mut params, |_| true, &hp);

            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p_ref -= 0.01 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.004 * p_ref);
            let p_now = params.value("p").unwrap().data()[0];
            assert!(
                (p_now - p_ref).abs() < 1e-12,
                "step {t}: {p_now} vs {p_ref}"
            );
        }
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut params = ParamSet::<f64>::new();
        params.insert("a", Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        params.accumulate_grad("a", &[3.0, 4.0]);
        clip_gradients(&mut params, 10.0);
        assert_eq!(params.grad("a").unwrap(), &[3.0, 4.0]);
        clip_gradients(&mut params, 1.0);
        let g = params.grad("a").unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_anchor_steps_leave_params_at_init() {
        let mut cfg = tiny_cfg();
        cfg.anchor.steps = 0;
        let (model, ds, _aux) = setup(&cfg);
        let mut params = model.init_params::<f32>(cfg.seed);
        let before = params_digest(&params, |_| true);
        let mut opt = OptState::new();
        let rows = train_anchor(&model, &mut params, &mut opt, &ds, &cfg, 0).unwrap();
        assert!(rows.is_empty());
        assert_eq!(params_digest(&params, |_| true), before);
    }

    #[test]
    fn anchor_training_is_deterministic_and_stage_isolated() {
        let cfg = tiny_cfg();
        let (model, ds, _aux) = setup(&cfg);
        let run = || {
            let mut params = model.init_params::<f32>(cfg.seed);
            let mut opt = OptState::new();
            let rows = train_anchor(&model, &mut params, &mut opt, &ds, &cfg, 0).unwrap();
            (rows, params_digest(&params, |_| true))
        };
        let (rows_a, digest_a) = run();
        let (rows_b, digest_b) = run();
        assert_eq!(rows_a, rows_b);
        assert_eq!(digest_a, digest_b);

        // Stage isolation: reconfigure-stage weights must not move.
        let mut params = model.init_params::<f32>(cfg.seed);
        let frozen_before = params_digest(&params, is_reconfigure_param);
        let mut opt = OptState::new();
        train_anchor(&model, &mut params, &mut opt, &ds, &cfg, 0).unwrap();
        assert_eq!(params_digest(&params, is_reconfigure_param), frozen_before);
        let nonzero_grads: Vec<&str> = params
            .iter()
            .filter(|(_, _, g)| g.iter().any(|&x| x != 0.0))
            .map(|(n, _, _)| n)
            .collect();
        assert!(!nonzero_grads.is_empty());
        assert!(nonzero_grads.iter().all(|n| is_anchor_param(n)));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut cfg = tiny_cfg();
        let (model, ds, _aux) = setup(&cfg);
        let digest_for = |workers: usize, cfg: &mut RunConfig| {
            cfg.workers = workers;
            let mut params = model.init_params::<f32>(cfg.seed);
            let mut opt = OptState::new();
            train_anchor(&model, &mut params, &mut opt, &ds, cfg, 0).unwrap();
            params_digest(&params, |_| true)
        };
        let serial = digest_for(1, &mut cfg);
        let parallel = digest_for(2, &mut cfg);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn reconfigure_trains_only_its_stage_and_logs_terms() {
        let cfg = tiny_cfg();
        let (model, ds, aux) = setup(&cfg);
        let mut params = model.init_params::<f32>(cfg.seed);
        let mut opt = OptState::new();
        let anchored = params_digest(&params, is_anchor_param);
        let rows =
            train_reconfigure(&model, &mut params, &mut opt, &ds, Some(&aux), &cfg, 0).unwrap();
        assert_eq!(rows.len(), cfg.reconfigure.steps);
        assert!(rows.iter().all(|r| r.dfm.is_some() && r.ldc.is_some()));
        assert_eq!(params_digest(&params, is_anchor_param), anchored);
        // Identity-initialized blocks mean step-0 feature matching starts at
        // a small but positive value.
        assert!(rows[0].loss > 0.0);
    }

    #[test]
    fn zero_reconfigure_steps_keep_identity_passthrough() {
        let mut cfg = tiny_cfg();
        cfg.reconfigure.steps = 0;
        let (model, ds, aux) = setup(&cfg);
        let mut params = model.init_params::<f64>(cfg.seed);
        let mut opt = OptState::new();
        train_reconfigure(&model, &mut params, &mut opt, &ds, Some(&aux), &cfg, 0).unwrap();
        // Reconfigure output equals input exactly at init.
        let xi = model.encode_reference(&params, &ds.samples[0]).unwrap();
        let psi = model
            .encode_motion(&params, &ds.samples[0].landmarks, 0, 0)
            .unwrap();
        let out = model.reconfigure_values(&params, &xi, &psi, &psi).unwrap();
        assert_eq!(out.data(), xi.data());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let cfg = tiny_cfg();
        let (model, _ds, _aux) = setup(&cfg);
        let params = model.init_params::<f32>(cfg.seed);
        let mut opt = OptState::<f32>::new();
        opt.t = 17;
        opt.m.insert("denoiser.b0.mlp.b1".into(), vec![0.25; 8]);
        opt.v.insert("denoiser.b0.mlp.b1".into(), vec![0.5; 8]);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let rng = RngState {
            seed: 0xDEAD_BEEF_0BAD_F00D,
            next_step: 42,
        };
        save_checkpoint(&p1, Stage::Anchor, &params, &opt, "{\"seed\":11}", rng).unwrap();
        let raw = load_checkpoint(&p1).unwrap();
        assert_eq!(raw.stage, Stage::Anchor);
        assert_eq!(raw.rng_state().unwrap(), rng);
        assert_eq!(raw.config_json().unwrap(), "{\"seed\":11}");
        assert_eq!(raw.precision().unwrap(), Precision::F32);
        let (params2, opt2) = raw.unpack::<f32>().unwrap();
        assert_eq!(opt2.t, 17);
        save_checkpoint(&p2, Stage::Anchor, &params2, &opt2, "{\"seed\":11}", rng).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_error_paths() {
        let cfg = tiny_cfg();
        let (model, _ds, _aux) = setup(&cfg);
        let params = model.init_params::<f32>(cfg.seed);
        let opt = OptState::<f32>::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let rng = RngState {
            seed: 1,
            next_step: 0,
        };
        save_checkpoint(&path, Stage::Reconfigure, &params, &opt, "{}", rng).unwrap();

        // Wrong stage.
        let raw = load_checkpoint(&path).unwrap();
        assert!(matches!(
            raw.expect_stage(Stage::Anchor),
            Err(TrainError::StageMismatch { .. })
        ));
        // Wrong precision.
        assert!(matches!(
            raw.unpack::<f64>(),
            Err(TrainError::DtypeMismatch { .. })
        ));

        // Corrupted magic: CRC catches it first unless the CRC is patched,
        // so corrupt both.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(TrainError::BadMagic)));

        // Flipped payload byte fails the CRC.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0xFF;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(TrainError::BadCrc)));

        // Truncated file.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &bytes[..10]).unwrap();
        assert!(load_checkpoint(&bad).is_err());
    }

    #[test]
    fn loss_csv_formats() {
        let rows = vec![
            LossRow {
                step: 0,
                loss: 1.5,
                dfm: None,
                ldc: None,
            },
            LossRow {
                step: 1,
                loss: 1.25,
                dfm: None,
                ldc: None,
            },
        ];
        assert_eq!(loss_csv(&rows), "step,loss\n0,1.5\n1,1.25\n");
        let rows = vec![LossRow {
            step: 0,
            loss: 2.0,
            dfm: Some(1.5),
            ldc: Some(0.5),
        }];
        assert_eq!(loss_csv(&rows), "step,loss,dfm,ldc\n0,2,1.5,0.5\n");
    }
}
