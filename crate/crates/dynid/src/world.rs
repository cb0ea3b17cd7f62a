//! Procedural identity x motion world.
//!
//! Scenes are built from a frozen random linear map `g`: face-region cells
//! carry `g([u; onehot(expression); onehot(orientation)])` for an identity
//! vector `u`, background cells carry a scene embedding chosen orthogonal to
//! the range of `g`, plus small noise. Because `g` is linear, injective and
//! known, identity and motion are recoverable from latent content by least
//! squares, which is what makes disentanglement measurable without any
//! pretrained recognizer.

use crate::rng::{Purpose, Stream};
use crate::saa::{RegionMask, SaaError};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Seed of the frozen world maps. Fixed so "identity" and "motion" mean the
/// same thing in every run of every binary built from this crate.
pub const WORLD_MAP_SEED: u64 = 0xD1F0_5EED;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("grid {w}x{h} too small for a face region (needs at least 6x6)")]
    GridTooSmall { w: usize, h: usize },
    #[error("latent width d_z={d_z} cannot embed identity+motion ({needed} dims) plus scenes")]
    LatentTooNarrow { d_z: usize, needed: usize },
    #[error("{kind} class {value} out of range (max {max})")]
    BadClass {
        kind: &'static str,
        value: usize,
        max: usize,
    },
    #[error("identity count must be >= 2, got {0}")]
    TooFewIdentities(usize),
    #[error("train fraction must lie in (0,1), got {0}")]
    BadSplit(f64),
    #[error("landmark sigma must be >= 0, got {0}")]
    BadSigma(f64),
    #[error(transparent)]
    Mask(#[from] SaaError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset file {path}: {detail}")]
    Corrupt { path: String, detail: String },
}

/// Geometry and class structure of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Latent channels per cell.
    pub d_z: usize,
    /// Identity vector dimension.
    pub d_id: usize,
    pub expressions: usize,
    pub orientations: usize,
    pub scenes: usize,
    pub landmarks: usize,
    /// Landmark perturbation scale used during training, as a fraction of
    /// the grid extent.
    pub landmark_sigma: f64,
    /// Per-entry standard deviation of background noise.
    pub background_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid_h: 12,
            grid_w: 12,
            d_z: 32,
            d_id: 16,
            expressions: 7,
            orientations: 4,
            scenes: 5,
            landmarks: 5,
            landmark_sigma: 0.02,
            background_noise: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Input dimension of the mixing map: identity plus one-hot motion.
    pub fn mix_dim(&self) -> usize {
        self.d_id + self.expressions + self.orientations
    }

    pub fn extent(&self) -> f64 {
        self.grid_w.max(self.grid_h) as f64
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.grid_w < 6 || self.grid_h < 6 {
            return Err(WorldError::GridTooSmall {
                w: self.grid_w,
                h: self.grid_h,
            });
        }
        if self.d_z < self.mix_dim() + self.scenes {
            return Err(WorldError::LatentTooNarrow {
                d_z: self.d_z,
                needed: self.mix_dim() + self.scenes,
            });
        }
        Ok(())
    }
}

/// The frozen mixing map and scene embeddings. Everything here is a pure
/// function of [`WORLD_MAP_SEED`] and the config dimensions; it never trains.
pub struct FrozenWorldMaps {
    cfg: WorldConfig,
    /// Row-major `[d_z, mix_dim]`.
    mix: Vec<f64>,
    /// `scenes` vectors of length `d_z`, orthogonal to the range of `mix`
    /// and to each other, each of norm `sqrt(d_z)`.
    scene_vectors: Vec<Vec<f64>>,
}

impl FrozenWorldMaps {
    pub fn new(cfg: &WorldConfig) -> Result<Self, WorldError> {
        cfg.validate()?;
        let d_z = cfg.d_z;
        let m = cfg.mix_dim();
        let mut s = Stream::new(WORLD_MAP_SEED, Purpose::Data, 0);
        // The mixed input [u; onehot; onehot] always has squared norm 3, so
        // this gain gives face content per-entry variance 4: loud enough
        // that identity carries a real share of the denoising objective.
        let scale = 2.0 / 3f64.sqrt();
        let mix: Vec<f64> = (0..d_z * m).map(|_| s.normal() * scale).collect();

        // Orthonormal basis of the range of `mix` (columns live in R^d_z).
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + cfg.scenes);
        for col in 0..m {
            let v: Vec<f64> = (0..d_z).map(|r| mix[r * m + col]).collect();
            if let Some(q) = orthonormalize(&v, &basis) {
                basis.push(q);
            }
        }
        // Scene embeddings from the orthogonal complement. The 1.5 factor
        // keeps background variance well above the noise floor so scene
        // content dominates what conditioning has to explain.
        let mut scene_vectors = Vec::with_capacity(cfg.scenes);
        while scene_vectors.len() < cfg.scenes {
            let v: Vec<f64> = (0..d_z).map(|_| s.normal()).collect();
            if let Some(q) = orthonormalize(&v, &basis) {
                let norm_target = 1.5 * (d_z as f64).sqrt();
                scene_vectors.push(q.iter().map(|x| x * norm_target).collect());
                basis.push(q);
            }
        }
        Ok(FrozenWorldMaps {
            cfg: cfg.clone(),
            mix,
            scene_vectors,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// Row-major `[d_z, mix_dim]` mixing matrix.
    pub fn mix_matrix(&self) -> &[f64] {
        &self.mix
    }

    pub fn scene_vector(&self, scene: usize) -> &[f64] {
        &self.scene_vectors[scene]
    }

    /// Face-cell content for one identity in one motion state.
    pub fn face_content(
        &self,
        u: &[f64],
        expression: usize,
        orientation: usize,
    ) -> Result<Vec<f64>, WorldError> {
        let cfg = &self.cfg;
        if expression >= cfg.expressions {
            return Err(WorldError::BadClass {
                kind: "expression",
                value: expression,
                max: cfg.expressions - 1,
            });
        }
        if orientation >= cfg.orientations {
            return Err(WorldError::BadClass {
                kind: "orientation",
                value: orientation,
                max: cfg.orientations - 1,
            });
        }
        let m = cfg.mix_dim();
        let mut x = vec![0.0; m];
        x[..cfg.d_id].copy_from_slice(u);
        x[cfg.d_id + expression] = 1.0;
        x[cfg.d_id + cfg.expressions + orientation] = 1.0;
        let mut y = vec![0.0; cfg.d_z];
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &self.mix[r * m..(r + 1) * m];
            *yr = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        Ok(y)
    }
}

fn orthonormalize(v: &[f64], basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let mut w = v.to_vec();
    // Two Gram-Schmidt passes keep the basis orthogonal to roundoff.
    for _ in 0..2 {
        for q in basis {
            let dot: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= dot * qi;
            }
        }
    }
    let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return None;
    }
    Some(w.iter().map(|x| x / norm).collect())
}

/// One synthetic individual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityProfile {
    pub id: usize,
    /// Unit-norm identity vector.
    pub u: Vec<f64>,
}

impl IdentityProfile {
    /// Draw identity `id` for a dataset seed.
    pub fn draw(seed: u64, id: usize, d_id: usize) -> Self {
        let mut s = Stream::new(seed, Purpose::Data, 0x1D_0000_0000 + id as u64);
        let mut u: Vec<f64> = (0..d_id).map(|_| s.normal()).collect();
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        IdentityProfile { id, u }
    }
}

/// Expression/orientation state with continuous in-class jitter angles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionState {
    pub expression: usize,
    pub orientation: usize,
    /// Degrees; sign and range depend on the orientation class.
    pub yaw: f64,
    pub pitch: f64,
}

impl MotionState {
    /// Jitter angle bounds per orientation class: front, side, up, down.
    fn class_bounds(orientation: usize) -> ((f64, f64), (f64, f64)) {
        match orientation {
            0 => ((-8.0, 8.0), (-8.0, 8.0)),
            1 => ((40.0, 80.0), (-8.0, 8.0)),
            2 => ((-8.0, 8.0), (20.0, 50.0)),
            3 => ((-8.0, 8.0), (-50.0, -20.0)),
            _ => unreachable!("orientation validated upstream"),
        }
    }

    pub fn draw(expression: usize, orientation: usize, stream: &mut Stream) -> Self {
        let ((y0, y1), (p0, p1)) = Self::class_bounds(orientation);
        let yaw = y0 + stream.uniform() * (y1 - y0);
        let pitch = p0 + stream.uniform() * (p1 - p0);
        MotionState {
            expression,
            orientation,
            yaw,
            pitch,
        }
    }
}

/// Prompt attributes the text encoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAttrs {
    pub expression: usize,
    pub orientation: usize,
    pub scene: usize,
}

/// A rendered synthetic scene; the stand-in for a training image.
#[derive(Clone, Debug)]
pub struct WorldSample {
    pub identity: IdentityProfile,
    pub motion: MotionState,
    pub scene: usize,
    pub mask: RegionMask,
    /// Face box on the grid, inclusive-exclusive.
    pub face_box: (usize, usize, usize, usize),
    /// Row-major `[cells, d_z]` latent grid.
    pub z0: Vec<f64>,
    /// Landmark coordinates in grid units.
    pub landmarks: Vec<(f64, f64)>,
    pub prompt: PromptAttrs,
}

impl WorldSample {
    pub fn latent<T: Scalar>(&self, cfg: &WorldConfig) -> Tensor<T> {
        Tensor::new(
            vec![cfg.cells(), cfg.d_z],
            self.z0.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("rendered latents are finite")
    }

    /// Mean latent content over the face region.
    pub fn face_mean(&self, cfg: &WorldConfig) -> Vec<f64> {
        region_mean(&self.z0, self.mask.bits(), cfg.d_z)
    }
}

/// Mean of `[cells, d_z]` content over the cells a mask covers.
pub fn region_mean(z: &[f64], bits: &[bool], d_z: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d_z];
    let mut count = 0usize;
    for (cell, &inside) in bits.iter().enumerate() {
        if inside {
            for (m, &v) in mean.iter_mut().zip(&z[cell * d_z..(cell + 1) * d_z]) {
                *m += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        mean.iter_mut().for_each(|m| *m /= count as f64);
    }
    mean
}

/// Deterministic landmark layout: five points (eyes, nose, mouth corners)
/// placed inside the face box, shifted by the jitter angles.
fn place_landmarks(
    face_box: (usize, usize, usize, usize),
    motion: &MotionState,
    cfg: &WorldConfig,
    stream: &mut Stream,
) -> Vec<(f64, f64)> {
    let (x0, y0, x1, y1) = face_box;
    let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let base = [
        (0.30, 0.35),
        (0.70, 0.35),
        (0.50, 0.55),
        (0.35, 0.75),
        (0.65, 0.75),
    ];
    let dx = motion.yaw / 180.0 * 0.4;
    let dy = -motion.pitch / 180.0 * 0.4;
    let jitter = 0.01 * cfg.extent();
    base.iter()
        .take(cfg.landmarks)
        .map(|&(rx, ry)| {
            let px = x0 as f64 + (rx + dx) * bw + stream.normal() * jitter;
            let py = y0 as f64 + (ry + dy) * bh + stream.normal() * jitter;
            (
                px.clamp(0.0, cfg.grid_w as f64),
                py.clamp(0.0, cfg.grid_h as f64),
            )
        })
        .collect()
}

/// Render one scene. Deterministic in `(identity, motion, scene, seed,
/// sample_index)`; the face box position, background noise and landmark
/// jitter come from the sample's own stream.
pub fn render(
    identity: &IdentityProfile,
    motion: MotionState,
    scene: usize,
    maps: &FrozenWorldMaps,
    seed: u64,
    sample_index: u64,
) -> Result<WorldSample, WorldError> {
    let cfg = maps.config();
    cfg.validate()?;
    if scene >= cfg.scenes {
        return Err(WorldError::BadClass {
            kind: "scene",
            value: scene,
            max: cfg.scenes - 1,
        });
    }
    let mut s = Stream::new(seed, Purpose::Data, 0x5A_0000_0000 + sample_index);

    let bw = 4 + s.below(3);
    let bh = 4 + s.below(3);
    let x0 = s.below(cfg.grid_w - bw + 1);
    let y0 = s.below(cfg.grid_h - bh + 1);
    let face_box = (x0, y0, x0 + bw, y0 + bh);
    let mask = RegionMask::from_box(x0, y0, x0 + bw, y0 + bh, cfg.grid_w, cfg.grid_h, identity.id)?;

    let face = maps.face_content(&identity.u, motion.expression, motion.orientation)?;
    let scene_vec = maps.scene_vector(scene);
    let mut z0 = vec![0.0; cfg.cells() * cfg.d_z];
    for cell in 0..cfg.cells() {
        let dst = &mut z0[cell * cfg.d_z..(cell + 1) * cfg.d_z];
        if mask.covers(cell) {
            dst.copy_from_slice(&face);
        } else {
            for (d, &sv) in dst.iter_mut().zip(scene_vec) {
                *d = sv + s.normal() * cfg.background_noise;
            }
        }
    }
    let landmarks = place_landmarks(face_box, &motion, cfg, &mut s);

    Ok(WorldSample {
        identity: identity.clone(),
        motion,
        scene,
        mask,
        face_box,
        z0,
        landmarks,
        prompt: PromptAttrs {
            expression: motion.expression,
            orientation: motion.orientation,
            scene,
        },
    })
}

/// Add zero-mean noise (std `sigma x` grid extent) to landmarks, clamped to
/// the grid.
pub fn perturb_landmarks(
    landmarks: &[(f64, f64)],
    sigma: f64,
    cfg: &WorldConfig,
    stream: &mut Stream,
) -> Result<Vec<(f64, f64)>, WorldError> {
    if sigma < 0.0 {
        return Err(WorldError::BadSigma(sigma));
    }
    let std = sigma * cfg.extent();
    Ok(landmarks
        .iter()
        .map(|&(x, y)| {
            (
                (x + stream.normal() * std).clamp(0.0, cfg.grid_w as f64),
                (y + stream.normal() * std).clamp(0.0, cfg.grid_h as f64),
            )
        })
        .collect())
}

/// An in-memory dataset with a deterministic identity-level train/held-out
/// split.
pub struct Dataset {
    pub cfg: WorldConfig,
    pub seed: u64,
    pub catalog: Vec<IdentityProfile>,
    pub samples: Vec<WorldSample>,
    /// Sample indices per identity id.
    pub by_identity: BTreeMap<usize, Vec<usize>>,
    pub train_ids: Vec<usize>,
    pub holdout_ids: Vec<usize>,
}

impl Dataset {
    pub fn train_samples(&self) -> Vec<usize> {
        self.ids_to_samples(&self.train_ids)
    }

    pub fn holdout_samples(&self) -> Vec<usize> {
        self.ids_to_samples(&self.holdout_ids)
    }

    fn ids_to_samples(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for id in ids {
            if let Some(v) = self.by_identity.get(id) {
                out.extend_from_slice(v);
            }
        }
        out
    }
}

/// Generate `n_ids x n_motions` scenes. Each identity gets `n_motions`
/// distinct (expression, orientation) combinations; the split separates
/// whole identities, never images of one identity.
pub fn make_dataset(
    n_ids: usize,
    n_motions: usize,
    train_fraction: f64,
    seed: u64,
    maps: &FrozenWorldMaps,
) -> Result<Dataset, WorldError> {
    if n_ids < 2 {
        return Err(WorldError::TooFewIdentities(n_ids));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(WorldError::BadSplit(train_fraction));
    }
    let cfg = maps.config().clone();
    let catalog: Vec<IdentityProfile> = (0..n_ids)
        .map(|id| IdentityProfile::draw(seed, id, cfg.d_id))
        .collect();

    let combos: Vec<(usize, usize)> = (0..cfg.expressions)
        .flat_map(|e| (0..cfg.orientations).map(move |o| (e, o)))
        .collect();

    let mut samples = Vec::with_capacity(n_ids * n_motions);
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for identity in &catalog {
        let mut s = Stream::new(seed, Purpose::Data, 0x30_0000_0000 + identity.id as u64);
        let mut deck = combos.clone();
        s.shuffle(&mut deck);
        for m in 0..n_motions {
            let (e, o) = deck[m % deck.len()];
            let motion = MotionState::draw(e, o, &mut s);
            let scene = s.below(cfg.scenes);
            let index = samples.len();
            let sample = render(
                identity,
                motion,
                scene,
                maps,
                seed,
                (identity.id as u64) << 16 | m as u64,
            )?;
            by_identity.entry(identity.id).or_default().push(index);
            samples.push(sample);
        }
    }

    let mut ids: Vec<usize> = (0..n_ids).collect();
    let mut split_stream = Stream::new(seed, Purpose::Data, 0x57_0000_0000);
    split_stream.shuffle(&mut ids);
    let n_train = ((n_ids as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, n_ids - 1);
    let mut train_ids = ids[..n_train].to_vec();
    let mut holdout_ids = ids[n_train..].to_vec();
    train_ids.sort_unstable();
    holdout_ids.sort_unstable();

    Ok(Dataset {
        cfg,
        seed,
        catalog,
        samples,
        by_identity,
        train_ids,
        holdout_ids,
    })
}

/// Expression-rich auxiliary set: a handful of extra identities, each with
/// all expressions at frontal orientation. Mixed in at low probability
/// during reconfiguration training.
pub fn make_expression_aux(
    n_ids: usize,
    seed: u64,
    maps: &FrozenWorldMaps,
) -> Result<Dataset, WorldError> {
    let cfg = maps.config().clone();
    let base = 0x0A00_0000;
    let catalog: Vec<IdentityProfile> = (0..n_ids)
        .map(|i| IdentityProfile::draw(seed, base + i, cfg.d_id))
        .collect();
    let mut samples = Vec::new();
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for identity in &catalog {
        let mut s = Stream::new(seed, Purpose::Data, 0x31_0000_0000 + identity.id as u64);
        for e in 0..cfg.expressions {
            let motion = MotionState::draw(e, 0, &mut s);
            let scene = s.below(cfg.scenes);
            let index = samples.len();
            samples.push(render(
                identity,
                motion,
                scene,
                maps,
                seed,
                (identity.id as u64) << 16 | e as u64,
            )?);
            by_identity.entry(identity.id).or_default().push(index);
        }
    }
    let train_ids: Vec<usize> = catalog.iter().map(|c| c.id).collect();
    Ok(Dataset {
        cfg,
        seed,
        catalog,
        samples,
        by_identity,
        train_ids,
        holdout_ids: Vec::new(),
    })
}

// ── Disk format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    cfg: WorldConfig,
    catalog: Vec<IdentityProfile>,
    train_ids: Vec<usize>,
    holdout_ids: Vec<usize>,
    sample_count: usize,
}

const SAMPLE_MAGIC: &[u8; 4] = b"DYWS";

/// Persist a dataset as `manifest.json` plus one flat binary file per
/// sample under `samples/`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), WorldError> {
    std::fs::create_dir_all(dir.join("samples"))?;
    let manifest = Manifest {
        version: 1,
        seed: dataset.seed,
        cfg: dataset.cfg.clone(),
        catalog: dataset.catalog.clone(),
        train_ids: dataset.train_ids.clone(),
        holdout_ids: dataset.holdout_ids.clone(),
        sample_count: dataset.samples.len(),
    };
    let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    for (i, sample) in dataset.samples.iter().enumerate() {
        let path = dir.join(format!("samples/{i:06}.bin"));
        let mut buf = Vec::new();
        buf.extend_from_slice(SAMPLE_MAGIC);
        buf.extend_from_slice(&(sample.identity.id as u32).to_le_bytes());
        buf.push(sample.motion.expression as u8);
        buf.push(sample.motion.orientation as u8);
        buf.push(sample.scene as u8);
        buf.push(0);
        buf.extend_from_slice(&sample.motion.yaw.to_le_bytes());
        buf.extend_from_slice(&sample.motion.pitch.to_le_bytes());
        let (x0, y0, x1, y1) = sample.face_box;
        for v in [x0, y0, x1, y1] {
            buf.extend_from_slice(&(v as u16).to_le_bytes());
        }
        buf.extend_from_slice(&(sample.landmarks.len() as u16).to_le_bytes());
        for &(x, y) in &sample.landmarks {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&y.to_le_bytes());
        }
        for &v in &sample.z0 {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, WorldError> {
    let manifest: Manifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    let cfg = manifest.cfg;
    let by_id: BTreeMap<usize, IdentityProfile> = manifest
        .catalog
        .iter()
        .map(|p| (p.id, p.clone()))
        .collect();
    let mut samples = Vec::with_capacity(manifest.sample_count);
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..manifest.sample_count {
        let path = dir.join(format!("samples/{i:06}.bin"));
        let corrupt = |detail: &str| WorldError::Corrupt {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Option<&[u8]> {
            let s = bytes.get(*off..*off + n)?;
            *off += n;
            Some(s)
        };
        if take(&mut off, 4) != Some(SAMPLE_MAGIC.as_slice()) {
            return Err(corrupt("bad magic"));
        }
        let id = u32::from_le_bytes(
            take(&mut off, 4)
                .ok_or_else(|| corrupt("truncated id"))?
                .try_into()
                .unwrap(),
        ) as usize;
        let hdr = take(&mut off, 4).ok_or_else(|| corrupt("truncated header"))?;
        let (e, o, scene) = (hdr[0] as usize, hdr[1] as usize, hdr[2] as usize);
        let f64_at = |off: &mut usize| -> Result<f64, WorldError> {
            Ok(f64::from_le_bytes(
                take(off, 8)
                    .ok_or_else(|| corrupt("truncated float"))?
                    .try_into()
                    .unwrap(),
            ))
        };
        let yaw = f64_at(&mut off)?;
        let pitch = f64_at(&mut off)?;
        let u16_at = |off: &mut usize| -> Result<usize, WorldError> {
            Ok(u16::from_le_bytes(
                take(off, 2)
                    .ok_or_else(|| corrupt("truncated u16"))?
                    .try_into()
                    .unwrap(),
            ) as usize)
        };
        let face_box = (
            u16_at(&mut off)?,
            u16_at(&mut off)?,
            u16_at(&mut off)?,
            u16_at(&mut off)?,
        );
        let n_lm = u16_at(&mut off)?;
        let mut landmarks = Vec::with_capacity(n_lm);
        for _ in 0..n_lm {
            let x = f64_at(&mut off)?;
            let y = f64_at(&mut off)?;
            landmarks.push((x, y));
        }
        let numel = cfg.cells() * cfg.d_z;
        let mut z0 = Vec::with_capacity(numel);
        for _ in 0..numel {
            z0.push(f64_at(&mut off)?);
        }
        if off != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let identity = by_id
            .get(&id)
            .ok_or_else(|| corrupt("identity missing from catalog"))?
            .clone();
        let mask = RegionMask::from_box(
            face_box.0, face_box.1, face_box.2, face_box.3, cfg.grid_w, cfg.grid_h, id,
        )?;
        by_identity.entry(id).or_default().push(samples.len());
        samples.push(WorldSample {
            identity,
            motion: MotionState {
                expression: e,
                orientation: o,
                yaw,
                pitch,
            },
            scene,
            mask,
            face_box,
            z0,
            landmarks,
            prompt: PromptAttrs {
                expression: e,
                orientation: o,
                scene,
            },
        });
    }
    Ok(Dataset {
        cfg,
        seed: manifest.seed,
        catalog: manifest.catalog,
        samples,
        by_identity,
        train_ids: manifest.train_ids,
        holdout_ids: manifest.holdout_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps() -> FrozenWorldMaps {
        FrozenWorldMaps::new(&WorldConfig::default()).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn render_is_deterministic() {
        let maps = maps();
        let id = IdentityProfile::draw(3, 0, 16);
        let mut s = Stream::new(3, Purpose::Data, 500);
        let motion = MotionState::draw(2, 1, &mut s);
        let a = render(&id, motion, 1, &maps, 3, 7).unwrap();
        let b = render(&id, motion, 1, &maps, 3, 7).unwrap();
        assert_eq!(a.z0, b.z0);
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.face_box, b.face_box);
    }

    #[test]
    fn same_identity_distinct_motions_change_face_content() {
        let maps = maps();
        let id = IdentityProfile::draw(5, 1, 16);
        let cfg = WorldConfig::default();
        let mut s = Stream::new(5, Purpose::Data, 0);
        let m1 = MotionState::draw(0, 0, &mut s);
        let m2 = MotionState::draw(3, 2, &mut s);
        let a = render(&id, m1, 2, &maps, 5, 1).unwrap();
        let b = render(&id, m2, 2, &maps, 5, 1).unwrap();
        let fa = a.face_mean(&cfg);
        let fb = b.face_mean(&cfg);
        assert!(cosine(&fa, &fb) < 0.99, "cos {}", cosine(&fa, &fb));
    }

    #[test]
    fn masks_exactly_cover_identity_dependent_cells() {
        let maps = maps();
        let id_a = IdentityProfile::draw(9, 0, 16);
        let id_b = IdentityProfile {
            id: 0, // same id so box/noise stream draws align
            u: IdentityProfile::draw(9, 7, 16).u,
        };
        let mut s = Stream::new(9, Purpose::Data, 0);
        let motion = MotionState::draw(1, 0, &mut s);
        let a = render(&id_a, motion, 0, &maps, 9, 3).unwrap();
        let b = render(&id_b, motion, 0, &maps, 9, 3).unwrap();
        let cfg = WorldConfig::default();
        for cell in 0..cfg.cells() {
            let ca = &a.z0[cell * cfg.d_z..(cell + 1) * cfg.d_z];
            let cb = &b.z0[cell * cfg.d_z..(cell + 1) * cfg.d_z];
            let differs = ca.iter().zip(cb).any(|(x, y)| x != y);
            assert_eq!(differs, a.mask.covers(cell), "cell {cell}");
        }
    }

    #[test]
    fn mix_map_is_injective_over_many_samples() {
        // Nearest-neighbor collision scan: distinct (identity, motion) pairs
        // must give distinct face content with real separation.
        let maps = maps();
        let cfg = WorldConfig::default();
        let mut contents: Vec<Vec<f64>> = Vec::new();
        for id in 0..180 {
            let profile = IdentityProfile::draw(13, id, cfg.d_id);
            for e in 0..7 {
                for o in 0..4 {
                    contents.push(maps.face_content(&profile.u, e, o).unwrap());
                }
            }
        }
        assert_eq!(contents.len(), 5040);
        let norms: Vec<f64> = contents
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        // Sample pairs rather than the full 12.7M comparisons.
        let mut s = Stream::new(13, Purpose::Eval, 0);
        let mut min_dist = f64::INFINITY;
        for _ in 0..200_000 {
            let i = s.below(contents.len());
            let j = s.below(contents.len());
            if i == j {
                continue;
            }
            let d: f64 = contents[i]
                .iter()
                .zip(&contents[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let rel = d / norms[i].max(norms[j]);
            min_dist = min_dist.min(rel);
        }
        assert!(min_dist > 1e-3, "relative NN distance {min_dist}");
    }

    #[test]
    fn dataset_split_is_exact_and_disjoint() {
        let maps = maps();
        let ds = make_dataset(20, 3, 0.8, 77, &maps).unwrap();
        assert_eq!(ds.samples.len(), 60);
        assert_eq!(ds.train_ids.len() + ds.holdout_ids.len(), 20);
        let overlap = ds
            .train_ids
            .iter()
            .filter(|id| ds.holdout_ids.contains(id))
            .count();
        assert_eq!(overlap, 0);
    }

    #[test]
    fn dataset_seed_changes_identities_not_sizes() {
        let maps = maps();
        let a = make_dataset(6, 2, 0.5, 1, &maps).unwrap();
        let b = make_dataset(6, 2, 0.5, 2, &maps).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        assert_ne!(a.catalog[0].u, b.catalog[0].u);
    }

    #[test]
    fn invalid_split_and_small_catalog_rejected() {
        let maps = maps();
        assert!(matches!(
            make_dataset(1, 2, 0.5, 0, &maps),
            Err(WorldError::TooFewIdentities(1))
        ));
        assert!(matches!(
            make_dataset(4, 2, 1.0, 0, &maps),
            Err(WorldError::BadSplit(_))
        ));
    }

    #[test]
    fn perturb_sigma_zero_is_identity_and_output_in_bounds() {
        let cfg = WorldConfig::default();
        let lm = vec![(1.0, 2.0), (11.5, 0.2)];
        let mut s = Stream::new(1, Purpose::Data, 0);
        let same = perturb_landmarks(&lm, 0.0, &cfg, &mut s).unwrap();
        assert_eq!(same, lm);
        let mut s = Stream::new(1, Purpose::Data, 1);
        for _ in 0..200 {
            let p = perturb_landmarks(&lm, 0.3, &cfg, &mut s).unwrap();
            for (x, y) in p {
                assert!((0.0..=12.0).contains(&x) && (0.0..=12.0).contains(&y));
            }
        }
    }

    #[test]
    fn perturb_mean_displacement_matches_formula() {
        // Expected per-point displacement sqrt(2) * E|dx| with
        // E|dx| = sigma * extent * sqrt(2/pi).
        let cfg = WorldConfig::default();
        let sigma = 0.02;
        let lm = vec![(6.0, 6.0); 4];
        let mut s = Stream::new(29, Purpose::Data, 0);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..4000 {
            let p = perturb_landmarks(&lm, sigma, &cfg, &mut s).unwrap();
            for (orig, new) in lm.iter().zip(&p) {
                total += (new.0 - orig.0).abs() + (new.1 - orig.1).abs();
                count += 2;
            }
        }
        let mean_axis = total / count as f64;
        let displacement = mean_axis * 2f64.sqrt();
        let expected = sigma * cfg.extent() * (2.0 / std::f64::consts::PI).sqrt() * 2f64.sqrt();
        assert!(
            (displacement - expected).abs() / expected < 0.10,
            "measured {displacement}, expected {expected}"
        );
    }

    #[test]
    fn scene_vectors_are_orthogonal_to_face_span() {
        let maps = maps();
        let cfg = WorldConfig::default();
        let id = IdentityProfile::draw(31, 0, cfg.d_id);
        let face = maps.face_content(&id.u, 3, 1).unwrap();
        for scene in 0..cfg.scenes {
            let sv = maps.scene_vector(scene);
            let dot: f64 = face.iter().zip(sv).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-9, "scene {scene} dot {dot}");
        }
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let maps = maps();
        let ds = make_dataset(4, 2, 0.5, 21, &maps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.z0, b.z0);
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!(a.face_box, b.face_box);
            assert_eq!(a.prompt, b.prompt);
        }
        assert_eq!(back.train_ids, ds.train_ids);
    }
}
