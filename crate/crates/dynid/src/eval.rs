//! Analytic probes and synthetic benchmarks.
//!
//! Because the world's mixing map is a known linear function, identity and
//! motion can be recovered from latent content by least squares; no
//! pretrained recognizer is involved anywhere. Feature tokens are decoded
//! the same way through a least-squares linear decoder calibrated on clean
//! renders of the current encoder.

use crate::config::RunConfig;
use crate::model::{GateMode, GuidedPredictor, Model};
use crate::pipeline::{ddim_sample, PipelineError, SampleRun};
use crate::rng::{Purpose, Stream};
use crate::saa::{LayoutPolicy, RegionMask, SaaError};
use crate::tensor::{ParamSet, Scalar, Tensor};
use crate::world::{
    region_mean, render, Dataset, FrozenWorldMaps, IdentityProfile, MotionState, PromptAttrs,
    WorldError,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("region content is all zero; nothing to probe")]
    SingularRegion,
    #[error("blending metric needs at least two regions, got {0}")]
    TooFewRegions(usize),
    #[error("intended identity count {ids} does not match region count {regions}")]
    IntentMismatch { ids: usize, regions: usize },
    #[error("feature-probe calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Saa(#[from] SaaError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// What the latent-space probe recovered from one region.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub best_id: usize,
    /// Confidence: cosine to the best catalog identity, scaled by the
    /// fraction of the region's energy that lies in the face subspace.
    /// Background content scores low on both factors.
    pub margin: f64,
    /// Raw cosine to the best catalog identity.
    pub cosine: f64,
    pub expression: usize,
    pub orientation: usize,
    pub identity_estimate: Vec<f64>,
    /// `|G x| / |y|`: how face-like the content is.
    pub in_span: f64,
}

/// Least-squares inversion of the frozen mixing map plus nearest-catalog
/// lookup.
pub struct IdentityProbe {
    d_id: usize,
    expressions: usize,
    orientations: usize,
    mix: DMatrix<f64>,
    catalog: Vec<IdentityProfile>,
}

impl IdentityProbe {
    pub fn new(maps: &FrozenWorldMaps, catalog: &[IdentityProfile]) -> Self {
        let cfg = maps.config();
        let mix = DMatrix::from_row_slice(cfg.d_z, cfg.mix_dim(), maps.mix_matrix());
        IdentityProbe {
            d_id: cfg.d_id,
            expressions: cfg.expressions,
            orientations: cfg.orientations,
            mix,
            catalog: catalog.to_vec(),
        }
    }

    /// Probe the mean content of a region.
    pub fn probe(&self, mean_content: &[f64]) -> Result<ProbeResult, EvalError> {
        let y_norm: f64 = mean_content.iter().map(|v| v * v).sum::<f64>().sqrt();
        if y_norm == 0.0 {
            return Err(EvalError::SingularRegion);
        }
        let y = DVector::from_row_slice(mean_content);
        let svd = self.mix.clone().svd(true, true);
        let x = svd
            .solve(&y, 1e-12)
            .map_err(|e| EvalError::Calibration(e.to_string()))?;
        let reconstructed = &self.mix * &x;
        let in_span = reconstructed.norm() / y_norm;

        let u_est: Vec<f64> = x.as_slice()[..self.d_id].to_vec();
        let mut best_id = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for profile in &self.catalog {
            let cos = cosine(&u_est, &profile.u);
            if cos > best_cos {
                best_cos = cos;
                best_id = profile.id;
            }
        }
        let expr_block = &x.as_slice()[self.d_id..self.d_id + self.expressions];
        let orient_block =
            &x.as_slice()[self.d_id + self.expressions..self.d_id + self.expressions + self.orientations];
        let argmax = |v: &[f64]| {
            let mut best = 0;
            for (i, &val) in v.iter().enumerate() {
                if val > v[best] {
                    best = i;
                }
            }
            best
        };
        Ok(ProbeResult {
            best_id,
            margin: best_cos * in_span.min(1.0),
            cosine: best_cos,
            expression: argmax(expr_block),
            orientation: argmax(orient_block),
            identity_estimate: u_est,
            in_span,
        })
    }

    /// Probe the cells a mask covers inside a `[cells, d_z]` latent.
    pub fn probe_region(
        &self,
        latent: &[f64],
        mask: &RegionMask,
        d_z: usize,
    ) -> Result<ProbeResult, EvalError> {
        self.probe(&region_mean(latent, mask.bits(), d_z))
    }
}

/// Decoded identity/motion content of one feature-token matrix.
#[derive(Clone, Debug)]
pub struct DecodedFeatures {
    pub identity: Vec<f64>,
    pub expression: usize,
    pub orientation: usize,
}

/// Linear least-squares decoder from face tokens back to
/// `[identity; one-hot expression; one-hot orientation]`, calibrated on
/// clean renders pushed through the current (trained) encoder. Closed-form
/// normal equations; nothing iterative, nothing learned beyond the fit.
pub struct FeatureProbe {
    weights: DMatrix<f64>,
    d_id: usize,
    expressions: usize,
    orientations: usize,
}

impl FeatureProbe {
    pub fn calibrate<T: Scalar>(
        model: &Model,
        params: &ParamSet<T>,
        maps: &FrozenWorldMaps,
        identities: &[IdentityProfile],
        samples_per_identity: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let world = maps.config().clone();
        let out_dim = world.d_id + world.expressions + world.orientations;
        let mut rows_a: Vec<f64> = Vec::new();
        let mut rows_b: Vec<f64> = Vec::new();
        let mut n = 0usize;
        let mut feat_dim = 0usize;
        for profile in identities {
            let mut s = Stream::new(seed, Purpose::Eval, 0xCA_0000_0000 + profile.id as u64);
            for j in 0..samples_per_identity {
                let e = s.below(world.expressions);
                let o = s.below(world.orientations);
                let motion = MotionState::draw(e, o, &mut s);
                let scene = s.below(world.scenes);
                let sample = render(
                    profile,
                    motion,
                    scene,
                    maps,
                    seed,
                    0xCB_0000_0000 + (profile.id as u64) * 64 + j as u64,
                )?;
                let xi = model.encode_reference(params, &sample)?;
                feat_dim = xi.numel();
                rows_a.extend(xi.data().iter().map(|v| v.as_f64()));
                rows_a.push(1.0);
                let mut target = vec![0.0; out_dim];
                target[..world.d_id].copy_from_slice(&profile.u);
                target[world.d_id + e] = 1.0;
                target[world.d_id + world.expressions + o] = 1.0;
                rows_b.extend_from_slice(&target);
                n += 1;
            }
        }
        if n < feat_dim + 1 {
            return Err(EvalError::Calibration(format!(
                "{n} calibration samples for {feat_dim} features"
            )));
        }
        let a = DMatrix::from_row_slice(n, feat_dim + 1, &rows_a);
        let b = DMatrix::from_row_slice(n, out_dim, &rows_b);
        let weights = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| EvalError::Calibration(e.to_string()))?;
        Ok(FeatureProbe {
            weights,
            d_id: world.d_id,
            expressions: world.expressions,
            orientations: world.orientations,
        })
    }

    pub fn decode<T: Scalar>(&self, xi: &Tensor<T>) -> DecodedFeatures {
        let mut input: Vec<f64> = xi.data().iter().map(|v| v.as_f64()).collect();
        input.push(1.0);
        let x = DMatrix::from_row_slice(1, input.len(), &input);
        let out = x * &self.weights;
        let out = out.as_slice();
        let argmax = |v: &[f64]| {
            let mut best = 0;
            for (i, &val) in v.iter().enumerate() {
                if val > v[best] {
                    best = i;
                }
            }
            best
        };
        DecodedFeatures {
            identity: out[..self.d_id].to_vec(),
            expression: argmax(&out[self.d_id..self.d_id + self.expressions]),
            orientation: argmax(
                &out[self.d_id + self.expressions
                    ..self.d_id + self.expressions + self.orientations],
            ),
        }
    }
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Per-run evaluation scalars plus the config snapshot they came from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub identity_retention: Option<f64>,
    pub expression_accuracy: Option<f64>,
    pub orientation_accuracy: Option<f64>,
    pub blending_rate: Option<f64>,
    pub region_success_rate: Option<f64>,
    pub probe_margin_threshold: f64,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        let in_unit = |v: Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
        let in_cos = |v: Option<f64>| v.is_none_or(|x| (-1.0..=1.0).contains(&x));
        if in_cos(self.identity_retention)
            && in_unit(self.expression_accuracy)
            && in_unit(self.orientation_accuracy)
            && in_unit(self.blending_rate)
            && in_unit(self.region_success_rate)
        {
            Ok(())
        } else {
            Err(EvalError::Calibration("metric out of range".into()))
        }
    }
}

/// Fraction of regions whose probed identity is not the intended one, plus
/// the mean cosine of those wrong matches.
pub struct BlendingOutcome {
    pub rate: f64,
    pub mean_wrong_cosine: f64,
}

pub fn blending_metric(
    latent: &[f64],
    d_z: usize,
    masks: &[RegionMask],
    intended: &[usize],
    probe: &IdentityProbe,
) -> Result<BlendingOutcome, EvalError> {
    if masks.len() < 2 {
        return Err(EvalError::TooFewRegions(masks.len()));
    }
    if masks.len() != intended.len() {
        return Err(EvalError::IntentMismatch {
            ids: intended.len(),
            regions: masks.len(),
        });
    }
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            if masks[i].overlaps(&masks[j]) {
                return Err(EvalError::Saa(SaaError::OverlappingMasks {
                    a: masks[i].label(),
                    b: masks[j].label(),
                }));
            }
        }
    }
    let mut wrong = 0usize;
    let mut wrong_cos = 0.0;
    for (mask, &want) in masks.iter().zip(intended) {
        let result = probe.probe_region(latent, mask, d_z)?;
        if result.best_id != want {
            wrong += 1;
            wrong_cos += result.cosine;
        }
    }
    Ok(BlendingOutcome {
        rate: wrong as f64 / masks.len() as f64,
        mean_wrong_cosine: if wrong > 0 {
            wrong_cos / wrong as f64
        } else {
            0.0
        },
    })
}

// ── Two-identity benchmark ──────────────────────────────────────────────

/// One benchmark generation: which identities, what prompt, which boxes.
pub struct TwoIdScenario {
    pub ids: (usize, usize),
    pub prompt: PromptAttrs,
    pub masks: Vec<RegionMask>,
}

/// Draw the scenario for seed index `s` deterministically.
pub fn two_id_scenario(
    dataset: &Dataset,
    boxes: &[(usize, usize, usize, usize)],
    run_seed: u64,
    s: u64,
) -> Result<TwoIdScenario, EvalError> {
    let world = &dataset.cfg;
    let mut stream = Stream::new(run_seed, Purpose::Eval, 0x2D_0000_0000 + s);
    let pool = &dataset.train_ids;
    let a = pool[stream.below(pool.len())];
    let b = loop {
        let cand = pool[stream.below(pool.len())];
        if cand != a {
            break cand;
        }
    };
    let prompt = PromptAttrs {
        expression: stream.below(world.expressions),
        orientation: stream.below(world.orientations),
        scene: stream.below(world.scenes),
    };
    let masks = boxes
        .iter()
        .enumerate()
        .map(|(label, &(x0, y0, x1, y1))| {
            RegionMask::from_box(x0, y0, x1, y1, world.grid_w, world.grid_h, label)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TwoIdScenario {
        ids: (a, b),
        prompt,
        masks,
    })
}

/// Outcome over all benchmark seeds.
#[derive(Clone, Debug)]
pub struct TwoIdOutcome {
    /// Fraction of seeds where every target region probed above threshold.
    pub region_success_rate: f64,
    /// Mean per-region wrong-identity fraction.
    pub blending_rate: f64,
    pub seeds: usize,
}

/// Run the two-identity generation benchmark over `n_seeds` seeds. With
/// `gated` the full layout policy (intervention + suppression + floor) is
/// active; otherwise every identity injects through its plain adaptive gate,
/// which is the blending-prone baseline.
#[allow(clippy::too_many_arguments)]
pub fn two_id_benchmark<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    dataset: &Dataset,
    maps: &FrozenWorldMaps,
    cfg: &RunConfig,
    boxes: &[(usize, usize, usize, usize)],
    n_seeds: usize,
    gated: bool,
) -> Result<TwoIdOutcome, EvalError> {
    let probe = IdentityProbe::new(maps, &dataset.catalog);
    let world = &cfg.world;
    let run_one = |s: usize| -> Result<(bool, f64), EvalError> {
        let scenario = two_id_scenario(dataset, boxes, cfg.seed, s as u64)?;
        let (id_a, id_b) = scenario.ids;
        let mut refs = Vec::new();
        for (slot, id) in [(0u64, id_a), (1u64, id_b)] {
            let profile = dataset.catalog[id].clone();
            let mut ms = Stream::new(cfg.seed, Purpose::Eval, 0x2E_0000_0000 + s as u64 * 4 + slot);
            let motion = MotionState::draw(
                ms.below(world.expressions),
                ms.below(world.orientations),
                &mut ms,
            );
            let scene = ms.below(world.scenes);
            let reference = render(
                &profile,
                motion,
                scene,
                maps,
                cfg.seed,
                0x2F_0000_0000 + s as u64 * 4 + slot,
            )?;
            refs.push(model.encode_reference(params, &reference)?);
        }
        let tau = crate::model::prompt_tokens(model, params, &scenario.prompt)?;
        let mode = if gated {
            let policy = LayoutPolicy::new(
                cfg.sampling.alpha,
                cfg.sampling.beta,
                scenario.masks.clone(),
            )?
            .with_gate_floor(cfg.sampling.gate_floor);
            GateMode::Policy(policy)
        } else {
            GateMode::Adaptive
        };
        let mut pred = GuidedPredictor {
            model,
            params,
            faces: refs,
            tau,
            mode,
            cfg_scale: cfg.sampling.cfg_scale,
        };
        let run: SampleRun<T> = ddim_sample(
            &mut pred,
            &model.schedule,
            model.latent_shape(),
            cfg.sampling.steps,
            cfg.seed,
            0x30_0000_0000 + s as u64,
            false,
        )?;
        let latent: Vec<f64> = run.latent.data().iter().map(|v| v.as_f64()).collect();
        let mut all_pass = true;
        for mask in &scenario.masks {
            let r = probe.probe_region(&latent, mask, world.d_z)?;
            if r.margin <= cfg.eval.probe_margin {
                all_pass = false;
            }
        }
        let blend = blending_metric(
            &latent,
            world.d_z,
            &scenario.masks,
            &[id_a, id_b],
            &probe,
        )?;
        Ok((all_pass, blend.rate))
    };

    let results: Result<Vec<(bool, f64)>, EvalError> = if cfg.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        pool.install(|| (0..n_seeds).into_par_iter().map(run_one).collect())
    } else {
        (0..n_seeds).map(run_one).collect()
    };
    let results = results?;
    let successes = results.iter().filter(|(ok, _)| *ok).count();
    let blend_sum: f64 = results.iter().map(|(_, b)| *b).sum();
    Ok(TwoIdOutcome {
        region_success_rate: successes as f64 / n_seeds as f64,
        blending_rate: blend_sum / n_seeds as f64,
        seeds: n_seeds,
    })
}

// ── Parameter sweep ─────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub success_rate: f64,
    pub n: usize,
}

/// Success-rate grid over intervention hyperparameters. Every cell reuses
/// the same scenarios and trajectory seeds, so columns are directly
/// comparable and the whole grid is reproducible byte for byte.
#[allow(clippy::too_many_arguments)]
pub fn sweep_alpha_beta<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    dataset: &Dataset,
    maps: &FrozenWorldMaps,
    cfg: &RunConfig,
    alphas: &[f64],
    betas: &[f64],
    n_seeds: usize,
) -> Result<Vec<SweepCell>, EvalError> {
    let boxes = default_two_boxes(&cfg.world);
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let mut cell_cfg = cfg.clone();
            cell_cfg.sampling.alpha = alpha;
            cell_cfg.sampling.beta = beta;
            let outcome =
                two_id_benchmark(model, params, dataset, maps, &cell_cfg, &boxes, n_seeds, true)?;
            cells.push(SweepCell {
                alpha,
                beta,
                success_rate: outcome.region_success_rate,
                n: n_seeds,
            });
        }
    }
    Ok(cells)
}

/// Default face boxes for two-identity benchmarks: side-by-side regions
/// with a one-cell gutter, scaled to the grid.
pub fn default_two_boxes(world: &crate::world::WorldConfig) -> Vec<(usize, usize, usize, usize)> {
    let w = world.grid_w;
    let h = world.grid_h;
    let box_w = (w / 2).saturating_sub(1).max(2);
    let y0 = h / 4;
    let y1 = (y0 + h / 2).min(h);
    vec![(0, y0, box_w, y1), (w - box_w, y0, w, y1)]
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("alpha,beta,success_rate,n\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{}\n", c.alpha, c.beta, c.success_rate, c.n));
    }
    out
}

// ── Motion-transfer evaluation ──────────────────────────────────────────

/// Evaluate reconfiguration on held-out identities: for each triple, strip
/// the source motion, impose the target motion, then decode the prediction
/// with the feature probe. Expression/orientation accuracies measure motion
/// transfer; identity retention is the cosine between the decoded identity
/// and the source identity vector.
pub fn motion_transfer_eval<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    dataset: &Dataset,
    probe: &FeatureProbe,
    cfg: &RunConfig,
    n_triples: usize,
) -> Result<MetricReport, EvalError> {
    let ids = if dataset.holdout_ids.is_empty() {
        &dataset.train_ids
    } else {
        &dataset.holdout_ids
    };
    let mut retention = 0.0;
    let mut expr_hits = 0usize;
    let mut orient_hits = 0usize;
    for i in 0..n_triples {
        let mut s = Stream::new(cfg.seed, Purpose::Eval, 0x40_0000_0000 + i as u64);
        let id = ids[s.below(ids.len())];
        let samples = &dataset.by_identity[&id];
        let src_idx = samples[s.below(samples.len())];
        let tgt_idx = loop {
            let cand = samples[s.below(samples.len())];
            if cand != src_idx {
                break cand;
            }
        };
        let src = &dataset.samples[src_idx];
        let tgt = &dataset.samples[tgt_idx];
        let xi_src = model.encode_reference(params, src)?;
        let psi_src = model.encode_motion(
            params,
            &src.landmarks,
            src.prompt.expression,
            src.prompt.orientation,
        )?;
        let psi_tgt = model.encode_motion(
            params,
            &tgt.landmarks,
            tgt.prompt.expression,
            tgt.prompt.orientation,
        )?;
        let xi_pred = model.reconfigure_values(params, &xi_src, &psi_src, &psi_tgt)?;
        let decoded = probe.decode(&xi_pred);
        retention += cosine(&decoded.identity, &src.identity.u);
        if decoded.expression == tgt.prompt.expression {
            expr_hits += 1;
        }
        if decoded.orientation == tgt.prompt.orientation {
            orient_hits += 1;
        }
    }
    let n = n_triples as f64;
    let report = MetricReport {
        identity_retention: Some(retention / n),
        expression_accuracy: Some(expr_hits as f64 / n),
        orientation_accuracy: Some(orient_hits as f64 / n),
        blending_rate: None,
        region_success_rate: None,
        probe_margin_threshold: cfg.eval.probe_margin,
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_dataset, WorldConfig};

    fn world_and_maps() -> (WorldConfig, FrozenWorldMaps) {
        let cfg = WorldConfig::default();
        let maps = FrozenWorldMaps::new(&cfg).unwrap();
        (cfg, maps)
    }

    #[test]
    fn probe_recovers_identity_and_motion_from_clean_renders() {
        let (world, maps) = world_and_maps();
        let ds = make_dataset(30, 4, 0.8, 3, &maps).unwrap();
        let probe = IdentityProbe::new(&maps, &ds.catalog);
        let mut correct = 0;
        for sample in ds.samples.iter().take(60) {
            let r = probe
                .probe_region(&sample.z0, &sample.mask, world.d_z)
                .unwrap();
            if r.best_id == sample.identity.id
                && r.expression == sample.prompt.expression
                && r.orientation == sample.prompt.orientation
                && r.margin > 0.99
            {
                correct += 1;
            }
        }
        assert_eq!(correct, 60);
    }

    #[test]
    fn probe_flags_background_as_no_face() {
        let (world, maps) = world_and_maps();
        let ds = make_dataset(30, 2, 0.8, 5, &maps).unwrap();
        let probe = IdentityProbe::new(&maps, &ds.catalog);
        // Invert the mask: probe pure background.
        let mut below = 0;
        let mut total = 0;
        for sample in ds.samples.iter().take(40) {
            let inverted: Vec<bool> = sample.mask.bits().iter().map(|&b| !b).collect();
            let bg = RegionMask::from_bits(inverted, 0).unwrap();
            let r = probe.probe_region(&sample.z0, &bg, world.d_z).unwrap();
            total += 1;
            if r.margin < 0.5 {
                below += 1;
            }
        }
        assert_eq!(below, total, "background regions must probe below margin");
    }

    #[test]
    fn probe_ties_break_to_lowest_index() {
        let (_, maps) = world_and_maps();
        let twin = IdentityProfile::draw(1, 0, 16);
        let mut clone = twin.clone();
        clone.id = 5;
        let catalog = vec![twin.clone(), clone];
        let probe = IdentityProbe::new(&maps, &catalog);
        let content = maps.face_content(&twin.u, 2, 1).unwrap();
        let r = probe.probe(&content).unwrap();
        assert_eq!(r.best_id, 0);
    }

    #[test]
    fn probe_rejects_zero_region() {
        let (_, maps) = world_and_maps();
        let probe = IdentityProbe::new(&maps, &[IdentityProfile::draw(1, 0, 16)]);
        assert!(matches!(
            probe.probe(&vec![0.0; 32]),
            Err(EvalError::SingularRegion)
        ));
    }

    #[test]
    fn blending_metric_ground_truth_and_swapped() {
        let (world, maps) = world_and_maps();
        let ds = make_dataset(10, 2, 0.8, 9, &maps).unwrap();
        let probe = IdentityProbe::new(&maps, &ds.catalog);
        // Composite latent: identity 0's content in box A, identity 1's in
        // box B, scene elsewhere.
        let mask_a = RegionMask::from_box(0, 3, 5, 9, 12, 12, 0).unwrap();
        let mask_b = RegionMask::from_box(7, 3, 12, 9, 12, 12, 1).unwrap();
        let face_a = maps.face_content(&ds.catalog[0].u, 1, 1).unwrap();
        let face_b = maps.face_content(&ds.catalog[1].u, 2, 0).unwrap();
        let scene = maps.scene_vector(0);
        let mut latent = vec![0.0; world.cells() * world.d_z];
        for cell in 0..world.cells() {
            let dst = &mut latent[cell * world.d_z..(cell + 1) * world.d_z];
            if mask_a.covers(cell) {
                dst.copy_from_slice(&face_a);
            } else if mask_b.covers(cell) {
                dst.copy_from_slice(&face_b);
            } else {
                dst.copy_from_slice(scene);
            }
        }
        let masks = vec![mask_a, mask_b];
        let right = blending_metric(&latent, world.d_z, &masks, &[0, 1], &probe).unwrap();
        assert_eq!(right.rate, 0.0);
        let swapped = blending_metric(&latent, world.d_z, &masks, &[1, 0], &probe).unwrap();
        assert_eq!(swapped.rate, 1.0);
        assert!(swapped.mean_wrong_cosine > 0.9);
        // A single region is not a multi-identity scene.
        assert!(matches!(
            blending_metric(&latent, world.d_z, &masks[..1], &[0], &probe),
            Err(EvalError::TooFewRegions(1))
        ));
    }

    #[test]
    fn feature_probe_decodes_an_untrained_encoder() {
        // Even with a random projection the linear decoder should largely
        // invert it on clean renders (the map is linear up to one GELU).
        let mut cfg = RunConfig::default();
        cfg.dataset.n_ids = 24;
        cfg.dataset.n_motions = 4;
        let model = Model::from_config(&cfg).unwrap();
        let params = model.init_params::<f64>(cfg.seed);
        let maps = FrozenWorldMaps::new(&cfg.world).unwrap();
        let ds = make_dataset(24, 4, 0.8, cfg.seed, &maps).unwrap();
        let probe =
            FeatureProbe::calibrate(&model, &params, &maps, &ds.catalog, 16, cfg.seed).unwrap();
        let mut retention = 0.0;
        let mut hits = 0usize;
        let n = 40;
        for sample in ds.samples.iter().take(n) {
            let xi = model.encode_reference(&params, sample).unwrap();
            let d = probe.decode(&xi);
            retention += cosine(&d.identity, &sample.identity.u);
            if d.expression == sample.prompt.expression {
                hits += 1;
            }
        }
        assert!(
            retention / n as f64 > 0.85,
            "mean retention {}",
            retention / n as f64
        );
        assert!(hits as f64 / n as f64 > 0.7, "expr accuracy {hits}/{n}");
    }

    #[test]
    fn metric_report_validates_ranges() {
        let ok = MetricReport {
            identity_retention: Some(0.93),
            expression_accuracy: Some(1.0),
            orientation_accuracy: Some(0.0),
            blending_rate: None,
            region_success_rate: Some(0.5),
            probe_margin_threshold: 0.5,
            config: serde_json::json!({}),
        };
        ok.validate().unwrap();
        let bad = MetricReport {
            expression_accuracy: Some(1.5),
            ..ok
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sweep_csv_is_stable() {
        let cells = vec![
            SweepCell {
                alpha: 0.0,
                beta: 0.5,
                success_rate: 0.25,
                n: 4,
            },
            SweepCell {
                alpha: 0.24,
                beta: 2.0,
                success_rate: 1.0,
                n: 4,
            },
        ];
        assert_eq!(
            sweep_csv(&cells),
            "alpha,beta,success_rate,n\n0,0.5,0.25,4\n0.24,2,1,4\n"
        );
    }

    #[test]
    fn default_boxes_are_disjoint_and_in_bounds() {
        let world = WorldConfig::default();
        let boxes = default_two_boxes(&world);
        assert_eq!(boxes.len(), 2);
        let m0 = RegionMask::from_box(
            boxes[0].0, boxes[0].1, boxes[0].2, boxes[0].3, 12, 12, 0,
        )
        .unwrap();
        let m1 = RegionMask::from_box(
            boxes[1].0, boxes[1].1, boxes[1].2, boxes[1].3, 12, 12, 1,
        )
        .unwrap();
        assert!(!m0.overlaps(&m1));
    }
}
