//! Registered finite-difference composites.
//!
//! Every differentiable assembly the trainer relies on is checked here
//! against central differences at 64-bit: the raw op chain, the gated
//! attention block, a full denoiser block through the anchoring loss, the
//! reconfigurator, and the complete dual-objective edit loss. The CLI
//! `gradcheck` command and the acceptance suite both run this list.

use crate::encoders::{EncoderConfig, FaceEncoder, TextEncoder};
use crate::imr::{edit_loss, EditLossTerms, Imr, ImrConfig, ImrError};
use crate::pipeline::{anchoring_loss, Denoiser, DenoiserConfig, NoiseSchedule, PipelineError};
use crate::rng::{Purpose, Stream};
use crate::saa::{saa_forward_adaptive, AttentionProjection, SaaError};
use crate::tensor::{grad_check, NameTable, ParamSet, Tensor, TensorError};
use crate::world::{make_dataset, FrozenWorldMaps, WorldConfig};

/// Default central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Default pass tolerance on the max relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// One composite's outcome.
#[derive(Clone, Debug)]
pub struct CompositeCheck {
    pub name: &'static str,
    pub error: f64,
    pub pass: bool,
}

fn rand_mat(s: &mut Stream, r: usize, c: usize, scale: f64) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| s.normal() * scale).collect()).unwrap()
}

fn rand_vec(s: &mut Stream, n: usize, scale: f64) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| s.normal() * scale).collect()).unwrap()
}

fn jitter_all(params: &mut ParamSet<f64>, seed: u64, scale: f64) {
    let mut s = Stream::new(seed, Purpose::Init, 0xCC);
    let names: Vec<String> = params.names().map(|x| x.to_string()).collect();
    for name in &names {
        let t = params.value_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v += s.normal() * scale);
    }
}

fn primitive_chain() -> Result<f64, TensorError> {
    let mut s = Stream::new(0xA1, Purpose::Eval, 0);
    let (m, n, k) = (4, 3, 5);
    let mut p = ParamSet::new();
    p.insert("a", rand_mat(&mut s, m, k, 1.0))?;
    p.insert("b", rand_mat(&mut s, k, n, 1.0))?;
    p.insert("c", rand_mat(&mut s, m, n, 1.0))?;
    p.insert("row", rand_vec(&mut s, n, 1.0))?;
    p.insert("w", rand_vec(&mut s, m, 0.4))?;
    p.insert("g", rand_vec(&mut s, n, 1.0))?;
    p.insert("bias", rand_vec(&mut s, n, 0.3))?;
    grad_check(
        |tape, bind| {
            let mm = tape.matmul(bind.id("a")?, bind.id("b")?)?;
            let mm = tape.add_row(mm, bind.id("row")?)?;
            let ln = tape.layer_norm(mm, bind.id("g")?, bind.id("bias")?, 1e-5)?;
            let sm = tape.softmax_rows(ln)?;
            let ge = tape.gelu(sm)?;
            let sum = tape.add(ge, bind.id("c")?)?;
            let gated = tape.gated_residual(bind.id("c")?, sum, bind.id("w")?)?;
            let rs = tape.row_sums(gated)?;
            let mn = tape.vec_min(rs)?;
            let shifted = tape.sub_bcast(rs, mn)?;
            let mx = tape.vec_max(rs)?;
            let spread = tape.sub(mx, mn)?;
            let spread = tape.add_scalar(spread, 4.0)?;
            let normed = tape.div_bcast(shifted, spread)?;
            let ex = tape.expand(normed, 2)?;
            let sq = tape.mul(ex, ex)?;
            tape.mean_all(sq)
        },
        &mut p,
        GRADCHECK_STEP,
    )
}

fn saa_block() -> Result<f64, TensorError> {
    let mut s = Stream::new(0xA2, Purpose::Eval, 0);
    let mut p = ParamSet::new();
    p.insert("z", rand_mat(&mut s, 5, 4, 0.8))?;
    p.insert("cf", rand_mat(&mut s, 3, 4, 0.8))?;
    p.insert("wq", rand_mat(&mut s, 4, 4, 0.5))?;
    p.insert("wk", rand_mat(&mut s, 4, 4, 0.5))?;
    p.insert("wv", rand_mat(&mut s, 4, 4, 0.5))?;
    grad_check(
        |tape, bind| {
            let proj =
                AttentionProjection::new(bind.id("wq")?, bind.id("wk")?, bind.id("wv")?, 2);
            let (out, _) = saa_forward_adaptive(tape, bind.id("z")?, bind.id("cf")?, &proj)
                .map_err(|e| match e {
                    SaaError::Tensor(t) => t,
                    other => panic!("saa composite: {other}"),
                })?;
            let sq = tape.mul(out, out)?;
            tape.mean_all(sq)
        },
        &mut p,
        GRADCHECK_STEP,
    )
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

fn denoiser_anchoring() -> Result<f64, TensorError> {
    let world = tiny_world();
    let enc = tiny_enc();
    let den = Denoiser::new(DenoiserConfig {
        d_z: world.d_z,
        d_f: enc.d_f,
        blocks: 1,
        heads: 1,
        mlp_hidden: 6,
    });
    let maps = FrozenWorldMaps::new(&world).expect("tiny world");
    let ds = make_dataset(2, 1, 0.5, 0xA3, &maps).expect("tiny dataset");
    let face = FaceEncoder::new(enc.clone(), world.clone());
    let text = TextEncoder::new(&enc, &world);
    let mut params = ParamSet::new();
    let mut init = Stream::new(0xA3, Purpose::Init, 0);
    den.init_params(&mut params, &mut init)?;
    face.init_params(&mut params, &mut init)?;
    jitter_all(&mut params, 0xA3, 0.05);
    let schedule = NoiseSchedule::linear(40, 1e-4, 2e-2).expect("schedule");
    let sample = &ds.samples[0];
    grad_check(
        |tape, bind| {
            let names = NameTable::from_binding(bind);
            let mut noise = Stream::new(0xA4, Purpose::Noise, 0);
            anchoring_loss(
                tape, &names, &den, &face, &text, &schedule, &[sample], &world, &mut noise,
            )
            .map_err(|e| match e {
                PipelineError::Tensor(t) => t,
                other => panic!("anchoring composite: {other}"),
            })
        },
        &mut params,
        GRADCHECK_STEP,
    )
}

fn imr_reconfigurator() -> Result<f64, TensorError> {
    let enc = tiny_enc();
    let imr = Imr::new(
        enc,
        ImrConfig {
            mlp_hidden: 5,
            ln_eps: 1e-5,
        },
    );
    let mut params = ParamSet::new();
    let mut init = Stream::new(0xA5, Purpose::Init, 0);
    imr.init_params(&mut params, &mut init)?;
    jitter_all(&mut params, 0xA5, 0.05);
    let mut s = Stream::new(0xA6, Purpose::Eval, 0);
    let xi = rand_mat(&mut s, 2, 6, 1.0);
    let psi_a = rand_mat(&mut s, 2, 6, 1.0);
    let psi_b = rand_mat(&mut s, 2, 6, 1.0);
    grad_check(
        |tape, bind| {
            let names = NameTable::from_binding(bind);
            let x = tape.leaf(xi.clone());
            let pa = tape.leaf(psi_a.clone());
            let pb = tape.leaf(psi_b.clone());
            let out = imr
                .reconfigure(tape, &names, x, pa, pb)
                .map_err(|e| match e {
                    ImrError::Tensor(t) => t,
                    other => panic!("imr composite: {other}"),
                })?;
            let sq = tape.mul(out, out)?;
            tape.mean_all(sq)
        },
        &mut params,
        GRADCHECK_STEP,
    )
}

fn full_edit_loss() -> Result<f64, TensorError> {
    let enc = tiny_enc();
    let imr = Imr::new(
        enc.clone(),
        ImrConfig {
            mlp_hidden: 5,
            ln_eps: 1e-5,
        },
    );
    let den = Denoiser::new(DenoiserConfig {
        d_z: 8,
        d_f: enc.d_f,
        blocks: 1,
        heads: 1,
        mlp_hidden: 4,
    });
    let schedule = NoiseSchedule::linear(20, 1e-4, 2e-2).expect("schedule");
    let mut params = ParamSet::new();
    let mut init = Stream::new(0xA7, Purpose::Init, 0);
    imr.init_params(&mut params, &mut init)?;
    den.init_params(&mut params, &mut init)?;
    jitter_all(&mut params, 0xA7, 0.05);
    let mut s = Stream::new(0xA8, Purpose::Eval, 0);
    let xi_src = rand_mat(&mut s, 2, 6, 1.0);
    let xi_tgt = rand_mat(&mut s, 2, 6, 1.0);
    let psi_a = rand_mat(&mut s, 2, 6, 1.0);
    let psi_b = rand_mat(&mut s, 2, 6, 1.0);
    let tau = rand_mat(&mut s, 2, 6, 1.0);
    let z0 = rand_mat(&mut s, 4, 8, 1.0);
    let eps = rand_mat(&mut s, 4, 8, 1.0);
    grad_check(
        |tape, bind| {
            let names = NameTable::from_binding(bind);
            let xs = tape.leaf(xi_src.clone());
            let xt = tape.leaf(xi_tgt.clone());
            let pa = tape.leaf(psi_a.clone());
            let pb = tape.leaf(psi_b.clone());
            let tv = tape.leaf(tau.clone());
            let loss = edit_loss(
                tape,
                &names,
                &imr,
                &den,
                &schedule,
                xs,
                pa,
                pb,
                xt,
                &z0,
                tv,
                5,
                &eps,
                1.0,
                EditLossTerms::default(),
            )
            .map_err(|e| match e {
                ImrError::Tensor(t) => t,
                other => panic!("edit-loss composite: {other}"),
            })?;
            Ok(loss.total)
        },
        &mut params,
        GRADCHECK_STEP,
    )
}

/// Run every registered composite at 64-bit with the default step.
pub fn run_registered() -> Vec<CompositeCheck> {
    let checks: [(&'static str, fn() -> Result<f64, TensorError>); 5] = [
        ("primitive-op-chain", primitive_chain),
        ("saa-block", saa_block),
        ("denoiser-anchoring-loss", denoiser_anchoring),
        ("imr-reconfigurator", imr_reconfigurator),
        ("edit-loss-full", full_edit_loss),
    ];
    checks
        .iter()
        .map(|(name, f)| match f() {
            Ok(error) => CompositeCheck {
                name,
                error,
                pass: error < GRADCHECK_TOL,
            },
            Err(_) => CompositeCheck {
                name,
                error: f64::INFINITY,
                pass: false,
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_registered_composites_pass() {
        let checks = run_registered();
        assert_eq!(checks.len(), 5);
        for check in &checks {
            assert!(
                check.pass,
                "{} failed with error {}",
                check.name, check.error
            );
        }
    }
}
