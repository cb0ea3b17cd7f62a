//! Central finite-difference verification of the tape's gradients.
//!
//! Always runs at 64-bit; f32 noise would drown the 1e-4 tolerances the
//! checks are held to.

use super::params::{backward_into, Binding};
use super::{ParamSet, Tape, TensorError, TensorId};

/// Compare analytic gradients of `build` against central differences with
/// step `h`, over every element of every parameter. Returns the maximum of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `build` must be deterministic: it is re-evaluated `2 x numel(params)`
/// times at perturbed parameter values.
pub fn grad_check<F>(
    build: F,
    params: &mut ParamSet<f64>,
    h: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &Binding) -> Result<TensorId, TensorError>,
{
    params.zero_grad();
    backward_into(params, &build)?;

    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let numel = params.value(name)?.numel();
        for i in 0..numel {
            let orig = params.value(name)?.data()[i];

            params.value_mut(name)?.data_mut()[i] = orig + h;
            let up = eval_loss(&build, params)?;
            params.value_mut(name)?.data_mut()[i] = orig - h;
            let down = eval_loss(&build, params)?;
            params.value_mut(name)?.data_mut()[i] = orig;

            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = params.grad(name)?[i];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn eval_loss<F>(build: &F, params: &ParamSet<f64>) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &Binding) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, params);
    let loss = build(&mut tape, &binding)?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact_to_roundoff() {
        // loss = sum((X W)^2); analytic gradient is exact for quadratics.
        let mut p = ParamSet::new();
        p.insert("x", Tensor::matrix(2, 3, vec![0.3, -0.7, 1.2, 0.5, 0.9, -1.1]).unwrap())
            .unwrap();
        p.insert("w", Tensor::matrix(3, 2, vec![0.2, 0.8, -0.5, 0.1, 0.4, -0.9]).unwrap())
            .unwrap();
        let err = grad_check(
            |tape, bind| {
                let x = bind.id("x")?;
                let w = bind.id("w")?;
                let y = tape.matmul(x, w)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &mut p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic grad_check error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let err = grad_check(
            |tape, _bind| {
                let k = tape.scalar_leaf(4.25);
                tape.sum_all(k)
            },
            &mut p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-12, "constant grad_check error {err}");
        assert_eq!(p.grad("w").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_gelu_layernorm_chain_passes() {
        let mut p = ParamSet::new();
        p.insert(
            "x",
            Tensor::matrix(3, 4, vec![
                0.31, -0.44, 1.02, 0.13, -0.76, 0.58, 0.91, -0.22, 0.05, 1.31, -0.63, 0.47,
            ])
            .unwrap(),
        )
        .unwrap();
        p.insert("g", Tensor::vector(vec![1.1, 0.9, 1.0, 1.2]).unwrap()).unwrap();
        p.insert("b", Tensor::vector(vec![0.1, -0.2, 0.0, 0.3]).unwrap()).unwrap();
        let err = grad_check(
            |tape, bind| {
                let x = bind.id("x")?;
                let g = bind.id("g")?;
                let b = bind.id("b")?;
                let ln = tape.layer_norm(x, g, b, 1e-5)?;
                let sm = tape.softmax_rows(ln)?;
                let ge = tape.gelu(sm)?;
                tape.mean_all(ge)
            },
            &mut p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "chain grad_check error {err}");
    }

    #[test]
    fn every_primitive_op_passes_on_random_small_shapes() {
        use crate::rng::{Purpose, Stream};
        let mut s = Stream::new(99, Purpose::Eval, 0);
        for trial in 0..4 {
            let m = 1 + s.below(8);
            let n = 1 + s.below(8);
            let k = 1 + s.below(8);
            let rand_mat = |s: &mut Stream, r: usize, c: usize| {
                Tensor::matrix(r, c, (0..r * c).map(|_| s.normal()).collect()).unwrap()
            };
            let mut p = ParamSet::new();
            p.insert("a", rand_mat(&mut s, m, k)).unwrap();
            p.insert("b", rand_mat(&mut s, k, n)).unwrap();
            p.insert("c", rand_mat(&mut s, m, n)).unwrap();
            p.insert("row", Tensor::vector((0..n).map(|_| s.normal()).collect()).unwrap())
                .unwrap();
            p.insert("w", Tensor::vector((0..m).map(|_| s.normal()).collect()).unwrap())
                .unwrap();
            let err = grad_check(
                |tape, bind| {
                    let a = bind.id("a")?;
                    let b = bind.id("b")?;
                    let cmat = bind.id("c")?;
                    let row = bind.id("row")?;
                    let w = bind.id("w")?;
                    let mm = tape.matmul(a, b)?;
                    let mm = tape.add_row(mm, row)?;
                    let mm = tape.add(mm, cmat)?;
                    let sm = tape.softmax_rows(mm)?;
                    let tr = tape.transpose(sm)?;
                    let tr2 = tape.transpose(tr)?;
                    let ge = tape.gelu(tr2)?;
                    let gated = tape.gated_residual(cmat, ge, w)?;
                    let cat = tape.concat_cols(gated, cmat)?;
                    let sl = tape.slice_cols(cat, 0, n)?;
                    let rs = tape.row_sums(sl)?;
                    let mn = tape.vec_min(rs)?;
                    let mx = tape.vec_max(rs)?;
                    let shifted = tape.sub_bcast(rs, mn)?;
                    let spread = tape.sub(mx, mn)?;
                    let spread = tape.add_scalar(spread, 10.0)?;
                    let normed = tape.div_bcast(shifted, spread)?;
                    let ex = tape.expand(normed, 2)?;
                    let sq = tape.mul(ex, ex)?;
                    tape.mean_all(sq)
                },
                &mut p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: primitive-op grad error {err}");
        }
    }
}
