//! Central finite-difference checks of tape gradients in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Tape, TensorError, Var};
use crate::losses;
use crate::model::{init_params, reconstruct, Bound, ModelConfig, Variant};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Relative error with a unit floor on the denominator, so vanishing
/// gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Scalar-valued function of several tensors, evaluated on a fresh tape.
pub type ScalarFn<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError> + 'a;

/// Analytic gradient of `f` at `inputs`, one tensor per input.
pub fn analytic_gradients(f: &ScalarFn<'_>, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, TensorError> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

pub fn evaluate(f: &ScalarFn<'_>, inputs: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Central difference of `f` with respect to entry `index` of input `which`.
pub fn numeric_partial(f: &ScalarFn<'_>, inputs: &[Tensor<f64>], which: usize, index: usize) -> Result<f64, TensorError> {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[index] += STEP;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[index] -= STEP;
    Ok((evaluate(f, &plus)? - evaluate(f, &minus)?) / (2.0 * STEP))
}

/// Compares analytic and numeric partials at `probes` randomly chosen
/// coordinates and returns the largest relative error.
pub fn max_probe_error(f: &ScalarFn<'_>, inputs: &[Tensor<f64>], probes: usize, rng: &mut impl Rng) -> Result<f64, TensorError> {
    let grads = analytic_gradients(f, inputs)?;
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let numeric = numeric_partial(f, inputs, which, flat)?;
        worst = worst.max(relative_error(grads[which].data()[flat], numeric));
    }
    Ok(worst)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Runs `instances` random draws of the inputs, probing `probes_per_instance`
/// coordinates on each.
pub fn check_op(
    name: &str,
    f: &ScalarFn<'_>,
    make_inputs: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    instances: usize,
    probes_per_instance: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, TensorError> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = make_inputs(rng);
        worst = worst.max(max_probe_error(f, &inputs, probes_per_instance, rng)?);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        probes: instances * probes_per_instance,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

/// Weighted sum `Σ out ⊙ w` used to reduce a tensor-valued op to a scalar.
fn weighted<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&out.shape(), &mut rng, -1.0, 1.0));
    Ok(out.mul(w)?.sum_all())
}

/// Tolerance applied to single operations.
pub const OP_TOLERANCE: f64 = 1e-4;

/// Gradient checks for every differentiable operation of the tape, 100
/// probes each.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &str, f: &ScalarFn<'_>, shapes: &[&[usize]], lo: f64, hi: f64| -> Result<(), TensorError> {
        let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
        let mut make = |r: &mut ChaCha8Rng| shapes.iter().map(|s| random_tensor(s, r, lo, hi)).collect();
        reports.push(check_op(name, f, &mut make, 10, 10, OP_TOLERANCE, &mut rng)?);
        Ok(())
    };

    run("matmul", &|t, v| weighted(t, v[0].matmul(v[1])?, 1), &[&[3, 4], &[4, 5]], -1.0, 1.0)?;
    run("add", &|t, v| weighted(t, v[0].add(v[1])?, 2), &[&[3, 4], &[3, 4]], -1.0, 1.0)?;
    run("sub", &|t, v| weighted(t, v[0].sub(v[1])?, 3), &[&[3, 4], &[3, 4]], -1.0, 1.0)?;
    run("mul", &|t, v| weighted(t, v[0].mul(v[1])?, 4), &[&[3, 4], &[3, 4]], -1.0, 1.0)?;
    run("add_bias", &|t, v| weighted(t, v[0].add_bias(v[1])?, 5), &[&[3, 4], &[4]], -1.0, 1.0)?;
    run("scale", &|t, v| weighted(t, v[0].scale(-1.7), 6), &[&[5]], -1.0, 1.0)?;
    run("add_scalar", &|t, v| weighted(t, v[0].add_scalar(0.3), 7), &[&[5]], -1.0, 1.0)?;
    run("relu", &|t, v| weighted(t, v[0].relu(), 8), &[&[4, 4]], -1.0, 1.0)?;
    run("exp", &|t, v| weighted(t, v[0].exp()?, 9), &[&[4, 4]], -2.0, 2.0)?;
    run("log", &|t, v| weighted(t, v[0].log()?, 10), &[&[4, 4]], 0.5, 3.0)?;
    run("sqrt", &|t, v| weighted(t, v[0].sqrt()?, 11), &[&[4, 4]], 0.5, 3.0)?;
    run("square", &|t, v| weighted(t, v[0].square(), 12), &[&[4, 4]], -2.0, 2.0)?;
    run("abs", &|t, v| weighted(t, v[0].abs(), 13), &[&[4, 4]], -2.0, 2.0)?;
    run("clamp", &|t, v| weighted(t, v[0].clamp(-0.5, 0.5), 14), &[&[4, 4]], -1.0, 1.0)?;
    run("mean_all", &|_, v| Ok(v[0].mean_all()), &[&[3, 5]], -1.0, 1.0)?;
    run("sum_all", &|_, v| Ok(v[0].sum_all()), &[&[3, 5]], -1.0, 1.0)?;
    run("mean_axis", &|t, v| weighted(t, v[0].mean_axis(1)?, 15), &[&[2, 3, 4]], -1.0, 1.0)?;
    run("sum_axis", &|t, v| weighted(t, v[0].sum_axis(0)?, 16), &[&[2, 3, 4]], -1.0, 1.0)?;
    run("l2_norm_axis", &|t, v| weighted(t, v[0].l2_norm_axis(0)?, 17), &[&[3, 4, 2]], -1.0, 1.0)?;
    run("concat_axis", &|t, v| weighted(t, concat(&[v[0], v[1]], 1)?, 18), &[&[2, 3], &[2, 2]], -1.0, 1.0)?;
    run("transpose", &|t, v| weighted(t, v[0].transpose()?, 19), &[&[3, 4]], -1.0, 1.0)?;
    run("reshape", &|t, v| weighted(t, v[0].reshape(&[6, 2])?, 20), &[&[3, 4]], -1.0, 1.0)?;
    run("narrow", &|t, v| weighted(t, v[0].narrow(1, 1, 2)?, 21), &[&[3, 4]], -1.0, 1.0)?;
    run("softmax_rows", &|t, v| weighted(t, v[0].softmax_rows()?, 22), &[&[3, 5]], -3.0, 3.0)?;
    run("layer_norm", &|t, v| weighted(t, v[0].layer_norm(v[1], v[2])?, 23), &[&[3, 6], &[6], &[6]], -2.0, 2.0)?;
    run("linear", &|t, v| weighted(t, v[0].linear(v[1], v[2])?, 24), &[&[4, 3], &[3, 5], &[5]], -1.0, 1.0)?;
    run("topk_mean", &|_, v| v[0].topk_mean(3), &[&[8]], -1.0, 1.0)?;
    Ok(reports)
}

/// Tolerance for the whole reconstructor and its losses.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Smallest configuration exercising every block: 6 input channels, width
/// 4, a 2×2 grid, one layer per stack, two heads.
pub fn toy_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        in_channels: 6,
        token_dim: 4,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 2,
        ffn_hidden: 8,
        height: 2,
        width: 2,
        variant,
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Norm,
    Px,
    Img,
}

/// End-to-end checks of reconstructor gradients with respect to every
/// parameter, under each training objective, 100 probes each.
pub fn model_suite(seed: u64) -> Result<Vec<GradCheckReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut cases: Vec<(Variant, Objective)> = Variant::ALL.iter().map(|&v| (v, Objective::Norm)).collect();
    cases.push((Variant::AttnQuery, Objective::Px));
    cases.push((Variant::AttnQuery, Objective::Img));
    for (variant, objective) in cases {
        let config = toy_model_config(variant);
        let params = init_params(&config, rng.gen())
            .map_err(|e| TensorError::InvalidArgument {
                op: "model_suite",
                detail: e.to_string(),
            })?
            .cast::<f64>();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.tensor.clone()).collect();
        // embeddings start near zero; widen them so attention is non-uniform
        for (name, t) in names.iter().zip(inputs.iter_mut()) {
            if name.ends_with("_embed") {
                *t = random_tensor(t.shape(), &mut rng, -1.0, 1.0);
            }
        }
        let tokens = random_tensor(&[config.tokens(), config.in_channels], &mut rng, -1.0, 1.0);
        let mask = vec![0u8, 1, 0, 1];
        let f: &ScalarFn<'_> = &|tape, vars| {
            let bound = Bound::from_vars(names.iter().map(String::as_str), vars);
            let x = tape.constant(tokens.clone());
            let recon = reconstruct(&bound, &config, x).map_err(|e| TensorError::InvalidArgument {
                op: "reconstruct",
                detail: e.to_string(),
            })?;
            let lossy = |e: losses::LossError| TensorError::InvalidArgument {
                op: "loss",
                detail: e.to_string(),
            };
            match objective {
                Objective::Norm => losses::loss_norm_tokens(x, recon).map_err(lossy),
                Objective::Px => {
                    let phi = losses::pseudo_huber_tokens(x.sub(recon)?).map_err(lossy)?;
                    losses::loss_px_tokens(tape, phi, &mask, 0.003, 1e-6).map_err(lossy)
                }
                Objective::Img => {
                    let phi = losses::pseudo_huber_tokens(x.sub(recon)?).map_err(lossy)?;
                    let q = losses::topk_score_tokens(phi, 2).map_err(lossy)?;
                    losses::loss_img_tokens(q, 1, 0.003, 1e-6).map_err(lossy)
                }
            }
        };
        let worst = max_probe_error(f, &inputs, 100, &mut rng)?;
        let label = match objective {
            Objective::Norm => "norm",
            Objective::Px => "px",
            Objective::Img => "img",
        };
        reports.push(GradCheckReport {
            name: format!("model.{variant}.{label}"),
            probes: 100,
            max_rel_error: worst,
            tolerance: MODEL_TOLERANCE,
            passed: worst <= MODEL_TOLERANCE,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in op_suite(7).unwrap() {
            assert!(r.passed, "{}: max rel error {:.3e}", r.name, r.max_rel_error);
            assert_eq!(r.probes, 100);
        }
    }

    #[test]
    fn model_passes() {
        for r in model_suite(11).unwrap() {
            assert!(r.passed, "{}: max rel error {:.3e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // f(x) = x² evaluated through the tape, compared against a wrong
        // analytic value by hand
        let f: &ScalarFn<'_> = &|_, v| Ok(v[0].square().sum_all());
        let x = Tensor::new(&[1], vec![1.5]).unwrap();
        let numeric = numeric_partial(f, &[x], 0, 0).unwrap();
        assert!((numeric - 3.0).abs() < 1e-8);
        assert!(relative_error(2.0, numeric) > 0.3);
    }
}
