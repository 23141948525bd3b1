//! Central finite-difference gradient checking.
//!
//! The numeric side only reads forward values off the tape, so it stays
//! independent of every backward rule it checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{ParamRegistry, Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Standard-normal tensor.
pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Fixed pseudo-random reduction weights in `[0.5, 1.5)`.
pub fn reduction_weights(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0.5..1.5)).collect()
}

/// Reduces `v` to a scalar `sum_i w_i v_i` with [`reduction_weights`].
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let numel = tape.value(v).numel();
    let flat = tape.reshape(v, vec![1, numel]).expect("same numel");
    let w = Tensor::new(vec![numel, 1], reduction_weights(numel, seed)).expect("shape");
    let w = tape.constant(w);
    let b = tape.constant(Tensor::zeros(vec![1]));
    tape.linear(flat, w, b).expect("conforming shapes")
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn scalar_output(tape: &mut Tape, out: Var, seed: u64) -> Var {
    if tape.value(out).numel() == 1 {
        out
    } else {
        weighted_sum(tape, out, seed)
    }
}

/// Largest relative error between tape gradients and central differences
/// over every element of every input. Non-scalar outputs are reduced with
/// [`weighted_sum`] using `seed`.
pub fn max_relative_error<F>(inputs: Vec<Tensor>, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar_output(&mut tape, out, seed);
    let grads = tape.gradients(loss).expect("scalar loss");

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = scalar_output(&mut tape, out, seed);
        tape.value(loss).item().expect("scalar")
    };

    let mut worst = 0.0f64;
    let mut probe = inputs;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; probe[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

/// Largest relative error between backpropagated parameter gradients and
/// central differences, probing every element of every parameter that
/// requires a gradient. `loss` must build a scalar and read parameters
/// through [`Tape::param`].
pub fn max_param_relative_error<M, P, F>(model: &mut M, params: P, loss: F) -> Result<f64>
where
    P: Fn(&mut M) -> &mut ParamRegistry,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    params(model).zero_grad();
    let mut tape = Tape::new();
    let out = loss(model, &mut tape)?;
    tape.backward(out, params(model))?;
    let names: Vec<String> = params(model)
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();

    let eval = |model: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(model, &mut tape)?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    for name in names {
        let t = params(model).get(&name)?;
        let analytic = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params(model).get(&name)?.data()[j];
            params(model).get_mut(&name)?.data_mut()[j] = orig + FD_STEP;
            let up = eval(model)?;
            params(model).get_mut(&name)?.data_mut()[j] = orig - FD_STEP;
            let down = eval(model)?;
            params(model).get_mut(&name)?.data_mut()[j] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    params(model).zero_grad();
    Ok(worst)
}
