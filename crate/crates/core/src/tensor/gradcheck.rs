//! Central finite differences as an independent gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Real, Tensor, Var};
use crate::error::Result;

/// Default step for 64-bit central differences.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Step used by [`check`]; small enough that a perturbation rarely crosses a
/// ReLU or max-pool kink, large enough that 64-bit rounding stays near 1e-10.
pub const CHECK_EPS: f64 = 1e-6;

/// `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` for every element `i`.
pub fn finite_diff_grad<T: Real>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let all: Vec<usize> = (0..x.len()).collect();
    let vals = finite_diff_at(f, x, eps, &all);
    Tensor::from_parts(x.shape().to_vec(), vals)
}

/// Central differences at selected flat indices only.
pub fn finite_diff_at<T: Real>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T, indices: &[usize]) -> Vec<T> {
    let mut probe = x.clone();
    let two = T::one() + T::one();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (two * eps)
        })
        .collect()
}

/// A differentiable computation evaluable at any precision.
///
/// `inputs` arrive in the order given to [`check`]; the result may have any
/// shape (it is reduced against a fixed random projection).
pub trait GradFn {
    fn eval<T: Real>(&self, inputs: &[Var<T>]) -> Result<Var<T>>;
}

/// Declares a unit struct implementing [`GradFn`] from a generic body.
///
/// ```ignore
/// grad_fn!(Square, |x| x[0].mul(&x[0]));
/// ```
#[macro_export]
macro_rules! grad_fn {
    ($name:ident, |$inp:ident| $body:expr) => {
        struct $name;
        impl $crate::tensor::gradcheck::GradFn for $name {
            fn eval<T: $crate::tensor::Real>(
                &self,
                $inp: &[$crate::tensor::Var<T>],
            ) -> $crate::Result<$crate::tensor::Var<T>> {
                $body
            }
        }
    };
}

/// Worst relative error across all inputs of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Compares the reverse-mode gradient (computed at precision `T`) of
/// `sum(f(inputs) ⊙ R)` against 64-bit central differences, for a fixed
/// random projection `R`.
///
/// At most `max_coords` coordinates per input are probed. The error of one
/// input is `max_i |analytic_i − numeric_i| / G`, where `G` is the largest
/// analytic gradient magnitude over all inputs (at least 1e-8), so inputs
/// whose true gradient vanishes are judged against the function's gradient
/// scale rather than their own rounding noise.
pub fn check<T: Real, F: GradFn>(f: &F, inputs: &[Tensor<f64>], seed: u64, max_coords: usize) -> Result<CheckReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let consts: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    let probe_shape = f.eval(&consts)?.shape().to_vec();
    let n_out: usize = probe_shape.iter().product();
    let scale = 1.0 / (n_out as f64).sqrt();
    let proj64 = Tensor::<f64>::uniform(&probe_shape, -scale, scale, &mut rng);
    let proj_t: Tensor<T> = proj64.cast();

    let leaves: Vec<Var<T>> = inputs.iter().map(|t| Var::leaf(t.cast())).collect();
    let out = f.eval(&leaves)?;
    let loss = out.mul(&Var::constant(proj_t))?.sum();
    let grads = loss.backward()?;

    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l).cast()).collect();
    let denom = analytic.iter().map(|a| a.max_abs()).fold(1e-8, f64::max);
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            let mut c = sample(&mut rng, input.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let eval_at = |x: &Tensor<f64>| -> f64 {
            let vars: Vec<Var<f64>> = consts
                .iter()
                .enumerate()
                .map(|(j, c)| if j == i { Var::constant(x.clone()) } else { c.clone() })
                .collect();
            let out = f.eval(&vars).expect("forward succeeded once");
            out.value().data().iter().zip(proj64.data()).map(|(a, b)| a * b).sum()
        };
        let numeric = finite_diff_at(eval_at, input, CHECK_EPS, &coords);
        let err =
            coords.iter().zip(&numeric).map(|(&c, &n)| (analytic[i].data()[c] - n).abs() / denom).fold(0.0, f64::max);
        per_input.push(err);
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(CheckReport { max_rel_error, per_input })
}
