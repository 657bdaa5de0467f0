//! Central finite-difference gradient checking.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{NnError, Result};
use crate::params::{Bound, ParamStore};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor keeping the relative error meaningful for near-zero gradients.
const REL_FLOOR: f64 = 1e-4;

/// Uniform values in `[-1, 1)`.
pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, 1e-4)` between
/// analytic and central-difference gradients of the scalar built by `build`.
pub fn gradient_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for i in 0..values[t].len() {
            let x0 = values[t].data()[i];
            values[t].data_mut()[i] = x0 + FD_STEP;
            let fp = eval(&values)?;
            values[t].data_mut()[i] = x0 - FD_STEP;
            let fm = eval(&values)?;
            values[t].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = grads[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(NnError::NonFinite(format!("gradient of input {t} element {i}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Runs [`gradient_error`] and fails if it reaches `tol`.
pub fn check_gradients<F>(inputs: &[Tensor], tol: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let err = gradient_error(inputs, build)?;
    if err < tol {
        Ok(err)
    } else {
        Err(NnError::GradCheck(format!("relative error {err:e} ≥ {tol:e}")))
    }
}

/// [`gradient_error`] over every parameter of `store` followed by `inputs`.
pub fn params_gradient_error<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let k = store.len();
    let all: Vec<Tensor> = store.tensors().iter().chain(inputs).cloned().collect();
    gradient_error(&all, |g, v| build(g, &Bound::from_vars(v[..k].to_vec()), &v[k..]))
}
