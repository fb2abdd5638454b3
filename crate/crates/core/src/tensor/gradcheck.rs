//! Central finite-difference oracle for tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

const DENOM_FLOOR: f64 = 1e-8;

/// Compares analytic gradients of `f` against central differences for every
/// coordinate of `params`, returning the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` builds a scalar on a tape whose leaves are `params` (in order).
/// Tensors are perturbed in place and restored bit-exactly afterwards.
pub fn grad_check<F>(f: F, params: &mut [Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t.clone().with_requires_grad(true)))
        .collect();
    let result = grad_check_store(&mut store, &ids, eps, |tape| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        f(tape, &vars)
    });
    for (t, &id) in params.iter_mut().zip(&ids) {
        t.data_mut().copy_from_slice(store.get(id).data());
    }
    result
}

/// [`grad_check`] over tensors held in a [`ParamStore`].
///
/// Every id in `params` must have `requires_grad` set.
pub fn grad_check_store<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    for &id in params {
        if !store.get(id).requires_grad() {
            return Err(Error::Argument(format!(
                "parameter {} does not require grad",
                store.name(id)
            )));
        }
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let (base, analytic) = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        let grads = tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect();
        (tape.scalar(out), analytic)
    };
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut worst = 0.0f64;
    for (&id, grad) in params.iter().zip(&analytic) {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = grad[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
