use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Runs `f` on one tape per item and backpropagates each loss scaled by
/// `scale`. Items may be evaluated in parallel; gradients are summed in item
/// order, so the result does not depend on the thread count. Returns the
/// unscaled per-item losses and one summed gradient per parameter.
pub fn batch_gradients<T, I, F>(store: &ParamStore<T>, items: &[I], scale: T, f: F) -> Result<(Vec<f64>, Vec<Tensor<T>>)>
where
    T: Scalar,
    I: Sync,
    F: Fn(&mut Tape<T>, &Bound, &I) -> Result<Var> + Sync,
{
    let (aux, grads) = batch_gradients_with(store, items, scale, |tape, p, item| {
        let loss = f(tape, p, item)?;
        Ok((loss, ()))
    })?;
    Ok((aux.into_iter().map(|(l, ())| l).collect(), grads))
}

/// [`batch_gradients`] where `f` also returns a per-item value computed from
/// its tape, e.g. the individual terms of a composite loss.
pub fn batch_gradients_with<T, I, R, F>(store: &ParamStore<T>, items: &[I], scale: T, f: F) -> Result<(Vec<(f64, R)>, Vec<Tensor<T>>)>
where
    T: Scalar,
    I: Sync,
    R: Send,
    F: Fn(&mut Tape<T>, &Bound, &I) -> Result<(Var, R)> + Sync,
{
    let results: Vec<(f64, R, Vec<Option<Tensor<T>>>)> = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, true);
            let (loss, aux) = f(&mut tape, &bound, item)?;
            let value = tape.value(loss).item().as_f64();
            let grads = tape.backward_scaled(loss, scale)?;
            let per_param = bound.vars().iter().map(|&v| grads.get(v).cloned()).collect();
            Ok((value, aux, per_param))
        })
        .collect::<Result<_>>()?;
    let mut sums: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut losses = Vec::with_capacity(results.len());
    for (value, aux, per_param) in results {
        losses.push((value, aux));
        for (sum, g) in sums.iter_mut().zip(per_param) {
            if let Some(g) = g {
                for (d, &s) in sum.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }
    Ok((losses, sums))
}
