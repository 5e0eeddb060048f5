//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl FdReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst_index.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_index = Some(index);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Keeps the worse of two reports.
    pub fn merge(mut self, other: FdReport) -> FdReport {
        let checked = self.checked + other.checked;
        if other.worst_index.is_some() && (self.worst_index.is_none() || other.max_rel_error > self.max_rel_error) {
            self = other;
        }
        self.checked = checked;
        self
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `f` at `t` with central differences
/// in every coordinate.
pub fn finite_difference_check<F>(f: F, t: &Tensor<f64>) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_difference_check_with_step(f, t, FD_STEP)
}

pub fn finite_difference_check_with_step<F>(f: F, t: &Tensor<f64>, h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(t.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(&tape, x);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(probe.clone());
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };
    let mut report = FdReport::empty();
    let mut probe = t.clone();
    for i in 0..t.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.record(i, analytic.data()[i], (fp - fm) / (2.0 * h));
    }
    Ok(report)
}

/// Finite-difference check of a scalar function of every parameter in
/// `store`. `coords_per_param` caps how many coordinates of each tensor are
/// probed (evenly strided), `None` probes all of them.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, coords_per_param: Option<usize>) -> Result<Vec<(String, FdReport)>>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let y = f(&mut tape, &bound)?;
    let grads = tape.backward(y)?;

    let mut out = Vec::new();
    let mut probe_store = store.clone();
    for id in store.ids() {
        let analytic = grads.wrt(&tape, bound[id]);
        let n = analytic.len();
        let stride = match coords_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut report = FdReport::empty();
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe_store.get_mut(id).value.data_mut()[i] = v;
                let mut tape = Tape::new();
                let b = probe_store.bind(&mut tape, true);
                let y = f(&mut tape, &b)?;
                scalar_of(&tape, y)
            };
            let numeric = (eval_at(orig + FD_STEP)? - eval_at(orig - FD_STEP)?) / (2.0 * FD_STEP);
            probe_store.get_mut(id).value.data_mut()[i] = orig;
            report.record(i, analytic.data()[i], numeric);
        }
        out.push((store.get(id).name.clone(), report));
    }
    Ok(out)
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::shape("finite_difference_check", "function must return a scalar"));
    }
    Ok(v.item())
}
