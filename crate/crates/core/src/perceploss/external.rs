//! Activations computed outside this crate, one matrix per tapped layer per
//! utterance, stored in the shared container format.

use std::path::Path;

use crate::container::Container;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};

use super::tap_mean;

const KIND: &str = "activations";

pub fn save_activations(path: &Path, taps: &[Tensor<f64>]) -> Result<()> {
    let mut c = Container::new(KIND);
    c.set_meta("taps", taps.len());
    for (j, t) in taps.iter().enumerate() {
        c.put_tensor(&format!("tap{j}"), t)?;
    }
    c.save(path)
}

pub fn load_activations(path: &Path) -> Result<Vec<Tensor<f64>>> {
    let c = Container::load(path)?;
    c.expect_kind(KIND)?;
    let n: usize = c.meta_parse("taps")?;
    let taps: Vec<Tensor<f64>> = (0..n).map(|j| c.tensor(&format!("tap{j}"))).collect::<Result<_>>()?;
    if taps.iter().any(|t| t.shape().len() != 2) {
        return Err(Error::Data(format!("{}: activations must be [frames, channels]", path.display())));
    }
    Ok(taps)
}

/// The representation loss evaluated on two precomputed activation sets.
pub fn representation_distance(reference: &[Tensor<f64>], converted: &[Tensor<f64>]) -> Result<f64> {
    for (a, b) in reference.iter().zip(converted) {
        if a.shape() != b.shape() {
            return Err(Error::shape("representation_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
    }
    let mut tape = Tape::<f64>::new();
    let a: Vec<_> = reference.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<_> = converted.iter().map(|t| tape.constant(t.clone())).collect();
    let l = tap_mean(&mut tape, &a, &b)?;
    Ok(tape.value(l).item())
}
