use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Convolution over frames with bias; weight layout `[kernel, c_in, c_out]`.
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv1dLayer {
    /// Appends `name.weight` and `name.bias` to `store`, uniform in
    /// `±1/sqrt(fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[kernel, c_in, c_out], bound, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[c_out], bound, rng)?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
            transposed,
        })
    }

    /// Length-preserving layer (`stride 1`, odd kernel, same padding).
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, kernel, 1, kernel / 2, false, rng)
    }

    /// Downsamples by `factor`; upsamples when `transposed`.
    pub fn resample<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kernel, padding) = if factor % 2 == 0 {
            (2 * factor, factor / 2)
        } else {
            (factor, 0)
        };
        Self::new(store, name, c_in, c_out, kernel, factor, padding, transposed, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.transposed {
            tape.conv_transpose1d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
        } else {
            tape.conv1d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
        }
    }
}
