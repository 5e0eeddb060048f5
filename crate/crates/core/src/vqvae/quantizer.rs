use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of the code nearest to `z` in squared Euclidean distance. Ties go to
/// the lowest index.
pub fn nearest_code<T: Scalar>(codebook: &Tensor<T>, z: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for m in 0..codebook.rows() {
        let d: T = codebook
            .row(m)
            .iter()
            .zip(z)
            .map(|(&c, &v)| (c - v) * (c - v))
            .sum();
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

/// One quantization level: `codes × dim` learnable vectors.
#[derive(Clone, Debug)]
pub struct VectorQuantizer {
    pub codebook: ParamId,
    pub level: usize,
    pub codes: usize,
    pub dim: usize,
}

/// Output of quantizing one latent sequence.
#[derive(Clone, Debug)]
pub struct Quantized {
    /// `z + sg(q - z)`: forward value of `q`, gradient to `z`.
    pub q_st: Var,
    /// Selected code vectors, differentiable with respect to the codebook.
    pub q: Var,
    pub indices: Vec<usize>,
}

impl VectorQuantizer {
    /// Draws codes uniformly in `±1/sqrt(dim)` and rejects bitwise duplicates.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, level: usize, codes: usize, dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if codes < 2 || dim == 0 {
            return Err(Error::Config(format!("quantizer needs at least 2 codes and dim > 0, got {codes}x{dim}")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let codebook = store.add_uniform(format!("vq{level}.codebook"), &[codes, dim], bound, rng)?;
        let q = Self { codebook, level, codes, dim };
        q.check_distinct(store)?;
        Ok(q)
    }

    pub fn check_distinct<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let cb = &store.get(self.codebook).value;
        if !cb.all_finite() {
            return Err(Error::NonFinite(format!("codebook of level {}", self.level)));
        }
        let mut rows: Vec<Vec<u64>> = (0..cb.rows())
            .map(|r| cb.row(r).iter().map(|v| v.as_f64().to_bits()).collect())
            .collect();
        rows.sort();
        if rows.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Numeric(format!("duplicate code vectors in level {}", self.level)));
        }
        Ok(())
    }

    pub fn assign<T: Scalar>(&self, codebook: &Tensor<T>, z: &Tensor<T>) -> Result<Vec<usize>> {
        if z.cols() != self.dim || z.shape().len() != 2 {
            return Err(Error::shape("quantize", format!("latent {:?} vs code dim {}", z.shape(), self.dim)));
        }
        Ok((0..z.rows()).map(|t| nearest_code(codebook, z.row(t))).collect())
    }

    /// Nearest-code quantization with the straight-through estimator.
    pub fn quantize_st<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Quantized> {
        let cb = p[self.codebook];
        let indices = self.assign(tape.value(cb), tape.value(z))?;
        let q = tape.embedding(cb, &indices)?;
        let q_st = tape.straight_through(z, q)?;
        Ok(Quantized { q_st, q, indices })
    }

    /// Quantization with a frozen assignment: `q_st = z + offset` with the
    /// offset held constant. Its exact derivative equals the straight-through
    /// gradient, which makes finite-difference checks meaningful.
    pub fn quantize_frozen<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var, frozen: &FrozenLevel<T>) -> Result<Quantized> {
        let q = tape.embedding(p[self.codebook], &frozen.indices)?;
        let offset = tape.constant(frozen.offset.clone());
        let q_st = tape.add(z, offset)?;
        Ok(Quantized {
            q_st,
            q,
            indices: frozen.indices.clone(),
        })
    }
}

/// A recorded assignment for one level: indices, latent and code values, and
/// the `q - z` offset.
#[derive(Clone, Debug)]
pub struct FrozenLevel<T> {
    pub indices: Vec<usize>,
    pub offset: Tensor<T>,
    pub z: Tensor<T>,
    pub q: Tensor<T>,
}
