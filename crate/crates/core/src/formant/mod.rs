//! Formant analysis and the differentiable formant regressor.

mod corpus;
mod lpc;
mod regressor;
mod synth;

pub use corpus::{build_synth_corpus, build_synth_corpus_with, SynthCorpus, SynthCorpusConfig, SynthItem};
pub use lpc::{autocorrelation, formants_from_lpc, levinson_durbin, preemphasize, track_formants, Formant, Lpc, LpcConfig};
pub use regressor::{train_formant_regressor, FormantRegressor, RegressorTrainConfig, RegressorTrainReport};
pub use synth::{resonator_coeffs, synth_sequence, synth_vowel, SOURCE_TILT};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Formant frequencies tracked per frame.
pub const NUM_FORMANTS: usize = 3;

/// Hz per normalized formant unit (the Nyquist frequency at 16 kHz).
pub const NYQUIST_HZ: f64 = 8000.0;

/// Per-frame formants, `frames × K`, in fractions of Nyquist.
#[derive(Clone, Debug, PartialEq)]
pub struct FormantTrack {
    pub values: Tensor<f64>,
}

impl FormantTrack {
    /// Checks that entries lie in (0, 1) and increase strictly within a frame.
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape("formant track", format!("{:?}", values.shape())));
        }
        for r in 0..values.rows() {
            let row = values.row(r);
            if row.iter().any(|v| !(*v > 0.0 && *v < 1.0)) || row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("formant frame {r} violates ordering/range: {row:?}")));
            }
        }
        Ok(Self { values })
    }

    /// The same formants (in Hz) repeated over `frames` frames.
    pub fn constant_hz(frames: usize, hz: &[f64]) -> Result<Self> {
        let k = hz.len();
        Self::new(Tensor::from_fn(&[frames, k], |i| hz[i % k] / NYQUIST_HZ))
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn k(&self) -> usize {
        self.values.cols()
    }

    /// Per-formant median over frames, in Hz.
    pub fn median_hz(&self) -> Vec<f64> {
        (0..self.k())
            .map(|c| {
                let mut col: Vec<f64> = (0..self.frames()).map(|r| self.values.at(r, c)).collect();
                col.sort_by(f64::total_cmp);
                let n = col.len();
                let mid = if n % 2 == 1 { col[n / 2] } else { 0.5 * (col[n / 2 - 1] + col[n / 2]) };
                mid * NYQUIST_HZ
            })
            .collect()
    }
}
