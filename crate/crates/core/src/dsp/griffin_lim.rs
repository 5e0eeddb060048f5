use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stft::{ComplexFrames, FrameTransform};
use super::{AudioBuffer, SpectrogramConfig, SAMPLE_RATE};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub audio: AudioBuffer,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

/// `‖|X| − M‖ / ‖M‖` over the two-sided spectrum (interior bins count twice).
/// Zero when both are zero.
pub fn spectral_convergence(estimate: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let bins = target.cols();
    let weight = |k: usize| if k == 0 || k + 1 == bins { 1.0 } else { 2.0 };
    let (mut err, mut norm) = (0.0, 0.0);
    for (i, (e, t)) in estimate.data().iter().zip(target.data()).enumerate() {
        let w = weight(i % bins);
        err += w * (e - t) * (e - t);
        norm += w * t * t;
    }
    if norm == 0.0 {
        if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (err / norm).sqrt()
    }
}

/// Extrapolation factor of the accelerated iteration.
pub const GL_MOMENTUM: f64 = 0.99;

/// Output length `(frames − 1) · hop`, the shortest signal with that frame count.
pub fn griffin_lim(
    magnitude: &Tensor<f64>,
    cfg: &SpectrogramConfig,
    iterations: usize,
    seed: u64,
) -> Result<GriffinLimOutput> {
    let len = magnitude.rows().saturating_sub(1) * cfg.hop_length;
    griffin_lim_to_length(magnitude, cfg, iterations, seed, len.max(1))
}

/// Phase reconstruction by alternating projections with momentum
/// extrapolation between consistent estimates. Works on the padded signal
/// domain so every projection is an exact least-squares inverse.
pub fn griffin_lim_to_length(
    magnitude: &Tensor<f64>,
    cfg: &SpectrogramConfig,
    iterations: usize,
    seed: u64,
    len: usize,
) -> Result<GriffinLimOutput> {
    if iterations == 0 {
        return Err(Error::Config("griffin-lim needs at least one iteration".into()));
    }
    if magnitude.shape().len() != 2 || magnitude.cols() != cfg.bins() {
        return Err(Error::shape(
            "griffin_lim",
            format!("magnitude {:?} vs {} bins", magnitude.shape(), cfg.bins()),
        ));
    }
    if magnitude.data().iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::Data("magnitude must be finite and nonnegative".into()));
    }
    let frames = magnitude.rows();
    if len / cfg.hop_length + 1 != frames {
        return Err(Error::shape(
            "griffin_lim",
            format!("{len} samples cannot yield {frames} frames at hop {}", cfg.hop_length),
        ));
    }
    let t = FrameTransform::new(cfg)?;
    let pad = t.pad();
    let padded_len = len + 2 * pad;
    let bins = cfg.bins();
    let mag = magnitude.data();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ComplexFrames {
        frames,
        bins,
        data: mag
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let k = i % bins;
                // DC and Nyquist stay real so the spectrum is Hermitian-consistent.
                if k == 0 || k + 1 == bins {
                    Complex64::new(if rng.random::<bool>() { m } else { -m }, 0.0)
                } else {
                    Complex64::from_polar(m, rng.random_range(0.0..2.0 * PI))
                }
            })
            .collect(),
    };

    let project_magnitude = |c: &ComplexFrames| ComplexFrames {
        frames,
        bins,
        data: c
            .data
            .iter()
            .zip(mag)
            .map(|(c, &m)| {
                let n = c.norm();
                if n > 0.0 {
                    c * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                }
            })
            .collect(),
    };
    // Consistency projection: synthesize, re-analyze, and score.
    let step = |a: &ComplexFrames| -> Result<(Vec<f64>, ComplexFrames, f64)> {
        let signal = t.synthesize(a, padded_len);
        let rebuilt = t.analyze(&signal, frames);
        let est = Tensor::new(vec![frames, bins], rebuilt.data.iter().map(|c| c.norm()).collect())?;
        let sc = spectral_convergence(&est, magnitude);
        Ok((signal, rebuilt, sc))
    };

    let mut convergence: Vec<f64> = Vec::with_capacity(iterations);
    let (mut signal, mut prev, sc) = step(&spec)?;
    convergence.push(sc);
    let mut c = prev.clone();
    for _ in 1..iterations {
        let (mut sig, mut cur, mut sc) = step(&project_magnitude(&c))?;
        if sc > convergence[convergence.len() - 1] {
            // The extrapolated point overshot: take a plain projection step
            // from the last consistent estimate instead, which cannot increase
            // the error, and restart the momentum.
            (sig, cur, sc) = step(&project_magnitude(&prev))?;
            c = cur.clone();
        } else {
            c = ComplexFrames {
                frames,
                bins,
                data: cur
                    .data
                    .iter()
                    .zip(&prev.data)
                    .map(|(t, p)| t + (t - p) * GL_MOMENTUM)
                    .collect(),
            };
        }
        convergence.push(sc);
        signal = sig;
        prev = cur;
    }
    let samples: Vec<f64> = signal[pad..pad + len].to_vec();
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("griffin-lim output".into()));
    }
    Ok(GriffinLimOutput {
        audio: AudioBuffer::new(samples, SAMPLE_RATE)?,
        convergence,
    })
}
