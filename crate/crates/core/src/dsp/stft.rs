use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, SpectrogramConfig};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Frame-major complex spectrogram, `frames × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexFrames {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl ComplexFrames {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frames produced by the centered STFT for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

pub(crate) fn check_framing(cfg: &SpectrogramConfig) -> Result<()> {
    if cfg.hop_length == 0
        || cfg.hop_length > cfg.window_length
        || cfg.window_length > cfg.fft_size
        || cfg.fft_size % 2 != 0
    {
        return Err(Error::Config(format!(
            "need 0 < hop <= window <= fft with even fft, got hop {} window {} fft {}",
            cfg.hop_length, cfg.window_length, cfg.fft_size
        )));
    }
    Ok(())
}

/// Mirror index into `0..len` without repeating the edge sample. Repeats the
/// reflection for pads longer than the signal.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect padding without edge repetition, as used for centered framing.
pub fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let len = samples.len();
    (0..len + 2 * pad)
        .map(|j| samples[reflect_index(j as isize - pad as isize, len)])
        .collect()
}

/// Windowed FFT analysis and least-squares overlap-add synthesis over a signal
/// that has already been center padded.
pub(crate) struct FrameTransform {
    cfg: SpectrogramConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FrameTransform {
    pub(crate) fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        check_framing(cfg)?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: *cfg,
            window: hann_window(cfg.window_length),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub(crate) fn pad(&self) -> usize {
        self.cfg.window_length / 2
    }

    pub(crate) fn analyze(&self, padded: &[f64], frames: usize) -> ComplexFrames {
        let (win, hop, nfft) = (self.cfg.window_length, self.cfg.hop_length, self.cfg.fft_size);
        let bins = nfft / 2 + 1;
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        for f in 0..frames {
            let start = f * hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (k, w) in self.window.iter().enumerate() {
                let s = padded.get(start + k).copied().unwrap_or(0.0);
                buf[k] = Complex64::new(s * w, 0.0);
            }
            debug_assert!(start + win <= padded.len());
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        ComplexFrames { frames, bins, data }
    }

    /// Least-squares signal estimate from a (possibly inconsistent) spectrogram:
    /// `sum_f w * irfft(Y_f)` divided by `sum_f w^2`, zero where no window covers.
    pub(crate) fn synthesize(&self, spec: &ComplexFrames, padded_len: usize) -> Vec<f64> {
        let (hop, nfft) = (self.cfg.hop_length, self.cfg.fft_size);
        let half = nfft / 2;
        let mut num = vec![0.0; padded_len];
        let mut den = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        for f in 0..spec.frames {
            let frame = spec.frame(f);
            buf[0] = Complex64::new(frame[0].re, 0.0);
            buf[half] = Complex64::new(frame[half].re, 0.0);
            for k in 1..half {
                buf[k] = frame[k];
                buf[nfft - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * hop;
            for (k, w) in self.window.iter().enumerate() {
                let j = start + k;
                if j < padded_len {
                    num[j] += w * buf[k].re / nfft as f64;
                    den[j] += w * w;
                }
            }
        }
        num.iter()
            .zip(&den)
            .map(|(n, d)| if *d > 1e-12 { n / d } else { 0.0 })
            .collect()
    }
}

/// Centered STFT with reflect padding of `window_length / 2` on each side.
pub fn stft(audio: &AudioBuffer, cfg: &SpectrogramConfig) -> Result<ComplexFrames> {
    if audio.is_empty() {
        return Err(Error::Data("stft needs at least one sample".into()));
    }
    let t = FrameTransform::new(cfg)?;
    let padded = reflect_pad(&audio.samples, t.pad());
    Ok(t.analyze(&padded, frame_count(audio.len(), cfg.hop_length)))
}

pub fn magnitude(spec: &ComplexFrames) -> Tensor<f64> {
    let data = spec.data.iter().map(|c| c.norm()).collect();
    Tensor::new(vec![spec.frames, spec.bins], data).expect("consistent shape")
}

pub fn power(spec: &ComplexFrames) -> Tensor<f64> {
    let data = spec.data.iter().map(|c| c.norm_sqr()).collect();
    Tensor::new(vec![spec.frames, spec.bins], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0], 2), vec![3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(reflect_pad(&[5.0], 3), vec![5.0; 7]);
        // Longer than the signal: keeps bouncing.
        assert_eq!(reflect_pad(&[1.0, 2.0], 3), vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn periodic_hann_endpoints() {
        let w = hann_window(8);
        assert_eq!(w[0], 0.0);
        assert!((w[4] - 1.0).abs() < 1e-15);
        assert!((w[1] - w[7]).abs() < 1e-15);
    }
}
