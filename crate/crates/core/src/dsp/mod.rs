//! Audio front end: WAV I/O, resampling, STFT and log-mel analysis, and
//! Griffin-Lim inversion back to audio.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_to_length, spectral_convergence, GriffinLimOutput};
pub use mel::{build_mel_filterbank, clip_frames, hz_to_mel, log_mel, log_mel_with, mel_to_hz, mel_to_linear, MelFilterbank, MelSpectrogram};
pub use resample::resample;
pub use stft::{frame_count, hann_window, magnitude, power, reflect_pad as stft_reflect_pad, stft, ComplexFrames};
pub use wav::{load_wav, save_wav};

use crate::error::{Error, Result};

/// Log-mel frames back to audio: least-squares mel inversion, then
/// Griffin-Lim on the resulting magnitudes. `len` defaults to the shortest
/// signal with the same frame count.
pub fn mel_to_audio(
    mel: &MelSpectrogram,
    fb: &MelFilterbank,
    iterations: usize,
    seed: u64,
    len: Option<usize>,
) -> Result<AudioBuffer> {
    let mag = mel_to_linear(mel, fb)?.map(|p| p.sqrt());
    let out = match len {
        Some(n) => griffin_lim_to_length(&mag, &mel.config, iterations, seed, n)?,
        None => griffin_lim(&mag, &mel.config, iterations, seed)?,
    };
    Ok(out.audio)
}

/// Canonical model sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales so the absolute peak equals `target`; silent input is unchanged.
    pub fn normalize_peak(&mut self, target: f64) {
        let peak = self.peak();
        if peak > 0.0 {
            let g = target / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
        }
    }
}

/// Analysis parameters shared by the STFT, mel, and LPC framing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrogramConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub mel_bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window_length: 1024,
            hop_length: 320,
            fft_size: 1024,
            mel_bands: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let ok = self.hop_length >= 1
            && self.hop_length <= self.window_length
            && self.window_length <= self.fft_size
            && self.fft_size % 2 == 0
            && self.mel_bands >= 1
            && self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= nyquist
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid spectrogram config {self:?} for {sample_rate} Hz"
            )))
        }
    }

    /// Frames per clip of `seconds` at `sample_rate`.
    pub fn clip_len(&self, seconds: f64, sample_rate: u32) -> usize {
        (seconds * sample_rate as f64 / self.hop_length as f64).round() as usize
    }
}
