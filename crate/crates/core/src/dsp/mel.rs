use nalgebra::DMatrix;

use super::stft::{power, stft};
use super::{AudioBuffer, SpectrogramConfig, SAMPLE_RATE};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `mel_bands × bins`, peak height 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub weights: Tensor<f64>,
}

impl MelFilterbank {
    pub fn from_weights(weights: Tensor<f64>) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::shape("filterbank", format!("{:?}", weights.shape())));
        }
        if weights.data().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Data("filterbank weights must be finite and nonnegative".into()));
        }
        if let Some(r) = (0..weights.rows()).find(|&r| weights.row(r).iter().all(|w| *w == 0.0)) {
            return Err(Error::Data(format!("filterbank row {r} is empty")));
        }
        Ok(Self { weights })
    }

    pub fn bands(&self) -> usize {
        self.weights.rows()
    }

    pub fn bins(&self) -> usize {
        self.weights.cols()
    }

    /// `power · Wᵀ`, frame by frame.
    pub fn apply(&self, power: &Tensor<f64>) -> Result<Tensor<f64>> {
        if power.cols() != self.bins() {
            return Err(Error::shape(
                "mel projection",
                format!("{} bins vs filterbank {}", power.cols(), self.bins()),
            ));
        }
        let (n, bands) = (power.rows(), self.bands());
        let mut out = Vec::with_capacity(n * bands);
        for f in 0..n {
            let p = power.row(f);
            for b in 0..bands {
                out.push(self.weights.row(b).iter().zip(p).map(|(w, x)| w * x).sum());
            }
        }
        Tensor::new(vec![n, bands], out)
    }
}

pub fn build_mel_filterbank(cfg: &SpectrogramConfig, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    let bins = cfg.bins();
    let bands = cfg.mel_bands;
    let (m_lo, m_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    let mut w = vec![0.0; bands * bins];
    for b in 0..bands {
        let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
            if v > 0.0 {
                w[b * bins + k] = v;
            }
        }
        if w[b * bins..(b + 1) * bins].iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "mel_bands {bands} too large for fft_size {}: filter {b} has no bins",
                cfg.fft_size
            )));
        }
    }
    MelFilterbank::from_weights(Tensor::new(vec![bands, bins], w)?)
}

/// Log-power mel frames, `frames × mel_bands`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor<f64>,
    pub config: SpectrogramConfig,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor<f64>, config: SpectrogramConfig, sample_rate: u32) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != config.mel_bands {
            return Err(Error::shape(
                "mel spectrogram",
                format!("{:?} with {} bands", frames.shape(), config.mel_bands),
            ));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        Ok(Self {
            frames,
            config,
            sample_rate,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn floor(&self) -> f64 {
        self.config.log_floor.ln()
    }
}

pub fn log_mel(audio: &AudioBuffer, cfg: &SpectrogramConfig) -> Result<MelSpectrogram> {
    let fb = build_mel_filterbank(cfg, SAMPLE_RATE)?;
    log_mel_with(audio, cfg, &fb)
}

/// Same as [`log_mel`] with a prebuilt filterbank.
pub fn log_mel_with(
    audio: &AudioBuffer,
    cfg: &SpectrogramConfig,
    fb: &MelFilterbank,
) -> Result<MelSpectrogram> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "log_mel expects {SAMPLE_RATE} Hz audio, got {} Hz; resample first",
            audio.sample_rate
        )));
    }
    let mel = fb.apply(&power(&stft(audio, cfg)?))?;
    let floor = cfg.log_floor;
    MelSpectrogram::new(mel.map(|v| v.max(floor).ln()), *cfg, audio.sample_rate)
}

/// Cuts non-overlapping fixed-length clips; a trailing partial clip is dropped.
pub fn clip_frames(mel: &MelSpectrogram, clip_seconds: f64) -> Result<Vec<MelSpectrogram>> {
    if !(clip_seconds > 0.0) {
        return Err(Error::Config(format!("clip length must be positive, got {clip_seconds}")));
    }
    let len = mel.config.clip_len(clip_seconds, mel.sample_rate);
    if len == 0 {
        return Err(Error::Config("clip shorter than one frame".into()));
    }
    (0..mel.num_frames() / len)
        .map(|c| MelSpectrogram::new(mel.frames.slice_rows(c * len, (c + 1) * len), mel.config, mel.sample_rate))
        .collect()
}

/// Least-squares inverse of the mel projection applied to `exp(mel)`, clamped
/// at zero. Returns linear power, `frames × bins`.
pub fn mel_to_linear(mel: &MelSpectrogram, fb: &MelFilterbank) -> Result<Tensor<f64>> {
    mel_frames_to_linear(&mel.frames, fb)
}

pub(crate) fn mel_frames_to_linear(frames: &Tensor<f64>, fb: &MelFilterbank) -> Result<Tensor<f64>> {
    if frames.cols() != fb.bands() {
        return Err(Error::shape(
            "mel_to_linear",
            format!("{} bands vs filterbank {}", frames.cols(), fb.bands()),
        ));
    }
    let w = DMatrix::from_row_slice(fb.bands(), fb.bins(), fb.weights.data());
    let pinv = w
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numeric(format!("filterbank pseudo-inverse: {e}")))?;
    let (n, bins) = (frames.rows(), fb.bins());
    let mut out = Vec::with_capacity(n * bins);
    for f in 0..n {
        let p: Vec<f64> = frames.row(f).iter().map(|v| v.exp()).collect();
        for k in 0..bins {
            let v: f64 = (0..fb.bands()).map(|b| pinv[(k, b)] * p[b]).sum();
            out.push(v.max(0.0));
        }
    }
    Tensor::new(vec![n, bins], out)
}
