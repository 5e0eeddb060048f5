use rand::Rng;
use rand_distr::StandardNormal;

use crate::dsp::{log_mel_with, AudioBuffer, MelFilterbank, MelSpectrogram, SpectrogramConfig, SAMPLE_RATE};
use crate::error::Result;
use crate::formant::{synth_sequence, Formant};

/// Clip length of generated quality-pretraining items, in seconds.
pub const DEGRADATION_DURATION: f64 = 0.5;

/// Adds white Gaussian noise at `snr_db` relative to the signal's mean power.
pub fn add_noise(audio: &AudioBuffer, snr_db: f64, rng: &mut impl Rng) -> Result<AudioBuffer> {
    let power = audio.samples.iter().map(|s| s * s).sum::<f64>() / audio.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let samples = audio
        .samples
        .iter()
        .map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    AudioBuffer::new(samples, audio.sample_rate)
}

/// Averages mel power over `frames` neighbouring frames on each side.
pub fn smear_frames(mel: &MelSpectrogram, frames: usize) -> Result<MelSpectrogram> {
    if frames == 0 {
        return Ok(mel.clone());
    }
    let (n, bands) = (mel.frames.rows(), mel.frames.cols());
    let power: Vec<f64> = mel.frames.data().iter().map(|v| v.exp()).collect();
    let mut out = mel.frames.clone();
    for r in 0..n {
        let lo = r.saturating_sub(frames);
        let hi = (r + frames).min(n - 1);
        for b in 0..bands {
            let avg = (lo..=hi).map(|t| power[t * bands + b]).sum::<f64>() / (hi - lo + 1) as f64;
            out.data_mut()[r * bands + b] = avg.max(mel.config.log_floor).ln();
        }
    }
    MelSpectrogram::new(out, mel.config, mel.sample_rate)
}

/// Averages mel power over a window of `width` bands on each side.
pub fn smear_bands(mel: &MelSpectrogram, width: usize) -> Result<MelSpectrogram> {
    if width == 0 {
        return Ok(mel.clone());
    }
    let bands = mel.frames.cols();
    let mut out = mel.frames.clone();
    for r in 0..mel.frames.rows() {
        let power: Vec<f64> = mel.frames.row(r).iter().map(|v| v.exp()).collect();
        for b in 0..bands {
            let lo = b.saturating_sub(width);
            let hi = (b + width).min(bands - 1);
            let avg = power[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            out.data_mut()[r * bands + b] = avg.max(mel.config.log_floor).ln();
        }
    }
    MelSpectrogram::new(out, mel.config, mel.sample_rate)
}

fn random_formants(rng: &mut impl Rng) -> Vec<Formant> {
    let f1 = rng.random_range(250.0..=900.0);
    let f2 = rng.random_range(f1 + 200.0..=2500.0);
    let f3 = rng.random_range(f2 + 300.0..=3500.0);
    vec![
        Formant { freq: f1, bandwidth: rng.random_range(40.0..=90.0) },
        Formant { freq: f2, bandwidth: rng.random_range(60.0..=120.0) },
        Formant { freq: f3, bandwidth: rng.random_range(80.0..=160.0) },
    ]
}

/// One to three random vowels with a shared base f0 and a few percent of
/// per-segment f0 variation, filling `duration` seconds.
fn random_vowels(rng: &mut impl Rng, duration: f64) -> Result<AudioBuffer> {
    let f0 = rng.random_range(80.0..=300.0);
    let n = rng.random_range(1..=3usize);
    let segments: Vec<_> = (0..n)
        .map(|_| (f0 * rng.random_range(0.95..=1.05), random_formants(rng), duration / n as f64))
        .collect();
    synth_sequence(&segments, SAMPLE_RATE)
}

/// Random vowels with white noise at `30 - 30 noise` dB SNR, then smearing
/// over `round(6 smear)` mel bands and `round(2 smear)` frames on each side.
/// Both severities lie in [0, 1]; zero skips that degradation.
pub fn degraded_mel(
    rng: &mut impl Rng,
    noise: f64,
    smear: f64,
    duration: f64,
    cfg: &SpectrogramConfig,
    fb: &MelFilterbank,
) -> Result<MelSpectrogram> {
    let audio = random_vowels(rng, duration)?;
    let audio = if noise > 0.0 { add_noise(&audio, 30.0 - 30.0 * noise, rng)? } else { audio };
    let mel = log_mel_with(&audio, cfg, fb)?;
    let mel = smear_bands(&mel, (6.0 * smear).round() as usize)?;
    smear_frames(&mel, (2.0 * smear).round() as usize)
}
