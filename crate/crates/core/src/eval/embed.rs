use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::dsp::{build_mel_filterbank, log_mel_with, resample, AudioBuffer, MelFilterbank, SpectrogramConfig, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MFCC_BANDS: usize = 26;
pub const MFCC_COEFFS: usize = 13;
/// Embedding length: per-coefficient mean and standard deviation.
pub const EMBEDDING_DIM: usize = 2 * MFCC_COEFFS;
pub const MIN_EMBED_SECONDS: f64 = 0.5;

fn mfcc_config() -> SpectrogramConfig {
    SpectrogramConfig {
        window_length: 400,
        hop_length: 160,
        fft_size: 512,
        mel_bands: MFCC_BANDS,
        fmin: 0.0,
        fmax: 8000.0,
        log_floor: 1e-10,
    }
}

fn filterbank() -> &'static MelFilterbank {
    static FB: OnceLock<MelFilterbank> = OnceLock::new();
    FB.get_or_init(|| build_mel_filterbank(&mfcc_config(), SAMPLE_RATE).expect("valid MFCC filterbank"))
}

/// Orthonormal DCT-II rows `0..MFCC_COEFFS` over `MFCC_BANDS` inputs.
fn dct_matrix() -> &'static Vec<[f64; MFCC_BANDS]> {
    static DCT: OnceLock<Vec<[f64; MFCC_BANDS]>> = OnceLock::new();
    DCT.get_or_init(|| {
        let n = MFCC_BANDS as f64;
        (0..MFCC_COEFFS)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                std::array::from_fn(|i| scale * (PI * k as f64 * (i as f64 + 0.5) / n).cos())
            })
            .collect()
    })
}

/// Mel-cepstral statistics of `audio`: mean and standard deviation over
/// frames of 13 cepstral coefficients, scaled to unit length.
pub fn reference_speaker_embedding(audio: &AudioBuffer) -> Result<Vec<f64>> {
    if audio.duration_seconds() < MIN_EMBED_SECONDS {
        return Err(Error::Data(format!(
            "speaker embedding needs ≥ {MIN_EMBED_SECONDS} s of audio, got {:.3} s",
            audio.duration_seconds()
        )));
    }
    let audio = if audio.sample_rate == SAMPLE_RATE {
        audio.clone()
    } else {
        resample(audio, SAMPLE_RATE)?
    };
    let mel = log_mel_with(&audio, &mfcc_config(), filterbank())?;
    let dct = dct_matrix();
    let frames = mel.num_frames();
    let mut sum = [0.0; MFCC_COEFFS];
    let mut sum_sq = [0.0; MFCC_COEFFS];
    for r in 0..frames {
        let row = mel.frames.row(r);
        for (k, basis) in dct.iter().enumerate() {
            let c: f64 = basis.iter().zip(row).map(|(b, x)| b * x).sum();
            sum[k] += c;
            sum_sq[k] += c * c;
        }
    }
    let n = frames as f64;
    let mut out = Vec::with_capacity(EMBEDDING_DIM);
    out.extend(sum.iter().map(|s| s / n));
    out.extend(sum.iter().zip(&sum_sq).map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0).sqrt()));
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric("degenerate speaker embedding".into()));
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}
