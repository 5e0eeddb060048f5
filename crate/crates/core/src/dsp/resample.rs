use super::AudioBuffer;
use crate::error::{Error, Result};

/// Linear-interpolation resampler. The output holds `round(len * target / source)`
/// samples, so duration is preserved to within one output period.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == audio.sample_rate || audio.is_empty() {
        return AudioBuffer::new(audio.samples.clone(), target_rate);
    }
    let src = &audio.samples;
    let ratio = audio.sample_rate as f64 / target_rate as f64;
    let out_len = ((src.len() as f64) / ratio).round().max(1.0) as usize;
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 * ratio;
            let i = t.floor() as usize;
            if i >= last {
                return src[last];
            }
            let frac = t - i as f64;
            src[i] + (src[i + 1] - src[i]) * frac
        })
        .collect();
    AudioBuffer::new(samples, target_rate)
}
