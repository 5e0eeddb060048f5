use std::f64::consts::PI;

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

use super::Formant;

/// Two-pole resonator coefficients `(a, b, c)` for
/// `y[n] = a x[n] + b y[n-1] + c y[n-2]`, unit gain at DC.
pub fn resonator_coeffs(freq: f64, bandwidth: f64, sample_rate: f64) -> (f64, f64, f64) {
    let c = -(-2.0 * PI * bandwidth / sample_rate).exp();
    let b = 2.0 * (-PI * bandwidth / sample_rate).exp() * (2.0 * PI * freq / sample_rate).cos();
    (1.0 - b - c, b, c)
}

fn check_formants(formants: &[Formant], sample_rate: u32) -> Result<()> {
    let nyquist = sample_rate as f64 / 2.0;
    for (i, f) in formants.iter().enumerate() {
        if !(f.freq > 0.0 && f.freq < nyquist && f.bandwidth > 0.0) {
            return Err(Error::Config(format!("formant {i} {f:?} outside (0, {nyquist}) Hz")));
        }
        if i > 0 && formants[i - 1].freq >= f.freq {
            return Err(Error::Config("formants must be strictly increasing".into()));
        }
    }
    Ok(())
}

/// One-pole source tilt: glottal roll-off combined with lip radiation, about
/// -6 dB per octave. Matches the default LPC preemphasis.
pub const SOURCE_TILT: f64 = 0.97;

fn apply_tilt(x: &mut [f64]) {
    let mut prev = 0.0;
    for s in x.iter_mut() {
        prev = *s + SOURCE_TILT * prev;
        *s = prev;
    }
}

/// Impulse train at `f0` with a one-pole source tilt, through cascaded
/// resonators, peak-normalized to 0.9.
pub fn synth_vowel(f0: f64, formants: &[Formant], duration: f64, sample_rate: u32) -> Result<AudioBuffer> {
    if !(f0 > 0.0) || !(duration > 0.0) {
        return Err(Error::Config(format!("need positive f0 and duration, got {f0} Hz, {duration} s")));
    }
    check_formants(formants, sample_rate)?;
    let fs = sample_rate as f64;
    let n = (duration * fs).round() as usize;
    let mut x = vec![0.0; n];
    let mut k = 0usize;
    loop {
        let pos = (k as f64 * fs / f0).round() as usize;
        if pos >= n {
            break;
        }
        x[pos] = 1.0;
        k += 1;
    }
    apply_tilt(&mut x);
    for f in formants {
        let (a, b, c) = resonator_coeffs(f.freq, f.bandwidth, fs);
        let (mut y1, mut y2) = (0.0, 0.0);
        for s in x.iter_mut() {
            let y = a * *s + b * y1 + c * y2;
            y2 = y1;
            y1 = y;
            *s = y;
        }
    }
    let mut audio = AudioBuffer::new(x, sample_rate)?;
    audio.normalize_peak(0.9);
    Ok(audio)
}

/// Piecewise synthesis: each segment carries its own formants and f0, and the
/// resonator state runs continuously across segment boundaries.
pub fn synth_sequence(segments: &[(f64, Vec<Formant>, f64)], sample_rate: u32) -> Result<AudioBuffer> {
    let fs = sample_rate as f64;
    let mut out = Vec::new();
    let k = segments.first().map_or(0, |s| s.1.len());
    let mut state = vec![(0.0, 0.0); k];
    let mut next_pulse = 0.0f64;
    let mut tilt = 0.0;
    for (f0, formants, duration) in segments {
        if formants.len() != k || !(*f0 > 0.0) || !(*duration > 0.0) {
            return Err(Error::Config("segments need equal formant counts, positive f0 and duration".into()));
        }
        check_formants(formants, sample_rate)?;
        let coeffs: Vec<_> = formants.iter().map(|f| resonator_coeffs(f.freq, f.bandwidth, fs)).collect();
        let n = (duration * fs).round() as usize;
        for _ in 0..n {
            let t = out.len() as f64;
            let mut s = 0.0;
            if t >= next_pulse.round() {
                s = 1.0;
                next_pulse += fs / f0;
            }
            tilt = s + SOURCE_TILT * tilt;
            s = tilt;
            for ((a, b, c), (y1, y2)) in coeffs.iter().zip(state.iter_mut()) {
                let y = a * s + b * *y1 + c * *y2;
                *y2 = *y1;
                *y1 = y;
                s = y;
            }
            out.push(s);
        }
    }
    let mut audio = AudioBuffer::new(out, sample_rate)?;
    audio.normalize_peak(0.9);
    Ok(audio)
}
