use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::diffcore::Tensor;
use crate::dsp::{frame_count, AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

use super::FormantTrack;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpcConfig {
    pub order: usize,
    pub preemphasis: f64,
    pub frame_length: usize,
    pub frame_hop: usize,
    pub max_bandwidth: f64,
    pub min_freq: f64,
}

impl Default for LpcConfig {
    fn default() -> Self {
        Self {
            order: 18,
            preemphasis: 0.97,
            frame_length: 1024,
            frame_hop: 320,
            max_bandwidth: 400.0,
            min_freq: 90.0,
        }
    }
}

impl LpcConfig {
    pub fn validate(&self, formants: usize) -> Result<()> {
        if self.order < 2 * formants
            || !(0.0..1.0).contains(&self.preemphasis)
            || self.frame_hop == 0
            || self.frame_length < self.order + 1
        {
            return Err(Error::Config(format!("invalid LPC config {self:?}")));
        }
        Ok(())
    }
}

/// `y[n] = x[n] - coeff * x[n-1]`, `y[0] = x[0]`.
pub fn preemphasize(audio: &AudioBuffer, coeff: f64) -> Result<AudioBuffer> {
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::Config(format!("preemphasis must be in [0, 1), got {coeff}")));
    }
    let x = &audio.samples;
    let samples = (0..x.len())
        .map(|n| if n == 0 { x[0] } else { x[n] - coeff * x[n - 1] })
        .collect();
    AudioBuffer::new(samples, audio.sample_rate)
}

/// Predictor coefficients `a` with `x[n] ≈ Σ a[k-1] x[n-k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lpc {
    pub coeffs: Vec<f64>,
    /// Final prediction error power.
    pub error: f64,
    /// Prediction error after each order `0..=p`.
    pub errors: Vec<f64>,
    pub reflection: Vec<f64>,
}

/// Levinson-Durbin recursion on `r[0..=p]`. A reflection coefficient with
/// magnitude ≥ 1 means the frame is unstable and is reported as an error.
pub fn levinson_durbin(r: &[f64]) -> Result<Lpc> {
    if r.is_empty() || !(r[0] > 0.0) || r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("autocorrelation must start with a positive lag-0 term".into()));
    }
    let p = r.len() - 1;
    let mut a = vec![0.0; p];
    let mut prev = vec![0.0; p];
    let mut err = r[0];
    let mut errors = vec![err];
    let mut reflection = Vec::with_capacity(p);
    for i in 0..p {
        let acc: f64 = (0..i).map(|j| a[j] * r[i - j]).sum();
        let k = (r[i + 1] - acc) / err;
        if !k.is_finite() || k.abs() >= 1.0 {
            return Err(Error::Numeric(format!("unstable LPC frame: reflection {k} at order {}", i + 1)));
        }
        prev[..i].copy_from_slice(&a[..i]);
        a[i] = k;
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        err *= 1.0 - k * k;
        errors.push(err);
        reflection.push(k);
    }
    Ok(Lpc {
        coeffs: a,
        error: err,
        errors,
        reflection,
    })
}

pub fn autocorrelation(frame: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|lag| {
            frame[lag.min(frame.len())..]
                .iter()
                .zip(frame)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
}

/// Resonances of `1 - Σ a_k z^-k`, lowest first. `None` when fewer than `k`
/// roots pass the frequency and bandwidth filters.
pub fn formants_from_lpc(coeffs: &[f64], sample_rate: u32, cfg: &LpcConfig, k: usize) -> Option<Vec<Formant>> {
    let p = coeffs.len();
    if p == 0 || coeffs.iter().all(|c| *c == 0.0) {
        return None;
    }
    // Companion matrix of z^p - a1 z^(p-1) - ... - ap.
    let mut m = DMatrix::<f64>::zeros(p, p);
    for (j, c) in coeffs.iter().enumerate() {
        m[(0, j)] = *c;
    }
    for i in 1..p {
        m[(i, i - 1)] = 1.0;
    }
    let fs = sample_rate as f64;
    let mut found: Vec<Formant> = m
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im > 0.0)
        .map(|z| Formant {
            freq: z.arg() * fs / (2.0 * PI),
            bandwidth: -z.norm().ln() * fs / PI,
        })
        .filter(|f| f.bandwidth > 0.0 && f.bandwidth < cfg.max_bandwidth && f.freq > cfg.min_freq)
        .collect();
    if found.len() < k {
        return None;
    }
    found.sort_by(|a, b| a.freq.total_cmp(&b.freq));
    found.truncate(k);
    Some(found)
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Frame-wise LPC formants (`k` per frame), framed like the mel front end.
/// Frames without `k` valid resonances copy the nearest valid frame.
pub fn track_formants(audio: &AudioBuffer, cfg: &LpcConfig, k: usize) -> Result<FormantTrack> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "formant tracking expects {SAMPLE_RATE} Hz audio, got {}",
            audio.sample_rate
        )));
    }
    if audio.is_empty() {
        return Err(Error::Data("empty audio".into()));
    }
    cfg.validate(k)?;
    let emph = preemphasize(audio, cfg.preemphasis)?;
    let padded = crate::dsp::stft_reflect_pad(&emph.samples, cfg.frame_length / 2);
    let n = frame_count(audio.len(), cfg.frame_hop);
    let window = hamming(cfg.frame_length);
    let peak = audio.peak();
    let per_frame: Vec<Option<Vec<f64>>> = (0..n)
        .map(|f| {
            let start = f * cfg.frame_hop;
            let frame: Vec<f64> = window
                .iter()
                .enumerate()
                .map(|(i, w)| w * padded[start + i])
                .collect();
            let r = autocorrelation(&frame, cfg.order);
            // Ignore frames that are numerically silent relative to the utterance.
            if peak == 0.0 || r[0] <= 1e-10 * peak * peak * cfg.frame_length as f64 {
                return None;
            }
            let lpc = levinson_durbin(&r).ok()?;
            formants_from_lpc(&lpc.coeffs, audio.sample_rate, cfg, k)
                .map(|fs| fs.iter().map(|f| f.freq / (SAMPLE_RATE as f64 / 2.0)).collect())
        })
        .collect();
    let valid: Vec<usize> = (0..n).filter(|&i| per_frame[i].is_some()).collect();
    if valid.is_empty() {
        return Err(Error::Data("no frame yielded valid formants".into()));
    }
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        let nearest = match valid.binary_search(&i) {
            Ok(j) => valid[j],
            Err(j) => {
                let after = valid.get(j).copied();
                let before = j.checked_sub(1).map(|b| valid[b]);
                match (before, after) {
                    (Some(b), Some(a)) => if i - b <= a - i { b } else { a },
                    (Some(b), None) => b,
                    (None, Some(a)) => a,
                    (None, None) => unreachable!(),
                }
            }
        };
        data.extend_from_slice(per_frame[nearest].as_ref().expect("valid frame"));
    }
    FormantTrack::new(Tensor::new(vec![n, k], data)?)
}
