use serde::Serialize;

use crate::error::{Error, Result};

/// Similarity scores of same-speaker (genuine) and different-speaker
/// (impostor) trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Fraction of impostors accepted (`score ≥ t`) and of genuine trials rejected (`score < t`).
fn rates(s: &ScoreSet, t: f64) -> (f64, f64) {
    let far = s.impostor.iter().filter(|&&v| v >= t).count() as f64 / s.impostor.len() as f64;
    let frr = s.genuine.iter().filter(|&&v| v < t).count() as f64 / s.genuine.len() as f64;
    (far, frr)
}

/// Equal error rate. Thresholds sweep the sorted unique scores plus one
/// point above the maximum; the EER is read where `FAR - FRR` first becomes
/// non-positive, linearly interpolated from the previous threshold.
pub fn eer(scores: &ScoreSet) -> Result<EerResult> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::Data("EER needs genuine and impostor scores".into()));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|v| !v.is_finite()) {
        return Err(Error::Data("EER scores must be finite".into()));
    }
    let mut th: Vec<f64> = scores.genuine.iter().chain(&scores.impostor).copied().collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &th {
        let (far, frr) = rates(scores, t);
        if far - frr <= 0.0 {
            return Ok(crossing(prev, (t, far, frr)));
        }
        prev = Some((t, far, frr));
    }
    // Above every score nothing is accepted: FAR 0, FRR 1.
    let (t_last, far, frr) = prev.expect("at least one threshold");
    let d0 = far - frr;
    let alpha = d0 / (d0 + 1.0);
    Ok(EerResult {
        eer: far + alpha * (0.0 - far),
        threshold: t_last,
    })
}

fn crossing(prev: Option<(f64, f64, f64)>, cur: (f64, f64, f64)) -> EerResult {
    let (t1, far1, frr1) = cur;
    match prev {
        None => EerResult {
            eer: (far1 + frr1) / 2.0,
            threshold: t1,
        },
        Some((t0, far0, frr0)) => {
            let d0 = far0 - frr0;
            let d1 = far1 - frr1;
            let alpha = d0 / (d0 - d1);
            EerResult {
                eer: far0 + alpha * (far1 - far0),
                threshold: t0 + alpha * (t1 - t0),
            }
        }
    }
}

/// Mean with a normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }
}

/// `mean ± 1.96 · s / sqrt(n)` with the sample standard deviation `s`.
/// `None` for an empty sample; a single value gets a zero-width interval.
pub fn mean_ci(values: &[f64]) -> Option<MeanCi> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanCi { mean, half_width, n })
}
