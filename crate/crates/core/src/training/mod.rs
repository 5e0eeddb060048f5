//! The full training objective, its schedules, and the resumable training loop.

mod corpus;
mod trainer;

pub use corpus::{build_speaker_corpus, speaker_formants, SpeakerCorpus, SpeakerCorpusConfig, SpeakerInfo, Utterance, VOWELS};
pub use trainer::{fit, Clip, Dataset, EpochRecord, FitResult, TrainState, Trainer};

pub use crate::diffcore::Adam;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::formant::FormantRegressor;
use crate::perceploss::{representation_loss, PhonemeProxy, QualityProxy};
use crate::scalar::Scalar;
use crate::vqvae::{reconstruction_loss, vq_losses, vq_losses_frozen, FrozenLevel, HierarchicalVqvae};

/// The six terms of the objective, in breakdown order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Recon,
    Code,
    Commit,
    Mos,
    Wavlm,
    Formant,
}

pub const TERMS: [Term; 6] = [Term::Recon, Term::Code, Term::Commit, Term::Mos, Term::Wavlm, Term::Formant];

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Recon => "recon",
            Term::Code => "code",
            Term::Commit => "commit",
            Term::Mos => "mos",
            Term::Wavlm => "wavlm",
            Term::Formant => "formant",
        }
    }

    pub fn index(self) -> usize {
        TERMS.iter().position(|&t| t == self).expect("listed")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub code: f64,
    pub commit: f64,
    pub mos: f64,
    pub wavlm: f64,
    pub formant: f64,
    pub mos_from_epoch: usize,
    pub wavlm_from_epoch: usize,
    pub formant_from_epoch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            code: 1.0,
            commit: 3.0,
            mos: 0.1,
            wavlm: 0.1,
            formant: 1e6,
            mos_from_epoch: 0,
            wavlm_from_epoch: 45,
            formant_from_epoch: 45,
        }
    }
}

impl LossWeights {
    /// The plain autoencoder objective: perceptual weights zero.
    pub fn vanilla() -> Self {
        Self {
            mos: 0.0,
            wavlm: 0.0,
            formant: 0.0,
            ..Self::default()
        }
    }

    pub fn weight(&self, t: Term) -> f64 {
        match t {
            Term::Recon => self.recon,
            Term::Code => self.code,
            Term::Commit => self.commit,
            Term::Mos => self.mos,
            Term::Wavlm => self.wavlm,
            Term::Formant => self.formant,
        }
    }

    pub fn set_weight(&mut self, t: Term, w: f64) {
        match t {
            Term::Recon => self.recon = w,
            Term::Code => self.code = w,
            Term::Commit => self.commit = w,
            Term::Mos => self.mos = w,
            Term::Wavlm => self.wavlm = w,
            Term::Formant => self.formant = w,
        }
    }

    pub fn enable_epoch(&self, t: Term) -> usize {
        match t {
            Term::Mos => self.mos_from_epoch,
            Term::Wavlm => self.wavlm_from_epoch,
            Term::Formant => self.formant_from_epoch,
            _ => 0,
        }
    }

    /// Whether `t` is computed at `epoch` (0-based). Zero-weight terms are skipped.
    pub fn active(&self, t: Term, epoch: usize) -> bool {
        self.weight(t) != 0.0 && epoch >= self.enable_epoch(t)
    }

    pub fn validate(&self) -> Result<()> {
        for t in TERMS {
            let w = self.weight(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {} must be finite and ≥ 0, got {w}", t.name())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Steps per learning-rate cycle; `None` means two epochs of steps.
    pub cycle_length_steps: Option<usize>,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 8,
            lr_min: 5e-4,
            lr_max: 2e-3,
            cycle_length_steps: None,
            early_stop_patience: 10,
            validation_fraction: 0.1,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min ≤ lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if matches!(self.cycle_length_steps, Some(c) if c < 2) {
            return bad("cycle_length_steps must be ≥ 2".into());
        }
        if self.early_stop_patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, batch size and max epochs must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }

    pub fn cycle_length(&self, steps_per_epoch: usize) -> usize {
        self.cycle_length_steps.unwrap_or(2 * steps_per_epoch).max(2)
    }
}

/// Triangular cyclic schedule: `lr_min` at the start of each cycle, rising
/// linearly to `lr_max` at mid-cycle and falling back.
pub fn cyclic_lr(step: u64, lr_min: f64, lr_max: f64, cycle_length: usize) -> f64 {
    let cycle = cycle_length.max(2) as f64;
    let pos = (step % cycle_length.max(2) as u64) as f64;
    let half = cycle / 2.0;
    let frac = if pos <= half { pos / half } else { (cycle - pos) / half };
    lr_min + (lr_max - lr_min) * frac
}

/// Frozen networks behind the perceptual terms. A missing component makes
/// its term inactive regardless of weight.
#[derive(Clone, Debug, Default)]
pub struct LossComponents<T> {
    pub quality: Option<QualityProxy<T>>,
    pub phoneme: Option<PhonemeProxy<T>>,
    pub formant: Option<FormantRegressor<T>>,
}

impl<T> LossComponents<T> {
    pub fn has(&self, t: Term) -> bool {
        match t {
            Term::Mos => self.quality.is_some(),
            Term::Wavlm => self.phoneme.is_some(),
            Term::Formant => self.formant.is_some(),
            _ => true,
        }
    }
}

/// Per-term values of one objective evaluation. Inactive terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub unweighted: [Option<f64>; 6],
    pub weighted: [Option<f64>; 6],
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, t: Term) -> Option<f64> {
        self.unweighted[t.index()]
    }

    pub fn get_weighted(&self, t: Term) -> Option<f64> {
        self.weighted[t.index()]
    }
}

/// Builds the weighted objective for one clip and returns it with its breakdown.
/// `frozen` replaces the quantizer assignment with a fixed one (used by the
/// finite-difference suite).
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &HierarchicalVqvae<T>,
    p: &Bound,
    x: Var,
    speaker: usize,
    frozen: Option<&[FrozenLevel<T>]>,
    weights: &LossWeights,
    components: &LossComponents<T>,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    let fwd = model
        .forward(tape, p, x, speaker, frozen)
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("model forward: {m}")),
            other => other,
        })?;
    let active = |t: Term| weights.active(t, epoch) && components.has(t);
    let mut terms: Vec<(Term, Var)> = Vec::with_capacity(6);
    if active(Term::Recon) {
        let v = reconstruction_loss(tape, x, fwd.x_dec).map_err(|e| in_term(e, Term::Recon))?;
        terms.push((Term::Recon, v));
    }
    if active(Term::Code) || active(Term::Commit) {
        let (code, commit) = match frozen {
            Some(f) => vq_losses_frozen(tape, &fwd.z, &fwd.q, f),
            None => vq_losses(tape, &fwd.z, &fwd.q),
        }
        .map_err(|e| in_term(e, Term::Code))?;
        if active(Term::Code) {
            terms.push((Term::Code, code));
        }
        if active(Term::Commit) {
            terms.push((Term::Commit, commit));
        }
    }
    if active(Term::Mos) {
        let q = components.quality.as_ref().expect("checked");
        let v = representation_loss(tape, q, x, fwd.x_dec).map_err(|e| in_term(e, Term::Mos))?;
        terms.push((Term::Mos, v));
    }
    if active(Term::Wavlm) {
        let ph = components.phoneme.as_ref().expect("checked");
        let v = representation_loss(tape, ph, x, fwd.x_dec).map_err(|e| in_term(e, Term::Wavlm))?;
        terms.push((Term::Wavlm, v));
    }
    if active(Term::Formant) {
        let r = components.formant.as_ref().expect("checked");
        let rp = r.store.bind(tape, false);
        let v = r.formant_loss(tape, &rp, x, fwd.x_dec).map_err(|e| in_term(e, Term::Formant))?;
        terms.push((Term::Formant, v));
    }

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (t, v) in terms {
        let value = tape.value(v).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {} is {value}", t.name())));
        }
        let w = weights.weight(t);
        breakdown.unweighted[t.index()] = Some(value);
        breakdown.weighted[t.index()] = Some(w * value);
        let wv = tape.scale(v, T::lit(w))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, wv)?,
            None => wv,
        });
    }
    let total = match total {
        Some(v) => v,
        None => {
            // All terms inactive; keep the graph connected so callers can
            // still backpropagate a zero loss.
            let z = tape.scale(fwd.x_dec, T::zero())?;
            tape.sum(z)?
        }
    };
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}

fn in_term(e: Error, t: Term) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("loss term {}: {m}", t.name())),
        other => other,
    }
}

#[cfg(test)]
mod tests;
