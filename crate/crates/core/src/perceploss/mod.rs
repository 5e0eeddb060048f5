//! Feature-matching losses over frozen mel-domain networks, and the quality
//! proxy used for model selection.

mod degrade;
mod external;
mod extractors;

pub use degrade::{add_noise, degraded_mel, smear_bands, smear_frames, DEGRADATION_DURATION};
pub use external::{load_activations, representation_distance, save_activations};
pub use extractors::{
    pretrain_quality_proxy, PhonemeProxy, QualityPretrainConfig, QualityPretrainReport, QualityProxy, PHONEME_TAPS,
    QUALITY_TAPS,
};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A frozen network whose intermediate activations define a distance
/// between spectrograms.
pub trait FeatureExtractor<T: Scalar>: Sync {
    /// Names of the tapped layers, in the order [`Self::activations`] returns them.
    fn tapped_layers(&self) -> Vec<String>;

    /// `[frames, mel_bands]` → one `[frames, channels]` activation per tap.
    /// Parameters enter the tape as constants.
    fn activations(&self, tape: &mut Tape<T>, mel: Var) -> Result<Vec<Var>>;
}

/// Mean over taps of the mean squared activation difference. Activations of
/// `x` are detached, so only `x_dec` receives gradient.
pub fn representation_loss<T: Scalar, E: FeatureExtractor<T> + ?Sized>(
    tape: &mut Tape<T>,
    ex: &E,
    x: Var,
    x_dec: Var,
) -> Result<Var> {
    let a = tape.value(x).shape().to_vec();
    let b = tape.value(x_dec).shape().to_vec();
    if a != b {
        return Err(Error::shape("representation_loss", format!("{a:?} vs {b:?}")));
    }
    if a.first().copied().unwrap_or(0) == 0 {
        return Err(Error::shape("representation_loss", "empty spectrogram"));
    }
    let target = ex.activations(tape, x)?;
    let pred = ex.activations(tape, x_dec)?;
    tap_mean(tape, &target, &pred)
}

/// Shared tail of the loss: per-tap MSE against detached targets, averaged over taps.
pub(crate) fn tap_mean<T: Scalar>(tape: &mut Tape<T>, target: &[Var], pred: &[Var]) -> Result<Var> {
    if target.is_empty() || target.len() != pred.len() {
        return Err(Error::shape(
            "representation_loss",
            format!("{} target taps vs {} predicted", target.len(), pred.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&t, &p) in target.iter().zip(pred) {
        let t = tape.stop_gradient(t)?;
        let l = tape.mse(t, p)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("at least one tap"), T::lit(1.0 / target.len() as f64))
}
