use std::path::Path;

use serde::Serialize;

use crate::dsp::{build_mel_filterbank, mel_to_audio, save_wav, MelSpectrogram, SpectrogramConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::formant::{FormantRegressor, NYQUIST_HZ};
use crate::scalar::Scalar;
use crate::training::{fit, Dataset, LossComponents, LossWeights, SpeakerCorpus, Term, TrainConfig};
use crate::vqvae::{HierarchicalVqvae, VqvaeConfig};

use super::adapter::{SpeakerEmbedder, Transcriber};
use super::eer::{mean_ci, EerResult, MeanCi};
use super::manifest::{write_conversion_manifest, write_manifest, ConversionRow, UtteranceRow};
use super::report::evaluate_manifest;

/// Which perceptual terms a variant keeps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AblationVariant {
    pub name: String,
    pub mos: bool,
    pub wavlm: bool,
    pub formant: bool,
}

impl AblationVariant {
    fn new(mos: bool, wavlm: bool, formant: bool) -> Self {
        let mut parts = Vec::new();
        if formant {
            parts.push("formant");
        }
        if wavlm {
            parts.push("wavlm");
        }
        if mos {
            parts.push("mos");
        }
        let name = match parts.len() {
            0 => "none".to_string(),
            3 => "all".to_string(),
            _ => parts.join("+"),
        };
        Self { name, mos, wavlm, formant }
    }

    /// `base` with the disabled perceptual weights set to zero.
    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        let mut w = *base;
        for (t, on) in [(Term::Mos, self.mos), (Term::Wavlm, self.wavlm), (Term::Formant, self.formant)] {
            if !on {
                w.set_weight(t, 0.0);
            }
        }
        w
    }
}

/// Baseline, all terms, each single term, and each pair.
pub fn standard_variants() -> Vec<AblationVariant> {
    vec![
        AblationVariant::new(false, false, false),
        AblationVariant::new(true, true, true),
        AblationVariant::new(false, false, true),
        AblationVariant::new(false, true, false),
        AblationVariant::new(true, false, false),
        AblationVariant::new(false, true, true),
        AblationVariant::new(true, false, true),
        AblationVariant::new(true, true, false),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub epochs: usize,
    pub final_train_recon: Option<f64>,
    pub quality: Option<MeanCi>,
    /// Mean absolute formant difference between input and reconstruction, Hz.
    pub formant_error_hz: Option<MeanCi>,
    pub cer: Option<MeanCi>,
    pub eer: Option<EerResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let ci = |c: &Option<MeanCi>| c.map_or("-".to_string(), |c| format!("{:.3} ± {:.3}", c.mean, c.half_width));
        let mut out = format!(
            "{:<16} {:>6} {:>18} {:>18} {:>18} {:>8}\n",
            "variant", "epochs", "quality", "formant err (Hz)", "CER", "EER"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>6} {:>18} {:>18} {:>18} {:>8}\n",
                r.variant.name,
                r.epochs,
                ci(&r.quality),
                ci(&r.formant_error_hz),
                ci(&r.cer),
                r.eer.map_or("-".to_string(), |e| format!("{:.4}", e.eer)),
            ));
        }
        out
    }
}

/// Mean absolute difference of predicted formants, in Hz, between two spectrograms.
pub fn formant_track_error<T: Scalar>(reg: &FormantRegressor<T>, x: &crate::diffcore::Tensor<f64>, x_dec: &crate::diffcore::Tensor<f64>) -> Result<f64> {
    let a = reg.predict(x)?;
    let b = reg.predict(x_dec)?;
    let d = a.values.data().iter().zip(b.values.data()).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(d * NYQUIST_HZ / a.values.len() as f64)
}

pub struct AblationSetup<'a, T> {
    pub corpus: &'a SpeakerCorpus,
    pub spectrogram: SpectrogramConfig,
    pub model: VqvaeConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub components: &'a LossComponents<T>,
    pub griffin_lim_iterations: usize,
    pub transcriber: &'a dyn Transcriber,
    pub embedder: &'a dyn SpeakerEmbedder,
    pub out_dir: &'a Path,
}

/// Per-variant model quality on the validation clips.
pub struct VariantEval {
    pub quality: Option<MeanCi>,
    pub formant_error_hz: Option<MeanCi>,
}

/// Quality-proxy scores and formant error of reconstructions of `clips`.
pub fn evaluate_reconstructions<T: Scalar>(
    model: &HierarchicalVqvae<T>,
    data: &Dataset,
    clips: &[usize],
    components: &LossComponents<T>,
) -> Result<VariantEval> {
    let mut quality = Vec::new();
    let mut ferr = Vec::new();
    for &i in clips {
        let c = &data.clips[i];
        let rec = model.reconstruct(&c.mel, &data.speakers[c.speaker])?;
        if let Some(q) = &components.quality {
            quality.push(q.quality_score(&rec)?);
        }
        if let Some(r) = &components.formant {
            ferr.push(formant_track_error(r, &c.mel, &rec)?);
        }
    }
    Ok(VariantEval {
        quality: mean_ci(&quality),
        formant_error_hz: mean_ci(&ferr),
    })
}

/// Trains one model per variant with identical data, seed and budget, and
/// evaluates each on the validation split (all clips if it is empty).
/// Converted audio goes to `out_dir/<variant>/`.
pub fn ablation_run<T: Scalar>(setup: &AblationSetup<'_, T>, variants: &[AblationVariant]) -> Result<AblationTable> {
    let corpus = setup.corpus;
    let data = Dataset::from_corpus(corpus)?;
    let (_, val) = data.split(setup.train.validation_fraction, setup.train.seed);
    let eval_idx: Vec<usize> = if val.is_empty() { (0..data.len()).collect() } else { val };
    let fb = build_mel_filterbank(&setup.spectrogram, SAMPLE_RATE)?;

    let corpus_dir = setup.out_dir.join("corpus");
    std::fs::create_dir_all(&corpus_dir).map_err(|e| Error::io(&corpus_dir, e))?;
    let pool: Vec<UtteranceRow> = corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let path = corpus_dir.join(format!("utt{i:04}.wav"));
            save_wav(&path, &u.audio)?;
            let s = &corpus.speakers[u.speaker];
            Ok(UtteranceRow {
                audio_path: path,
                speaker_id: s.id.clone(),
                gender: s.gender.clone(),
                accent: s.accent.clone(),
                transcript: u.transcript.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&corpus_dir.join("manifest.tsv"), &pool)?;

    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let model = HierarchicalVqvae::<T>::new(setup.model.clone(), &data.speakers, setup.model_seed)?;
        let result = fit(model, &data, setup.train, v.weights(&setup.weights), setup.components)?;
        let model = result.model;
        let ev = evaluate_reconstructions(&model, &data, &eval_idx, setup.components)?;

        let dir = setup.out_dir.join(&v.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n_spk = data.speakers.len();
        let mut conv_rows = Vec::with_capacity(eval_idx.len());
        for &i in &eval_idx {
            let c = &data.clips[i];
            let target = &data.speakers[(c.speaker + 1) % n_spk];
            let mel = model.convert_speaker(&c.mel, target)?;
            let mel = MelSpectrogram::new(mel, setup.spectrogram, SAMPLE_RATE)?;
            let audio = mel_to_audio(&mel, &fb, setup.griffin_lim_iterations, i as u64, None)?;
            let path = dir.join(format!("conv{i:04}.wav"));
            save_wav(&path, &audio)?;
            conv_rows.push(ConversionRow {
                source: pool[i].clone(),
                source_path: pool[i].audio_path.clone(),
                target_speaker_id: target.clone(),
                converted_path: path,
            });
        }
        write_conversion_manifest(&dir.join("conversions.tsv"), &conv_rows)?;
        let report = evaluate_manifest(&conv_rows, Some(&pool), setup.transcriber, setup.embedder)?;
        rows.push(AblationRow {
            variant: v.clone(),
            epochs: result.history.len(),
            final_train_recon: result.history.last().and_then(|h| h.train.get(Term::Recon)),
            quality: ev.quality,
            formant_error_hz: ev.formant_error_hz,
            cer: report.cer,
            eer: report.eer,
        });
    }
    Ok(AblationTable { rows })
}
