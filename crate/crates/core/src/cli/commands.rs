use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::container::Container;
use crate::diffcore::Tensor;
use crate::dsp::{build_mel_filterbank, clip_frames, load_wav, log_mel_with, mel_to_audio, resample, save_wav, AudioBuffer, MelFilterbank, MelSpectrogram, SpectrogramConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, evaluate_manifest, read_conversion_manifest, read_manifest, standard_variants, write_conversion_manifest,
    write_manifest, AblationSetup, ConversionRow, MfccEmbedder, SpeakerEmbedder, SubprocessAdapter, Transcriber, UtteranceRow,
    VowelTranscriber,
};
use crate::formant::{build_synth_corpus_with, train_formant_regressor, FormantRegressor, SynthCorpus};
use crate::gradsuite::run_gradient_suite;
use crate::perceploss::{pretrain_quality_proxy, PhonemeProxy, QualityProxy};
use crate::scalar::Scalar;
use crate::training::{build_speaker_corpus, Clip, Dataset, LossComponents, Precision, SpeakerCorpus, Trainer, TERMS};
use crate::vqvae::{pad_frames, trim_frames, HierarchicalVqvae};

use super::Outputs;

macro_rules! by_precision {
    ($p:expr, $f:ident($($a:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

/// Runs `f` on a pool of `threads` workers (0: one per core).
fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn corpus_rows(corpus: &SpeakerCorpus, out: &mut Outputs, dir: &str) -> Result<Vec<UtteranceRow>> {
    corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let path = out.path(format!("{dir}/utt{i:04}.wav"))?;
            save_wav(&path, &u.audio)?;
            out.record(path.clone());
            let s = &corpus.speakers[u.speaker];
            Ok(UtteranceRow {
                audio_path: path,
                speaker_id: s.id.clone(),
                gender: s.gender.clone(),
                accent: s.accent.clone(),
                transcript: u.transcript.clone(),
            })
        })
        .collect()
}

pub fn synth_corpus(mut cfg: RunConfig, out: &Path, n: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(n) = n {
        cfg.data.formant_items = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let mut outputs = Outputs::create(out)?;
    let vowels = build_synth_corpus_with(cfg.data.formant_items, cfg.data.seed, &cfg.synth_corpus())?;
    let p = outputs.path("formant_corpus.pvcx")?;
    vowels.to_container()?.save(&p)?;
    outputs.record(p);

    let corpus = build_speaker_corpus(&cfg.speaker_corpus(), cfg.data.seed)?;
    let rows = corpus_rows(&corpus, &mut outputs, "speakers")?;
    let manifest = outputs.path("manifest.tsv")?;
    write_manifest(&manifest, &rows)?;
    outputs.record(manifest);

    // Every utterance converted to the next speaker; eval fills these in.
    let ids = corpus.speaker_ids();
    let conversions: Vec<ConversionRow> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = ids.iter().position(|id| *id == r.speaker_id).expect("known speaker");
            Ok(ConversionRow {
                source: r.clone(),
                source_path: r.audio_path.clone(),
                target_speaker_id: ids[(s + 1) % ids.len()].clone(),
                converted_path: outputs.root().join(format!("converted/conv{i:04}.wav")),
            })
        })
        .collect::<Result<_>>()?;
    let conv = outputs.path("conversions.tsv")?;
    write_conversion_manifest(&conv, &conversions)?;
    outputs.record(conv);
    outputs.write_text("config.txt", &cfg.to_text())?;
    println!(
        "vowel items: {}  speakers: {}  utterances: {}",
        vowels.len(),
        corpus.speakers.len(),
        corpus.utterances.len()
    );
    outputs.finish()
}

fn load_synth_corpus(path: &Path) -> Result<SynthCorpus> {
    let file = if path.is_dir() { path.join("formant_corpus.pvcx") } else { path.to_path_buf() };
    SynthCorpus::from_container(&Container::load(&file)?)
}

fn train_formant_typed<T: Scalar>(cfg: &RunConfig, corpus: &SynthCorpus, outputs: &mut Outputs) -> Result<()> {
    let (reg, report) = train_formant_regressor::<T>(corpus, &cfg.formant)?;
    let p = outputs.path("formant.pvcx")?;
    reg.to_container()?.save(&p)?;
    outputs.record(p);
    let summary = serde_json::json!({
        "train_items": report.train_items,
        "heldout_items": report.heldout_items,
        "heldout_mse": report.heldout_mse,
        "train_mse": report.train_mse,
    });
    outputs.write_text("formant_report.json", &json(&summary))?;
    println!(
        "formant regressor: {} epochs, held-out normalized MSE {}",
        report.train_mse.len(),
        report.heldout_mse.map_or("-".into(), |m| format!("{m:.3e}"))
    );
    Ok(())
}

pub fn train_formant(cfg: RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let corpus = load_synth_corpus(corpus)?;
    let mut outputs = Outputs::create(out)?;
    in_pool(cfg.threads, || by_precision!(cfg.train.precision, train_formant_typed(&cfg, &corpus, &mut outputs)))??;
    outputs.finish()
}

fn pretrain_quality_typed<T: Scalar>(cfg: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let (proxy, report) = pretrain_quality_proxy::<T>(&cfg.quality_pretrain())?;
    let p = outputs.path("quality.pvcx")?;
    proxy.to_container()?.save(&p)?;
    outputs.record(p);
    let summary = serde_json::json!({
        "train_items": report.train_items,
        "heldout_items": report.heldout_items,
        "heldout_mse": report.heldout_mse,
        "train_mse": report.train_mse,
    });
    outputs.write_text("quality_report.json", &json(&summary))?;
    println!(
        "quality proxy: {} epochs, held-out MSE {}",
        report.train_mse.len(),
        report.heldout_mse.map_or("-".into(), |m| format!("{m:.4}"))
    );
    Ok(())
}

pub fn pretrain_quality(cfg: RunConfig, out: &Path) -> Result<()> {
    let mut outputs = Outputs::create(out)?;
    in_pool(cfg.threads, || by_precision!(cfg.train.precision, pretrain_quality_typed(&cfg, &mut outputs)))??;
    outputs.finish()
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.tsv")
    } else {
        data.to_path_buf()
    }
}

fn to_model_rate(audio: AudioBuffer) -> Result<AudioBuffer> {
    if audio.sample_rate == SAMPLE_RATE {
        Ok(audio)
    } else {
        resample(&audio, SAMPLE_RATE)
    }
}

/// Log-mel clips of every manifest utterance. Utterances shorter than one
/// clip are used whole; frame counts are trimmed to the model's multiple.
fn load_dataset(rows: &[UtteranceRow], cfg: &RunConfig) -> Result<Dataset> {
    let speakers: Vec<String> = rows.iter().map(|r| r.speaker_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let fb = build_mel_filterbank(&cfg.spectrogram, SAMPLE_RATE)?;
    let factor = cfg.model.total_factor();
    let per_row: Vec<Vec<Clip>> = rows
        .par_iter()
        .map(|r| {
            let audio = to_model_rate(load_wav(&r.audio_path)?)?;
            let mel = log_mel_with(&audio, &cfg.spectrogram, &fb)?;
            let mut clips = clip_frames(&mel, cfg.data.clip_seconds)?;
            if clips.is_empty() {
                clips.push(mel);
            }
            let speaker = speakers.binary_search(&r.speaker_id).expect("collected above");
            Ok(clips
                .into_iter()
                .map(|c| trim_frames(&c.frames, factor))
                .filter(|m| m.rows() > 0)
                .map(|mel| Clip { mel, speaker })
                .collect())
        })
        .collect::<Result<_>>()?;
    Dataset::new(per_row.into_iter().flatten().collect(), speakers)
}

fn save_model<T: Scalar>(model: &HierarchicalVqvae<T>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut c = model.to_container()?;
    c.set_meta("run.config", cfg.to_text());
    c.save(path)
}

fn load_components<T: Scalar>(cfg: &RunConfig, formant: Option<&Path>, quality: Option<&Path>) -> Result<LossComponents<T>> {
    Ok(LossComponents {
        quality: quality.map(|p| QualityProxy::<T>::from_container(&Container::load(p)?)).transpose()?,
        phoneme: Some(PhonemeProxy::<T>::new(cfg.spectrogram.mel_bands, cfg.model_seed.wrapping_add(1))?),
        formant: formant.map(|p| FormantRegressor::<T>::from_container(&Container::load(p)?)).transpose()?,
    })
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    data: &Dataset,
    outputs: &mut Outputs,
    formant: Option<&Path>,
    quality: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let comps = load_components::<T>(cfg, formant, quality)?;
    let active: Vec<&str> = TERMS
        .iter()
        .filter(|t| cfg.loss.weight(**t) != 0.0 && comps.has(**t))
        .map(|t| t.name())
        .collect();
    println!("training on {} clips, {} speakers; loss terms: {}", data.len(), data.speakers.len(), active.join(", "));
    let mut trainer = match resume {
        Some(p) => Trainer::load_checkpoint(p, data, &comps)?,
        None => {
            let model = HierarchicalVqvae::<T>::new(cfg.model_config(), &data.speakers, cfg.model_seed)?;
            Trainer::new(model, data, cfg.train, cfg.loss, &comps)?
        }
    };
    trainer.run()?;
    let ckpt = outputs.path("checkpoint.pvcx")?;
    trainer.save_checkpoint(&ckpt)?;
    outputs.record(ckpt);
    let result = trainer.into_result();
    for r in &result.history {
        println!(
            "epoch {:>3}  recon {:.5}  validation {}",
            r.epoch,
            r.train.get(crate::training::Term::Recon).unwrap_or(f64::NAN),
            r.validation_score.map_or("-".into(), |v| format!("{v:.5}"))
        );
    }
    let model_path = outputs.path("model.pvcx")?;
    save_model(&result.model, cfg, &model_path)?;
    outputs.record(model_path);
    if let Some(ph) = &comps.phoneme {
        let p = outputs.path("phoneme.pvcx")?;
        ph.to_container()?.save(&p)?;
        outputs.record(p);
    }
    outputs.write_text("history.json", &json(&result.history))?;
    let summary = serde_json::json!({
        "epochs": result.history.len(),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "loss_terms": active,
        "clips": data.len(),
        "speakers": data.speakers,
    });
    outputs.write_text("train_report.json", &json(&summary))?;
    Ok(())
}

pub fn train(cfg: RunConfig, data: &Path, out: &Path, formant: Option<&Path>, quality: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let rows = read_manifest(&manifest_path(data))?;
    let mut outputs = Outputs::create(out)?;
    outputs.write_text("config.txt", &cfg.to_text())?;
    in_pool(cfg.threads, || {
        let dataset = load_dataset(&rows, &cfg)?;
        by_precision!(cfg.train.precision, train_typed(&cfg, &dataset, &mut outputs, formant, quality, resume))
    })??;
    outputs.finish()
}

struct LoadedModel {
    model: HierarchicalVqvae<f64>,
    spectrogram: SpectrogramConfig,
    fb: MelFilterbank,
    griffin_lim_iterations: usize,
}

fn load_model(path: &Path, explicit: Option<&RunConfig>) -> Result<LoadedModel> {
    let c = Container::load(path)?;
    let model = HierarchicalVqvae::<f64>::read_from(&c)?;
    let stored = match c.meta("run.config") {
        Ok(text) => Some(RunConfig::parse(text)?),
        Err(_) => None,
    };
    let cfg = explicit.cloned().or(stored).unwrap_or_default();
    if cfg.spectrogram.mel_bands != model.config.mel_bands {
        return Err(Error::Config(format!(
            "spectrogram.mel_bands = {} but the model expects {}",
            cfg.spectrogram.mel_bands, model.config.mel_bands
        )));
    }
    let fb = build_mel_filterbank(&cfg.spectrogram, SAMPLE_RATE)?;
    Ok(LoadedModel {
        model,
        spectrogram: cfg.spectrogram,
        fb,
        griffin_lim_iterations: cfg.eval.griffin_lim_iterations,
    })
}

struct Converted {
    audio: AudioBuffer,
    frames: usize,
    padded_frames: usize,
}

/// log-mel → speaker swap → Griffin-Lim, matching the input's length. The
/// frame count is padded to the model's multiple (repeating the last
/// frame) and the padding is dropped before vocoding.
fn convert_audio(m: &LoadedModel, audio: &AudioBuffer, target: &str, seed: u64) -> Result<Converted> {
    let audio = to_model_rate(audio.clone())?;
    let mel = log_mel_with(&audio, &m.spectrogram, &m.fb)?;
    let frames = mel.num_frames();
    let padded = pad_frames(&mel.frames, m.model.config.total_factor());
    let converted = m.model.convert_speaker(&padded, target)?;
    let kept: Tensor<f64> = converted.slice_rows(0, frames);
    let mel = MelSpectrogram::new(kept, m.spectrogram, SAMPLE_RATE)?;
    let out = mel_to_audio(&mel, &m.fb, m.griffin_lim_iterations, seed, Some(audio.samples.len()))?;
    Ok(Converted {
        audio: out,
        frames,
        padded_frames: padded.rows(),
    })
}

pub fn convert(cfg: Option<RunConfig>, model: &Path, input: &Path, target: &str, out: &Path) -> Result<()> {
    let m = load_model(model, cfg.as_ref())?;
    let audio = load_wav(input)?;
    let c = convert_audio(&m, &audio, target, 0)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_wav(out, &c.audio)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out,
            "frames": c.frames,
            "padded_frames": c.padded_frames,
            "input_seconds": audio.duration_seconds(),
            "output_seconds": c.audio.duration_seconds(),
        })
    );
    Ok(())
}

fn transcriber(spec: &str) -> Result<Box<dyn Transcriber>> {
    Ok(match spec {
        "vowel" => Box::new(VowelTranscriber::default()),
        cmd => Box::new(SubprocessAdapter::from_command(cmd)?),
    })
}

fn embedder(spec: &str) -> Result<Box<dyn SpeakerEmbedder>> {
    Ok(match spec {
        "mfcc" => Box::new(MfccEmbedder),
        cmd => Box::new(SubprocessAdapter::from_command(cmd)?),
    })
}

pub fn eval(cfg: RunConfig, manifest: &Path, model: Option<&Path>, enrollment: Option<&Path>, out: &Path, jobs: Option<usize>) -> Result<()> {
    let rows = read_conversion_manifest(manifest)?;
    let pool = enrollment.map(read_manifest).transpose()?;
    let mut outputs = Outputs::create(out)?;
    let missing: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].converted_path.is_file()).collect();
    let jobs = jobs.unwrap_or(cfg.eval.jobs);
    let report = in_pool(jobs, || -> Result<_> {
        if !missing.is_empty() {
            let path = model.ok_or_else(|| {
                Error::Data(format!(
                    "{} converted files are missing (first: {}) and no --model was given",
                    missing.len(),
                    rows[missing[0]].converted_path.display()
                ))
            })?;
            let m = load_model(path, Some(&cfg))?;
            missing
                .par_iter()
                .map(|&i| {
                    let r = &rows[i];
                    let c = convert_audio(&m, &load_wav(&r.source_path)?, &r.target_speaker_id, i as u64)?;
                    if let Some(dir) = r.converted_path.parent() {
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    }
                    save_wav(&r.converted_path, &c.audio)
                })
                .collect::<Result<Vec<()>>>()?;
            println!("generated {} conversions", missing.len());
        }
        let t = transcriber(&cfg.eval.transcriber)?;
        let e = embedder(&cfg.eval.embedder)?;
        evaluate_manifest(&rows, pool.as_deref(), t.as_ref(), e.as_ref())
    })??;
    for &i in &missing {
        outputs.record(rows[i].converted_path.clone());
    }
    outputs.write_text("report.json", &report.to_json())?;
    let text = report.to_text();
    outputs.write_text("report.txt", &text)?;
    print!("{text}");
    outputs.finish()
}

fn ablate_typed<T: Scalar>(cfg: &RunConfig, outputs: &mut Outputs, formant: Option<&Path>, quality: Option<&Path>) -> Result<()> {
    let formant_path = match formant {
        Some(p) => p.to_path_buf(),
        None => {
            let vowels = build_synth_corpus_with(cfg.data.formant_items, cfg.data.seed, &cfg.synth_corpus())?;
            let (reg, _) = train_formant_regressor::<T>(&vowels, &cfg.formant)?;
            let p = outputs.path("formant.pvcx")?;
            reg.to_container()?.save(&p)?;
            outputs.record(p.clone());
            p
        }
    };
    let quality_path = match quality {
        Some(p) => p.to_path_buf(),
        None => {
            let (proxy, _) = pretrain_quality_proxy::<T>(&cfg.quality_pretrain())?;
            let p = outputs.path("quality.pvcx")?;
            proxy.to_container()?.save(&p)?;
            outputs.record(p.clone());
            p
        }
    };
    let comps = load_components::<T>(cfg, Some(&formant_path), Some(&quality_path))?;
    let corpus = build_speaker_corpus(&cfg.speaker_corpus(), cfg.data.seed)?;
    let t = transcriber(&cfg.eval.transcriber)?;
    let e = embedder(&cfg.eval.embedder)?;
    let setup = AblationSetup {
        corpus: &corpus,
        spectrogram: cfg.spectrogram,
        model: cfg.model_config(),
        model_seed: cfg.model_seed,
        train: cfg.train,
        weights: cfg.loss,
        components: &comps,
        griffin_lim_iterations: cfg.eval.griffin_lim_iterations,
        transcriber: t.as_ref(),
        embedder: e.as_ref(),
        out_dir: outputs.root(),
    };
    let table = ablation_run(&setup, &standard_variants())?;
    for entry in walk(outputs.root())? {
        outputs.record(entry);
    }
    outputs.write_text("ablation.json", &table.to_json())?;
    let text = table.to_text();
    outputs.write_text("ablation.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// Every file below `dir`.
fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "MANIFEST") {
                out.push(p);
            }
        }
    }
    Ok(out)
}

pub fn ablate(cfg: RunConfig, out: &Path, formant: Option<&Path>, quality: Option<&Path>) -> Result<()> {
    let mut outputs = Outputs::create(out)?;
    outputs.write_text("config.txt", &cfg.to_text())?;
    in_pool(cfg.threads, || by_precision!(cfg.train.precision, ablate_typed(&cfg, &mut outputs, formant, quality)))??;
    outputs.finish()
}

pub fn grad_check(out: Option<&Path>) -> Result<()> {
    let checks = run_gradient_suite()?;
    for c in &checks {
        println!(
            "{:<32} max_rel_error {:.3e}  coords {:>5}  {}",
            c.name,
            c.max_rel_error,
            c.checked,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        let mut outputs = Outputs::create(dir)?;
        outputs.write_text("grad_check.json", &json(&checks))?;
        outputs.finish()?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks exceed 1e-4", checks.len())));
    }
    Ok(())
}
