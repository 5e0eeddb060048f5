//! Flat `section.key = value` run configuration.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped.
//! A later assignment to the same key overrides an earlier one, and the
//! environment variable `PERCEVOX_<SECTION>_<KEY>` (upper case) overrides
//! the file. Unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::dsp::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::formant::{RegressorTrainConfig, SynthCorpusConfig};
use crate::perceploss::QualityPretrainConfig;
use crate::training::{LossWeights, Precision, SpeakerCorpusConfig, TrainConfig};
use crate::vqvae::VqvaeConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub clip_seconds: f64,
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Items in the synthetic vowel corpus used for the formant regressor.
    pub formant_items: usize,
    pub formant_item_seconds: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clip_seconds: 2.0,
            n_speakers: 4,
            utterances_per_speaker: 6,
            formant_items: 500,
            formant_item_seconds: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// `vowel` for the built-in transcriber, otherwise an adapter command line.
    pub transcriber: String,
    /// `mfcc` for the built-in embedder, otherwise an adapter command line.
    pub embedder: String,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub griffin_lim_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            transcriber: "vowel".into(),
            embedder: "mfcc".into(),
            jobs: 0,
            griffin_lim_iterations: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spectrogram: SpectrogramConfig,
    pub data: DataConfig,
    pub model: VqvaeConfig,
    pub model_seed: u64,
    pub loss: LossWeights,
    pub train: TrainConfig,
    /// Rayon threads for training; 0 uses every core, 1 is the deterministic single-threaded mode.
    pub threads: usize,
    pub formant: RegressorTrainConfig,
    pub quality: QualityPretrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spectrogram: SpectrogramConfig::default(),
            data: DataConfig::default(),
            model: VqvaeConfig::default(),
            model_seed: 0,
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            threads: 0,
            formant: RegressorTrainConfig::default(),
            quality: QualityPretrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, bool, Precision);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn show(&self) -> String {
        // Debug prints the shortest representation that parses back exactly.
        format!("{self:?}")
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

/// `auto` or a count.
impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{e} (expected a count or `auto`)"))
        }
    }
    fn show(&self) -> String {
        self.map_or("auto".into(), |v| v.to_string())
    }
}

impl<const N: usize> ConfigValue for [usize; N] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
            .collect::<std::result::Result<_, _>>()?;
        parts
            .try_into()
            .map_err(|p: Vec<usize>| format!("expected {N} comma-separated values, got {}", p.len()))
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $doc:literal,)*) => {
        /// Every key with a one-line description, in dump order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            /// Assigns one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown key {key}"))),
                }
            }

            /// `(key, value)` for every key.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::show(&self.$($field).+))),*]
            }
        }
    };
}

config_keys! {
    "spectrogram.window_length" => spectrogram.window_length : "STFT window length in samples",
    "spectrogram.hop_length" => spectrogram.hop_length : "STFT hop in samples",
    "spectrogram.fft_size" => spectrogram.fft_size : "FFT size",
    "spectrogram.mel_bands" => spectrogram.mel_bands : "mel bands (also the model input width)",
    "spectrogram.fmin" => spectrogram.fmin : "lowest mel filter edge, Hz",
    "spectrogram.fmax" => spectrogram.fmax : "highest mel filter edge, Hz",
    "spectrogram.log_floor" => spectrogram.log_floor : "power floor before the logarithm",
    "data.clip_seconds" => data.clip_seconds : "training clip length, seconds",
    "data.n_speakers" => data.n_speakers : "speakers in the synthetic speaker corpus",
    "data.utterances_per_speaker" => data.utterances_per_speaker : "utterances per synthetic speaker",
    "data.formant_items" => data.formant_items : "items in the synthetic vowel corpus",
    "data.formant_item_seconds" => data.formant_item_seconds : "length of each synthetic vowel, seconds",
    "data.seed" => data.seed : "corpus synthesis seed",
    "model.channels" => model.channels : "encoder and decoder hidden channels",
    "model.latent_dim" => model.latent_dim : "code vector dimension",
    "model.codes" => model.codes : "codebook entries per level",
    "model.speaker_dim" => model.speaker_dim : "speaker embedding dimension",
    "model.downsample" => model.downsample : "cumulative downsampling per level, comma-separated",
    "model.leaky_slope" => model.leaky_slope : "leaky ReLU negative slope",
    "model.input_mean" => model.input_mean : "input log-mel normalization mean",
    "model.input_std" => model.input_std : "input log-mel normalization scale",
    "model.seed" => model_seed : "parameter initialization seed",
    "loss.recon" => loss.recon : "reconstruction weight",
    "loss.code" => loss.code : "codebook weight",
    "loss.commit" => loss.commit : "commitment weight",
    "loss.mos" => loss.mos : "quality-proxy representation weight",
    "loss.wavlm" => loss.wavlm : "phonetic representation weight",
    "loss.formant" => loss.formant : "formant loss weight",
    "loss.mos_from_epoch" => loss.mos_from_epoch : "first epoch (0-based) using the quality term",
    "loss.wavlm_from_epoch" => loss.wavlm_from_epoch : "first epoch (0-based) using the phonetic term",
    "loss.formant_from_epoch" => loss.formant_from_epoch : "first epoch (0-based) using the formant term",
    "train.max_epochs" => train.max_epochs : "epoch budget",
    "train.batch_size" => train.batch_size : "clips per step",
    "train.lr_min" => train.lr_min : "cyclic learning-rate lower bound",
    "train.lr_max" => train.lr_max : "cyclic learning-rate upper bound",
    "train.cycle_length_steps" => train.cycle_length_steps : "steps per learning-rate cycle, or auto (two epochs)",
    "train.early_stop_patience" => train.early_stop_patience : "epochs without validation improvement before stopping",
    "train.validation_fraction" => train.validation_fraction : "fraction of clips held out for validation",
    "train.seed" => train.seed : "split, shuffling and stochastic-term seed",
    "train.precision" => train.precision : "f32 or f64",
    "train.threads" => threads : "worker threads, 0 for all cores, 1 for single-threaded",
    "formant.epochs" => formant.epochs : "formant regressor epochs",
    "formant.batch_size" => formant.batch_size : "formant regressor batch size",
    "formant.lr" => formant.lr : "formant regressor learning rate",
    "formant.heldout_fraction" => formant.heldout_fraction : "formant regressor held-out fraction",
    "formant.seed" => formant.seed : "formant regressor seed",
    "quality.n_items" => quality.n_items : "degraded items for quality-proxy pretraining",
    "quality.epochs" => quality.epochs : "quality-proxy epochs",
    "quality.batch_size" => quality.batch_size : "quality-proxy batch size",
    "quality.lr" => quality.lr : "quality-proxy learning rate",
    "quality.heldout_fraction" => quality.heldout_fraction : "quality-proxy held-out fraction",
    "quality.seed" => quality.seed : "quality-proxy seed",
    "eval.transcriber" => eval.transcriber : "vowel, or an adapter command line",
    "eval.embedder" => eval.embedder : "mfcc, or an adapter command line",
    "eval.jobs" => eval.jobs : "evaluation threads, 0 for all cores",
    "eval.griffin_lim_iterations" => eval.griffin_lim_iterations : "Griffin-Lim iterations when vocoding",
}

/// Environment variable overriding `key`.
pub fn env_var_name(key: &str) -> String {
    format!("PERCEVOX_{}", key.replace('.', "_").to_uppercase())
}

impl RunConfig {
    /// Parses config text, then applies overrides from `env`.
    pub fn parse_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        for (key, _) in KEYS {
            if let Some(v) = env(&env_var_name(key)) {
                cfg.set(key, v.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text without environment overrides.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, |_| None)
    }

    /// Reads `path` (or only defaults when `None`) and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse_with_env(&text, |k| std::env::var(k).ok())
    }

    /// One `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.data.clip_seconds >= 0.5) {
            return Err(Error::Config(format!("data.clip_seconds = {} is below 0.5", self.data.clip_seconds)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> VqvaeConfig {
        VqvaeConfig {
            mel_bands: self.spectrogram.mel_bands,
            ..self.model.clone()
        }
    }

    pub fn speaker_corpus(&self) -> SpeakerCorpusConfig {
        SpeakerCorpusConfig {
            n_speakers: self.data.n_speakers,
            utterances_per_speaker: self.data.utterances_per_speaker,
            clip_seconds: self.data.clip_seconds,
            spectrogram: self.spectrogram,
            frame_multiple: self.model.total_factor(),
        }
    }

    pub fn synth_corpus(&self) -> SynthCorpusConfig {
        SynthCorpusConfig {
            duration: self.data.formant_item_seconds,
            spectrogram: self.spectrogram,
        }
    }

    pub fn quality_pretrain(&self) -> QualityPretrainConfig {
        QualityPretrainConfig {
            spectrogram: self.spectrogram,
            ..self.quality
        }
    }

    /// Markdown table of every key, its default and description.
    pub fn reference_table() -> String {
        let defaults = Self::default().entries();
        let mut out = String::from("| key | default | description |\n|---|---|---|\n");
        for ((key, doc), (_, value)) in KEYS.iter().zip(defaults) {
            writeln!(out, "| `{key}` | `{value}` | {doc} |").expect("string write");
        }
        out
    }
}
