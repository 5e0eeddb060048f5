use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::{build_mel_filterbank, log_mel_with, AudioBuffer, SpectrogramConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::formant::{synth_sequence, Formant};
use crate::vqvae::trim_frames;

/// Reference vowel targets (F1, F2, F3) in Hz for an adult male tract.
pub const VOWELS: [(char, [f64; 3]); 5] = [
    ('a', [730.0, 1090.0, 2440.0]),
    ('e', [530.0, 1840.0, 2480.0]),
    ('i', [270.0, 2290.0, 3010.0]),
    ('o', [570.0, 840.0, 2410.0]),
    ('u', [300.0, 870.0, 2240.0]),
];

const BANDWIDTHS: [f64; 3] = [60.0, 90.0, 120.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerCorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub clip_seconds: f64,
    pub spectrogram: SpectrogramConfig,
    /// Frame counts are trimmed to a multiple of this.
    pub frame_multiple: usize,
}

impl Default for SpeakerCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            utterances_per_speaker: 6,
            clip_seconds: 2.0,
            spectrogram: SpectrogramConfig::default(),
            frame_multiple: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerInfo {
    pub id: String,
    pub gender: String,
    pub accent: String,
    /// Formant scale relative to the reference table.
    pub tract_scale: f64,
    pub f0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub transcript: String,
    pub audio: AudioBuffer,
    /// Log-mel frames, trimmed to the frame multiple.
    pub mel: crate::diffcore::Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerCorpus {
    pub speakers: Vec<SpeakerInfo>,
    pub utterances: Vec<Utterance>,
}

impl SpeakerCorpus {
    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.id.clone()).collect()
    }
}

/// Formants of vowel `v` for `speaker`. Accent "b" raises F1 and lowers F2 slightly.
pub fn speaker_formants(speaker: &SpeakerInfo, v: usize) -> Vec<Formant> {
    let (f1m, f2m) = if speaker.accent == "b" { (1.08, 0.94) } else { (1.0, 1.0) };
    let base = VOWELS[v].1;
    let f = [base[0] * f1m, base[1] * f2m, base[2]];
    f.iter()
        .zip(BANDWIDTHS)
        .map(|(&hz, bw)| Formant {
            freq: hz * speaker.tract_scale,
            bandwidth: bw * speaker.tract_scale,
        })
        .collect()
}

/// Synthetic speakers reading random vowel strings. Even speakers are "m"
/// (low f0, longer tract), odd speakers "f"; accents alternate in pairs.
pub fn build_speaker_corpus(cfg: &SpeakerCorpusConfig, seed: u64) -> Result<SpeakerCorpus> {
    if cfg.n_speakers == 0 || cfg.utterances_per_speaker == 0 {
        return Err(Error::Config("speaker corpus needs speakers and utterances".into()));
    }
    if !(cfg.clip_seconds >= 0.5) {
        return Err(Error::Config(format!("clip length {} s is below 0.5 s", cfg.clip_seconds)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers: Vec<SpeakerInfo> = (0..cfg.n_speakers)
        .map(|i| {
            let male = i % 2 == 0;
            SpeakerInfo {
                id: format!("spk{i:02}"),
                gender: if male { "m" } else { "f" }.into(),
                accent: if (i / 2) % 2 == 0 { "a" } else { "b" }.into(),
                tract_scale: if male { rng.random_range(0.9..1.0) } else { rng.random_range(1.05..1.15) },
                f0: if male { rng.random_range(95.0..140.0) } else { rng.random_range(180.0..240.0) },
            }
        })
        .collect();
    let fb = build_mel_filterbank(&cfg.spectrogram, SAMPLE_RATE)?;
    let n_samples = (cfg.clip_seconds * SAMPLE_RATE as f64).round() as usize;
    let total = cfg.n_speakers * cfg.utterances_per_speaker;
    let utterances = (0..total)
        .into_par_iter()
        .map(|u| {
            let s = u / cfg.utterances_per_speaker;
            let spk = &speakers[s];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + u as u64);
            let mut segments = Vec::new();
            let mut transcript = String::new();
            let mut t = 0.0;
            let mut prev = usize::MAX;
            while t < cfg.clip_seconds {
                // Consecutive repeats would merge into one vowel in the transcript.
                let mut v = rng.random_range(0..VOWELS.len() - 1);
                if v >= prev {
                    v += 1;
                }
                prev = v;
                let dur = rng.random_range(0.2..0.35);
                let f0 = spk.f0 * rng.random_range(0.95..1.05);
                segments.push((f0, speaker_formants(spk, v), dur));
                transcript.push(VOWELS[v].0);
                t += dur;
            }
            let mut audio = synth_sequence(&segments, SAMPLE_RATE)?;
            audio.samples.truncate(n_samples);
            let mel = log_mel_with(&audio, &cfg.spectrogram, &fb)?;
            let mel = trim_frames(&mel.frames, cfg.frame_multiple);
            Ok(Utterance {
                speaker: s,
                transcript,
                audio,
                mel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpeakerCorpus { speakers, utterances })
}
