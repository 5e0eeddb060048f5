use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::Container;
use crate::dsp::{build_mel_filterbank, log_mel_with, MelSpectrogram, SpectrogramConfig, SAMPLE_RATE};
use crate::error::{Error, Result};

use super::{synth_vowel, Formant, FormantTrack};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub mel: MelSpectrogram,
    pub labels: FormantTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub seed: u64,
    pub items: Vec<SynthItem>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthCorpusConfig {
    pub duration: f64,
    pub spectrogram: SpectrogramConfig,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            duration: 0.5,
            spectrogram: SpectrogramConfig::default(),
        }
    }
}

pub fn build_synth_corpus(n_items: usize, seed: u64) -> Result<SynthCorpus> {
    build_synth_corpus_with(n_items, seed, &SynthCorpusConfig::default())
}

/// Random steady vowels labelled with their synthesis formants. Item `i`
/// draws from its own generator stream, so the result does not depend on
/// thread scheduling.
pub fn build_synth_corpus_with(n_items: usize, seed: u64, cfg: &SynthCorpusConfig) -> Result<SynthCorpus> {
    if n_items == 0 {
        return Err(Error::Config("corpus needs at least one item".into()));
    }
    let fb = build_mel_filterbank(&cfg.spectrogram, SAMPLE_RATE)?;
    let items = (0..n_items)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let f1 = rng.random_range(250.0..=900.0);
            let f2 = rng.random_range(f1 + 200.0..=2500.0);
            let f3 = rng.random_range(f2 + 300.0..=3500.0);
            let f0 = rng.random_range(80.0..=300.0);
            let formants = [
                Formant { freq: f1, bandwidth: rng.random_range(40.0..=90.0) },
                Formant { freq: f2, bandwidth: rng.random_range(60.0..=120.0) },
                Formant { freq: f3, bandwidth: rng.random_range(80.0..=160.0) },
            ];
            let audio = synth_vowel(f0, &formants, cfg.duration, SAMPLE_RATE)?;
            let mel = log_mel_with(&audio, &cfg.spectrogram, &fb)?;
            let labels = FormantTrack::constant_hz(mel.num_frames(), &[f1, f2, f3])?;
            Ok(SynthItem { mel, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus { seed, items })
}

impl SynthCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("synth-corpus");
        c.set_meta("count", self.items.len());
        c.set_meta("seed", self.seed);
        for (i, item) in self.items.iter().enumerate() {
            c.put_tensor(&format!("item.{i}.mel"), &item.mel.frames)?;
            c.put_tensor(&format!("item.{i}.labels"), &item.labels.values)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("synth-corpus")?;
        let count: usize = c.meta_parse("count")?;
        let seed = c.meta_parse("seed")?;
        let cfg = SpectrogramConfig::default();
        let items = (0..count)
            .map(|i| {
                Ok(SynthItem {
                    mel: MelSpectrogram::new(c.tensor(&format!("item.{i}.mel"))?, cfg, SAMPLE_RATE)?,
                    labels: FormantTrack::new(c.tensor(&format!("item.{i}.labels"))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, items })
    }
}
