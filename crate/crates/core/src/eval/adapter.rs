use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::Deserialize;

use crate::dsp::{load_wav, resample, AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::formant::{track_formants, LpcConfig, NYQUIST_HZ};
use crate::training::VOWELS;

use super::embed::reference_speaker_embedding;

/// `(id, audio path)` pairs handed to a backend.
pub type AudioItems = [(String, PathBuf)];

pub trait Transcriber: Sync {
    fn transcribe_files(&self, items: &AudioItems) -> Result<HashMap<String, String>>;
}

pub trait SpeakerEmbedder: Sync {
    fn embed_files(&self, items: &AudioItems) -> Result<HashMap<String, Vec<f64>>>;
}

/// Built-in MFCC-statistics embedder.
#[derive(Clone, Copy, Debug, Default)]
pub struct MfccEmbedder;

impl MfccEmbedder {
    pub fn embed(&self, audio: &AudioBuffer) -> Result<Vec<f64>> {
        reference_speaker_embedding(audio)
    }
}

impl SpeakerEmbedder for MfccEmbedder {
    fn embed_files(&self, items: &AudioItems) -> Result<HashMap<String, Vec<f64>>> {
        items
            .par_iter()
            .map(|(id, path)| Ok((id.clone(), self.embed(&load_wav(path)?)?)))
            .collect()
    }
}

/// Labels LPC formant frames with the nearest reference vowel and collapses
/// runs. A single formant scale per utterance absorbs tract length.
#[derive(Clone, Copy, Debug)]
pub struct VowelTranscriber {
    pub lpc: LpcConfig,
    /// Shortest run of identical frame labels kept as a vowel.
    pub min_run: usize,
}

impl Default for VowelTranscriber {
    fn default() -> Self {
        Self {
            lpc: LpcConfig {
                frame_length: 512,
                frame_hop: 160,
                ..LpcConfig::default()
            },
            min_run: 6,
        }
    }
}

impl VowelTranscriber {
    pub fn transcribe(&self, audio: &AudioBuffer) -> Result<String> {
        let audio = if audio.sample_rate == SAMPLE_RATE {
            audio.clone()
        } else {
            resample(audio, SAMPLE_RATE)?
        };
        let track = track_formants(&audio, &self.lpc, 3)?;
        let frames: Vec<(f64, f64)> = (0..track.frames())
            .map(|r| {
                let row = track.values.row(r);
                ((row[0] * NYQUIST_HZ).ln(), (row[1] * NYQUIST_HZ).ln())
            })
            .collect();
        let refs: Vec<(f64, f64)> = VOWELS.iter().map(|v| (v.1[0].ln(), v.1[1].ln())).collect();
        let label = |f: (f64, f64), log_scale: f64| -> (usize, f64) {
            refs.iter()
                .enumerate()
                .map(|(i, r)| (i, (f.0 - r.0 - log_scale).powi(2) + (f.1 - r.1 - log_scale).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("vowel table")
        };
        let best_scale = (0..=35)
            .map(|i| (0.85 + 0.01 * i as f64).ln())
            .map(|s| (s, frames.iter().map(|&f| label(f, s).1).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("scale grid")
            .0;
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &f in &frames {
            let v = label(f, best_scale).0;
            match runs.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => runs.push((v, 1)),
            }
        }
        let mut out = String::new();
        let mut prev = None;
        for (v, n) in runs {
            if n >= self.min_run && prev != Some(v) {
                out.push(VOWELS[v].0);
                prev = Some(v);
            }
        }
        Ok(out)
    }
}

impl Transcriber for VowelTranscriber {
    fn transcribe_files(&self, items: &AudioItems) -> Result<HashMap<String, String>> {
        items
            .par_iter()
            .map(|(id, path)| Ok((id.clone(), self.transcribe(&load_wav(path)?)?)))
            .collect()
    }
}

/// External backend speaking JSON lines: `{"id", "audio_path"}` in, one
/// object per line out carrying `"text"` or `"embedding"`. Responses are
/// matched by id in any order.
#[derive(Clone, Debug)]
pub struct SubprocessAdapter {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Deserialize)]
struct Reply {
    id: String,
    text: Option<String>,
    embedding: Option<Vec<f64>>,
}

impl SubprocessAdapter {
    /// Splits a command line on whitespace.
    pub fn from_command(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty adapter command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    fn exchange(&self, items: &AudioItems) -> Result<HashMap<String, Reply>> {
        let adapter_err = |m: String| Error::Adapter(format!("{}: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| adapter_err(format!("spawn failed: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let requests: Vec<String> = items
            .iter()
            .map(|(id, path)| serde_json::json!({"id": id, "audio_path": path}).to_string())
            .collect();
        let writer = std::thread::spawn(move || -> std::io::Result<()> {
            for line in requests {
                writeln!(stdin, "{line}")?;
            }
            Ok(())
        });
        let stdout = child.stdout.take().expect("piped stdout");
        let mut replies = HashMap::new();
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| adapter_err(format!("read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Reply = serde_json::from_str(&line).map_err(|e| adapter_err(format!("bad reply {line:?}: {e}")))?;
            replies.insert(r.id.clone(), r);
        }
        let status = child.wait().map_err(|e| adapter_err(format!("wait failed: {e}")))?;
        writer
            .join()
            .expect("writer thread")
            .map_err(|e| adapter_err(format!("write failed: {e}")))?;
        if !status.success() {
            return Err(adapter_err(format!("exited with {status}")));
        }
        if let Some((id, _)) = items.iter().find(|(id, _)| !replies.contains_key(id)) {
            return Err(adapter_err(format!("no reply for id {id}")));
        }
        Ok(replies)
    }
}

impl Transcriber for SubprocessAdapter {
    fn transcribe_files(&self, items: &AudioItems) -> Result<HashMap<String, String>> {
        self.exchange(items)?
            .into_iter()
            .map(|(id, r)| match r.text {
                Some(t) => Ok((id, t)),
                None => Err(Error::Adapter(format!("{}: reply for {id} has no text", self.program))),
            })
            .collect()
    }
}

impl SpeakerEmbedder for SubprocessAdapter {
    fn embed_files(&self, items: &AudioItems) -> Result<HashMap<String, Vec<f64>>> {
        let out: HashMap<String, Vec<f64>> = self
            .exchange(items)?
            .into_iter()
            .map(|(id, r)| match r.embedding {
                Some(e) if !e.is_empty() && e.iter().all(|v| v.is_finite()) => Ok((id, e)),
                _ => Err(Error::Adapter(format!("{}: reply for {id} has no valid embedding", self.program))),
            })
            .collect::<Result<_>>()?;
        let mut lens = out.values().map(Vec::len);
        if let Some(first) = lens.next() {
            if lens.any(|l| l != first) {
                return Err(Error::Adapter(format!("{}: embedding lengths differ", self.program)));
            }
        }
        Ok(out)
    }
}
