use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

use super::adapter::{SpeakerEmbedder, Transcriber};
use super::eer::{eer, mean_ci, EerResult, MeanCi, ScoreSet};
use super::embed::cosine;
use super::manifest::{ConversionRow, UtteranceRow};
use super::text::cer;

/// Statistics over one subset of trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryReport {
    /// Which partition the category belongs to, e.g. `gender`.
    pub partition: String,
    pub name: String,
    pub trials: usize,
    pub cer: Option<MeanCi>,
    pub eer: Option<EerResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub trials: usize,
    pub cer: Option<MeanCi>,
    pub eer: Option<EerResult>,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub genuine_mean_cosine: Option<f64>,
    pub impostor_mean_cosine: Option<f64>,
    /// Non-empty categories only; each partition covers every trial.
    pub categories: Vec<CategoryReport>,
}

#[derive(Clone, Debug, PartialEq)]
struct Trial {
    cer: f64,
    genuine: Option<f64>,
    impostor: Option<f64>,
    gender: String,
    accent: String,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Order-insensitive summary of a group of trials.
fn summarize(trials: &[&Trial]) -> (Option<MeanCi>, Option<EerResult>, ScoreSet) {
    let cers = sorted(trials.iter().map(|t| t.cer).collect());
    let scores = ScoreSet {
        genuine: sorted(trials.iter().filter_map(|t| t.genuine).collect()),
        impostor: sorted(trials.iter().filter_map(|t| t.impostor).collect()),
    };
    let e = eer(&scores).ok();
    (mean_ci(&cers), e, scores)
}

fn pairing(a: &str, b: Option<&str>) -> String {
    match b {
        Some(b) if a == b => "same".into(),
        Some(_) => "cross".into(),
        None => "unknown".into(),
    }
}

/// Scores conversions for intelligibility (CER against the source
/// transcript) and anonymization (EER of genuine vs impostor trials).
///
/// The enrollment pool is `enrollment`, or the source utterances of `rows`
/// when `None`. Genuine trial: the conversion against another pool
/// utterance of the source speaker, falling back to the source utterance
/// itself. Impostor trial: against the first utterance of the next speaker
/// (sorted by id, cyclically) that is neither source nor target; absent if
/// no such speaker exists.
pub fn evaluate_manifest(
    rows: &[ConversionRow],
    enrollment: Option<&[UtteranceRow]>,
    transcriber: &dyn Transcriber,
    embedder: &dyn SpeakerEmbedder,
) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Data("conversion manifest has no rows".into()));
    }
    let pool: Vec<UtteranceRow> = match enrollment {
        Some(e) => e.to_vec(),
        None => rows.iter().map(|r| r.source.clone()).collect(),
    };
    let mut by_speaker: BTreeMap<&str, BTreeSet<&PathBuf>> = BTreeMap::new();
    let mut meta: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    for u in &pool {
        by_speaker.entry(&u.speaker_id).or_default().insert(&u.audio_path);
        meta.insert(&u.speaker_id, (&u.gender, &u.accent));
    }
    let speakers: Vec<&str> = by_speaker.keys().copied().collect();

    let mut files: BTreeSet<&PathBuf> = BTreeSet::new();
    for r in rows {
        files.insert(&r.converted_path);
        files.insert(&r.source.audio_path);
    }
    for set in by_speaker.values() {
        files.extend(set.iter().copied());
    }
    if let Some(missing) = files.iter().find(|p| !p.is_file()) {
        return Err(Error::Data(format!("missing audio file {}", missing.display())));
    }

    let enroll = |r: &ConversionRow| -> (Option<PathBuf>, Option<PathBuf>) {
        let src = r.source.speaker_id.as_str();
        let genuine = by_speaker.get(src).and_then(|set| {
            set.iter()
                .find(|p| ***p != r.source.audio_path && ***p != r.source_path)
                .map(|p| (*p).clone())
        });
        let genuine = genuine.or_else(|| Some(r.source.audio_path.clone()));
        let start = speakers.iter().position(|s| *s == src).map_or(0, |i| i + 1);
        let impostor = (0..speakers.len())
            .map(|k| speakers[(start + k) % speakers.len()])
            .find(|s| *s != src && *s != r.target_speaker_id)
            .and_then(|s| by_speaker[s].iter().next().map(|p| (*p).clone()));
        (genuine, impostor)
    };
    let pairs: Vec<(Option<PathBuf>, Option<PathBuf>)> = rows.iter().map(enroll).collect();

    let id_of = |p: &PathBuf| p.to_string_lossy().into_owned();
    let mut embed_set: BTreeSet<&PathBuf> = rows.iter().map(|r| &r.converted_path).collect();
    for (g, i) in &pairs {
        embed_set.extend(g.iter());
        embed_set.extend(i.iter());
    }
    let embed_items: Vec<(String, PathBuf)> = embed_set.iter().map(|p| (id_of(p), (*p).clone())).collect();
    let conv_items: Vec<(String, PathBuf)> = rows
        .iter()
        .map(|r| &r.converted_path)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|p| (id_of(p), p.clone()))
        .collect();
    let texts = transcriber.transcribe_files(&conv_items)?;
    let embeddings = embedder.embed_files(&embed_items)?;
    let get_emb = |p: &PathBuf| {
        embeddings
            .get(&id_of(p))
            .ok_or_else(|| Error::Adapter(format!("no embedding for {}", p.display())))
    };

    let trials: Vec<Trial> = rows
        .par_iter()
        .zip(&pairs)
        .map(|(r, (g, i))| {
            let hyp = texts
                .get(&id_of(&r.converted_path))
                .ok_or_else(|| Error::Adapter(format!("no transcript for {}", r.converted_path.display())))?;
            let conv = get_emb(&r.converted_path)?;
            let genuine = g.as_ref().map(|p| cosine(conv, get_emb(p)?)).transpose()?;
            let impostor = i.as_ref().map(|p| cosine(conv, get_emb(p)?)).transpose()?;
            let target = meta.get(r.target_speaker_id.as_str());
            Ok(Trial {
                cer: cer(&r.source.transcript, hyp)?,
                genuine,
                impostor,
                gender: pairing(&r.source.gender, target.map(|t| t.0)),
                accent: pairing(&r.source.accent, target.map(|t| t.1)),
            })
        })
        .collect::<Result<_>>()?;

    let all: Vec<&Trial> = trials.iter().collect();
    let (cer_all, eer_all, scores) = summarize(&all);
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut categories = Vec::new();
    for partition in ["gender", "accent"] {
        let mut groups: BTreeMap<&str, Vec<&Trial>> = BTreeMap::new();
        for t in &trials {
            let key = if partition == "gender" { &t.gender } else { &t.accent };
            groups.entry(key.as_str()).or_default().push(t);
        }
        for (name, group) in groups {
            let (c, e, _) = summarize(&group);
            categories.push(CategoryReport {
                partition: partition.into(),
                name: name.into(),
                trials: group.len(),
                cer: c,
                eer: e,
            });
        }
    }
    Ok(EvalReport {
        trials: trials.len(),
        cer: cer_all,
        eer: eer_all,
        genuine_trials: scores.genuine.len(),
        impostor_trials: scores.impostor.len(),
        genuine_mean_cosine: mean(&scores.genuine),
        impostor_mean_cosine: mean(&scores.impostor),
        categories,
    })
}

fn fmt_ci(c: &Option<MeanCi>) -> String {
    match c {
        Some(c) => format!("{:.4} ± {:.4}", c.mean, c.half_width),
        None => "-".into(),
    }
}

fn fmt_eer(e: &Option<EerResult>) -> String {
    match e {
        Some(e) => format!("{:.4}", e.eer),
        None => "-".into(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16} {:>7} {:>20} {:>8}\n", "subset", "trials", "CER (95% CI)", "EER");
        out.push_str(&format!("{:<16} {:>7} {:>20} {:>8}\n", "all", self.trials, fmt_ci(&self.cer), fmt_eer(&self.eer)));
        for c in &self.categories {
            let name = format!("{}:{}", c.partition, c.name);
            out.push_str(&format!("{:<16} {:>7} {:>20} {:>8}\n", name, c.trials, fmt_ci(&c.cer), fmt_eer(&c.eer)));
        }
        out
    }
}
