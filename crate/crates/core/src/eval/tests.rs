use std::collections::HashMap;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::{save_wav, AudioBuffer, SAMPLE_RATE};
use crate::formant::{synth_sequence, Formant};
use crate::training::{build_speaker_corpus, SpeakerCorpusConfig, VOWELS};

fn lev_naive(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = lev_naive(ra, rb) + usize::from(x != y);
            sub.min(lev_naive(ra, b) + 1).min(lev_naive(a, rb) + 1)
        }
    }
}

#[test]
fn levenshtein_examples() {
    assert_eq!(levenshtein("kitten", "sitting"), 3);
    assert_eq!(levenshtein("", "abc"), 3);
    assert_eq!(levenshtein("abc", "abc"), 0);
    assert_eq!(levenshtein("flaw", "lawn"), 2);
}

#[test]
fn cer_examples() {
    assert_eq!(cer("abc", "abc").unwrap(), 0.0);
    assert!((cer("abcd", "abed").unwrap() - 0.25).abs() < 1e-12);
    // Case and punctuation are normalized away.
    assert_eq!(cer("Hello, World!", "hello world").unwrap(), 0.0);
    assert_eq!(cer("ab", "").unwrap(), 1.0);
    assert!((cer("abc", "axc").unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(cer("ab", "abcd").unwrap(), 1.0);
    assert!(cer("", "x").is_err());
}

proptest! {
    #[test]
    fn levenshtein_matches_recursive(a in "[abc]{0,8}", b in "[abc]{0,8}") {
        let ac: Vec<char> = a.chars().collect();
        let bc: Vec<char> = b.chars().collect();
        prop_assert_eq!(levenshtein(&a, &b), lev_naive(&ac, &bc));
    }

    #[test]
    fn levenshtein_metric(a in "[a-d]{0,12}", b in "[a-d]{0,12}", c in "[a-d]{0,12}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
    }

    #[test]
    fn cer_bounded_by_length_ratio(a in "[a-e]{1,20}", b in "[a-e]{0,20}") {
        let c = cer(&a, &b).unwrap();
        let bound = a.len().max(b.len()) as f64 / a.len() as f64;
        prop_assert!(c >= 0.0 && c <= bound + 1e-12);
    }
}

#[test]
fn eer_examples() {
    let s = ScoreSet {
        genuine: vec![0.9, 0.8, 0.7],
        impostor: vec![0.1, 0.2, 0.3],
    };
    assert_eq!(eer(&s).unwrap().eer, 0.0);
    // Identical distributions sit at one half.
    let s = ScoreSet {
        genuine: vec![0.1, 0.2, 0.3, 0.4],
        impostor: vec![0.1, 0.2, 0.3, 0.4],
    };
    assert!((eer(&s).unwrap().eer - 0.5).abs() < 1e-12);
    // Fully inverted scores give 1.
    let s = ScoreSet {
        genuine: vec![0.1, 0.2],
        impostor: vec![0.8, 0.9],
    };
    assert!((eer(&s).unwrap().eer - 1.0).abs() < 1e-12);
    let s = ScoreSet {
        genuine: vec![0.2],
        impostor: vec![0.8],
    };
    assert_eq!(eer(&s).unwrap().eer, 1.0);
    assert!(eer(&ScoreSet::default()).is_err());
}

/// Distinct scores on a 1e-3 lattice, so that every interval between
/// consecutive scores contains points of a 1e-5 grid.
fn lattice_scores(rng: &mut ChaCha8Rng, n_gen: usize, n_imp: usize) -> ScoreSet {
    let mut pool: Vec<u32> = (0..1000).collect();
    pool.shuffle(rng);
    let shift = rng.random_range(0..300);
    let g = pool[..n_gen].iter().map(|&k| (k.min(999 - shift) + shift) as f64 * 1e-3);
    let i = pool[n_gen..n_gen + n_imp].iter().map(|&k| k as f64 * 1e-3);
    // Collisions from the shift are rare; drop them to keep scores distinct.
    let mut seen = std::collections::BTreeSet::new();
    let genuine: Vec<f64> = g.filter(|v| seen.insert((v * 1e3).round() as i64)).collect();
    let impostor: Vec<f64> = i.filter(|v| seen.insert((v * 1e3).round() as i64)).collect();
    ScoreSet { genuine, impostor }
}

/// Brute-force EER: the mean of FAR and FRR at grid thresholds where the two
/// are closest.
fn grid_eer(s: &ScoreSet) -> f64 {
    let rates = |t: f64| {
        let far = s.impostor.iter().filter(|&&v| v >= t).count() as f64 / s.impostor.len() as f64;
        let frr = s.genuine.iter().filter(|&&v| v < t).count() as f64 / s.genuine.len() as f64;
        (far, frr)
    };
    let mut best = (f64::INFINITY, 0.0);
    let mut t = -0.01;
    while t <= 1.01 {
        let (far, frr) = rates(t);
        let gap = (far - frr).abs();
        if gap < best.0 - 1e-12 {
            best = (gap, 0.5 * (far + frr));
        }
        t += 1e-5;
    }
    best.1
}

#[test]
fn eer_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let s = lattice_scores(&mut rng, 20, 20);
        if s.genuine.len() != 20 || s.impostor.len() != 20 {
            continue;
        }
        let got = eer(&s).unwrap().eer;
        let want = grid_eer(&s);
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn eer_zero_iff_separated() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let s = lattice_scores(&mut rng, 7, 9);
        let separated = s.genuine.iter().cloned().fold(f64::INFINITY, f64::min)
            > s.impostor.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(eer(&s).unwrap().eer == 0.0, separated);
    }
}

proptest! {
    #[test]
    fn eer_invariances(seed in 0u64..10_000, a_pow in -2i32..3, b in -4i32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = lattice_scores(&mut rng, 12, 15);
        let base = eer(&s).unwrap().eer;
        prop_assert!((0.0..=1.0).contains(&base));

        // Powers of two and small integer shifts keep the order exact.
        let a = 2f64.powi(a_pow);
        let map = |v: &Vec<f64>| v.iter().map(|x| a * x + b as f64).collect::<Vec<_>>();
        let affine = ScoreSet { genuine: map(&s.genuine), impostor: map(&s.impostor) };
        prop_assert!((eer(&affine).unwrap().eer - base).abs() < 1e-12);

        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        let swapped = ScoreSet { genuine: neg(&s.impostor), impostor: neg(&s.genuine) };
        prop_assert!((eer(&swapped).unwrap().eer - base).abs() < 1e-12);
    }
}

#[test]
fn mean_ci_shrinks_with_sample_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let small: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let large: Vec<f64> = (0..1600).map(|_| rng.random::<f64>()).collect();
        ratios.push(mean_ci(&large).unwrap().half_width / mean_ci(&small).unwrap().half_width);
    }
    let r = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((r - 0.5).abs() < 0.1, "ratio {r}");
    let c = mean_ci(&[1.0, 2.0, 3.0]).unwrap();
    assert!((c.mean - 2.0).abs() < 1e-15);
    assert!((c.half_width - 1.96 / 3f64.sqrt()).abs() < 1e-12);
    assert_eq!(mean_ci(&[4.0]).unwrap().half_width, 0.0);
    assert!(mean_ci(&[]).is_none());
}

/// Vowel indices for `seconds` of speech in 0.25 s segments.
fn vowel_string(rng: &mut ChaCha8Rng, seconds: f64) -> Vec<usize> {
    (0..(seconds / 0.25).ceil() as usize).map(|_| rng.random_range(0..VOWELS.len())).collect()
}

/// `vowels` spoken with the given pitch and tract scale; each segment's pitch
/// is jittered by up to 3% from `rng`.
fn speak(rng: &mut ChaCha8Rng, vowels: &[usize], f0: f64, scale: f64) -> AudioBuffer {
    let segs: Vec<(f64, Vec<Formant>, f64)> = vowels
        .iter()
        .map(|&v| {
            let f = VOWELS[v]
                .1
                .iter()
                .zip([60.0, 90.0, 120.0])
                .map(|(hz, bw)| Formant { freq: hz * scale, bandwidth: bw })
                .collect();
            (f0 * rng.random_range(0.97..1.03), f, 0.25)
        })
        .collect();
    synth_sequence(&segs, SAMPLE_RATE).unwrap()
}

fn voice(rng: &mut ChaCha8Rng, f0: f64, scale: f64, seconds: f64) -> AudioBuffer {
    let v = vowel_string(rng, seconds);
    speak(rng, &v, f0, scale)
}

#[test]
fn embedding_is_unit_norm_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = voice(&mut rng, 120.0, 1.0, 1.0);
    let e = reference_speaker_embedding(&a).unwrap();
    assert_eq!(e.len(), EMBEDDING_DIM);
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
    assert_eq!(e, reference_speaker_embedding(&a).unwrap());
    assert!((cosine(&e, &e).unwrap() - 1.0).abs() < 1e-12);
    let short = AudioBuffer { samples: vec![0.1; 1000], sample_rate: SAMPLE_RATE };
    assert!(reference_speaker_embedding(&short).is_err());
}

#[test]
fn embedding_separates_formant_profiles() {
    // Same words and pitch range; the pairs differ in pitch jitter only
    // (same profile) or also in tract scale (cross profile).
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut wins = 0;
    for _ in 0..100 {
        let words = vowel_string(&mut rng, 1.0);
        let f0 = rng.random_range(100.0..220.0);
        let sa = rng.random_range(0.9..1.15);
        let sb = if sa < 1.02 { sa + 0.12 } else { sa - 0.12 };
        let a1 = reference_speaker_embedding(&speak(&mut rng, &words, f0, sa)).unwrap();
        let a2 = reference_speaker_embedding(&speak(&mut rng, &words, f0, sa)).unwrap();
        let b1 = reference_speaker_embedding(&speak(&mut rng, &words, f0, sb)).unwrap();
        if cosine(&a1, &a2).unwrap() > cosine(&a1, &b1).unwrap() {
            wins += 1;
        }
    }
    assert!(wins >= 80, "{wins}/100");
}

#[test]
fn vowel_transcriber_reads_synthetic_speech() {
    let cfg = SpeakerCorpusConfig {
        n_speakers: 4,
        utterances_per_speaker: 3,
        clip_seconds: 2.0,
        ..Default::default()
    };
    let corpus = build_speaker_corpus(&cfg, 3).unwrap();
    let t = VowelTranscriber::default();
    let cers: Vec<f64> = corpus
        .utterances
        .iter()
        .map(|u| cer(&u.transcript, &t.transcribe(&u.audio).unwrap()).unwrap())
        .collect();
    let m = cers.iter().sum::<f64>() / cers.len() as f64;
    assert!(m < 0.35, "mean CER {m}: {cers:?}");
}

struct Lookup(HashMap<PathBuf, String>);

impl Transcriber for Lookup {
    fn transcribe_files(&self, items: &AudioItems) -> crate::Result<HashMap<String, String>> {
        Ok(items
            .iter()
            .map(|(id, p)| (id.clone(), self.0.get(p).cloned().unwrap_or_default()))
            .collect())
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    rows: Vec<ConversionRow>,
    pool: Vec<UtteranceRow>,
    lookup: Lookup,
}

/// Four speakers with `per` utterances each. Conversions target the next
/// speaker; with `copy` the converted file is the source audio itself.
fn fixture(per: usize, copy: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let profiles = [("s0", "m", "a", 100.0, 0.93), ("s1", "f", "a", 200.0, 1.1), ("s2", "m", "b", 130.0, 0.97), ("s3", "f", "b", 230.0, 1.15)];
    let mut pool = Vec::new();
    let mut map = HashMap::new();
    for (id, g, a, f0, sc) in profiles {
        for k in 0..per {
            let path = dir.path().join(format!("{id}_{k}.wav"));
            save_wav(&path, &voice(&mut rng, f0, sc, 1.0)).unwrap();
            let text = format!("utt {id} {k}");
            map.insert(path.clone(), text.clone());
            pool.push(UtteranceRow {
                audio_path: path,
                speaker_id: id.into(),
                gender: g.into(),
                accent: a.into(),
                transcript: text,
            });
        }
    }
    let mut rows = Vec::new();
    for (i, u) in pool.iter().enumerate() {
        let target = &profiles[(i / per + 1) % profiles.len()];
        let conv = if copy {
            u.audio_path.clone()
        } else {
            let p = dir.path().join(format!("conv{i}.wav"));
            save_wav(&p, &voice(&mut rng, target.3, target.4, 1.0)).unwrap();
            map.insert(p.clone(), u.transcript.replace("utt", "ut"));
            p
        };
        rows.push(ConversionRow {
            source: u.clone(),
            source_path: u.audio_path.clone(),
            target_speaker_id: target.0.into(),
            converted_path: conv,
        });
    }
    Fixture { _dir: dir, rows, pool, lookup: Lookup(map) }
}

#[test]
fn identical_audio_scores_perfectly() {
    let f = fixture(1, true);
    let r = evaluate_manifest(&f.rows, None, &f.lookup, &MfccEmbedder).unwrap();
    assert_eq!(r.trials, 4);
    assert_eq!(r.cer.unwrap().mean, 0.0);
    assert_eq!(r.genuine_trials, 4);
    assert!((r.genuine_mean_cosine.unwrap() - 1.0).abs() < 1e-12);
    assert!(r.impostor_mean_cosine.unwrap() < 1.0);
}

#[test]
fn categories_partition_trials() {
    let f = fixture(2, false);
    let r = evaluate_manifest(&f.rows, Some(&f.pool), &f.lookup, &MfccEmbedder).unwrap();
    for part in ["gender", "accent"] {
        let n: usize = r.categories.iter().filter(|c| c.partition == part).map(|c| c.trials).sum();
        assert_eq!(n, r.trials, "{part}");
    }
    // Every conversion crosses gender with this target assignment.
    assert!(r.categories.iter().any(|c| c.partition == "gender" && c.name == "cross"));
    assert!(!r.categories.iter().any(|c| c.trials == 0));
    let cer = r.cer.unwrap().mean;
    assert!(cer > 0.0 && cer < 0.3);
    assert!(r.to_text().contains("gender:cross"));
    let _: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
}

#[test]
fn report_ignores_order_and_thread_count() {
    let f = fixture(2, false);
    let base = evaluate_manifest_with_jobs(&f.rows, Some(&f.pool), &f.lookup, &MfccEmbedder, 1).unwrap();
    let mut rows = f.rows.clone();
    rows.reverse();
    let mut pool = f.pool.clone();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let other = evaluate_manifest_with_jobs(&rows, Some(&pool), &f.lookup, &MfccEmbedder, 4).unwrap();
    assert_eq!(base, other);
}

#[test]
fn missing_audio_is_reported() {
    let mut f = fixture(1, true);
    f.rows[0].converted_path = PathBuf::from("/nonexistent/x.wav");
    let err = evaluate_manifest(&f.rows, None, &f.lookup, &MfccEmbedder).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.wav"));
}

#[test]
fn manifests_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let u = |p: &Path, s: &str| UtteranceRow {
        audio_path: p.to_path_buf(),
        speaker_id: s.into(),
        gender: "f".into(),
        accent: "a".into(),
        transcript: "some words".into(),
    };
    let rows = vec![u(&base.join("a/x.wav"), "s1"), u(Path::new("/elsewhere/y.wav"), "s2")];
    let path = base.join("m.tsv");
    write_manifest(&path, &rows).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), rows);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(&UTTERANCE_COLUMNS.join("\t")));
    assert!(text.contains("a/x.wav\t"));

    let conv = vec![ConversionRow {
        source: rows[0].clone(),
        source_path: rows[0].audio_path.clone(),
        target_speaker_id: "s2".into(),
        converted_path: base.join("out/c.wav"),
    }];
    let cpath = base.join("c.tsv");
    write_conversion_manifest(&cpath, &conv).unwrap();
    assert_eq!(read_conversion_manifest(&cpath).unwrap(), conv);

    let mut bad = rows.clone();
    bad[0].transcript = "tab\there".into();
    assert!(write_manifest(&path, &bad).is_err());
    std::fs::write(&path, "speaker_id\tgender\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

#[test]
fn variant_set_covers_singles_and_pairs() {
    let v = standard_variants();
    assert_eq!(v.len(), 8);
    let names: Vec<&str> = v.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names[..2], ["none", "all"]);
    let mut masks: Vec<(bool, bool, bool)> = v.iter().map(|v| (v.mos, v.wavlm, v.formant)).collect();
    masks.sort();
    masks.dedup();
    assert_eq!(masks.len(), 8);
    let base = crate::training::LossWeights::default();
    let w = v[0].weights(&base);
    assert_eq!(w.weight(crate::training::Term::Formant), 0.0);
    assert_eq!(w.weight(crate::training::Term::Recon), base.weight(crate::training::Term::Recon));
    assert_eq!(v[1].weights(&base), base);
}
