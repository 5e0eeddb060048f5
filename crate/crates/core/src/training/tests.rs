use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::container::Container;
use crate::diffcore::{ParamStore, Tensor};
use crate::vqvae::VqvaeConfig;

fn small_config() -> VqvaeConfig {
    VqvaeConfig {
        channels: 8,
        latent_dim: 4,
        codes: 8,
        speaker_dim: 3,
        ..VqvaeConfig::default()
    }
}

fn small_corpus() -> SpeakerCorpus {
    let cfg = SpeakerCorpusConfig {
        n_speakers: 2,
        utterances_per_speaker: 3,
        clip_seconds: 0.5,
        ..Default::default()
    };
    build_speaker_corpus(&cfg, 7).unwrap()
}

fn small_setup() -> (Dataset, HierarchicalVqvae<f64>) {
    let corpus = small_corpus();
    let data = Dataset::from_corpus(&corpus).unwrap();
    let model = HierarchicalVqvae::new(small_config(), &data.speakers, 3).unwrap();
    (data, model)
}

fn components(seed: u64) -> LossComponents<f64> {
    LossComponents {
        quality: Some(QualityProxy::new(80, seed).unwrap()),
        phoneme: Some(PhonemeProxy::new(80, seed + 1).unwrap()),
        formant: Some(FormantRegressor::new(80, seed + 2).unwrap()),
    }
}

#[test]
fn default_weights_and_schedule() {
    let w = LossWeights::default();
    assert_eq!(
        [w.recon, w.code, w.commit, w.mos, w.wavlm, w.formant],
        [1.0, 1.0, 3.0, 0.1, 0.1, 1e6]
    );
    assert_eq!((w.mos_from_epoch, w.wavlm_from_epoch, w.formant_from_epoch), (0, 45, 45));
    let c = TrainConfig::default();
    assert_eq!((c.lr_min, c.lr_max, c.validation_fraction), (5e-4, 2e-3, 0.1));
    assert!(c.validate().is_ok());
    let bad = TrainConfig { lr_min: 3e-3, ..c };
    assert!(bad.validate().is_err());
    assert!(TrainConfig { cycle_length_steps: Some(1), ..c }.validate().is_err());
    assert!(TrainConfig { early_stop_patience: 0, ..c }.validate().is_err());
    let mut neg = w;
    neg.mos = -1.0;
    assert!(neg.validate().is_err());
}

#[test]
fn cyclic_lr_endpoints() {
    assert_eq!(cyclic_lr(0, 5e-4, 2e-3, 100), 5e-4);
    assert_eq!(cyclic_lr(50, 5e-4, 2e-3, 100), 2e-3);
    assert!((cyclic_lr(25, 5e-4, 2e-3, 100) - 1.25e-3).abs() < 1e-15);
    assert!((cyclic_lr(75, 5e-4, 2e-3, 100) - 1.25e-3).abs() < 1e-15);
    assert_eq!(cyclic_lr(100, 5e-4, 2e-3, 100), 5e-4);
}

proptest! {
    #[test]
    fn cyclic_lr_periodic_and_bounded(step in 0u64..100_000, cycle in 2usize..500) {
        let a = cyclic_lr(step, 5e-4, 2e-3, cycle);
        prop_assert_eq!(a, cyclic_lr(step + cycle as u64, 5e-4, 2e-3, cycle));
        prop_assert!((5e-4..=2e-3).contains(&a));
    }
}

fn store_with(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
    s
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut s = store_with(&[1.0, -2.0, 3.0]);
    let mut adam = Adam::new(&s);
    for _ in 0..10 {
        s.zero_grad();
        adam.update(&mut s, 1e-2).unwrap();
    }
    assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn adam_constant_gradient_steps_approach_lr() {
    let mut s = store_with(&[0.0, 0.0]);
    let mut adam = Adam::new(&s);
    let mut prev = [0.0, 0.0];
    for i in 0..2000 {
        s.zero_grad();
        s.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&[0.3, -7.0]);
        adam.update(&mut s, 1e-3).unwrap();
        let now = s.iter().next().unwrap().value.data().to_vec();
        if i == 1999 {
            assert!(((prev[0] - now[0]) - 1e-3).abs() < 1e-7, "{}", prev[0] - now[0]);
            assert!(((now[1] - prev[1]) - 1e-3).abs() < 1e-7);
        }
        prev = [now[0], now[1]];
    }
}

#[test]
fn adam_matches_reference_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 17;
    let init: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut s = store_with(&init);
    let mut adam = Adam::new(&s);
    let (mut x, mut m, mut v) = (init.clone(), vec![0.0; n], vec![0.0; n]);
    for t in 1..=25 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lr = rng.random_range(1e-4..1e-2);
        s.zero_grad();
        s.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&g);
        adam.update(&mut s, lr).unwrap();
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            x[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in s.iter().next().unwrap().value.data().iter().zip(&x) {
            assert!((a - b).abs() <= 1e-12, "step {t}: {a} vs {b}");
        }
    }
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut s = store_with(&[1.0]);
    let mut adam = Adam::new(&s);
    s.iter_mut().next().unwrap().grad.data_mut()[0] = f64::NAN;
    match adam.update(&mut s, 1e-3) {
        Err(crate::Error::NonFinite(m)) => assert!(m.contains('w'), "{m}"),
        other => panic!("{other:?}"),
    }
}

fn eval_loss(
    model: &HierarchicalVqvae<f64>,
    x: &Tensor<f64>,
    weights: &LossWeights,
    comps: &LossComponents<f64>,
    epoch: usize,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    total_loss(&mut tape, model, &p, xv, 0, None, weights, comps, epoch).map(|r| r.1)
}

#[test]
fn total_loss_schedule_and_weights() {
    let (data, model) = small_setup();
    let comps = components(1);
    let x = &data.clips[0].mel;

    let mut zero = LossWeights::default();
    for t in TERMS {
        zero.set_weight(t, 0.0);
    }
    assert_eq!(eval_loss(&model, x, &zero, &comps, 100).unwrap().total, 0.0);

    let w = LossWeights::default();
    let b0 = eval_loss(&model, x, &w, &comps, 0).unwrap();
    assert!(b0.get(Term::Wavlm).is_none() && b0.get(Term::Formant).is_none());
    assert!(b0.get(Term::Mos).is_some() && b0.get(Term::Recon).is_some());
    let b45 = eval_loss(&model, x, &w, &comps, 45).unwrap();
    assert!(TERMS.iter().all(|&t| b45.get(t).is_some()));

    for b in [b0, b45] {
        let dot: f64 = TERMS.iter().filter_map(|&t| b.get(t).map(|v| v * w.weight(t))).sum();
        assert!((dot - b.total).abs() <= 1e-12 * b.total.abs(), "{dot} vs {}", b.total);
        for t in TERMS {
            if let Some(u) = b.get(t) {
                assert_eq!(b.get_weighted(t), Some(u * w.weight(t)));
            }
        }
    }
}

#[test]
fn total_loss_names_non_finite_term() {
    let (data, model) = small_setup();
    let comps = components(1);
    let mut x = data.clips[0].mel.clone();
    x.data_mut()[3] = 1e200;
    match eval_loss(&model, &x, &LossWeights::default(), &comps, 0) {
        Err(crate::Error::NonFinite(m)) => assert!(m.contains("recon"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn gated_terms_contribute_no_gradient_before_enable_epoch() {
    let (data, model) = small_setup();
    let full = components(2);
    let without = LossComponents {
        quality: full.quality.clone(),
        phoneme: None,
        formant: None,
    };
    let w = LossWeights::default();
    let grads = |comps: &LossComponents<f64>| {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, true);
        let x = tape.constant(data.clips[1].mel.clone());
        let (l, _) = total_loss(&mut tape, &model, &p, x, 1, None, &w, comps, 44).unwrap();
        let g = tape.backward(l).unwrap();
        model.store.ids().map(|id| g.wrt(&tape, p[id])).collect::<Vec<_>>()
    };
    assert_eq!(grads(&full), grads(&without));
}

#[test]
fn patience_stops_when_score_stalls() {
    let (data, model) = small_setup();
    let mut comps = LossComponents::<f64>::default();
    let mut q = QualityProxy::new(80, 4).unwrap();
    // A zero head weight makes the score constant, so it never improves.
    let head = q.store.id("head.weight").unwrap();
    q.store.get_mut(head).value.data_mut().iter_mut().for_each(|w| *w = 0.0);
    comps.quality = Some(q);
    let cfg = TrainConfig {
        max_epochs: 10,
        batch_size: 2,
        early_stop_patience: 1,
        validation_fraction: 0.34,
        precision: Precision::F64,
        ..Default::default()
    };
    let r = fit(model, &data, cfg, LossWeights::vanilla(), &comps).unwrap();
    assert_eq!(r.history.len(), 2);
    assert!(r.stopped_early);
    assert_eq!(r.best_epoch, Some(1));
}

#[test]
fn history_and_best_snapshot() {
    let (data, model) = small_setup();
    let comps = LossComponents {
        quality: Some(QualityProxy::new(80, 9).unwrap()),
        ..Default::default()
    };
    let cfg = TrainConfig {
        max_epochs: 6,
        batch_size: 2,
        early_stop_patience: 100,
        validation_fraction: 0.34,
        ..Default::default()
    };
    let mut t = Trainer::new(model, &data, cfg, LossWeights::vanilla(), &comps).unwrap();
    assert_eq!(t.state.val_idx.len(), 2);
    t.run().unwrap();
    let val = t.state.val_idx.clone();
    let r = t.into_result();
    assert_eq!(r.history.len(), 6);
    let scores: Vec<f64> = r.history.iter().map(|h| h.validation_score.unwrap()).collect();
    let best = scores.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(scores[r.best_epoch.unwrap() - 1], best);
    let q = comps.quality.as_ref().unwrap();
    let mean: f64 = val
        .iter()
        .map(|&i| {
            let c = &data.clips[i];
            let rec = r.model.reconstruct(&c.mel, &data.speakers[c.speaker]).unwrap();
            q.quality_score(&rec).unwrap()
        })
        .sum::<f64>()
        / val.len() as f64;
    assert!((mean - best).abs() < 1e-9, "{mean} vs {best}");
    assert!(r.history.iter().all(|h| h.train.get(Term::Mos).is_none()));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let (data, model) = small_setup();
    let comps = LossComponents {
        quality: Some(QualityProxy::new(80, 9).unwrap()),
        ..Default::default()
    };
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 2,
        validation_fraction: 0.34,
        seed: 11,
        ..Default::default()
    };
    let w = LossWeights::default();
    let mut straight = Trainer::new(model.clone(), &data, cfg, w, &comps).unwrap();
    straight.run_steps(5).unwrap();

    let mut first = Trainer::new(model.clone(), &data, cfg, w, &comps).unwrap();
    first.run_steps(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.pvcx");
    first.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut resumed = Trainer::load_checkpoint(&path, &data, &comps).unwrap();
    assert_eq!(resumed.to_container().unwrap().to_bytes(), bytes);
    resumed.run_steps(2).unwrap();
    assert_eq!(resumed.to_container().unwrap().to_bytes(), straight.to_container().unwrap().to_bytes());

    let mut again = Trainer::new(model, &data, cfg, w, &comps).unwrap();
    again.run_steps(5).unwrap();
    assert_eq!(again.to_container().unwrap().to_bytes(), straight.to_container().unwrap().to_bytes());

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    assert!(Container::from_bytes(&corrupt).is_err());
}

#[test]
fn fit_rejects_empty_dataset() {
    assert!(matches!(Dataset::new(vec![], vec!["a".into()]), Err(crate::Error::Data(_))));
}

#[test]
fn speaker_corpus_shapes() {
    let c = small_corpus();
    assert_eq!(c.utterances.len(), 6);
    assert_eq!(c.speakers.iter().map(|s| s.gender.as_str()).collect::<Vec<_>>(), ["m", "f"]);
    for u in &c.utterances {
        assert_eq!(u.mel.rows() % 8, 0);
        assert_eq!(u.audio.len(), 8000);
        assert!(u.transcript.chars().all(|ch| VOWELS.iter().any(|v| v.0 == ch)));
    }
    assert_eq!(build_speaker_corpus(&SpeakerCorpusConfig { n_speakers: 2, utterances_per_speaker: 3, clip_seconds: 0.5, ..Default::default() }, 7).unwrap(), c);
}
