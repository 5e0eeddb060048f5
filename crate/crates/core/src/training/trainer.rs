use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diffcore::{batch_gradients_with, Adam, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vqvae::HierarchicalVqvae;

use super::corpus::SpeakerCorpus;
use super::{cyclic_lr, total_loss, LossBreakdown, LossComponents, LossWeights, TrainConfig};

const CHECKPOINT_KIND: &str = "train-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub mel: Tensor<f64>,
    pub speaker: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub speakers: Vec<String>,
}

impl Dataset {
    pub fn new(clips: Vec<Clip>, speakers: Vec<String>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let bands = clips[0].mel.cols();
        for (i, c) in clips.iter().enumerate() {
            if c.speaker >= speakers.len() {
                return Err(Error::Data(format!("clip {i} has speaker index {} of {}", c.speaker, speakers.len())));
            }
            if c.mel.rows() == 0 || c.mel.cols() != bands {
                return Err(Error::Data(format!("clip {i} has shape {:?}", c.mel.shape())));
            }
        }
        Ok(Self { clips, speakers })
    }

    pub fn from_corpus(corpus: &SpeakerCorpus) -> Result<Self> {
        let clips = corpus
            .utterances
            .iter()
            .map(|u| Clip {
                mel: u.mel.clone(),
                speaker: u.speaker,
            })
            .collect();
        Self::new(clips, corpus.speaker_ids())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Seeded split into (train, validation) clip indices. Validation gets
    /// `floor(fraction · n)` clips, and training keeps at least one.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64 * fraction).floor() as usize).min(self.len() - 1);
        let val = order[..n_val].to_vec();
        let train = order[n_val..].to_vec();
        (train, val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: u64,
    pub lr_last: f64,
    /// Per-term means over the epoch's training clips.
    pub train: LossBreakdown,
    pub validation_score: Option<f64>,
    pub validation_recon: Option<f64>,
}

/// Running sums for the epoch in progress.
#[derive(Clone, Debug, Default, PartialEq)]
struct Accumulator {
    sums: [f64; 6],
    weighted: [f64; 6],
    counts: [f64; 6],
    total: f64,
    items: f64,
    lr_last: f64,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown) {
        for i in 0..6 {
            if let (Some(u), Some(w)) = (b.unweighted[i], b.weighted[i]) {
                self.sums[i] += u;
                self.weighted[i] += w;
                self.counts[i] += 1.0;
            }
        }
        self.total += b.total;
        self.items += 1.0;
    }

    fn mean(&self) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        for i in 0..6 {
            if self.counts[i] > 0.0 {
                out.unweighted[i] = Some(self.sums[i] / self.counts[i]);
                out.weighted[i] = Some(self.weighted[i] / self.counts[i]);
            }
        }
        out.total = if self.items > 0.0 { self.total / self.items } else { 0.0 };
        out
    }

    fn to_tensor(&self) -> Tensor<f64> {
        let mut v = Vec::with_capacity(21);
        v.extend_from_slice(&self.sums);
        v.extend_from_slice(&self.weighted);
        v.extend_from_slice(&self.counts);
        v.extend_from_slice(&[self.total, self.items, self.lr_last]);
        Tensor::new(vec![v.len()], v).expect("flat")
    }

    fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let d = t.data();
        if d.len() != 21 {
            return Err(Error::Checkpoint(format!("epoch accumulator has {} values", d.len())));
        }
        let arr = |o: usize| -> [f64; 6] { d[o..o + 6].try_into().expect("six") };
        Ok(Self {
            sums: arr(0),
            weighted: arr(6),
            counts: arr(12),
            total: d[18],
            items: d[19],
            lr_last: d[20],
        })
    }
}

/// Everything besides the model needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub adam: Adam<T>,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub rng: ChaCha8Rng,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    /// Shuffled training order of the epoch in progress; empty between epochs.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub finished: bool,
    acc: Accumulator,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// The best validation snapshot when early stopping was active, else the final model.
    pub model: HierarchicalVqvae<T>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
}

/// Mini-batch training loop over a [`Dataset`], resumable at any step.
pub struct Trainer<'a, T> {
    pub model: HierarchicalVqvae<T>,
    data: &'a Dataset,
    pub config: TrainConfig,
    pub weights: LossWeights,
    components: &'a LossComponents<T>,
    pub state: TrainState<T>,
    pub history: Vec<EpochRecord>,
    best: Option<ParamStore<T>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: HierarchicalVqvae<T>,
        data: &'a Dataset,
        config: TrainConfig,
        weights: LossWeights,
        components: &'a LossComponents<T>,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        if data.speakers != model.speakers.ids {
            return Err(Error::Data("dataset speakers differ from the model's speaker table".into()));
        }
        let (train_idx, val_idx) = data.split(config.validation_fraction, config.seed);
        let adam = Adam::new(&model.store);
        let state = TrainState {
            epoch: 0,
            step: 0,
            adam,
            best_score: None,
            best_epoch: None,
            epochs_since_improvement: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            train_idx,
            val_idx,
            order: Vec::new(),
            cursor: 0,
            finished: false,
            acc: Accumulator::default(),
        };
        Ok(Self {
            model,
            data,
            config,
            weights,
            components,
            state,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.state.train_idx.len().div_ceil(self.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// One optimizer step. Returns `false` once training has finished.
    pub fn step(&mut self) -> Result<bool> {
        if self.state.finished {
            return Ok(false);
        }
        if self.state.order.is_empty() {
            let mut order = self.state.train_idx.clone();
            order.shuffle(&mut self.state.rng);
            self.state.order = order;
            self.state.cursor = 0;
        }
        let end = (self.state.cursor + self.config.batch_size).min(self.state.order.len());
        let batch: Vec<&Clip> = self.state.order[self.state.cursor..end].iter().map(|&i| &self.data.clips[i]).collect();
        let lr = cyclic_lr(
            self.state.step,
            self.config.lr_min,
            self.config.lr_max,
            self.config.cycle_length(self.steps_per_epoch()),
        );
        let epoch = self.state.epoch;
        let (model, weights, comps) = (&self.model, &self.weights, self.components);
        let scale = T::lit(1.0 / batch.len() as f64);
        let (out, grads) = batch_gradients_with(&self.model.store, &batch, scale, |tape, p, clip| {
            let x = tape.constant(clip.mel.cast());
            total_loss(tape, model, p, x, clip.speaker, None, weights, comps, epoch)
        })?;
        for (_, b) in &out {
            self.state.acc.add(b);
        }
        self.state.acc.lr_last = lr;
        self.model.store.zero_grad();
        self.model.store.add_grads(&grads);
        self.state.adam.update(&mut self.model.store, lr)?;
        self.state.step += 1;
        self.state.cursor = end;
        if self.state.cursor == self.state.order.len() {
            self.end_epoch()?;
        }
        Ok(true)
    }

    pub fn run_steps(&mut self, k: usize) -> Result<()> {
        for _ in 0..k {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Mean quality score and reconstruction loss over validation reconstructions.
    fn validate(&self) -> Result<(Option<f64>, Option<f64>)> {
        if self.state.val_idx.is_empty() {
            return Ok((None, None));
        }
        let mut score = 0.0;
        let mut recon = 0.0;
        for &i in &self.state.val_idx {
            let clip = &self.data.clips[i];
            let mut tape = Tape::new();
            let p = self.model.store.bind(&mut tape, false);
            let x = tape.constant(clip.mel.cast());
            let fwd = self.model.forward(&mut tape, &p, x, clip.speaker, None)?;
            let r = tape.mse(x, fwd.x_dec)?;
            recon += tape.value(r).item().as_f64();
            if let Some(q) = &self.components.quality {
                let qp = q.store.bind(&mut tape, false);
                let s = q.score_var(&mut tape, &qp, fwd.x_dec)?;
                score += tape.value(s).item().as_f64();
            }
        }
        let n = self.state.val_idx.len() as f64;
        let score = self.components.quality.as_ref().map(|_| score / n);
        if let Some(s) = score {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("validation quality score {s}")));
            }
        }
        Ok((score, Some(recon / n)))
    }

    fn end_epoch(&mut self) -> Result<()> {
        let (validation_score, validation_recon) = self.validate()?;
        self.state.epoch += 1;
        self.history.push(EpochRecord {
            epoch: self.state.epoch,
            steps: self.state.step,
            lr_last: self.state.acc.lr_last,
            train: self.state.acc.mean(),
            validation_score,
            validation_recon,
        });
        self.state.acc = Accumulator::default();
        self.state.order.clear();
        self.state.cursor = 0;
        if let Some(s) = validation_score {
            if self.state.best_score.is_none_or(|b| s > b) {
                self.state.best_score = Some(s);
                self.state.best_epoch = Some(self.state.epoch);
                self.state.epochs_since_improvement = 0;
                self.best = Some(self.model.store.clone());
            } else {
                self.state.epochs_since_improvement += 1;
                if self.state.epochs_since_improvement >= self.config.early_stop_patience {
                    self.state.finished = true;
                }
            }
        }
        if self.state.epoch >= self.config.max_epochs {
            self.state.finished = true;
        }
        Ok(())
    }

    pub fn into_result(self) -> FitResult<T> {
        let stopped_early = self.state.finished && self.state.epoch < self.config.max_epochs;
        let mut model = self.model;
        if let Some(best) = self.best {
            model.store = best;
        }
        FitResult {
            model,
            history: self.history,
            stopped_early,
            best_epoch: self.state.best_epoch,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let s = &self.state;
        let mut c = Container::new(CHECKPOINT_KIND);
        self.model.write_into(&mut c)?;
        c.set_meta("train.config", serde_json::to_string(&self.config).expect("config serializes"));
        c.set_meta("train.weights", serde_json::to_string(&self.weights).expect("weights serialize"));
        c.set_meta("train.history", serde_json::to_string(&self.history).expect("history serializes"));
        c.set_meta("state.epoch", s.epoch);
        c.set_meta("state.step", s.step);
        c.set_meta("state.cursor", s.cursor);
        c.set_meta("state.finished", s.finished);
        c.set_meta("state.since_improvement", s.epochs_since_improvement);
        c.set_meta("state.best_score", serde_json::to_string(&s.best_score).expect("f64"));
        c.set_meta("state.best_epoch", serde_json::to_string(&s.best_epoch).expect("usize"));
        c.set_meta("state.rng.stream", s.rng.get_stream());
        c.set_meta("state.rng.word_pos", s.rng.get_word_pos());
        let seed = s.rng.get_seed();
        c.put_u64("state.rng.seed", &seed.chunks(8).map(|b| u64::from_le_bytes(b.try_into().expect("8"))).collect::<Vec<_>>())?;
        let as_u64 = |v: &[usize]| v.iter().map(|&i| i as u64).collect::<Vec<_>>();
        c.put_u64("state.train_idx", &as_u64(&s.train_idx))?;
        c.put_u64("state.val_idx", &as_u64(&s.val_idx))?;
        c.put_u64("state.order", &as_u64(&s.order))?;
        c.put_tensor("state.acc", &s.acc.to_tensor())?;
        c.set_meta("adam.step", s.adam.step);
        c.put_tensor("adam.hyper", &Tensor::<f64>::from_f64(&[3], &[s.adam.beta1, s.adam.beta2, s.adam.eps])?)?;
        for (i, (m, v)) in s.adam.m.iter().zip(&s.adam.v).enumerate() {
            c.put_tensor(&format!("adam.m.{i}"), m)?;
            c.put_tensor(&format!("adam.v.{i}"), v)?;
        }
        c.set_meta("state.has_best", self.best.is_some());
        if let Some(b) = &self.best {
            c.put_params("best", b)?;
        }
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Restores a trainer from a checkpoint; `data` and `components` must be
    /// the ones the checkpoint was trained with.
    pub fn from_container(c: &Container, data: &'a Dataset, components: &'a LossComponents<T>) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let json = |key: &str| -> Result<String> {
            c.meta(key).map(str::to_owned)
        };
        let bad = |key: &str, e: serde_json::Error| Error::Checkpoint(format!("{key}: {e}"));
        let config: TrainConfig = serde_json::from_str(&json("train.config")?).map_err(|e| bad("train.config", e))?;
        let weights: LossWeights = serde_json::from_str(&json("train.weights")?).map_err(|e| bad("train.weights", e))?;
        let history: Vec<EpochRecord> = serde_json::from_str(&json("train.history")?).map_err(|e| bad("train.history", e))?;
        let best_score: Option<f64> = serde_json::from_str(&json("state.best_score")?).map_err(|e| bad("state.best_score", e))?;
        let best_epoch: Option<usize> = serde_json::from_str(&json("state.best_epoch")?).map_err(|e| bad("state.best_epoch", e))?;
        let model = HierarchicalVqvae::<T>::read_from(c)?;

        let seed_words = c.u64s("state.rng.seed")?;
        if seed_words.len() != 4 {
            return Err(Error::Checkpoint("rng seed must hold four words".into()));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_mut(8).zip(&seed_words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(c.meta_parse("state.rng.stream")?);
        rng.set_word_pos(c.meta_parse("state.rng.word_pos")?);

        let idx = |key: &str| -> Result<Vec<usize>> {
            let v: Vec<usize> = c.u64s(key)?.iter().map(|&i| i as usize).collect();
            if let Some(&i) = v.iter().find(|&&i| i >= data.len()) {
                return Err(Error::Checkpoint(format!("{key} refers to clip {i} of {}", data.len())));
            }
            Ok(v)
        };
        let hyper = c.tensor::<f64>("adam.hyper")?;
        if hyper.len() != 3 {
            return Err(Error::Checkpoint("adam.hyper must hold three values".into()));
        }
        let mut adam = Adam::with_hyper(&model.store, hyper.data()[0], hyper.data()[1], hyper.data()[2]);
        adam.step = c.meta_parse("adam.step")?;
        for i in 0..adam.m.len() {
            let m = c.tensor::<T>(&format!("adam.m.{i}"))?;
            let v = c.tensor::<T>(&format!("adam.v.{i}"))?;
            if m.shape() != adam.m[i].shape() || v.shape() != adam.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer moment {i} has the wrong shape")));
            }
            adam.m[i] = m;
            adam.v[i] = v;
        }
        let best = if c.meta_parse::<bool>("state.has_best")? {
            let mut b = model.store.clone();
            c.load_params("best", &mut b)?;
            Some(b)
        } else {
            None
        };
        if data.speakers != model.speakers.ids {
            return Err(Error::Data("dataset speakers differ from the checkpoint's speaker table".into()));
        }
        let state = TrainState {
            epoch: c.meta_parse("state.epoch")?,
            step: c.meta_parse("state.step")?,
            adam,
            best_score,
            best_epoch,
            epochs_since_improvement: c.meta_parse("state.since_improvement")?,
            rng,
            train_idx: idx("state.train_idx")?,
            val_idx: idx("state.val_idx")?,
            order: idx("state.order")?,
            cursor: c.meta_parse("state.cursor")?,
            finished: c.meta_parse("state.finished")?,
            acc: Accumulator::from_tensor(&c.tensor::<f64>("state.acc")?)?,
        };
        Ok(Self {
            model,
            data,
            config,
            weights,
            components,
            state,
            history,
            best,
        })
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, data: &'a Dataset, components: &'a LossComponents<T>) -> Result<Self> {
        Self::from_container(&Container::load(path)?, data, components)
    }
}

/// Trains until the epoch budget or early stopping ends the run.
pub fn fit<T: Scalar>(
    model: HierarchicalVqvae<T>,
    data: &Dataset,
    config: TrainConfig,
    weights: LossWeights,
    components: &LossComponents<T>,
) -> Result<FitResult<T>> {
    let mut t = Trainer::new(model, data, config, weights, components)?;
    t.run()?;
    Ok(t.into_result())
}
