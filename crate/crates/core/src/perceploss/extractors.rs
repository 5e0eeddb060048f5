use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::Container;
use crate::diffcore::{batch_gradients, Adam, Bound, Conv1dLayer, ParamStore, Tape, Tensor, Var};
use crate::dsp::{build_mel_filterbank, SpectrogramConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::degrade::{degraded_mel, DEGRADATION_DURATION};
use super::FeatureExtractor;

pub const QUALITY_TAPS: usize = 4;
pub const PHONEME_TAPS: usize = 1;

const QUALITY_WIDTHS: [usize; QUALITY_TAPS] = [32, 32, 32, 16];
const PHONEME_WIDTH: usize = 64;

fn normalize<T: Scalar>(tape: &mut Tape<T>, x: Var, mean: f64, std: f64) -> Result<Var> {
    let c = tape.add_scalar(x, T::lit(-mean))?;
    tape.scale(c, T::lit(1.0 / std))
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, bands: usize) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 2 || s[0] == 0 || s[1] != bands {
        return Err(Error::shape("activations", format!("{s:?}, expected [frames, {bands}]")));
    }
    Ok(())
}

/// Four tanh conv layers over mel frames, each tapped, followed by a mean
/// pool over time and a sigmoid head scaled to (1, 5).
#[derive(Clone, Debug)]
pub struct QualityProxy<T> {
    pub store: ParamStore<T>,
    layers: Vec<Conv1dLayer>,
    head: Conv1dLayer,
    pub mel_bands: usize,
    pub input_mean: f64,
    pub input_std: f64,
}

impl<T: Scalar> QualityProxy<T> {
    pub fn new(mel_bands: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(QUALITY_TAPS);
        let mut c_in = mel_bands;
        for (j, &w) in QUALITY_WIDTHS.iter().enumerate() {
            layers.push(Conv1dLayer::same(&mut store, &format!("layer{j}"), c_in, w, 3, &mut rng)?);
            c_in = w;
        }
        let head = Conv1dLayer::same(&mut store, "head", c_in, 1, 1, &mut rng)?;
        Ok(Self {
            store,
            layers,
            head,
            mel_bands,
            input_mean: -10.0,
            input_std: 6.0,
        })
    }

    pub fn taps(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        check_input(tape, x, self.mel_bands)?;
        let mut h = normalize(tape, x, self.input_mean, self.input_std)?;
        let mut out = Vec::with_capacity(QUALITY_TAPS);
        for layer in &self.layers {
            h = layer.forward(tape, p, h)?;
            h = tape.tanh(h)?;
            out.push(h);
        }
        Ok(out)
    }

    /// The `[1, 1]` score node.
    pub fn score_var(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let taps = self.taps(tape, p, x)?;
        let last = *taps.last().expect("four taps");
        let n = tape.value(last).rows();
        let pool = tape.constant(Tensor::full(&[1, n], T::lit(1.0 / n as f64)));
        let pooled = tape.matmul(pool, last)?;
        let raw = self.head.forward(tape, p, pooled)?;
        let s = tape.sigmoid(raw)?;
        let s = tape.scale(s, T::lit(4.0))?;
        tape.add_scalar(s, T::lit(1.0))
    }

    pub fn quality_score(&self, mel: &Tensor<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(mel.cast());
        let s = self.score_var(&mut tape, &p, x)?;
        Ok(tape.value(s).item().as_f64())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("quality-proxy");
        c.set_meta("mel_bands", self.mel_bands);
        c.put_tensor("input_norm", &Tensor::<f64>::from_f64(&[2], &[self.input_mean, self.input_std])?)?;
        c.put_params("param", &self.store)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("quality-proxy")?;
        let mut q = Self::new(c.meta_parse("mel_bands")?, 0)?;
        let norm = c.tensor::<f64>("input_norm")?;
        if norm.len() != 2 {
            return Err(Error::Checkpoint("input_norm must hold two values".into()));
        }
        q.input_mean = norm.data()[0];
        q.input_std = norm.data()[1];
        c.load_params("param", &mut q.store)?;
        Ok(q)
    }
}

impl<T: Scalar> FeatureExtractor<T> for QualityProxy<T> {
    fn tapped_layers(&self) -> Vec<String> {
        (0..QUALITY_TAPS).map(|j| format!("layer{j}")).collect()
    }

    fn activations(&self, tape: &mut Tape<T>, mel: Var) -> Result<Vec<Var>> {
        let p = self.store.bind(tape, false);
        self.taps(tape, &p, mel)
    }
}

/// Randomly initialised two-layer conv stack whose second layer is the tap.
/// Never trained; random features still give a valid distance.
#[derive(Clone, Debug)]
pub struct PhonemeProxy<T> {
    pub store: ParamStore<T>,
    layers: [Conv1dLayer; 2],
    pub mel_bands: usize,
    pub input_mean: f64,
    pub input_std: f64,
}

impl<T: Scalar> PhonemeProxy<T> {
    pub fn new(mel_bands: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = Conv1dLayer::same(&mut store, "layer0", mel_bands, PHONEME_WIDTH, 5, &mut rng)?;
        let b = Conv1dLayer::same(&mut store, "layer1", PHONEME_WIDTH, PHONEME_WIDTH, 3, &mut rng)?;
        Ok(Self {
            store,
            layers: [a, b],
            mel_bands,
            input_mean: -10.0,
            input_std: 6.0,
        })
    }

    pub fn taps(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        check_input(tape, x, self.mel_bands)?;
        let mut h = normalize(tape, x, self.input_mean, self.input_std)?;
        for layer in &self.layers {
            h = layer.forward(tape, p, h)?;
            h = tape.tanh(h)?;
        }
        Ok(vec![h])
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("phoneme-proxy");
        c.set_meta("mel_bands", self.mel_bands);
        c.put_tensor("input_norm", &Tensor::<f64>::from_f64(&[2], &[self.input_mean, self.input_std])?)?;
        c.put_params("param", &self.store)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("phoneme-proxy")?;
        let mut q = Self::new(c.meta_parse("mel_bands")?, 0)?;
        let norm = c.tensor::<f64>("input_norm")?;
        if norm.len() != 2 {
            return Err(Error::Checkpoint("input_norm must hold two values".into()));
        }
        q.input_mean = norm.data()[0];
        q.input_std = norm.data()[1];
        c.load_params("param", &mut q.store)?;
        Ok(q)
    }
}

impl<T: Scalar> FeatureExtractor<T> for PhonemeProxy<T> {
    fn tapped_layers(&self) -> Vec<String> {
        vec!["layer1".into()]
    }

    fn activations(&self, tape: &mut Tape<T>, mel: Var) -> Result<Vec<Var>> {
        let p = self.store.bind(tape, false);
        self.taps(tape, &p, mel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityPretrainConfig {
    pub n_items: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
    pub spectrogram: SpectrogramConfig,
}

impl Default for QualityPretrainConfig {
    fn default() -> Self {
        Self {
            n_items: 300,
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            heldout_fraction: 0.1,
            seed: 0,
            spectrogram: SpectrogramConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityPretrainReport {
    pub train_mse: Vec<f64>,
    pub heldout_mse: Option<f64>,
    pub train_items: usize,
    pub heldout_items: usize,
}

/// Target score for noise and smearing severities in [0, 1]: 5 when clean,
/// 1 when both are at full strength.
pub(crate) fn severity_score(noise: f64, smear: f64) -> f64 {
    5.0 - 2.0 * noise - 2.0 * smear
}

/// Trains the head and conv stack to regress the severity score of
/// generated degraded vowels. A fifth of the items are clean, a fifth carry
/// only noise, a fifth only smearing, and the rest both.
pub fn pretrain_quality_proxy<T: Scalar>(cfg: &QualityPretrainConfig) -> Result<(QualityProxy<T>, QualityPretrainReport)> {
    if cfg.n_items < 2 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("quality pretraining needs ≥ 2 items, epochs and batch size > 0".into()));
    }
    let fb = build_mel_filterbank(&cfg.spectrogram, SAMPLE_RATE)?;
    let data: Vec<(Tensor<f64>, f64)> = (0..cfg.n_items)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5155_414c);
            rng.set_stream(i as u64);
            let mut draw = || rng.random_range(0.0..=1.0);
            let (noise, smear) = match i % 5 {
                0 => (0.0, 0.0),
                1 => (draw(), 0.0),
                2 => (0.0, draw()),
                _ => (draw(), draw()),
            };
            let mel = degraded_mel(&mut rng, noise, smear, DEGRADATION_DURATION, &cfg.spectrogram, &fb)?;
            Ok((mel.frames, severity_score(noise, smear)))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_held = (((data.len() as f64) * cfg.heldout_fraction).floor() as usize).min(data.len() - 1);
    let (held, train) = order.split_at(n_held);
    let mut train = train.to_vec();

    let mut model = QualityProxy::<T>::new(cfg.spectrogram.mel_bands, cfg.seed)?;
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
    for &i in &train {
        for v in data[i].0.data() {
            sum += v;
            sum_sq += v * v;
            count += 1.0;
        }
    }
    model.input_mean = sum / count;
    model.input_std = (sum_sq / count - model.input_mean * model.input_mean).sqrt().max(1e-6);

    let items: Vec<(Tensor<T>, T)> = data.iter().map(|(m, s)| (m.cast(), T::lit(*s))).collect();
    let mut adam = Adam::new(&model.store);
    let mut train_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train.chunks(cfg.batch_size) {
            let batch: Vec<&(Tensor<T>, T)> = chunk.iter().map(|&i| &items[i]).collect();
            let m = &model;
            let scale = T::lit(1.0 / batch.len() as f64);
            let (losses, grads) = batch_gradients(&model.store, &batch, scale, |tape, p, item| {
                let x = tape.constant(item.0.clone());
                let y = tape.constant(Tensor::full(&[1, 1], item.1));
                let s = m.score_var(tape, p, x)?;
                tape.mse(s, y)
            })?;
            if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!("quality proxy loss {l} at epoch {}", epoch + 1)));
            }
            total += losses.iter().sum::<f64>();
            model.store.zero_grad();
            model.store.add_grads(&grads);
            adam.update(&mut model.store, cfg.lr)?;
        }
        train_mse.push(total / train.len() as f64);
    }
    let heldout_mse = if held.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for &i in held {
            let d = model.quality_score(&data[i].0)? - data[i].1;
            total += d * d;
        }
        Some(total / held.len() as f64)
    };
    Ok((
        model,
        QualityPretrainReport {
            train_mse,
            heldout_mse,
            train_items: train.len(),
            heldout_items: held.len(),
        },
    ))
}
