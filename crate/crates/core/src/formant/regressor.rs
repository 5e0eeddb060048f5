use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::diffcore::{batch_gradients, Adam, Bound, Conv1dLayer, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{FormantTrack, SynthCorpus, NUM_FORMANTS};

const CONTEXT: usize = 5;
const HIDDEN: usize = 32;
/// Bound on the pre-sigmoid gaps, keeping every gap strictly positive.
const GAP_LIMIT: f64 = 6.0;

/// Frame-context network mapping log-mel frames to `K` ordered formants in
/// (0, 1). Output `k` is the running sum of `k` sigmoid gaps divided by `K`.
#[derive(Clone, Debug)]
pub struct FormantRegressor<T> {
    pub store: ParamStore<T>,
    input: Conv1dLayer,
    hidden: Conv1dLayer,
    head: Conv1dLayer,
    pub mel_bands: usize,
    pub input_mean: f64,
    pub input_std: f64,
}

impl<T: Scalar> FormantRegressor<T> {
    pub fn new(mel_bands: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = Conv1dLayer::same(&mut store, "input", mel_bands, HIDDEN, CONTEXT, &mut rng)?;
        let hidden = Conv1dLayer::same(&mut store, "hidden", HIDDEN, HIDDEN, 1, &mut rng)?;
        let head = Conv1dLayer::same(&mut store, "head", HIDDEN, NUM_FORMANTS, 1, &mut rng)?;
        Ok(Self {
            store,
            input,
            hidden,
            head,
            mel_bands,
            input_mean: 0.0,
            input_std: 1.0,
        })
    }

    /// `[frames, mel_bands]` → `[frames, K]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let centered = tape.add_scalar(x, T::lit(-self.input_mean))?;
        let xn = tape.scale(centered, T::lit(1.0 / self.input_std))?;
        let h = self.input.forward(tape, p, xn)?;
        let h = tape.tanh(h)?;
        let h = self.hidden.forward(tape, p, h)?;
        let h = tape.tanh(h)?;
        let raw = self.head.forward(tape, p, h)?;
        let g = tape.scale(raw, T::lit(1.0 / GAP_LIMIT))?;
        let g = tape.tanh(g)?;
        let g = tape.scale(g, T::lit(GAP_LIMIT))?;
        let gaps = tape.sigmoid(g)?;
        let k = NUM_FORMANTS;
        let cumulative = Tensor::from_fn(&[k, k], |i| {
            if i / k <= i % k {
                T::lit(1.0 / k as f64)
            } else {
                T::zero()
            }
        });
        let c = tape.constant(cumulative);
        tape.matmul(gaps, c)
    }

    /// Mean squared difference of predicted formants. The `x` branch is
    /// detached, so gradients reach only `x_dec`.
    pub fn formant_loss(&self, tape: &mut Tape<T>, p: &Bound, x: Var, x_dec: Var) -> Result<Var> {
        let a = tape.value(x).shape().to_vec();
        let b = tape.value(x_dec).shape().to_vec();
        if a != b {
            return Err(Error::shape("formant_loss", format!("{a:?} vs {b:?}")));
        }
        let target = self.forward(tape, p, x)?;
        let target = tape.stop_gradient(target)?;
        let pred = self.forward(tape, p, x_dec)?;
        tape.mse(target, pred)
    }

    pub fn predict(&self, mel: &Tensor<f64>) -> Result<FormantTrack> {
        if mel.rows() == 0 || mel.cols() != self.mel_bands {
            return Err(Error::shape("predict_formants", format!("{:?}", mel.shape())));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(mel.cast());
        let y = self.forward(&mut tape, &p, x)?;
        FormantTrack::new(tape.value(y).cast())
    }

    /// Value of the formant loss between two spectrograms.
    pub fn loss_value(&self, x: &Tensor<f64>, x_dec: &Tensor<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let a = tape.constant(x.cast());
        let b = tape.constant(x_dec.cast());
        let l = self.formant_loss(&mut tape, &p, a, b)?;
        Ok(tape.value(l).item().as_f64())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("formant-regressor");
        c.set_meta("mel_bands", self.mel_bands);
        c.put_tensor("input_norm", &Tensor::<f64>::from_f64(&[2], &[self.input_mean, self.input_std])?)?;
        c.put_params("param", &self.store)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("formant-regressor")?;
        let mut r = Self::new(c.meta_parse("mel_bands")?, 0)?;
        let norm = c.tensor::<f64>("input_norm")?;
        if norm.len() != 2 {
            return Err(Error::Checkpoint("input_norm must hold two values".into()));
        }
        r.input_mean = norm.data()[0];
        r.input_std = norm.data()[1];
        c.load_params("param", &mut r.store)?;
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorTrainReport {
    /// Mean training loss over each epoch.
    pub train_mse: Vec<f64>,
    /// MSE on the held-out items after the final epoch; `None` if no items were held out.
    pub heldout_mse: Option<f64>,
    pub train_items: usize,
    pub heldout_items: usize,
}

/// Fits the regressor to corpus labels with Adam on mean squared error.
pub fn train_formant_regressor<T: Scalar>(
    corpus: &SynthCorpus,
    cfg: &RegressorTrainConfig,
) -> Result<(FormantRegressor<T>, RegressorTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Data("empty formant corpus".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let bands = corpus.items[0].mel.frames.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((corpus.len() as f64) * cfg.heldout_fraction).floor() as usize;
    let n_held = if corpus.len() > 1 { n_held.min(corpus.len() - 1) } else { 0 };
    let (held, train) = order.split_at(n_held);
    let mut train = train.to_vec();

    let mut reg = FormantRegressor::<T>::new(bands, cfg.seed)?;
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
    for &i in &train {
        for v in corpus.items[i].mel.frames.data() {
            sum += v;
            sum_sq += v * v;
            count += 1.0;
        }
    }
    reg.input_mean = sum / count;
    reg.input_std = (sum_sq / count - reg.input_mean * reg.input_mean).sqrt().max(1e-6);

    let items: Vec<(Tensor<T>, Tensor<T>)> = corpus
        .items
        .iter()
        .map(|it| (it.mel.frames.cast(), it.labels.values.cast()))
        .collect();
    let mut adam = Adam::new(&reg.store);
    let mut train_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train.chunks(cfg.batch_size) {
            let batch: Vec<&(Tensor<T>, Tensor<T>)> = chunk.iter().map(|&i| &items[i]).collect();
            let model = &reg;
            let scale = T::lit(1.0 / batch.len() as f64);
            let (losses, grads) = batch_gradients(&reg.store, &batch, scale, |tape, p, item| {
                let x = tape.constant(item.0.clone());
                let y = tape.constant(item.1.clone());
                let pred = model.forward(tape, p, x)?;
                tape.mse(pred, y)
            })?;
            reg.store.zero_grad();
            reg.store.add_grads(&grads);
            if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!("formant regressor loss {l} at epoch {}", epoch + 1)));
            }
            total += losses.iter().sum::<f64>();
            adam.update(&mut reg.store, cfg.lr)?;
        }
        train_mse.push(total / train.len() as f64);
    }
    let heldout_mse = if held.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for &i in held {
            let pred = reg.predict(&corpus.items[i].mel.frames)?;
            let lab = &corpus.items[i].labels.values;
            let se: f64 = pred
                .values
                .data()
                .iter()
                .zip(lab.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += se / lab.len() as f64;
        }
        Some(total / held.len() as f64)
    };
    Ok((
        reg,
        RegressorTrainReport {
            train_mse,
            heldout_mse,
            train_items: train.len(),
            heldout_items: held.len(),
        },
    ))
}
