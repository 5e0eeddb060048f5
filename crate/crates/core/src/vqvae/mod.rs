//! Hierarchical VQ-VAE with a learnable speaker codebook.

mod quantizer;
mod speaker;

pub use quantizer::{nearest_code, FrozenLevel, Quantized, VectorQuantizer};
pub use speaker::SpeakerCodebook;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diffcore::{Bound, Conv1dLayer, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqvaeConfig {
    pub mel_bands: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub codes: usize,
    pub speaker_dim: usize,
    /// Cumulative downsampling of each level relative to the input frames.
    pub downsample: [usize; LEVELS],
    pub leaky_slope: f64,
    /// Fixed affine input normalization; the decoder applies the inverse.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        Self {
            mel_bands: 80,
            channels: 64,
            latent_dim: 64,
            codes: 128,
            speaker_dim: 16,
            downsample: [2, 4, 8],
            leaky_slope: 0.2,
            input_mean: -10.0,
            input_std: 6.0,
        }
    }
}

impl VqvaeConfig {
    fn strides(&self) -> Result<[usize; LEVELS]> {
        let mut prev = 1;
        let mut out = [0; LEVELS];
        for (l, &f) in self.downsample.iter().enumerate() {
            if f <= prev || f % prev != 0 {
                return Err(Error::Config(format!(
                    "downsampling factors must increase and divide each other, got {:?}",
                    self.downsample
                )));
            }
            out[l] = f / prev;
            prev = f;
        }
        Ok(out)
    }

    pub fn total_factor(&self) -> usize {
        self.downsample[LEVELS - 1]
    }

    pub fn validate(&self) -> Result<()> {
        self.strides()?;
        if self.mel_bands == 0 || self.channels == 0 || self.latent_dim == 0 || self.speaker_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.codes < 2 {
            return Err(Error::Config("each level needs at least 2 codes".into()));
        }
        if !(self.input_std > 0.0) || !self.input_mean.is_finite() {
            return Err(Error::Config("input normalization must be finite with positive std".into()));
        }
        Ok(())
    }
}

/// Drops trailing frames so the count is a multiple of `factor`.
pub fn trim_frames(mel: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let keep = mel.rows() / factor * factor;
    mel.slice_rows(0, keep)
}

/// Repeats the last frame so the count is a multiple of `factor`.
pub fn pad_frames(mel: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let n = mel.rows();
    let target = n.div_ceil(factor).max(1) * factor;
    let c = mel.cols();
    let mut data = mel.data().to_vec();
    for _ in n..target {
        let last = data[(n - 1) * c..n * c].to_vec();
        data.extend_from_slice(&last);
    }
    Tensor::new(vec![target, c], data).expect("consistent shape")
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Conv1dLayer,
    project: Conv1dLayer,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    mix: Conv1dLayer,
    up: Conv1dLayer,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub x_dec: Var,
    pub z: Vec<Var>,
    pub q: Vec<Var>,
    pub q_st: Vec<Var>,
    pub indices: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct HierarchicalVqvae<T> {
    pub config: VqvaeConfig,
    pub store: ParamStore<T>,
    stem: Conv1dLayer,
    encoder: Vec<EncoderLevel>,
    pub quantizers: Vec<VectorQuantizer>,
    pub speakers: SpeakerCodebook,
    decoder: Vec<DecoderLevel>,
    out: Conv1dLayer,
}

impl<T: Scalar> HierarchicalVqvae<T> {
    pub fn new(config: VqvaeConfig, speaker_ids: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let strides = config.strides()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, d, s) = (config.channels, config.latent_dim, config.speaker_dim);
        let stem = Conv1dLayer::same(&mut store, "enc.stem", config.mel_bands, c, 3, &mut rng)?;
        let mut encoder = Vec::with_capacity(LEVELS);
        for (l, &stride) in strides.iter().enumerate() {
            encoder.push(EncoderLevel {
                down: Conv1dLayer::resample(&mut store, &format!("enc{}.down", l + 1), c, c, stride, false, &mut rng)?,
                project: Conv1dLayer::same(&mut store, &format!("enc{}.project", l + 1), c, d, 1, &mut rng)?,
            });
        }
        let quantizers = (0..LEVELS)
            .map(|l| VectorQuantizer::new(&mut store, l + 1, config.codes, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let speakers = SpeakerCodebook::new(&mut store, speaker_ids, s, &mut rng)?;
        // Decoder levels run top-down; level L sees only its own codes.
        let mut decoder = Vec::with_capacity(LEVELS);
        for l in (0..LEVELS).rev() {
            let c_in = if l == LEVELS - 1 { d + s } else { c + d + s };
            decoder.push(DecoderLevel {
                mix: Conv1dLayer::same(&mut store, &format!("dec{}.mix", l + 1), c_in, c, 3, &mut rng)?,
                up: Conv1dLayer::resample(&mut store, &format!("dec{}.up", l + 1), c, c, strides[l], true, &mut rng)?,
            });
        }
        let out = Conv1dLayer::same(&mut store, "dec.out", c, config.mel_bands, 3, &mut rng)?;
        Ok(Self {
            config,
            store,
            stem,
            encoder,
            quantizers,
            speakers,
            decoder,
            out,
        })
    }

    fn leaky(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        tape.leaky_relu(v, T::lit(self.config.leaky_slope))
    }

    /// Latents `z_1..z_L`, level `l` of length `N / downsample[l]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let shape = tape.value(x).shape().to_vec();
        let factor = self.config.total_factor();
        if shape.len() != 2 || shape[1] != self.config.mel_bands || shape[0] == 0 || shape[0] % factor != 0 {
            return Err(Error::shape(
                "encode",
                format!("input {shape:?}: need [N, {}] with N a positive multiple of {factor}", self.config.mel_bands),
            ));
        }
        let centered = tape.add_scalar(x, T::lit(-self.config.input_mean))?;
        let xn = tape.scale(centered, T::lit(1.0 / self.config.input_std))?;
        let h = self.stem.forward(tape, p, xn)?;
        let mut h = self.leaky(tape, h)?;
        let mut z = Vec::with_capacity(LEVELS);
        for level in &self.encoder {
            let d = level.down.forward(tape, p, h)?;
            h = self.leaky(tape, d)?;
            z.push(level.project.forward(tape, p, h)?);
        }
        Ok(z)
    }

    fn speaker_rows(&self, tape: &mut Tape<T>, p: &Bound, speaker: usize, frames: usize) -> Result<Var> {
        tape.embedding(p[self.speakers.embeddings], &vec![speaker; frames])
    }

    /// Decoder from the quantized levels (finest first) and a speaker index.
    pub fn decode(&self, tape: &mut Tape<T>, p: &Bound, q_st: &[Var], speaker: usize) -> Result<Var> {
        if q_st.len() != LEVELS {
            return Err(Error::shape("decode", format!("expected {LEVELS} levels, got {}", q_st.len())));
        }
        if speaker >= self.speakers.len() {
            return Err(Error::Data(format!("speaker index {speaker} out of range")));
        }
        let mut u: Option<Var> = None;
        for (step, level) in self.decoder.iter().enumerate() {
            let l = LEVELS - 1 - step;
            let frames = tape.value(q_st[l]).rows();
            let spk = self.speaker_rows(tape, p, speaker, frames)?;
            let input = match u {
                None => tape.concat(&[q_st[l], spk], 1)?,
                Some(prev) => {
                    if tape.value(prev).rows() != frames {
                        return Err(Error::shape("decode", "level lengths do not line up"));
                    }
                    tape.concat(&[prev, q_st[l], spk], 1)?
                }
            };
            let m = level.mix.forward(tape, p, input)?;
            let m = self.leaky(tape, m)?;
            let up = level.up.forward(tape, p, m)?;
            u = Some(self.leaky(tape, up)?);
        }
        let y = self.out.forward(tape, p, u.expect("at least one level"))?;
        let y = tape.scale(y, T::lit(self.config.input_std))?;
        tape.add_scalar(y, T::lit(self.config.input_mean))
    }

    /// `encode → quantize_st → decode`. With `frozen`, each level uses the
    /// recorded assignment instead of a nearest-code search.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, speaker: usize, frozen: Option<&[FrozenLevel<T>]>) -> Result<Forward> {
        let z = self.encode(tape, p, x)?;
        let mut q = Vec::with_capacity(LEVELS);
        let mut q_st = Vec::with_capacity(LEVELS);
        let mut indices = Vec::with_capacity(LEVELS);
        for (l, (vq, &zl)) in self.quantizers.iter().zip(&z).enumerate() {
            let out = match frozen {
                Some(f) => vq.quantize_frozen(tape, p, zl, &f[l])?,
                None => vq.quantize_st(tape, p, zl)?,
            };
            q.push(out.q);
            q_st.push(out.q_st);
            indices.push(out.indices);
        }
        let x_dec = self.decode(tape, p, &q_st, speaker)?;
        Ok(Forward { x_dec, z, q, q_st, indices })
    }

    pub fn forward_reconstruct(&self, tape: &mut Tape<T>, p: &Bound, x: Var, speaker: &str) -> Result<Forward> {
        let s = self.speakers.index(speaker)?;
        self.forward(tape, p, x, s, None)
    }

    /// Assignments and `q - z` offsets of a forward pass, for [`Self::forward`] with `frozen`.
    pub fn freeze(&self, tape: &Tape<T>, fwd: &Forward) -> Vec<FrozenLevel<T>> {
        (0..LEVELS)
            .map(|l| {
                let q = tape.value(fwd.q[l]);
                let z = tape.value(fwd.z[l]);
                let offset = Tensor::new(
                    q.shape().to_vec(),
                    q.data().iter().zip(z.data()).map(|(&a, &b)| a - b).collect(),
                )
                .expect("matching shapes");
                FrozenLevel {
                    indices: fwd.indices[l].clone(),
                    offset,
                    z: z.clone(),
                    q: q.clone(),
                }
            })
            .collect()
    }

    /// Decodes `mel` with `speaker`'s embedding. Frame count must be a
    /// multiple of the total downsampling factor.
    pub fn convert_speaker(&self, mel: &Tensor<f64>, speaker: &str) -> Result<Tensor<f64>> {
        let s = self.speakers.index(speaker)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(mel.cast());
        let fwd = self.forward(&mut tape, &p, x, s, None)?;
        Ok(tape.value(fwd.x_dec).cast())
    }

    /// Reconstruction with the source speaker; the same path as conversion.
    pub fn reconstruct(&self, mel: &Tensor<f64>, speaker: &str) -> Result<Tensor<f64>> {
        self.convert_speaker(mel, speaker)
    }

    pub fn encode_values(&self, mel: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(mel.cast());
        let z = self.encode(&mut tape, &p, x)?;
        Ok(z.iter().map(|&v| tape.value(v).cast()).collect())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("vqvae");
        self.write_into(&mut c)?;
        Ok(c)
    }

    /// Writes config, speaker ids and parameters under `model.*`.
    pub fn write_into(&self, c: &mut Container) -> Result<()> {
        c.set_meta("model.config", serde_json::to_string(&self.config).expect("config serializes"));
        c.set_meta("model.speakers", serde_json::to_string(&self.speakers.ids).expect("ids serialize"));
        c.put_params("model", &self.store)
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let config: VqvaeConfig = serde_json::from_str(c.meta("model.config")?)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let ids: Vec<String> = serde_json::from_str(c.meta("model.speakers")?)
            .map_err(|e| Error::Checkpoint(format!("bad speaker list: {e}")))?;
        let mut m = Self::new(config, &ids, 0)?;
        c.load_params("model", &mut m.store)?;
        Ok(m)
    }
}

/// `(codebook, commitment)`: `Σ_l mean((sg z_l − q_l)²)` and `Σ_l mean((z_l − sg q_l)²)`.
pub fn vq_losses<T: Scalar>(tape: &mut Tape<T>, z: &[Var], q: &[Var]) -> Result<(Var, Var)> {
    if z.len() != q.len() || z.is_empty() {
        return Err(Error::shape("vq_losses", format!("{} latents vs {} codes", z.len(), q.len())));
    }
    let mut code = None;
    let mut commit = None;
    for (&zl, &ql) in z.iter().zip(q) {
        let zs = tape.stop_gradient(zl)?;
        let c = tape.mse(zs, ql)?;
        let qs = tape.stop_gradient(ql)?;
        let m = tape.mse(zl, qs)?;
        code = Some(match code {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
        commit = Some(match commit {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok((code.expect("non-empty"), commit.expect("non-empty")))
}

/// [`vq_losses`] with every stop-gradient operand replaced by its recorded
/// value. The exact derivative of this surrogate equals the stop-gradient
/// gradient of [`vq_losses`], so it can be checked by finite differences.
pub fn vq_losses_frozen<T: Scalar>(tape: &mut Tape<T>, z: &[Var], q: &[Var], frozen: &[FrozenLevel<T>]) -> Result<(Var, Var)> {
    if z.len() != q.len() || z.len() != frozen.len() || z.is_empty() {
        return Err(Error::shape("vq_losses", "level counts differ"));
    }
    let mut code: Option<Var> = None;
    let mut commit: Option<Var> = None;
    for ((&zl, &ql), f) in z.iter().zip(q).zip(frozen) {
        let z0 = tape.constant(f.z.clone());
        let q0 = tape.constant(f.q.clone());
        let c = tape.mse(z0, ql)?;
        let m = tape.mse(zl, q0)?;
        code = Some(match code {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
        commit = Some(match commit {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok((code.expect("non-empty"), commit.expect("non-empty")))
}

/// Mean squared error over all entries.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_dec: Var) -> Result<Var> {
    tape.mse(x_dec, x)
}

#[cfg(test)]
mod tests;
