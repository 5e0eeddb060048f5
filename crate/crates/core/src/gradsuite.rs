//! Finite-difference verification of every tape primitive and every
//! composite training loss, shared by the `grad-check` command and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{check_params, finite_difference_check, FdReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::formant::FormantRegressor;
use crate::perceploss::{representation_loss, FeatureExtractor, PhonemeProxy, QualityProxy};
use crate::training::{total_loss, LossComponents, LossWeights};
use crate::vqvae::{reconstruction_loss, vq_losses_frozen, HierarchicalVqvae, VqvaeConfig};

/// Largest relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;

pub type PrimitiveCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>);

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl SuiteCheck {
    fn new(name: impl Into<String>, r: &FdReport) -> Self {
        Self {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Fixed deterministic weights, so every output coordinate gets a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 0.7 + 0.3).sin()));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// `(name, input shape, op applied to the input)` for every tape primitive.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        ("add", vec![3, 4], Box::new(|t, x| {
            let c = t.constant(Tensor::full(&[3, 4], 0.25));
            t.add(x, c)
        })),
        ("sub", vec![3, 4], Box::new(|t, x| {
            let sq = t.square(x)?;
            t.sub(x, sq)
        })),
        ("mul", vec![3, 4], Box::new(|t, x| t.mul(x, x))),
        ("scale", vec![5], Box::new(|t, x| t.scale(x, -1.7))),
        ("add_scalar", vec![5], Box::new(|t, x| t.add_scalar(x, 0.3))),
        ("matmul", vec![4, 6], Box::new(|t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let b = t.constant(random(&[6, 3], &mut rng));
            let left = t.matmul(x, b)?;
            let c = t.constant(random(&[2, 4], &mut rng));
            t.matmul(c, left)
        })),
        ("conv1d", vec![9, 3], Box::new(|t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let w = t.leaf(random(&[4, 3, 5], &mut rng));
            let b = t.leaf(random(&[5], &mut rng));
            let y = t.conv1d(x, w, Some(b), 2, 1)?;
            let y2 = t.mul(y, y)?;
            let n = t.value(y2).len();
            t.reshape(y2, &[n])
        })),
        ("conv_transpose1d", vec![5, 3], Box::new(|t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let w = t.leaf(random(&[4, 3, 2], &mut rng));
            let b = t.leaf(random(&[2], &mut rng));
            let y = t.conv_transpose1d(x, w, Some(b), 2, 1)?;
            t.mul(y, y)
        })),
        ("leaky_relu", vec![4, 4], Box::new(|t, x| t.leaky_relu(x, 0.2))),
        ("tanh", vec![8], Box::new(|t, x| t.tanh(x))),
        ("sigmoid", vec![8], Box::new(|t, x| t.sigmoid(x))),
        ("embedding", vec![4, 3], Box::new(|t, x| {
            let e = t.embedding(x, &[2, 0, 2, 3])?;
            t.mul(e, e)
        })),
        ("concat_cols", vec![3, 2], Box::new(|t, x| {
            let sq = t.square(x)?;
            t.concat(&[x, sq, x], 1)
        })),
        ("concat_rows", vec![3, 2], Box::new(|t, x| {
            let th = t.tanh(x)?;
            t.concat(&[th, x], 0)
        })),
        ("mean", vec![3, 3], Box::new(|t, x| {
            let sq = t.square(x)?;
            t.mean(sq)
        })),
        ("sum", vec![3, 3], Box::new(|t, x| {
            let th = t.tanh(x)?;
            t.sum(th)
        })),
        ("square", vec![6], Box::new(|t, x| t.square(x))),
        ("reshape", vec![2, 6], Box::new(|t, x| {
            let r = t.reshape(x, &[3, 4])?;
            t.tanh(r)
        })),
        ("straight_through", vec![3, 2], Box::new(|t, x| {
            let q = t.constant(Tensor::full(&[3, 2], 0.5));
            let st = t.straight_through(x, q)?;
            // value depends on x only through the output seed path
            let lin = t.add(st, x)?;
            t.mul(lin, x)
        })),
    ]
}

fn worst(name: &str, reports: &[(String, FdReport)]) -> SuiteCheck {
    let checked = reports.iter().map(|r| r.1.checked).sum();
    let max = reports.iter().map(|r| r.1.max_rel_error).fold(0.0, f64::max);
    SuiteCheck {
        name: name.into(),
        max_rel_error: max,
        checked,
    }
}

fn tiny_model(seed: u64) -> Result<HierarchicalVqvae<f64>> {
    let cfg = VqvaeConfig {
        mel_bands: 6,
        channels: 5,
        latent_dim: 4,
        codes: 8,
        speaker_dim: 3,
        downsample: [2, 4, 8],
        leaky_slope: 0.2,
        input_mean: -10.0,
        input_std: 4.0,
    };
    let mut model = HierarchicalVqvae::<f64>::new(cfg, &["a".to_string(), "b".to_string()], seed)?;
    // Larger decoder weights lift the deepest levels' gradients well above
    // the difference quotient's rounding floor.
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get_mut(id);
        if p.name.starts_with("dec") && p.name.ends_with("weight") {
            p.value.data_mut().iter_mut().for_each(|w| *w *= 3.0);
        }
    }
    Ok(model)
}

/// Runs every check. Model losses are differentiated under frozen code
/// assignments, whose exact gradients equal the straight-through ones.
pub fn run_gradient_suite() -> Result<Vec<SuiteCheck>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (name, shape, f) in primitive_cases() {
        // Its value is deliberately not the derivative's antiderivative.
        if name == "straight_through" {
            continue;
        }
        let x = random(&shape, &mut rng);
        let r = finite_difference_check(
            |tape, v| {
                let y = f(tape, v)?;
                weighted_sum(tape, y)
            },
            &x,
        )?;
        out.push(SuiteCheck::new(format!("op.{name}"), &r));
    }

    let bands = 6;
    let mel = |rng: &mut ChaCha8Rng, n: usize| Tensor::from_fn(&[n, bands], |_| rng.random_range(-16.0..-4.0));
    let x = mel(&mut rng, 8);
    let y = mel(&mut rng, 8);

    let model = tiny_model(11)?;
    let frozen = {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let fwd = model.forward(&mut tape, &p, xv, 1, None)?;
        model.freeze(&tape, &fwd)
    };
    let fwd_terms = |tape: &mut Tape<f64>, p: &crate::diffcore::Bound| -> Result<(Var, Var, Var)> {
        let xv = tape.constant(x.clone());
        let f = model.forward(tape, p, xv, 1, Some(&frozen))?;
        let r = reconstruction_loss(tape, xv, f.x_dec)?;
        let (c, m) = vq_losses_frozen(tape, &f.z, &f.q, &frozen)?;
        Ok((r, c, m))
    };
    let r = check_params(&model.store, |t, p| Ok(fwd_terms(t, p)?.0), None)?;
    out.push(worst("loss.reconstruction", &r));
    let r = check_params(&model.store, |t, p| Ok(fwd_terms(t, p)?.1), None)?;
    out.push(worst("loss.codebook", &r));
    let r = check_params(&model.store, |t, p| Ok(fwd_terms(t, p)?.2), None)?;
    out.push(worst("loss.commitment", &r));

    let mut reg = FormantRegressor::<f64>::new(bands, 3)?;
    reg.input_mean = -10.0;
    reg.input_std = 4.0;
    let r = finite_difference_check(
        |tape, v| {
            let p = reg.store.bind(tape, false);
            let xc = tape.constant(x.clone());
            let l = reg.formant_loss(tape, &p, xc, v)?;
            tape.scale(l, 1e4)
        },
        &y,
    )?;
    out.push(SuiteCheck::new("loss.formant", &r));

    let quality = QualityProxy::<f64>::new(bands, 4)?;
    let phoneme = PhonemeProxy::<f64>::new(bands, 5)?;
    for (name, ex) in [("loss.representation.quality", &quality as &dyn FeatureExtractor<f64>), ("loss.representation.phonetic", &phoneme)] {
        let r = finite_difference_check(
            |tape, v| {
                let xv = tape.constant(x.clone());
                representation_loss(tape, ex, xv, v)
            },
            &y,
        )?;
        out.push(SuiteCheck::new(name, &r));
    }
    let r = finite_difference_check(
        |tape, v| {
            let p = quality.store.bind(tape, false);
            quality.score_var(tape, &p, v)
        },
        &y,
    )?;
    out.push(SuiteCheck::new("quality.score", &r));

    let components = LossComponents {
        quality: Some(quality),
        phoneme: Some(phoneme),
        formant: Some(reg),
    };
    let weights = LossWeights::default();
    let r = check_params(
        &model.store,
        |t, p| {
            let xv = t.constant(x.clone());
            Ok(total_loss(t, &model, p, xv, 1, Some(&frozen), &weights, &components, weights.formant_from_epoch)?.0)
        },
        None,
    )?;
    out.push(worst("loss.total", &r));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = run_gradient_suite().unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(checks.iter().any(|c| c.name == "loss.total"));
        assert!(checks.iter().all(|c| c.checked > 0));
    }
}
