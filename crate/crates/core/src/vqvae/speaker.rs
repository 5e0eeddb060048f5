use crate::diffcore::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learnable per-speaker embeddings `S × dim`, addressed by string id.
#[derive(Clone, Debug)]
pub struct SpeakerCodebook {
    pub embeddings: ParamId,
    pub ids: Vec<String>,
    pub dim: usize,
}

impl SpeakerCodebook {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, ids: &[String], dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Config("speaker codebook needs at least one speaker".into()));
        }
        let mut sorted = ids.to_vec();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("speaker ids must be unique".into()));
        }
        let embeddings = store.add_uniform("speakers.embeddings", &[ids.len(), dim], 1.0, rng)?;
        Ok(Self {
            embeddings,
            ids: ids.to_vec(),
            dim,
        })
    }

    pub fn index(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::Data(format!("unknown speaker id {id}")))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
