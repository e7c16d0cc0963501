//! Image and text encoder backends.
//!
//! Backends are frozen: their weights never enter the trainable parameter
//! store. Learnable prompt tokens live in [`crate::dgp`] and reach a text
//! backend as rows of tape nodes addressed through [`TokenRef`].

mod clip;
mod toy;

use std::collections::HashMap;
use std::sync::Mutex;

pub use clip::{
    load_precomputed_features, ClipConfig, ClipImageEncoder, ClipTextEncoder, ClipTransformer,
    PrecomputedImageEncoder, CLIP_MEAN, CLIP_STD,
};
pub use toy::{ToyBackendSpec, ToyImageEncoder, ToyTextEncoder, TOY_CONTEXT_LENGTH};

use crate::data::Sample;
use crate::tape::{Matrix, Tape, Var};
use crate::{Error, Result};

pub trait ImageEncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed_dim(&self) -> usize;
    /// Whether every output row has unit norm.
    fn normalized(&self) -> bool;
    fn frozen(&self) -> bool {
        true
    }
    fn encode_image(&self, sample: &Sample) -> std::result::Result<Vec<f64>, String>;
    /// Digest of the backend weights, used to prove they stay frozen.
    fn checksum(&self) -> String;
}

/// Position of one prompt token: row `row` of the `source`-th tensor handed
/// to [`TextEncoderBackend::encode_tokens`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenRef {
    pub source: usize,
    pub row: usize,
}

pub type TokenSequence = Vec<TokenRef>;

pub trait TextEncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn token_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Longest learnable token sequence accepted, excluding any special
    /// tokens the backend adds itself.
    fn context_length(&self) -> usize;
    fn normalized(&self) -> bool;
    fn class_word_embedding(&self, word: &str) -> Result<Vec<f64>>;
    /// Initial context tokens, when the backend has a natural choice.
    fn context_init(&self, _m: usize) -> Option<Matrix> {
        None
    }
    /// Temperature learned by the backbone, if it has one.
    fn temperature(&self) -> Option<f64> {
        None
    }
    fn checksum(&self) -> String;
    /// Encodes each sequence into one row of the returned `N x d` node.
    /// Sequences may have different lengths.
    fn encode_tokens(
        &self,
        tape: &mut Tape,
        sources: &[Var],
        sequences: &[TokenSequence],
    ) -> Result<Var>;
}

/// Encodes `samples` in order, collecting every failure into one error.
pub fn encode_batch(backend: &dyn ImageEncoderBackend, samples: &[Sample]) -> Result<Matrix> {
    let d = backend.embed_dim();
    let mut out = Matrix::zeros((samples.len(), d));
    let mut failures = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match backend.encode_image(s) {
            Ok(v) if v.len() == d => {
                let mut row = out.row_mut(i);
                row.assign(&ndarray::ArrayView1::from(&v[..]));
                if backend.normalized() {
                    let n = row.dot(&row).sqrt();
                    if n > 0.0 {
                        row /= n;
                    }
                }
            }
            Ok(v) => failures.push((i, format!("expected width {d}, got {}", v.len()))),
            Err(m) => failures.push((i, format!("{}: {m}", s.image_ref))),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(Error::Encode(failures))
    }
}

/// Encodes a single prompt; convenience over [`TextEncoderBackend::encode_tokens`].
pub fn encode_prompt(
    backend: &dyn TextEncoderBackend,
    tape: &mut Tape,
    sources: &[Var],
    sequence: &TokenSequence,
) -> Result<Var> {
    backend.encode_tokens(tape, sources, std::slice::from_ref(sequence))
}

pub(crate) fn check_lengths(sequences: &[TokenSequence], max: usize, sources: usize) -> Result<()> {
    for seq in sequences {
        if seq.len() > max {
            return Err(Error::PromptTooLong { len: seq.len(), max });
        }
        if seq.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(t) = seq.iter().find(|t| t.source >= sources) {
            return Err(Error::Contract(format!("token source {} out of range", t.source)));
        }
    }
    Ok(())
}

/// Runs `encode` once per distinct sequence length and restores input order.
pub(crate) fn encode_by_length<F>(
    tape: &mut Tape,
    sequences: &[TokenSequence],
    mut encode: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, &[&TokenSequence]) -> Result<Var>,
{
    let mut by_len: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        match by_len.iter_mut().find(|(l, _)| *l == s.len()) {
            Some((_, v)) => v.push(i),
            None => by_len.push((s.len(), vec![i])),
        }
    }
    if by_len.len() == 1 {
        let all: Vec<&TokenSequence> = sequences.iter().collect();
        return encode(tape, &all);
    }
    let mut placed = vec![None; sequences.len()];
    for (_, members) in &by_len {
        let group: Vec<&TokenSequence> = members.iter().map(|&i| &sequences[i]).collect();
        let out = encode(tape, &group)?;
        for (r, &i) in members.iter().enumerate() {
            placed[i] = Some((out, r));
        }
    }
    Ok(tape.assemble_rows(placed.into_iter().map(Option::unwrap).collect()))
}

/// Memoizes another image backend; useful when a slow backbone is asked for
/// the same images every epoch.
pub struct CachedImageEncoder<B> {
    inner: B,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<B: ImageEncoderBackend> CachedImageEncoder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<B: ImageEncoderBackend> ImageEncoderBackend for CachedImageEncoder<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn normalized(&self) -> bool {
        self.inner.normalized()
    }
    fn encode_image(&self, sample: &Sample) -> std::result::Result<Vec<f64>, String> {
        if let Some(v) = self.cache.lock().unwrap().get(&sample.image_ref) {
            return Ok(v.clone());
        }
        let v = self.inner.encode_image(sample)?;
        self.cache
            .lock()
            .unwrap()
            .insert(sample.image_ref.clone(), v.clone());
        Ok(v)
    }
    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

pub(crate) fn matrix_digest(parts: &[(&str, &Matrix)]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, m) in parts {
        h.update(name.as_bytes());
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
