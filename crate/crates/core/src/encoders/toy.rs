//! Deterministic stand-in encoders for tests and desk-scale experiments.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_lengths, encode_by_length, matrix_digest, ImageEncoderBackend, TextEncoderBackend,
    TokenSequence,
};
use crate::data::{synthetic_index, Sample};
use crate::tape::{Matrix, Tape, Var};
use crate::{Error, Result};

pub const TOY_CONTEXT_LENGTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyBackendSpec {
    pub d: usize,
    pub seed: u64,
}

impl Default for ToyBackendSpec {
    fn default() -> Self {
        Self { d: 16, seed: 0 }
    }
}

impl ToyBackendSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(Error::Config(format!("toy backend width {} is below 4", self.d)));
        }
        Ok(())
    }
}

/// A reproducible RNG keyed by the backend seed and a string label.
fn keyed_rng(seed: u64, domain: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Looks features up in a table (synthetic datasets) or, without a table,
/// hashes the image ref into a fixed Gaussian vector.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    spec: ToyBackendSpec,
    table: Option<Arc<Matrix>>,
}

impl ToyImageEncoder {
    pub fn new(spec: ToyBackendSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, table: None })
    }

    /// Serves row `i` of `features` for image ref `synthetic/{i:06}`.
    pub fn with_features(spec: ToyBackendSpec, features: Matrix) -> Result<Self> {
        spec.validate()?;
        if features.ncols() != spec.d {
            return Err(Error::Shape(format!(
                "feature table width {} differs from backend width {}",
                features.ncols(),
                spec.d
            )));
        }
        Ok(Self {
            spec,
            table: Some(Arc::new(features)),
        })
    }
}

impl ImageEncoderBackend for ToyImageEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn embed_dim(&self) -> usize {
        self.spec.d
    }

    fn normalized(&self) -> bool {
        false
    }

    fn encode_image(&self, sample: &Sample) -> std::result::Result<Vec<f64>, String> {
        match &self.table {
            Some(table) => {
                let i = synthetic_index(&sample.image_ref)
                    .ok_or("not a synthetic image ref")?;
                if i >= table.nrows() {
                    return Err(format!("feature row {i} out of range ({} rows)", table.nrows()));
                }
                Ok(table.row(i).to_vec())
            }
            None => {
                if sample.image_ref.is_empty() {
                    return Err("empty image ref".into());
                }
                let mut rng = keyed_rng(self.spec.seed, "image", &sample.image_ref);
                Ok(gaussian_vec(&mut rng, self.spec.d, 1.0))
            }
        }
    }

    fn checksum(&self) -> String {
        match &self.table {
            Some(t) => matrix_digest(&[("table", t)]),
            None => matrix_digest(&[(
                "toy-image",
                &ndarray::arr2(&[[self.spec.d as f64, self.spec.seed as f64]]),
            )]),
        }
    }
}

/// Mean of the token embeddings followed by a fixed random projection.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    spec: ToyBackendSpec,
    projection: Arc<Matrix>,
}

impl ToyTextEncoder {
    pub fn new(spec: ToyBackendSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let mut rng = keyed_rng(spec.seed, "projection", "");
        let values = gaussian_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt());
        let projection = Matrix::from_shape_vec((d, d), values).expect("square projection");
        Ok(Self {
            spec,
            projection: Arc::new(projection),
        })
    }

    /// The `token_dim x d` projection applied after mean pooling.
    pub fn projection(&self) -> &Matrix {
        &self.projection
    }
}

impl TextEncoderBackend for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn token_dim(&self) -> usize {
        self.spec.d
    }

    fn embed_dim(&self) -> usize {
        self.spec.d
    }

    fn context_length(&self) -> usize {
        TOY_CONTEXT_LENGTH
    }

    fn normalized(&self) -> bool {
        false
    }

    fn class_word_embedding(&self, word: &str) -> Result<Vec<f64>> {
        let mut rng = keyed_rng(self.spec.seed, "word", word);
        Ok(gaussian_vec(
            &mut rng,
            self.spec.d,
            1.0 / (self.spec.d as f64).sqrt(),
        ))
    }

    fn checksum(&self) -> String {
        matrix_digest(&[("projection", &self.projection)])
    }

    fn encode_tokens(
        &self,
        tape: &mut Tape,
        sources: &[Var],
        sequences: &[TokenSequence],
    ) -> Result<Var> {
        check_lengths(sequences, TOY_CONTEXT_LENGTH, sources.len())?;
        for &s in sources {
            if tape.shape(s).1 != self.spec.d {
                return Err(Error::Shape(format!(
                    "token width {} differs from backend token width {}",
                    tape.shape(s).1,
                    self.spec.d
                )));
            }
        }
        let projection = tape.constant_shared(self.projection.clone());
        encode_by_length(tape, sequences, |tape, group| {
            let len = group[0].len();
            let rows = group
                .iter()
                .flat_map(|seq| seq.iter().map(|t| (sources[t.source], t.row)))
                .collect();
            let tokens = tape.assemble_rows(rows);
            let pooled = tape.mean_pool_rows(tokens, len);
            Ok(tape.matmul(pooled, projection))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Pair;
    use crate::encoders::{encode_batch, encode_prompt, TokenRef};
    use crate::gradcheck::{assert_grad_close, numeric_grad};

    fn sample(r: &str) -> Sample {
        Sample {
            image_ref: r.into(),
            pair: Pair::new(0, 0),
        }
    }

    fn closed_form(enc: &ToyTextEncoder, tokens: &[Vec<f64>]) -> Vec<f64> {
        let d = enc.spec.d;
        let p = enc.projection();
        let mut mean = vec![0.0; d];
        for t in tokens {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v / tokens.len() as f64;
            }
        }
        (0..d)
            .map(|j| (0..d).map(|i| mean[i] * p[[i, j]]).sum())
            .collect()
    }

    #[test]
    fn rejects_narrow_backends() {
        assert!(ToyImageEncoder::new(ToyBackendSpec { d: 3, seed: 0 }).is_err());
        assert!(ToyTextEncoder::new(ToyBackendSpec { d: 3, seed: 0 }).is_err());
    }

    #[test]
    fn same_sample_twice_gives_identical_rows() {
        let enc = ToyImageEncoder::new(ToyBackendSpec::default()).unwrap();
        let f = encode_batch(&enc, &[sample("a/1.jpg"), sample("b/2.jpg"), sample("a/1.jpg")]).unwrap();
        assert_eq!(f.row(0), f.row(2));
        assert_ne!(f.row(0), f.row(1));
    }

    #[test]
    fn table_lookup_reports_every_bad_ref() {
        let table = Matrix::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64);
        let enc = ToyImageEncoder::with_features(ToyBackendSpec { d: 4, seed: 0 }, table).unwrap();
        let ok = encode_batch(&enc, &[sample("synthetic/000001")]).unwrap();
        assert_eq!(ok.row(0).to_vec(), vec![4.0, 5.0, 6.0, 7.0]);
        match encode_batch(&enc, &[sample("synthetic/000009"), sample("synthetic/000000"), sample("x")]) {
            Err(Error::Encode(f)) => {
                assert_eq!(f.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 2]);
            }
            other => panic!("expected encode error, got {other:?}"),
        }
    }

    #[test]
    fn text_encoder_matches_closed_form() {
        let enc = ToyTextEncoder::new(ToyBackendSpec { d: 6, seed: 3 }).unwrap();
        let table = Matrix::from_shape_fn((4, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut tape = Tape::new();
        let src = tape.leaf(table.clone());
        let seqs: Vec<TokenSequence> = vec![
            vec![TokenRef { source: 0, row: 0 }, TokenRef { source: 0, row: 3 }],
            vec![TokenRef { source: 0, row: 1 }],
            vec![TokenRef { source: 0, row: 2 }, TokenRef { source: 0, row: 2 }],
        ];
        let out = enc.encode_tokens(&mut tape, &[src], &seqs).unwrap();
        for (n, seq) in seqs.iter().enumerate() {
            let toks: Vec<Vec<f64>> = seq.iter().map(|t| table.row(t.row).to_vec()).collect();
            let want = closed_form(&enc, &toks);
            for j in 0..6 {
                assert!((tape.value(out)[[n, j]] - want[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_token_shifts_output_by_projected_mean_shift() {
        let enc = ToyTextEncoder::new(ToyBackendSpec { d: 5, seed: 1 }).unwrap();
        let mut table = Matrix::from_shape_fn((4, 5), |(i, j)| (i as f64 + 1.0) * (j as f64 - 2.0));
        table.row_mut(3).fill(0.0);
        let mut tape = Tape::new();
        let src = tape.leaf(table.clone());
        let base: TokenSequence = (0..3).map(|row| TokenRef { source: 0, row }).collect();
        let mut extended = base.clone();
        extended.push(TokenRef { source: 0, row: 3 });
        let a = encode_prompt(&enc, &mut tape, &[src], &base).unwrap();
        let b = encode_prompt(&enc, &mut tape, &[src], &extended).unwrap();
        // Mean over four tokens with one zero is 3/4 of the mean over three.
        let mean3 = table.slice(ndarray::s![0..3, ..]).sum_axis(ndarray::Axis(0)) / 3.0;
        let shift = (&mean3 * 0.75 - &mean3).dot(enc.projection());
        let diff = tape.value(b) - tape.value(a);
        for j in 0..5 {
            assert!((diff[[0, j]] - shift[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlong_prompt_is_an_explicit_error() {
        let enc = ToyTextEncoder::new(ToyBackendSpec::default()).unwrap();
        let mut tape = Tape::new();
        let src = tape.leaf(Matrix::zeros((1, 16)));
        let seq = vec![TokenRef { source: 0, row: 0 }; TOY_CONTEXT_LENGTH + 1];
        assert!(matches!(
            encode_prompt(&enc, &mut tape, &[src], &seq),
            Err(Error::PromptTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn gradient_reaches_token_embeddings() {
        let enc = ToyTextEncoder::new(ToyBackendSpec { d: 4, seed: 2 }).unwrap();
        let table = Matrix::from_shape_fn((3, 4), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.2).sin());
        let seqs: Vec<TokenSequence> = vec![
            vec![TokenRef { source: 0, row: 0 }, TokenRef { source: 0, row: 1 }],
            vec![TokenRef { source: 0, row: 2 }, TokenRef { source: 0, row: 0 }, TokenRef { source: 0, row: 1 }],
        ];
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let s = t.leaf(m.clone());
            let o = enc.encode_tokens(&mut t, &[s], &seqs).unwrap();
            let sq = t.mul_elem(o, o);
            let l = t.sum_all(sq);
            (t, s, l)
        };
        let (t, s, l) = f(&table);
        let g = t.backward(l).get(s).unwrap().clone();
        let n = numeric_grad(|m| { let (t, _, l) = f(m); t.scalar(l) }, &table, 1e-6);
        assert_grad_close(&g, &n, 1e-6, "toy text tokens");
    }
}
