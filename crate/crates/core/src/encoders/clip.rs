//! Frozen contrastive vision-language backbone adapters.
//!
//! Weights are read from `.safetensors` files using the Hugging Face CLIP
//! parameter names (`text_model.*`, `vision_model.*`, `text_projection`,
//! `visual_projection`, `logit_scale`). Class words are tokenized with the
//! `tokenizer.json` that ships beside the checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use safetensors::{Dtype, SafeTensors};

use super::{
    check_lengths, encode_by_length, matrix_digest, ImageEncoderBackend, TextEncoderBackend,
    TokenSequence,
};
use crate::data::Sample;
use crate::tape::{AttentionShape, Matrix, Tape, Var};
use crate::{Error, Result};

pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const LN_EPS: f64 = 1e-5;
const CONTEXT_PHRASE: &str = "a photo of";

type Tensors = HashMap<String, Arc<Matrix>>;

fn archive_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Archive(format!("{}: {msg}", path.display()))
}

fn to_f64(dtype: Dtype, data: &[u8]) -> std::result::Result<Vec<f64>, String> {
    Ok(match dtype {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    })
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits >> 15 == 1 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}

/// Reads every tensor whose name starts with one of `prefixes`. Rank-1
/// tensors become `1 x n`; higher ranks are flattened to `dim0 x rest`.
fn read_tensors(path: &Path, prefixes: &[&str]) -> Result<Tensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| archive_err(path, e))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let shape = view.shape();
        let (r, c) = match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => (shape[0], shape[1..].iter().product()),
        };
        let values = to_f64(view.dtype(), view.data()).map_err(|m| archive_err(path, format!("{name}: {m}")))?;
        let m = Matrix::from_shape_vec((r, c), values).map_err(|e| archive_err(path, e))?;
        out.insert(name, Arc::new(m));
    }
    Ok(out)
}

fn take(t: &Tensors, name: &str) -> Result<Arc<Matrix>> {
    t.get(name)
        .cloned()
        .ok_or_else(|| Error::Archive(format!("checkpoint lacks tensor {name:?}")))
}

/// Dimensions of one transformer tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Reads `num_attention_heads` for a tower from a `config.json` beside the
/// checkpoint; towers default to 64-wide heads when none is found.
fn heads_from_config(checkpoint: &Path, tower: &str, width: usize) -> usize {
    let cfg = checkpoint.with_file_name("config.json");
    let parsed: Option<serde_json::Value> = fs::read_to_string(cfg)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    parsed
        .and_then(|v| {
            v.get(tower)
                .and_then(|t| t.get("num_attention_heads"))
                .or_else(|| v.get("num_attention_heads"))
                .and_then(|h| h.as_u64())
        })
        .map(|h| h as usize)
        .unwrap_or((width / 64).max(1))
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Arc<Matrix>,
    bias: Arc<Matrix>,
}

impl Linear {
    fn load(t: &Tensors, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: take(t, &format!("{prefix}.weight"))?,
            bias: take(t, &format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.constant_shared(self.weight.clone());
        let b = tape.constant_shared(self.bias.clone());
        let y = tape.matmul_t(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Arc<Matrix>,
    beta: Arc<Matrix>,
}

impl LayerNorm {
    fn load(t: &Tensors, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: take(t, &format!("{prefix}.weight"))?,
            beta: take(t, &format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.constant_shared(self.gamma.clone());
        let b = tape.constant_shared(self.beta.clone());
        tape.layer_norm_rows(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// A pre-norm transformer stack with quick-GELU MLPs.
#[derive(Debug, Clone)]
pub struct ClipTransformer {
    blocks: Vec<Block>,
    config: ClipConfig,
}

impl ClipTransformer {
    fn load(t: &Tensors, prefix: &str, width: usize, heads: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        while t.contains_key(&format!("{prefix}.{}.layer_norm1.weight", blocks.len())) {
            let p = format!("{prefix}.{}", blocks.len());
            blocks.push(Block {
                ln1: LayerNorm::load(t, &format!("{p}.layer_norm1"))?,
                q: Linear::load(t, &format!("{p}.self_attn.q_proj"))?,
                k: Linear::load(t, &format!("{p}.self_attn.k_proj"))?,
                v: Linear::load(t, &format!("{p}.self_attn.v_proj"))?,
                out: Linear::load(t, &format!("{p}.self_attn.out_proj"))?,
                ln2: LayerNorm::load(t, &format!("{p}.layer_norm2"))?,
                fc1: Linear::load(t, &format!("{p}.mlp.fc1"))?,
                fc2: Linear::load(t, &format!("{p}.mlp.fc2"))?,
            });
        }
        if blocks.is_empty() {
            return Err(Error::Archive(format!("no transformer layers under {prefix:?}")));
        }
        if !width.is_multiple_of(heads) {
            return Err(Error::Archive(format!("width {width} not divisible by {heads} heads")));
        }
        let layers = blocks.len();
        Ok(Self {
            blocks,
            config: ClipConfig { width, layers, heads },
        })
    }

    pub fn config(&self) -> ClipConfig {
        self.config
    }

    /// Runs the stack over `batch` sequences of `seq_len` stacked tokens.
    pub fn forward(&self, tape: &mut Tape, mut x: Var, batch: usize, seq_len: usize, causal: bool) -> Var {
        let shape = AttentionShape {
            batch,
            seq_len,
            heads: self.config.heads,
            causal,
        };
        for b in &self.blocks {
            let h = b.ln1.forward(tape, x);
            let q = b.q.forward(tape, h);
            let k = b.k.forward(tape, h);
            let v = b.v.forward(tape, h);
            let a = tape.attention(q, k, v, shape);
            let a = b.out.forward(tape, a);
            x = tape.add(x, a);
            let h = b.ln2.forward(tape, x);
            let h = b.fc1.forward(tape, h);
            let h = tape.quick_gelu(h);
            let h = b.fc2.forward(tape, h);
            x = tape.add(x, h);
        }
        x
    }

    fn digest_parts(&self) -> Vec<(String, Arc<Matrix>)> {
        let mut parts = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, m) in [
                ("ln1g", &b.ln1.gamma),
                ("ln1b", &b.ln1.beta),
                ("qw", &b.q.weight),
                ("qb", &b.q.bias),
                ("kw", &b.k.weight),
                ("kb", &b.k.bias),
                ("vw", &b.v.weight),
                ("vb", &b.v.bias),
                ("ow", &b.out.weight),
                ("ob", &b.out.bias),
                ("ln2g", &b.ln2.gamma),
                ("ln2b", &b.ln2.beta),
                ("f1w", &b.fc1.weight),
                ("f1b", &b.fc1.bias),
                ("f2w", &b.fc2.weight),
                ("f2b", &b.fc2.bias),
            ] {
                parts.push((format!("{i}.{n}"), m.clone()));
            }
        }
        parts
    }
}

fn digest_owned(parts: &[(String, Arc<Matrix>)]) -> String {
    let refs: Vec<(&str, &Matrix)> = parts.iter().map(|(n, m)| (n.as_str(), m.as_ref())).collect();
    matrix_digest(&refs)
}

/// Text tower of a CLIP checkpoint. Prompts are wrapped in the start and
/// end tokens and pooled at the end token, as in the original model.
pub struct ClipTextEncoder {
    token_embedding: Arc<Matrix>,
    position_embedding: Arc<Matrix>,
    transformer: ClipTransformer,
    final_ln: LayerNorm,
    projection: Arc<Matrix>,
    tokenizer: Option<tokenizers::Tokenizer>,
    sot: usize,
    eot: usize,
    temperature: Option<f64>,
    checksum: String,
}

impl ClipTextEncoder {
    /// Loads the text tower from `checkpoint`; `tokenizer.json` and
    /// `config.json` are looked up in the same directory.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let t = read_tensors(checkpoint, &["text_model.", "text_projection", "logit_scale"])?;
        let token_embedding = take(&t, "text_model.embeddings.token_embedding.weight")?;
        let width = token_embedding.ncols();
        let heads = heads_from_config(checkpoint, "text_config", width);
        let transformer = ClipTransformer::load(&t, "text_model.encoder.layers", width, heads)?;
        let tok_path = checkpoint.with_file_name("tokenizer.json");
        let tokenizer = if tok_path.exists() {
            Some(
                tokenizers::Tokenizer::from_file(&tok_path)
                    .map_err(|e| archive_err(&tok_path, e))?,
            )
        } else {
            log::warn!("no tokenizer beside {}; class words cannot be embedded", checkpoint.display());
            None
        };
        let vocab = token_embedding.nrows();
        let special = |name: &str, fallback: usize| {
            tokenizer
                .as_ref()
                .and_then(|tk| tk.token_to_id(name))
                .map_or(fallback, |id| id as usize)
        };
        let sot = special("<|startoftext|>", vocab.saturating_sub(2));
        let eot = special("<|endoftext|>", vocab.saturating_sub(1));
        let mut enc = Self {
            position_embedding: take(&t, "text_model.embeddings.position_embedding.weight")?,
            final_ln: LayerNorm::load(&t, "text_model.final_layer_norm")?,
            projection: take(&t, "text_projection.weight")?,
            temperature: t.get("logit_scale").map(|s| 1.0 / s[[0, 0]].exp()),
            token_embedding,
            transformer,
            tokenizer,
            sot,
            eot,
            checksum: String::new(),
        };
        if enc.sot >= vocab || enc.eot >= vocab {
            return Err(archive_err(checkpoint, "special token ids exceed the vocabulary"));
        }
        let mut parts = enc.transformer.digest_parts();
        parts.push(("tok".into(), enc.token_embedding.clone()));
        parts.push(("pos".into(), enc.position_embedding.clone()));
        parts.push(("proj".into(), enc.projection.clone()));
        enc.checksum = digest_owned(&parts);
        Ok(enc)
    }

    pub fn config(&self) -> ClipConfig {
        self.transformer.config()
    }

    fn word_ids(&self, text: &str) -> Result<Vec<usize>> {
        let tk = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| Error::Config("text backend has no tokenizer".into()))?;
        let enc = tk
            .encode(text, false)
            .map_err(|e| Error::Config(format!("tokenizing {text:?}: {e}")))?;
        let ids: Vec<usize> = enc.get_ids().iter().map(|&i| i as usize).collect();
        if ids.is_empty() || ids.iter().any(|&i| i >= self.token_embedding.nrows()) {
            return Err(Error::UnknownWords(vec![text.to_string()]));
        }
        Ok(ids)
    }
}

impl TextEncoderBackend for ClipTextEncoder {
    fn name(&self) -> &str {
        "clip"
    }

    fn token_dim(&self) -> usize {
        self.token_embedding.ncols()
    }

    fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn context_length(&self) -> usize {
        self.position_embedding.nrows().saturating_sub(2)
    }

    fn normalized(&self) -> bool {
        true
    }

    /// Multi-piece words are averaged into a single class token.
    fn class_word_embedding(&self, word: &str) -> Result<Vec<f64>> {
        let ids = self.word_ids(&word.replace('_', " "))?;
        let mut v = vec![0.0; self.token_dim()];
        for &i in &ids {
            for (a, b) in v.iter_mut().zip(self.token_embedding.row(i)) {
                *a += b / ids.len() as f64;
            }
        }
        Ok(v)
    }

    fn context_init(&self, m: usize) -> Option<Matrix> {
        let ids = self.word_ids(CONTEXT_PHRASE).ok()?;
        if ids.len() != m {
            return None;
        }
        Some(self.token_embedding.select(ndarray::Axis(0), &ids))
    }

    fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }

    fn encode_tokens(
        &self,
        tape: &mut Tape,
        sources: &[Var],
        sequences: &[TokenSequence],
    ) -> Result<Var> {
        check_lengths(sequences, self.context_length(), sources.len())?;
        let width = self.token_dim();
        if let Some(&s) = sources.iter().find(|&&s| tape.shape(s).1 != width) {
            return Err(Error::Shape(format!(
                "token width {} differs from backend token width {width}",
                tape.shape(s).1
            )));
        }
        let vocab = tape.constant_shared(self.token_embedding.clone());
        let out = encode_by_length(tape, sequences, |tape, group| {
            let len = group[0].len() + 2;
            let mut rows = Vec::with_capacity(group.len() * len);
            for seq in group {
                rows.push((vocab, self.sot));
                rows.extend(seq.iter().map(|t| (sources[t.source], t.row)));
                rows.push((vocab, self.eot));
            }
            let tokens = tape.assemble_rows(rows);
            let pos = self.position_embedding.slice(ndarray::s![0..len, ..]);
            let mut tiled = Matrix::zeros((group.len() * len, width));
            for (i, mut chunk) in tiled
                .axis_chunks_iter_mut(ndarray::Axis(0), len)
                .enumerate()
            {
                debug_assert!(i < group.len());
                chunk.assign(&pos);
            }
            let pos = tape.constant(tiled);
            let x = tape.add(tokens, pos);
            let x = self.transformer.forward(tape, x, group.len(), len, true);
            let x = self.final_ln.forward(tape, x);
            let pooled = tape.gather_rows(x, (0..group.len()).map(|i| i * len + len - 1).collect());
            let proj = tape.constant_shared(self.projection.clone());
            Ok(tape.matmul_t(pooled, proj))
        })?;
        Ok(tape.l2_normalize_rows(out))
    }
}

/// Vision tower of a CLIP checkpoint, reading image files below `root`.
pub struct ClipImageEncoder {
    patch_weight: Arc<Matrix>,
    class_embedding: Arc<Matrix>,
    position_embedding: Arc<Matrix>,
    pre_ln: LayerNorm,
    transformer: ClipTransformer,
    post_ln: LayerNorm,
    projection: Arc<Matrix>,
    patch: usize,
    image_size: usize,
    root: PathBuf,
    checksum: String,
}

impl ClipImageEncoder {
    pub fn load(checkpoint: &Path, image_root: &Path) -> Result<Self> {
        let t = read_tensors(checkpoint, &["vision_model.", "visual_projection"])?;
        let patch_weight = take(&t, "vision_model.embeddings.patch_embedding.weight")?;
        let width = patch_weight.nrows();
        let patch = ((patch_weight.ncols() / 3) as f64).sqrt().round() as usize;
        if 3 * patch * patch != patch_weight.ncols() {
            return Err(archive_err(checkpoint, "patch embedding is not 3 x p x p"));
        }
        let position_embedding = take(&t, "vision_model.embeddings.position_embedding.weight")?;
        let grid = ((position_embedding.nrows() - 1) as f64).sqrt().round() as usize;
        if grid * grid + 1 != position_embedding.nrows() {
            return Err(archive_err(checkpoint, "position embedding is not a square grid"));
        }
        let heads = heads_from_config(checkpoint, "vision_config", width);
        let mut enc = Self {
            class_embedding: take(&t, "vision_model.embeddings.class_embedding")?,
            pre_ln: LayerNorm::load(&t, "vision_model.pre_layrnorm")?,
            transformer: ClipTransformer::load(&t, "vision_model.encoder.layers", width, heads)?,
            post_ln: LayerNorm::load(&t, "vision_model.post_layernorm")?,
            projection: take(&t, "visual_projection.weight")?,
            patch_weight,
            position_embedding,
            patch,
            image_size: grid * patch,
            root: image_root.to_path_buf(),
            checksum: String::new(),
        };
        let mut parts = enc.transformer.digest_parts();
        parts.push(("patch".into(), enc.patch_weight.clone()));
        parts.push(("proj".into(), enc.projection.clone()));
        enc.checksum = digest_owned(&parts);
        Ok(enc)
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Resize-shorter-side, center crop and per-channel normalization,
    /// returned as one flattened `(channel, y, x)` patch per row.
    pub fn preprocess(&self, img: &image::DynamicImage) -> Matrix {
        let s = self.image_size as u32;
        let (w, h) = (img.width().max(1), img.height().max(1));
        let scale = s as f64 / w.min(h) as f64;
        let (nw, nh) = (
            ((w as f64 * scale).round() as u32).max(s),
            ((h as f64 * scale).round() as u32).max(s),
        );
        let resized = img.resize_exact(nw, nh, FilterType::CatmullRom).to_rgb8();
        let (x0, y0) = ((nw - s) / 2, (nh - s) / 2);
        let p = self.patch;
        let grid = self.image_size / p;
        let mut out = Matrix::zeros((grid * grid, 3 * p * p));
        for gy in 0..grid {
            for gx in 0..grid {
                let r = gy * grid + gx;
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            let px = resized.get_pixel(x0 + (gx * p + kx) as u32, y0 + (gy * p + ky) as u32);
                            let v = px[c] as f64 / 255.0;
                            out[[r, c * p * p + ky * p + kx]] = (v - CLIP_MEAN[c]) / CLIP_STD[c];
                        }
                    }
                }
            }
        }
        out
    }

    /// Embeds preprocessed patches into a unit-norm feature vector.
    pub fn embed_patches(&self, patches: &Matrix) -> Vec<f64> {
        let mut tape = Tape::new();
        let n = patches.nrows() + 1;
        let x = tape.constant(patches.clone());
        let w = tape.constant_shared(self.patch_weight.clone());
        let emb = tape.matmul_t(x, w);
        let cls = tape.constant_shared(self.class_embedding.clone());
        let emb = {
            let mut rows = vec![(cls, 0)];
            rows.extend((0..n - 1).map(|i| (emb, i)));
            tape.assemble_rows(rows)
        };
        let pos = tape.constant_shared(self.position_embedding.clone());
        let x = tape.add(emb, pos);
        let x = self.pre_ln.forward(&mut tape, x);
        let x = self.transformer.forward(&mut tape, x, 1, n, false);
        let cls_out = tape.gather_rows(x, vec![0]);
        let pooled = self.post_ln.forward(&mut tape, cls_out);
        let proj = tape.constant_shared(self.projection.clone());
        let y = tape.matmul_t(pooled, proj);
        let y = tape.l2_normalize_rows(y);
        tape.value(y).row(0).to_vec()
    }
}

impl ImageEncoderBackend for ClipImageEncoder {
    fn name(&self) -> &str {
        "clip"
    }

    fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn normalized(&self) -> bool {
        true
    }

    fn encode_image(&self, sample: &Sample) -> std::result::Result<Vec<f64>, String> {
        let path = self.root.join(&sample.image_ref);
        let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(self.embed_patches(&self.preprocess(&img)))
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

/// Reads image features exported ahead of time: a `features` tensor of
/// shape `N x d` and a JSON list of image refs in the `image_refs` metadata
/// entry.
pub fn load_precomputed_features(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| archive_err(path, e))?;
    let refs: Vec<String> = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("image_refs"))
        .ok_or_else(|| archive_err(path, "missing image_refs metadata"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| archive_err(path, e)))?;
    let t = read_tensors(path, &["features"])?;
    let features = take(&t, "features")?;
    if features.nrows() != refs.len() {
        return Err(archive_err(
            path,
            format!("{} feature rows for {} image refs", features.nrows(), refs.len()),
        ));
    }
    Ok((refs, features.as_ref().clone()))
}

/// Serves image features exported offline from the same backbone.
pub struct PrecomputedImageEncoder {
    index: HashMap<String, usize>,
    features: Matrix,
    checksum: String,
}

impl PrecomputedImageEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let (refs, features) = load_precomputed_features(path)?;
        Ok(Self::from_parts(refs, features))
    }

    pub fn from_parts(refs: Vec<String>, mut features: Matrix) -> Self {
        for mut row in features.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        let checksum = matrix_digest(&[("features", &features)]);
        let index = refs.into_iter().enumerate().map(|(i, r)| (r, i)).collect();
        Self {
            index,
            features,
            checksum,
        }
    }
}

impl ImageEncoderBackend for PrecomputedImageEncoder {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn embed_dim(&self) -> usize {
        self.features.ncols()
    }

    fn normalized(&self) -> bool {
        true
    }

    fn encode_image(&self, sample: &Sample) -> std::result::Result<Vec<f64>, String> {
        self.index
            .get(&sample.image_ref)
            .map(|&i| self.features.row(i).to_vec())
            .ok_or_else(|| "no precomputed feature".to_string())
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}
