//! Word co-occurrence graph: cosine similarity between class-name word
//! vectors, and the masked row-softmax relation maps built from it.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::data::{Branch, Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Matrix};

/// Default similarity threshold for admitting neighbours.
pub const DEFAULT_ZETA: f64 = 0.5;

/// Word vectors resolved for every vocabulary word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolveOptions {
    /// Seed for stand-in vectors of unknown tokens; `None` makes unknown
    /// tokens an error.
    pub fallback_seed: Option<u64>,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        Self {
            fallback_seed: Some(0),
        }
    }
}

fn name_tokens(name: &str) -> Vec<String> {
    name.split([' ', '_', '.', '-'])
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fallback_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let token_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ token_seed);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect()
}

impl WordVectorTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Builds a table directly from `(token, vector)` entries.
    pub fn from_entries(
        entries: &[(String, Vec<f64>)],
        vocab: &Vocabulary,
        options: ResolveOptions,
    ) -> Result<Self> {
        let dim = entries
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::Validation("no word vectors".into()))?;
        let raw: HashMap<String, Vec<f64>> = entries.iter().cloned().collect();
        Self::resolve(&raw, dim, vocab, options)
    }

    /// Maps every vocabulary word to a vector: the exact token if present,
    /// else its lowercase form, else the mean over its sub-tokens.
    fn resolve(
        raw: &HashMap<String, Vec<f64>>,
        dim: usize,
        vocab: &Vocabulary,
        options: ResolveOptions,
    ) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut missing = Vec::new();
        for word in vocab.states().iter().chain(vocab.objects()) {
            if let Some(v) = raw.get(word).or_else(|| raw.get(&word.to_lowercase())) {
                vectors.insert(word.clone(), v.clone());
                continue;
            }
            let tokens = name_tokens(word);
            let mut sum = vec![0.0; dim];
            let mut unresolved = false;
            for t in &tokens {
                let v = match (raw.get(t), options.fallback_seed) {
                    (Some(v), _) => v.clone(),
                    (None, Some(seed)) => {
                        log::warn!("token {t:?} of {word:?} has no word vector; using a seeded stand-in");
                        fallback_vector(t, dim, seed)
                    }
                    (None, None) => {
                        unresolved = true;
                        break;
                    }
                };
                sum.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
            if unresolved || tokens.is_empty() {
                missing.push(word.clone());
                continue;
            }
            let n = tokens.len() as f64;
            vectors.insert(word.clone(), sum.into_iter().map(|x| x / n).collect());
        }
        if !missing.is_empty() {
            return Err(Error::UnknownWords(missing));
        }
        Ok(Self { dim, vectors })
    }
}

/// Reads a plain-text word-vector file ("token f1 ... fd" per line). Only
/// tokens needed by `vocab` are retained.
pub fn load_word_vectors(
    path: &Path,
    vocab: &Vocabulary,
    options: ResolveOptions,
) -> Result<WordVectorTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut wanted: HashSet<String> = HashSet::new();
    for w in vocab.states().iter().chain(vocab.objects()) {
        wanted.insert(w.clone());
        wanted.insert(w.to_lowercase());
        wanted.extend(name_tokens(w));
    }
    let mut dim = None;
    let mut raw = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default();
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| parse_err(format!("bad float {p:?}")))
            })
            .collect::<Result<_>>()?;
        if token.is_empty() || values.is_empty() {
            return Err(parse_err("expected a token followed by floats".into()));
        }
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(parse_err(format!(
                "expected {d} components, found {}",
                values.len()
            )));
        }
        if wanted.contains(token) {
            raw.insert(token.to_string(), values);
        }
    }
    let dim = dim.ok_or_else(|| Error::Validation(format!("{} is empty", path.display())))?;
    WordVectorTable::resolve(&raw, dim, vocab, options)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pairwise word similarities over objects and over states.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityGraph {
    /// `n_o x n_o` cosine similarities between object words.
    pub objects: Matrix,
    /// `n_s x n_s` cosine similarities between state words.
    pub states: Matrix,
    pub zeta: f64,
}

fn similarity_matrix(words: &[String], table: &WordVectorTable) -> Result<Matrix> {
    let mut unit = Vec::with_capacity(words.len());
    for w in words {
        let v = table
            .get(w)
            .ok_or_else(|| Error::UnknownWords(vec![w.clone()]))?;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm(w.clone()));
        }
        unit.push(v.iter().map(|x| x / n).collect::<Vec<_>>());
    }
    let k = words.len();
    let mut m = Matrix::zeros((k, k));
    for i in 0..k {
        m[[i, i]] = 1.0;
        for j in i + 1..k {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            let c = c.clamp(-1.0, 1.0);
            m[[i, j]] = c;
            m[[j, i]] = c;
        }
    }
    Ok(m)
}

pub fn build_compatibility_graph(
    table: &WordVectorTable,
    vocab: &Vocabulary,
    zeta: f64,
) -> Result<CompatibilityGraph> {
    Ok(CompatibilityGraph {
        objects: similarity_matrix(vocab.objects(), table)?,
        states: similarity_matrix(vocab.states(), table)?,
        zeta,
    })
}

pub const GRAPH_KIND: &str = "compatibility-graph";
pub const GRAPH_VERSION: u32 = 1;

impl CompatibilityGraph {
    /// Similarity used to gate neighbours of `branch`: object similarity for
    /// the state branch and state similarity for the object branch.
    pub fn context_similarity(&self, branch: Branch) -> &Matrix {
        match branch {
            Branch::State => &self.objects,
            Branch::Object => &self.states,
        }
    }

    pub fn to_archive(&self, meta: serde_json::Value) -> Archive {
        let mut a = Archive::new(
            GRAPH_KIND,
            GRAPH_VERSION,
            serde_json::json!({ "zeta": self.zeta, "source": meta }),
        );
        a.push("objects", self.objects.clone());
        a.push("states", self.states.clone());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(GRAPH_KIND, GRAPH_VERSION)?;
        let zeta = a
            .meta
            .get("zeta")
            .and_then(|z| z.as_f64())
            .ok_or_else(|| Error::Archive("graph archive lacks zeta".into()))?;
        Ok(Self {
            objects: a.tensor("objects")?.clone(),
            states: a.tensor("states")?.clone(),
            zeta,
        })
    }

    /// Graph that admits no neighbours; relation maps become the identity.
    pub fn disconnected(n_states: usize, n_objects: usize) -> Self {
        Self {
            objects: Matrix::eye(n_objects),
            states: Matrix::eye(n_states),
            zeta: DEFAULT_ZETA,
        }
    }
}

/// Content hash identifying a cached graph.
pub fn graph_cache_key(vector_file: &[u8], vocab: &Vocabulary, zeta: f64) -> String {
    let mut h = Sha256::new();
    h.update(Sha256::digest(vector_file));
    for w in vocab.states() {
        h.update(b"s:");
        h.update(w.as_bytes());
        h.update(b"\n");
    }
    for w in vocab.objects() {
        h.update(b"o:");
        h.update(w.as_bytes());
        h.update(b"\n");
    }
    h.update(zeta.to_le_bytes());
    hex::encode(h.finalize())
}

/// Outcome of [`load_or_build_graph`].
#[derive(Debug, Clone)]
pub struct CachedGraph {
    pub graph: CompatibilityGraph,
    pub path: PathBuf,
    pub cache_hit: bool,
}

/// Returns the cached graph for these inputs, building and caching it on a
/// miss.
pub fn load_or_build_graph(
    cache_dir: &Path,
    vectors_path: &Path,
    vocab: &Vocabulary,
    zeta: f64,
    options: ResolveOptions,
) -> Result<CachedGraph> {
    let bytes = fs::read(vectors_path).map_err(|e| Error::io(vectors_path, e))?;
    let key = graph_cache_key(&bytes, vocab, zeta);
    let path = cache_dir.join(format!("graph-{key}.hgrl"));
    if path.is_file() {
        let graph = CompatibilityGraph::from_archive(&Archive::read(&path)?)?;
        log::info!("graph cache hit {}", path.display());
        return Ok(CachedGraph {
            graph,
            path,
            cache_hit: true,
        });
    }
    let table = load_word_vectors(vectors_path, vocab, options)?;
    let graph = build_compatibility_graph(&table, vocab, zeta)?;
    graph
        .to_archive(serde_json::json!({ "key": key, "vectors": vectors_path.display().to_string() }))
        .write(&path)?;
    log::info!("graph cache miss; wrote {}", path.display());
    Ok(CachedGraph {
        graph,
        path,
        cache_hit: false,
    })
}

/// Row-normalized neighbour weights over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMap {
    /// Admitted logits; excluded entries hold `-inf`.
    pub logits: Matrix,
    pub admitted: Array2<bool>,
    /// Row softmax over the admitted support.
    pub weights: Matrix,
}

/// Admits `(i, j)` when the labels agree and `similarity[i][j] >= zeta`; the
/// diagonal is always admitted.
pub fn admission_mask(similarity: &Matrix, labels: &[usize], zeta: f64) -> Array2<bool> {
    let b = labels.len();
    Array2::from_shape_fn((b, b), |(i, j)| {
        i == j || (labels[i] == labels[j] && similarity[[i, j]] >= zeta)
    })
}

impl RelationMap {
    /// Masked softmax of `similarity + I` over the admitted support.
    pub fn from_similarity(similarity: &Matrix, labels: &[usize], zeta: f64) -> Self {
        let admitted = admission_mask(similarity, labels, zeta);
        let b = labels.len();
        let logits = Matrix::from_shape_fn((b, b), |(i, j)| {
            if admitted[[i, j]] {
                similarity[[i, j]] + if i == j { 1.0 } else { 0.0 }
            } else {
                f64::NEG_INFINITY
            }
        });
        let weights = softmax_rows(&logits);
        Self {
            logits,
            admitted,
            weights,
        }
    }

    pub fn identity(b: usize) -> Self {
        Self::from_similarity(&Matrix::eye(b), &(0..b).collect::<Vec<_>>(), DEFAULT_ZETA)
    }

    pub fn batch_size(&self) -> usize {
        self.weights.nrows()
    }
}

/// Relation map for a labelled training batch.
///
/// For the state branch, samples `i` and `j` are neighbours when they share
/// a state and their objects' word similarity reaches the graph's threshold.
/// The object branch mirrors this with state similarity.
pub fn relation_map_for_batch(
    pairs: &[Pair],
    graph: &CompatibilityGraph,
    branch: Branch,
) -> RelationMap {
    let ctx = graph.context_similarity(branch);
    let b = pairs.len();
    let sim = Matrix::from_shape_fn((b, b), |(i, j)| {
        ctx[[branch.context(pairs[i]), branch.context(pairs[j])]]
    });
    let labels: Vec<usize> = pairs.iter().map(|p| branch.label(*p)).collect();
    RelationMap::from_similarity(&sim, &labels, graph.zeta)
}

/// Row `i` of the output is `Σ_j weights[i][j] · features[j]`.
pub fn aggregate_features(features: &Matrix, map: &RelationMap) -> Result<Matrix> {
    if map.weights.ncols() != features.nrows() {
        return Err(Error::Shape(format!(
            "relation map is {}x{} but features have {} rows",
            map.weights.nrows(),
            map.weights.ncols(),
            features.nrows()
        )));
    }
    Ok(map.weights.dot(features))
}

/// Partitions words into `k` clusters by k-medoids on `1 - similarity`.
///
/// Medoids start from the most central word and grow farthest-first, so the
/// result is deterministic. Ties go to the lowest index.
pub fn word_groups(similarity: &Matrix, k: usize) -> Result<Vec<usize>> {
    let n = similarity.nrows();
    if similarity.ncols() != n || k == 0 || k > n {
        return Err(Error::Shape(format!("cannot form {k} groups from a {:?} similarity matrix", similarity.dim())));
    }
    let dist = |i: usize, j: usize| 1.0 - similarity[[i, j]];
    let argmin = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        it.fold((usize::MAX, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b }).0
    };
    let mut medoids = vec![argmin(&mut (0..n).map(|i| (i, (0..n).map(|j| dist(i, j)).sum())))];
    while medoids.len() < k {
        let far = argmin(&mut (0..n)
            .filter(|i| !medoids.contains(i))
            .map(|i| (i, -medoids.iter().map(|&m| dist(i, m)).fold(f64::INFINITY, f64::min))));
        medoids.push(far);
    }
    let assign = |medoids: &[usize]| -> Vec<usize> {
        (0..n).map(|i| argmin(&mut medoids.iter().map(|&m| dist(i, m)).enumerate())).collect()
    };
    let mut groups = assign(&medoids);
    for _ in 0..100 {
        let next: Vec<usize> = (0..k)
            .map(|g| {
                let members: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
                if members.is_empty() {
                    return medoids[g];
                }
                argmin(&mut members.iter().map(|&i| (i, members.iter().map(|&j| dist(i, j)).sum())))
            })
            .collect();
        if next == medoids {
            break;
        }
        medoids = next;
        groups = assign(&medoids);
    }
    Ok(groups)
}
