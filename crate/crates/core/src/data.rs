//! Label spaces, composition splits, benchmark loading and synthetic data.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tape::Matrix;

/// Ordered state and object names. Indices are stable for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    states: Vec<String>,
    objects: Vec<String>,
    #[serde(skip)]
    state_index: HashMap<String, usize>,
    #[serde(skip)]
    object_index: HashMap<String, usize>,
}

fn index_names(kind: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    if names.is_empty() {
        return Err(Error::Validation(format!("vocabulary has no {kind}s")));
    }
    let mut index = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() || n.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!("invalid {kind} name {n:?}")));
        }
        if index.insert(n.clone(), i).is_some() {
            return Err(Error::Validation(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(index)
}

impl Vocabulary {
    pub fn new(states: Vec<String>, objects: Vec<String>) -> Result<Self> {
        let state_index = index_names("state", &states)?;
        let object_index = index_names("object", &objects)?;
        Ok(Self {
            states,
            objects,
            state_index,
            object_index,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_index.get(name).copied()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }

    pub fn pair_name(&self, pair: Pair) -> String {
        format!("{} {}", self.states[pair.state], self.objects[pair.object])
    }

    /// Rebuilds lookup tables after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::new(self.states, self.objects)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub state: usize,
    pub object: usize,
}

impl Pair {
    pub fn new(state: usize, object: usize) -> Self {
        Self { state, object }
    }
}

/// The two symmetric primitive branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    State,
    Object,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::State, Branch::Object];

    /// The primitive this branch classifies.
    pub fn label(self, pair: Pair) -> usize {
        match self {
            Branch::State => pair.state,
            Branch::Object => pair.object,
        }
    }

    /// The other primitive, whose variation defines this branch's groups.
    pub fn context(self, pair: Pair) -> usize {
        match self {
            Branch::State => pair.object,
            Branch::Object => pair.state,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::State => "state",
            Branch::Object => "object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    Closed,
    Open,
}

impl std::str::FromStr for World {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(Error::Config(format!(
                "world must be closed or open, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            World::Closed => "closed",
            World::Open => "open",
        })
    }
}

/// Seen and unseen compositions plus the evaluation world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSplit {
    n_states: usize,
    n_objects: usize,
    seen: BTreeSet<Pair>,
    unseen: BTreeSet<Pair>,
    pub world: World,
}

impl CompositionSplit {
    pub fn new(
        n_states: usize,
        n_objects: usize,
        seen: BTreeSet<Pair>,
        unseen: BTreeSet<Pair>,
        world: World,
    ) -> Result<Self> {
        for p in seen.iter().chain(&unseen) {
            if p.state >= n_states || p.object >= n_objects {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) outside {n_states} x {n_objects} label space",
                    p.state, p.object
                )));
            }
        }
        if let Some(p) = seen.intersection(&unseen).next() {
            return Err(Error::Validation(format!(
                "pair ({}, {}) is both seen and unseen",
                p.state, p.object
            )));
        }
        Ok(Self {
            n_states,
            n_objects,
            seen,
            unseen,
            world,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn seen(&self) -> &BTreeSet<Pair> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<Pair> {
        &self.unseen
    }

    pub fn is_seen(&self, pair: Pair) -> bool {
        self.seen.contains(&pair)
    }

    /// Seen compositions in `(state, object)` order.
    pub fn seen_pairs(&self) -> Vec<Pair> {
        self.seen.iter().copied().collect()
    }

    /// Compositions that predictions range over, in `(state, object)` order:
    /// seen ∪ unseen when closed, the full product when open.
    pub fn target_pairs(&self) -> Vec<Pair> {
        match self.world {
            World::Closed => self.seen.union(&self.unseen).copied().collect(),
            World::Open => (0..self.n_states)
                .flat_map(|s| (0..self.n_objects).map(move |o| Pair::new(s, o)))
                .collect(),
        }
    }

    pub fn with_world(&self, world: World) -> Self {
        Self {
            world,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Opaque handle resolved by an image encoder backend.
    pub image_ref: String,
    pub pair: Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// A loaded or generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub vocab: Vocabulary,
    /// Test protocol: seen = training pairs, unseen = test pairs not in training.
    pub split: CompositionSplit,
    /// Model selection: seen = training pairs, unseen = validation pairs not in training.
    pub val_split: CompositionSplit,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn partition(&self, part: Partition) -> &[Sample] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Split paired with a partition for evaluation.
    pub fn split_for(&self, part: Partition, world: World) -> CompositionSplit {
        match part {
            Partition::Val => self.val_split.with_world(world),
            _ => self.split.with_world(world),
        }
    }

    pub fn with_world(mut self, world: World) -> Self {
        self.split.world = world;
        self.val_split.world = world;
        self
    }

    /// Checks the cross-structure invariants: disjoint splits inside the label
    /// space, and every training sample on a seen pair.
    pub fn validate(&self) -> Result<()> {
        for split in [&self.split, &self.val_split] {
            if split.n_states != self.vocab.n_states() || split.n_objects != self.vocab.n_objects() {
                return Err(Error::Validation("split does not match vocabulary".into()));
            }
            CompositionSplit::new(
                split.n_states,
                split.n_objects,
                split.seen.clone(),
                split.unseen.clone(),
                split.world,
            )?;
        }
        if let Some(s) = self.train.iter().find(|s| !self.split.is_seen(s.pair)) {
            return Err(Error::Validation(format!(
                "training sample {} has unseen pair {}",
                s.image_ref,
                self.vocab.pair_name(s.pair)
            )));
        }
        Ok(())
    }
}

const SPLIT_DIR: &str = "compositional-split-natural";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_pair_file(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        match (toks.next(), toks.next(), toks.next()) {
            (Some(s), Some(o), None) => pairs.push((s.to_string(), o.to_string(), i + 1)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected \"state object\", got {line:?}"),
                })
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Validation(format!(
            "{} lists no pairs",
            path.display()
        )));
    }
    Ok(pairs)
}

fn resolve_pairs(
    path: &Path,
    raw: &[(String, String, usize)],
    vocab: &Vocabulary,
) -> Result<BTreeSet<Pair>> {
    raw.iter()
        .map(|(s, o, line)| {
            match (vocab.state_index(s), vocab.object_index(o)) {
                (Some(si), Some(oi)) => Ok(Pair::new(si, oi)),
                _ => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("pair references unknown word in {s:?} {o:?}"),
                }),
            }
        })
        .collect()
}

fn split_dir(root: &Path) -> PathBuf {
    let nested = root.join(SPLIT_DIR);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Reads `<root>/compositional-split-natural/{train,val,test}_pairs.txt`
/// (or the same files directly under `root`).
///
/// The vocabulary is the sorted union of words over the three files. Samples
/// come from `{train,val,test}_samples.txt` ("image_path state object" per
/// line) when present; otherwise they are discovered under `<root>/images`
/// and assigned to the first partition that lists their pair, trying train,
/// test, then val.
pub fn load_dataset(root: &Path, world: World) -> Result<Dataset> {
    let dir = split_dir(root);
    let files = ["train", "val", "test"].map(|p| dir.join(format!("{p}_pairs.txt")));
    let raw: Vec<_> = files
        .iter()
        .map(|f| parse_pair_file(f))
        .collect::<Result<_>>()?;
    let mut states = BTreeSet::new();
    let mut objects = BTreeSet::new();
    for (s, o, _) in raw.iter().flatten() {
        states.insert(s.clone());
        objects.insert(o.clone());
    }
    let vocab = Vocabulary::new(states.into_iter().collect(), objects.into_iter().collect())?;
    let train_pairs = resolve_pairs(&files[0], &raw[0], &vocab)?;
    let val_pairs = resolve_pairs(&files[1], &raw[1], &vocab)?;
    let test_pairs = resolve_pairs(&files[2], &raw[2], &vocab)?;
    let unseen: BTreeSet<Pair> = test_pairs.difference(&train_pairs).copied().collect();
    let val_unseen: BTreeSet<Pair> = val_pairs.difference(&train_pairs).copied().collect();
    let (ns, no) = (vocab.n_states(), vocab.n_objects());
    let split = CompositionSplit::new(ns, no, train_pairs.clone(), unseen, world)?;
    let val_split = CompositionSplit::new(ns, no, train_pairs.clone(), val_unseen, world)?;

    let lists = ["train", "val", "test"].map(|p| dir.join(format!("{p}_samples.txt")));
    let (train, val, test) = if lists.iter().all(|p| p.is_file()) {
        let mut parts = Vec::with_capacity(3);
        for path in &lists {
            parts.push(parse_sample_file(path, &vocab)?);
        }
        let test = parts.pop().unwrap();
        let val = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        (train, val, test)
    } else {
        discover_samples(root, &vocab, [&train_pairs, &test_pairs, &val_pairs])?
    };

    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let ds = Dataset {
        name,
        vocab,
        split,
        val_split,
        train,
        val,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_sample_file(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let text = read_text(path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if toks.len() != 3 {
            return Err(parse_err(format!(
                "expected \"image state object\", got {line:?}"
            )));
        }
        let (Some(s), Some(o)) = (vocab.state_index(toks[1]), vocab.object_index(toks[2])) else {
            return Err(parse_err(format!(
                "sample references unknown word in {:?} {:?}",
                toks[1], toks[2]
            )));
        };
        samples.push(Sample {
            image_ref: toks[0].to_string(),
            pair: Pair::new(s, o),
        });
    }
    Ok(samples)
}

/// Splits a directory name like `Faux.Leather_Boots` into a vocabulary pair.
fn parse_pair_dir(name: &str, vocab: &Vocabulary) -> Result<Option<Pair>> {
    let mut found = None;
    for (i, c) in name.char_indices() {
        if c != '_' && c != ' ' {
            continue;
        }
        let (s, o) = (&name[..i], &name[i + 1..]);
        if let (Some(si), Some(oi)) = (vocab.state_index(s), vocab.object_index(o)) {
            if found.replace(Pair::new(si, oi)).is_some() {
                return Err(Error::Validation(format!(
                    "image directory {name:?} splits into more than one pair"
                )));
            }
        }
    }
    Ok(found)
}

type Partitions = (Vec<Sample>, Vec<Sample>, Vec<Sample>);

fn discover_samples(
    root: &Path,
    vocab: &Vocabulary,
    [train, test, val]: [&BTreeSet<Pair>; 3],
) -> Result<Partitions> {
    let images = root.join("images");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out: Partitions = (Vec::new(), Vec::new(), Vec::new());
    for dir in dirs {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let Some(pair) = parse_pair_dir(&name, vocab)? else {
            log::warn!("skipping image directory {name:?}: not a known pair");
            continue;
        };
        let bucket = if train.contains(&pair) {
            &mut out.0
        } else if test.contains(&pair) {
            &mut out.2
        } else if val.contains(&pair) {
            &mut out.1
        } else {
            continue;
        };
        let mut files: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        files.sort();
        bucket.extend(files.into_iter().map(|f| Sample {
            image_ref: format!("{name}/{f}"),
            pair,
        }));
    }
    if out.2.iter().all(|s| train.contains(&s.pair)) {
        log::warn!("no sample lists found; seen pairs contribute no test samples");
    }
    Ok(out)
}

/// Writes pair and sample lists in the layout [`load_dataset`] reads.
pub fn write_split_files(ds: &Dataset, root: &Path) -> Result<()> {
    let dir = root.join(SPLIT_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pair_lines = |pairs: &mut dyn Iterator<Item = Pair>| {
        pairs
            .map(|p| format!("{}\n", ds.vocab.pair_name(p)))
            .collect::<String>()
    };
    let test_pairs: BTreeSet<Pair> = ds.test.iter().map(|s| s.pair).chain(ds.split.unseen().iter().copied()).collect();
    let val_pairs: BTreeSet<Pair> = ds.val.iter().map(|s| s.pair).chain(ds.val_split.unseen().iter().copied()).collect();
    let files = [
        ("train_pairs.txt", pair_lines(&mut ds.split.seen().iter().copied())),
        ("val_pairs.txt", pair_lines(&mut val_pairs.into_iter())),
        ("test_pairs.txt", pair_lines(&mut test_pairs.into_iter())),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    for (part, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let body: String = samples
            .iter()
            .map(|s| format!("{} {}\n", s.image_ref, ds.vocab.pair_name(s.pair)))
            .collect();
        let p = dir.join(format!("{part}_samples.txt"));
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Parameters of a synthetic benchmark with planted group structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_s: usize,
    pub n_o: usize,
    /// Object groups seen by the state branch.
    pub g_s: usize,
    /// State groups seen by the object branch.
    pub g_o: usize,
    pub samples_per_pair: usize,
    /// Per-coordinate standard deviation of the additive feature noise.
    pub noise_scale: f64,
    pub seed: u64,
    /// Feature width; the first half carries state evidence, the second half
    /// object evidence.
    pub dim: usize,
    /// Fraction of all compositions held out as unseen.
    pub holdout: f64,
    /// Radius of the per-class offsets around each group center.
    pub spread: f64,
    /// Width of the generated word vectors.
    pub word_dim: usize,
    /// Fraction of the remaining compositions that get no samples at all;
    /// they exist only as open-world distractors.
    pub infeasible: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_s: 8,
            n_o: 12,
            g_s: 3,
            g_o: 3,
            samples_per_pair: 20,
            noise_scale: 0.1,
            seed: 0,
            dim: 16,
            holdout: 0.2,
            spread: 0.6,
            word_dim: 16,
            infeasible: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("synthetic spec: {m}")));
        if self.n_s == 0 || self.n_o == 0 {
            return bad("n_s and n_o must be at least 1");
        }
        if self.g_s == 0 || self.g_o == 0 {
            return bad("g_s and g_o must be at least 1");
        }
        if self.samples_per_pair == 0 {
            return bad("samples_per_pair must be at least 1");
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("noise_scale must be finite and nonnegative");
        }
        if self.dim < 4 || !self.dim.is_multiple_of(2) {
            return bad("dim must be even and at least 4");
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return bad("holdout must lie in (0, 1)");
        }
        if self.word_dim == 0 {
            return bad("word_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.infeasible) || self.holdout + self.infeasible >= 1.0 {
            return bad("infeasible must lie in [0, 1 - holdout)");
        }
        Ok(())
    }
}

/// Planted group assignment of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthGroups {
    /// Group of each object; states look different across these groups.
    pub object_groups: Vec<usize>,
    /// Group of each state; objects look different across these groups.
    pub state_groups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub dataset: Dataset,
    /// One row per sample; row `i` belongs to image ref `synthetic/{i:06}`.
    pub features: Matrix,
    pub groups: GroundTruthGroups,
    /// Group-structured word vectors for every state and object name.
    pub word_vectors: Vec<(String, Vec<f64>)>,
}

pub fn synthetic_ref(index: usize) -> String {
    format!("synthetic/{index:06}")
}

/// Parses a ref produced by [`synthetic_ref`].
pub fn synthetic_index(image_ref: &str) -> Option<usize> {
    image_ref.strip_prefix("synthetic/")?.parse().ok()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian_vec(rng, n);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn apply(rot: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    rot.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn assign_groups(rng: &mut ChaCha8Rng, n: usize, groups: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank % groups;
    }
    out
}

/// Picks unseen pairs so that every state, every object, every
/// (state, object group) and every (object, state group) keeps at least one
/// seen pair.
fn choose_holdout(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    groups: &GroundTruthGroups,
) -> Result<BTreeSet<Pair>> {
    let total = spec.n_s * spec.n_o;
    let target = ((total as f64) * spec.holdout).round().max(1.0) as usize;
    let mut state_count = vec![spec.n_o; spec.n_s];
    let mut object_count = vec![spec.n_s; spec.n_o];
    let mut state_group: HashMap<(usize, usize), usize> = HashMap::new();
    let mut object_group: HashMap<(usize, usize), usize> = HashMap::new();
    for s in 0..spec.n_s {
        for o in 0..spec.n_o {
            *state_group.entry((s, groups.object_groups[o])).or_default() += 1;
            *object_group.entry((o, groups.state_groups[s])).or_default() += 1;
        }
    }
    let mut candidates: Vec<Pair> = (0..spec.n_s)
        .flat_map(|s| (0..spec.n_o).map(move |o| Pair::new(s, o)))
        .collect();
    candidates.shuffle(rng);
    let mut unseen = BTreeSet::new();
    for p in candidates {
        if unseen.len() == target {
            break;
        }
        let sg = (p.state, groups.object_groups[p.object]);
        let og = (p.object, groups.state_groups[p.state]);
        if state_count[p.state] > 1
            && object_count[p.object] > 1
            && state_group[&sg] > 1
            && object_group[&og] > 1
        {
            state_count[p.state] -= 1;
            object_count[p.object] -= 1;
            *state_group.get_mut(&sg).unwrap() -= 1;
            *object_group.get_mut(&og).unwrap() -= 1;
            unseen.insert(p);
        }
    }
    if unseen.len() < target {
        return Err(Error::Generation(format!(
            "could hold out only {} of {target} pairs while keeping every state, object and group covered",
            unseen.len()
        )));
    }
    Ok(unseen)
}

/// Removes `spec.infeasible` of all compositions from `seen`, keeping every
/// state, object and (class, group) combination covered. Uses its own random
/// stream so the rest of the benchmark does not depend on it.
fn drop_infeasible(spec: &SyntheticSpec, groups: &GroundTruthGroups, mut seen: BTreeSet<Pair>) -> Result<BTreeSet<Pair>> {
    let target = ((spec.n_s * spec.n_o) as f64 * spec.infeasible).round() as usize;
    if target == 0 {
        return Ok(seen);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1f3a_5c7e_9b2d_4f60);
    let mut candidates: Vec<Pair> = seen.iter().copied().collect();
    candidates.shuffle(&mut rng);
    let covered = |seen: &BTreeSet<Pair>, p: Pair| {
        let others = || seen.iter().filter(move |q| **q != p);
        others().any(|q| q.state == p.state)
            && others().any(|q| q.object == p.object)
            && others().any(|q| q.state == p.state && groups.object_groups[q.object] == groups.object_groups[p.object])
            && others().any(|q| q.object == p.object && groups.state_groups[q.state] == groups.state_groups[p.state])
    };
    let mut dropped = 0;
    for p in candidates {
        if dropped == target {
            break;
        }
        if covered(&seen, p) {
            seen.remove(&p);
            dropped += 1;
        }
    }
    if dropped < target {
        return Err(Error::Generation(format!(
            "could mark only {dropped} of {target} pairs infeasible while keeping coverage"
        )));
    }
    Ok(seen)
}

/// Builds a benchmark whose state appearance depends on the object's group
/// and vice versa.
///
/// The state half of a feature is `c_g + spread · R_g a_s` where `g` is the
/// object's group, `c_g` a unit group center, `R_g` a per-group rotation and
/// `a_s` a unit state prototype. The object half mirrors this with the
/// state's group. Gaussian noise of standard deviation `noise_scale` is added
/// per coordinate. Seen-pair samples are split 60/20/20 into
/// train/val/test; unseen-pair samples are split evenly between val and test.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups = GroundTruthGroups {
        object_groups: assign_groups(&mut rng, spec.n_o, spec.g_s),
        state_groups: assign_groups(&mut rng, spec.n_s, spec.g_o),
    };
    let unseen = choose_holdout(&mut rng, spec, &groups)?;
    let half = spec.dim / 2;

    let state_centers: Vec<_> = (0..spec.g_s).map(|_| normalized(gaussian_vec(&mut rng, half))).collect();
    let state_rot: Vec<_> = (0..spec.g_s).map(|_| random_rotation(&mut rng, half)).collect();
    let state_protos: Vec<_> = (0..spec.n_s).map(|_| normalized(gaussian_vec(&mut rng, half))).collect();
    let object_centers: Vec<_> = (0..spec.g_o).map(|_| normalized(gaussian_vec(&mut rng, half))).collect();
    let object_rot: Vec<_> = (0..spec.g_o).map(|_| random_rotation(&mut rng, half)).collect();
    let object_protos: Vec<_> = (0..spec.n_o).map(|_| normalized(gaussian_vec(&mut rng, half))).collect();

    let states: Vec<String> = (0..spec.n_s).map(|i| format!("s{i:02}")).collect();
    let objects: Vec<String> = (0..spec.n_o).map(|i| format!("o{i:02}")).collect();
    let vocab = Vocabulary::new(states, objects)?;
    let seen: BTreeSet<Pair> = (0..spec.n_s)
        .flat_map(|s| (0..spec.n_o).map(move |o| Pair::new(s, o)))
        .filter(|p| !unseen.contains(p))
        .collect();
    let seen = drop_infeasible(spec, &groups, seen)?;
    let split = CompositionSplit::new(spec.n_s, spec.n_o, seen.clone(), unseen.clone(), World::Closed)?;

    let n = spec.samples_per_pair;
    let n_train = ((n as f64) * 0.6).round().max(1.0) as usize;
    let n_val = (((n as f64) * 0.2).round() as usize).min(n - n_train);
    let n_val_unseen = n / 2;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..spec.n_s {
        for o in 0..spec.n_o {
            let pair = Pair::new(s, o);
            let og = groups.object_groups[o];
            let sg = groups.state_groups[s];
            let state_part = apply(&state_rot[og], &state_protos[s]);
            let object_part = apply(&object_rot[sg], &object_protos[o]);
            let clean: Vec<f64> = state_centers[og]
                .iter()
                .zip(&state_part)
                .chain(object_centers[sg].iter().zip(&object_part))
                .map(|(c, p)| c + spec.spread * p)
                .collect();
            for k in 0..n {
                let idx = rows.len();
                let row: Vec<f64> = clean
                    .iter()
                    .map(|&c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + spec.noise_scale * z
                    })
                    .collect();
                rows.push(row);
                let sample = Sample {
                    image_ref: synthetic_ref(idx),
                    pair,
                };
                if seen.contains(&pair) {
                    if k < n_train {
                        train.push(sample);
                    } else if k < n_train + n_val {
                        val.push(sample);
                    } else {
                        test.push(sample);
                    }
                } else if !unseen.contains(&pair) {
                    // Infeasible: the row is drawn but never used, which keeps
                    // the random stream independent of `infeasible`.
                } else if k < n_val_unseen {
                    val.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
    }
    let features = Matrix::from_shape_fn((rows.len(), spec.dim), |(i, j)| rows[i][j]);

    // Word vectors: orthogonal group centers plus small per-word jitter, so
    // same-group words have high cosine and cross-group words near zero.
    let max_groups = spec.g_s.max(spec.g_o);
    let word_centers = random_rotation(&mut rng, spec.word_dim.max(2 * max_groups));
    let wd = word_centers.len();
    let mut word_vectors = Vec::new();
    for (i, name) in vocab.states().iter().enumerate() {
        let c = &word_centers[groups.state_groups[i]];
        let j = gaussian_vec(&mut rng, wd);
        word_vectors.push((name.clone(), c.iter().zip(&j).map(|(a, b)| a + 0.15 * b).collect()));
    }
    for (i, name) in vocab.objects().iter().enumerate() {
        let c = &word_centers[max_groups + groups.object_groups[i]];
        let j = gaussian_vec(&mut rng, wd);
        word_vectors.push((name.clone(), c.iter().zip(&j).map(|(a, b)| a + 0.15 * b).collect()));
    }

    let dataset = Dataset {
        name: format!("synthetic-{}", spec.seed),
        vocab,
        val_split: split.clone(),
        split,
        train,
        val,
        test,
    };
    dataset.validate()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        dataset,
        features,
        groups,
        word_vectors,
    })
}

pub const SYNTHETIC_KIND: &str = "synthetic-dataset";
pub const SYNTHETIC_VERSION: u32 = 1;

fn samples_matrix(samples: &[Sample]) -> Result<Matrix> {
    let mut m = Matrix::zeros((samples.len(), 3));
    for (i, s) in samples.iter().enumerate() {
        let idx = synthetic_index(&s.image_ref)
            .ok_or_else(|| Error::Archive(format!("non-synthetic ref {:?}", s.image_ref)))?;
        m[[i, 0]] = idx as f64;
        m[[i, 1]] = s.pair.state as f64;
        m[[i, 2]] = s.pair.object as f64;
    }
    Ok(m)
}

fn samples_from_matrix(m: &Matrix) -> Vec<Sample> {
    m.rows()
        .into_iter()
        .map(|r| Sample {
            image_ref: synthetic_ref(r[0] as usize),
            pair: Pair::new(r[1] as usize, r[2] as usize),
        })
        .collect()
}

impl SyntheticDataset {
    pub fn to_archive(&self) -> Result<Archive> {
        let ds = &self.dataset;
        let meta = serde_json::json!({
            "spec": self.spec,
            "name": ds.name,
            "vocab": ds.vocab,
            "split": ds.split,
            "val_split": ds.val_split,
            "groups": self.groups,
        });
        let mut a = Archive::new(SYNTHETIC_KIND, SYNTHETIC_VERSION, meta);
        a.push("features", self.features.clone());
        a.push("train", samples_matrix(&ds.train)?);
        a.push("val", samples_matrix(&ds.val)?);
        a.push("test", samples_matrix(&ds.test)?);
        let wd = self.word_vectors.first().map_or(0, |(_, v)| v.len());
        let wv = Matrix::from_shape_fn((self.word_vectors.len(), wd), |(i, j)| self.word_vectors[i].1[j]);
        a.push("word_vectors", wv);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(SYNTHETIC_KIND, SYNTHETIC_VERSION)?;
        let de = |key: &str| {
            a.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Archive(format!("missing meta key {key:?}")))
        };
        let parse = |e: serde_json::Error| Error::Archive(e.to_string());
        let spec: SyntheticSpec = serde_json::from_value(de("spec")?).map_err(parse)?;
        let vocab: Vocabulary = serde_json::from_value::<Vocabulary>(de("vocab")?)
            .map_err(parse)?
            .reindex()?;
        let dataset = Dataset {
            name: serde_json::from_value(de("name")?).map_err(parse)?,
            split: serde_json::from_value(de("split")?).map_err(parse)?,
            val_split: serde_json::from_value(de("val_split")?).map_err(parse)?,
            train: samples_from_matrix(a.tensor("train")?),
            val: samples_from_matrix(a.tensor("val")?),
            test: samples_from_matrix(a.tensor("test")?),
            vocab,
        };
        dataset.validate()?;
        let wv = a.tensor("word_vectors")?;
        let names = dataset.vocab.states().iter().chain(dataset.vocab.objects());
        let word_vectors = names
            .zip(wv.rows())
            .map(|(n, r)| (n.clone(), r.to_vec()))
            .collect();
        Ok(Self {
            spec,
            groups: serde_json::from_value(de("groups")?).map_err(parse)?,
            features: a.tensor("features")?.clone(),
            word_vectors,
            dataset,
        })
    }

    /// Writes word vectors in the plain-text "token f1 ... fd" format.
    pub fn write_word_vectors(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for (name, v) in &self.word_vectors {
            body.push_str(name);
            for x in v {
                body.push(' ');
                body.push_str(&format!("{x:e}"));
            }
            body.push('\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Feature rows for `samples`, in order.
    pub fn features_for(&self, samples: &[Sample]) -> Matrix {
        let idx: Vec<usize> = samples
            .iter()
            .map(|s| synthetic_index(&s.image_ref).expect("synthetic sample ref"))
            .collect();
        self.features.select(ndarray::Axis(0), &idx)
    }
}

/// Counts of samples per pair, handy for reports.
pub fn pair_histogram(samples: &[Sample]) -> BTreeMap<Pair, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        *h.entry(s.pair).or_default() += 1;
    }
    h
}
