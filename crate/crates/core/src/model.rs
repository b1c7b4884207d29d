//! Label vocabulary, instances, and the softmax classifier.
//!
//! A classifier scores a representation `h` with one weight vector and one
//! bias per label, `z_i = w_i·h + b_i`, and predicts through a softmax. Two
//! representation kinds are supported: `sparse-linear` treats the feature set
//! as an indicator vector over the feature space, and `embedding-average`
//! maps every feature to a learned dense vector and pools by averaging.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default name of the Not-Target-Type label.
pub const DEFAULT_NONE_NAME: &str = "NONE";

/// Default feature-embedding dimension for embedding-average models.
pub const DEFAULT_EMBEDDING_DIM: usize = 30;

/// Tolerance used when checking that probabilities sum to one.
pub const DISTRIBUTION_SUM_TOL: f64 = 1e-9;

/// An ordered label set with a designated NONE label.
///
/// Label order is part of the contract: distributions, weight rows and biases
/// are all aligned to it, and it survives save/load unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct LabelVocab {
    labels: Vec<String>,
    none_index: usize,
    index: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabRepr {
    labels: Vec<String>,
    none_index: usize,
}

impl TryFrom<VocabRepr> for LabelVocab {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        LabelVocab::new(repr.labels, repr.none_index)
    }
}

impl From<LabelVocab> for VocabRepr {
    fn from(vocab: LabelVocab) -> Self {
        VocabRepr {
            labels: vocab.labels,
            none_index: vocab.none_index,
        }
    }
}

impl LabelVocab {
    /// Builds a vocabulary from an ordered label list and the position of the
    /// NONE label. Names must be unique and `none_index` in range.
    pub fn new(labels: Vec<String>, none_index: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidVocab("no labels".into()));
        }
        if none_index >= labels.len() {
            return Err(Error::InvalidVocab(format!(
                "none_index {} out of range for {} labels",
                none_index,
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, name) in labels.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate label `{name}`")));
            }
        }
        Ok(LabelVocab {
            labels,
            none_index,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn none_index(&self) -> usize {
        self.none_index
    }

    pub fn none_name(&self) -> &str {
        &self.labels[self.none_index]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Looks a label up, folding a miss into [`Error::UnknownLabel`].
    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}

/// A probability vector aligned to a [`LabelVocab`].
///
/// Entries are nonnegative and sum to one within `1e-9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        LabelDistribution::new(probs)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.probs
    }
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no entries".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} is not in [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(LabelDistribution { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("no entries".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weight {w} is negative"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        LabelDistribution::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution needs at least one label");
        LabelDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Shannon entropy in nats, with the `0·ln 0 := 0` convention.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|p| *p > 0.0)
    }
}

/// One relation mention: an id, a bag of feature identifiers (repeats are
/// meaningful), and the noisy supervision label set `Y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub features: Vec<String>,
    pub labels: Vec<String>,
}

impl Instance {
    /// Creates an instance; the label set must be nonempty.
    pub fn new(id: impl Into<String>, features: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("instance label set".into()));
        }
        Ok(Instance {
            id: id.into(),
            features,
            labels,
        })
    }

    /// First label of the (noisy) label set; the canonical single label for
    /// distribution estimation and evaluation.
    pub fn first_label(&self) -> &str {
        &self.labels[0]
    }
}

/// A mention representation `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    /// Dense pooled vector (embedding-average models).
    Dense(Vec<f64>),
    /// Indicator-style sparse vector as sorted `(column, value)` pairs
    /// (sparse-linear models).
    Sparse {
        pairs: Vec<(usize, f64)>,
        dim: usize,
    },
}

impl Representation {
    pub fn dim(&self) -> usize {
        match self {
            Representation::Dense(h) => h.len(),
            Representation::Sparse { dim, .. } => *dim,
        }
    }

    /// Materializes the dense vector view.
    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            Representation::Dense(h) => h.clone(),
            Representation::Sparse { pairs, dim } => {
                let mut h = vec![0.0; *dim];
                for (j, v) in pairs {
                    h[*j] = *v;
                }
                h
            }
        }
    }
}

/// Representation kind of a [`SoftmaxClassifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sparse-linear")]
    SparseLinear,
    #[serde(rename = "embedding-average")]
    EmbeddingAverage,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::SparseLinear => write!(f, "sparse-linear"),
            ModelKind::EmbeddingAverage => write!(f, "embedding-average"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse-linear" => Ok(ModelKind::SparseLinear),
            "embedding-average" => Ok(ModelKind::EmbeddingAverage),
            other => Err(Error::InvalidConfig(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }
}

/// Softmax classifier with one weight vector `w_i` and bias `b_i` per label.
///
/// A trained classifier is immutable and safe to share across prediction
/// workers; training mutates a uniquely owned value.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    pub(crate) kind: ModelKind,
    pub(crate) vocab: LabelVocab,
    /// Representation dimension: feature count for sparse-linear models,
    /// embedding width for embedding-average models.
    pub(crate) dim: usize,
    /// `K x dim` label weight rows.
    pub(crate) weights: Vec<Vec<f64>>,
    pub(crate) bias: Vec<f64>,
    /// Sorted feature universe observed at construction.
    pub(crate) feature_ids: Vec<String>,
    pub(crate) feature_map: HashMap<String, usize>,
    /// `F x dim` feature embeddings (embedding-average only).
    pub(crate) embeddings: Vec<Vec<f64>>,
    /// Shared embedding for unknown feature ids (embedding-average only).
    pub(crate) unk: Vec<f64>,
    /// Train-set label prior recorded at training time.
    pub(crate) train_prior: Option<LabelDistribution>,
    /// Source prior the bias was frozen to, for models trained with the
    /// fixed-bias variant.
    pub(crate) ba_fix_src: Option<LabelDistribution>,
}

fn sorted_unique(mut ids: Vec<String>) -> Vec<String> {
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn feature_map_of(ids: &[String]) -> HashMap<String, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect()
}

impl SoftmaxClassifier {
    /// Zero-initialized sparse-linear classifier over the given feature
    /// universe. The representation dimension equals the feature count.
    pub fn sparse_linear(vocab: LabelVocab, feature_ids: Vec<String>) -> Self {
        let ids = sorted_unique(feature_ids);
        let dim = ids.len();
        let k = vocab.len();
        let feature_map = feature_map_of(&ids);
        SoftmaxClassifier {
            kind: ModelKind::SparseLinear,
            vocab,
            dim,
            weights: vec![vec![0.0; dim]; k],
            bias: vec![0.0; k],
            feature_ids: ids,
            feature_map,
            embeddings: Vec::new(),
            unk: Vec::new(),
            train_prior: None,
            ba_fix_src: None,
        }
    }

    /// Embedding-average classifier: every feature id maps to a `dim`-vector
    /// (unknown ids share one UNK vector) and `h` is the bag average.
    /// Embeddings are initialized uniformly in `±1/sqrt(dim)` from
    /// `init_seed`; weights and biases start at zero.
    pub fn embedding_average(
        vocab: LabelVocab,
        feature_ids: Vec<String>,
        dim: usize,
        init_seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "embedding dimension must be positive".into(),
            ));
        }
        let ids = sorted_unique(feature_ids);
        let k = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let draw_row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let embeddings = (0..ids.len()).map(|_| draw_row(&mut rng)).collect();
        let unk = draw_row(&mut rng);
        let feature_map = feature_map_of(&ids);
        Ok(SoftmaxClassifier {
            kind: ModelKind::EmbeddingAverage,
            vocab,
            dim,
            weights: vec![vec![0.0; dim]; k],
            bias: vec![0.0; k],
            feature_ids: ids,
            feature_map,
            embeddings,
            unk,
            train_prior: None,
            ba_fix_src: None,
        })
    }

    /// Collects the sorted feature universe of a dataset.
    pub fn feature_ids_from(data: &[Instance]) -> Vec<String> {
        sorted_unique(
            data.iter()
                .flat_map(|inst| inst.features.iter().cloned())
                .collect(),
        )
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn vocab(&self) -> &LabelVocab {
        &self.vocab
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Feature-embedding rows, aligned to [`Self::feature_ids`]; empty for
    /// sparse-linear models.
    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn unk_embedding(&self) -> &[f64] {
        &self.unk
    }

    /// Replaces the label weight rows; shapes must match and values be finite.
    pub fn set_weights(&mut self, weights: Vec<Vec<f64>>) -> Result<()> {
        if weights.len() != self.vocab.len()
            || weights.iter().any(|r| r.len() != self.dim)
            || weights.iter().flatten().any(|w| !w.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "weights must be a finite {}x{} matrix",
                self.vocab.len(),
                self.dim
            )));
        }
        self.weights = weights;
        Ok(())
    }

    /// Replaces the bias vector; length must match and values be finite.
    pub fn set_bias(&mut self, bias: Vec<f64>) -> Result<()> {
        if bias.len() != self.vocab.len() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bias must hold {} finite entries",
                self.vocab.len()
            )));
        }
        self.bias = bias;
        Ok(())
    }

    /// Replaces the embedding table (including the UNK row) of an
    /// embedding-average model.
    pub fn set_embeddings(&mut self, rows: Vec<Vec<f64>>, unk: Vec<f64>) -> Result<()> {
        if self.kind != ModelKind::EmbeddingAverage {
            return Err(Error::InvalidConfig(
                "sparse-linear models have no embedding table".into(),
            ));
        }
        if rows.len() != self.feature_ids.len()
            || rows.iter().any(|r| r.len() != self.dim)
            || unk.len() != self.dim
            || rows.iter().flatten().chain(&unk).any(|x| !x.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "embedding table must be a finite {}x{} matrix plus an UNK row",
                self.feature_ids.len(),
                self.dim
            )));
        }
        self.embeddings = rows;
        self.unk = unk;
        Ok(())
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn train_prior(&self) -> Option<&LabelDistribution> {
        self.train_prior.as_ref()
    }

    pub fn set_train_prior(&mut self, prior: LabelDistribution) {
        self.train_prior = Some(prior);
    }

    /// Source prior of a fixed-bias model, if this model was trained that way.
    pub fn ba_fix_src(&self) -> Option<&LabelDistribution> {
        self.ba_fix_src.as_ref()
    }

    /// Builds the representation of an instance.
    ///
    /// Sparse-linear models return the indicator vector of the known features
    /// present (repeats collapse; unknown ids are ignored). Embedding-average
    /// models return the arithmetic mean of the bag's embeddings, with
    /// unknown ids pooled through the shared UNK vector. An empty feature bag
    /// maps to the zero vector.
    pub fn represent(&self, inst: &Instance) -> Representation {
        match self.kind {
            ModelKind::SparseLinear => {
                let mut cols: Vec<usize> = inst
                    .features
                    .iter()
                    .filter_map(|f| self.feature_map.get(f).copied())
                    .collect();
                cols.sort_unstable();
                cols.dedup();
                Representation::Sparse {
                    pairs: cols.into_iter().map(|c| (c, 1.0)).collect(),
                    dim: self.dim,
                }
            }
            ModelKind::EmbeddingAverage => {
                let mut h = vec![0.0; self.dim];
                let m = inst.features.len();
                if m == 0 {
                    return Representation::Dense(h);
                }
                for f in &inst.features {
                    let row = match self.feature_map.get(f) {
                        Some(&r) => &self.embeddings[r],
                        None => &self.unk,
                    };
                    for (hj, ej) in h.iter_mut().zip(row) {
                        *hj += ej;
                    }
                }
                for hj in &mut h {
                    *hj /= m as f64;
                }
                Representation::Dense(h)
            }
        }
    }

    /// Scores `w_i·h` for every label, without the bias.
    pub(crate) fn raw_scores(&self, h: &Representation) -> Vec<f64> {
        assert_eq!(
            h.dim(),
            self.dim,
            "representation dimension {} does not match model dimension {}",
            h.dim(),
            self.dim
        );
        match h {
            Representation::Dense(hv) => self.weights.iter().map(|w| dot(w, hv)).collect(),
            Representation::Sparse { pairs, .. } => self
                .weights
                .iter()
                .map(|w| pairs.iter().map(|(j, v)| w[*j] * v).sum::<f64>())
                .collect(),
        }
    }

    /// Scores `z_i = w_i·h + b_i` for every label.
    ///
    /// Panics if the representation dimension does not match the model; that
    /// is a usage error, not a data error.
    pub fn logits(&self, h: &Representation) -> Vec<f64> {
        let mut z = self.raw_scores(h);
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        z
    }

    /// Softmax posterior over labels for a representation.
    pub fn softmax_predict(&self, h: &Representation) -> LabelDistribution {
        LabelDistribution {
            probs: softmax(&self.logits(h)),
        }
    }

    /// Softmax posterior for an instance (`represent` + `softmax_predict`).
    pub fn predict(&self, inst: &Instance) -> LabelDistribution {
        self.softmax_predict(&self.represent(inst))
    }

    /// Highest-posterior label index; ties break to the lowest index.
    pub fn argmax_predict(&self, inst: &Instance) -> usize {
        // argmax over logits: the softmax is monotone.
        argmax(&self.logits(&self.represent(inst)))
    }

    /// Serializes the model to a versioned JSON document.
    pub fn to_json(&self) -> String {
        let embeddings: BTreeMap<String, Vec<f64>> = self
            .feature_ids
            .iter()
            .zip(&self.embeddings)
            .map(|(id, row)| (id.clone(), row.clone()))
            .collect();
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            vocab: self.vocab.clone(),
            kind: self.kind,
            dim: self.dim,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            feature_index: self.feature_ids.clone(),
            embeddings,
            unk_embedding: self.unk.clone(),
            train_prior: self.train_prior.clone(),
            ba_fix_src: self.ba_fix_src.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model format version {}",
                file.version
            )));
        }
        let k = file.vocab.len();
        if file.weights.len() != k || file.bias.len() != k {
            return Err(Error::InvalidConfig(
                "model weight/bias shape does not match vocabulary".into(),
            ));
        }
        if file.weights.iter().any(|row| row.len() != file.dim) {
            return Err(Error::InvalidConfig("weight row dimension mismatch".into()));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !file.weights.iter().all(|r| finite(r))
            || !finite(&file.bias)
            || !finite(&file.unk_embedding)
            || !file.embeddings.values().all(|r| finite(r))
        {
            return Err(Error::InvalidConfig(
                "model parameters must be finite".into(),
            ));
        }
        let embeddings = match file.kind {
            ModelKind::SparseLinear => Vec::new(),
            ModelKind::EmbeddingAverage => {
                let mut rows = Vec::with_capacity(file.feature_index.len());
                for id in &file.feature_index {
                    let row = file.embeddings.get(id).ok_or_else(|| {
                        Error::InvalidConfig(format!("feature `{id}` missing from embedding table"))
                    })?;
                    if row.len() != file.dim {
                        return Err(Error::InvalidConfig(format!(
                            "embedding for `{id}` has dimension {}, expected {}",
                            row.len(),
                            file.dim
                        )));
                    }
                    rows.push(row.clone());
                }
                rows
            }
        };
        let feature_map = feature_map_of(&file.feature_index);
        Ok(SoftmaxClassifier {
            kind: file.kind,
            vocab: file.vocab,
            dim: file.dim,
            weights: file.weights,
            bias: file.bias,
            feature_ids: file.feature_index,
            feature_map,
            embeddings,
            unk: file.unk_embedding,
            train_prior: file.train_prior,
            ba_fix_src: file.ba_fix_src,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        SoftmaxClassifier::from_json(&body)
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    vocab: LabelVocab,
    kind: ModelKind,
    dim: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    feature_index: Vec<String>,
    embeddings: BTreeMap<String, Vec<f64>>,
    unk_embedding: Vec<f64>,
    train_prior: Option<LabelDistribution>,
    ba_fix_src: Option<LabelDistribution>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "softmax over empty logits");
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|zi| (zi - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(z_i)`, stable against overflow.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|zi| (zi - max).exp()).sum::<f64>().ln()
}

/// Index of the maximum; ties break to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax over empty slice");
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
