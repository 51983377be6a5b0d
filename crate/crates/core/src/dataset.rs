//! Sparse instances, LIBSVM and tokenized-corpus I/O, binary bag-of-words
//! vectorization and fold splitting.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::seeded;

/// Binary class label. Serialized as the integers `1` and `-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<i64> for Label {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            other => Err(format!("label must be 1 or -1, got {other}")),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "+1",
            Label::Negative => "-1",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "+1" | "1" => Ok(Label::Positive),
            "-1" => Ok(Label::Negative),
            other => Err(format!("unrecognised label `{other}` (expected +1, 1 or -1)")),
        }
    }
}

/// Sparse feature vector: `(index, value)` pairs strictly increasing by
/// index with no stored zeros.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a vector from pairs that must already be strictly increasing by
    /// index. Zero values are dropped.
    pub fn from_sorted(pairs: Vec<(usize, f64)>) -> Result<Self> {
        for w in pairs.windows(2) {
            if w[0].0 >= w[1].0 {
                return arg(format!(
                    "indices must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                ));
            }
        }
        if let Some(&(i, v)) = pairs.iter().find(|(_, v)| !v.is_finite()) {
            return arg(format!("non-finite value {v} at index {i}"));
        }
        Ok(Self {
            entries: pairs.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        })
    }

    /// Binary vector with value 1.0 at each of `indices` (any order, repeats allowed).
    pub fn binary(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut idx: Vec<usize> = indices.into_iter().collect();
        idx.sort_unstable();
        idx.dedup();
        Self {
            entries: idx.into_iter().map(|i| (i, 1.0)).collect(),
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One past the largest stored index, 0 for the empty vector.
    pub fn required_dimension(&self) -> usize {
        self.entries.last().map_or(0, |&(i, _)| i + 1)
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }

    /// Dot product with a dense vector.
    pub fn dot(&self, dense: &[f64]) -> Result<f64> {
        if self.required_dimension() > dense.len() {
            return arg(format!(
                "feature index {} out of range for dimension {}",
                self.required_dimension() - 1,
                dense.len()
            ));
        }
        Ok(self.dot_unchecked(dense))
    }

    pub(crate) fn dot_unchecked(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }
}

/// `Σ value·w[index]`; errors when `x` has an index outside `w`.
pub fn sparse_dot(x: &SparseVector, w: &[f64]) -> Result<f64> {
    x.dot(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub features: SparseVector,
    pub label: Label,
}

impl LabeledInstance {
    pub fn new(features: SparseVector, label: Label) -> Self {
        Self { features, label }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    instances: Vec<LabeledInstance>,
    dimension: usize,
    texts: Option<Vec<String>>,
}

impl Dataset {
    /// Dimension is `1 + max index` over the instances.
    pub fn new(instances: Vec<LabeledInstance>) -> Self {
        let dimension = instances
            .iter()
            .map(|x| x.features.required_dimension())
            .max()
            .unwrap_or(0);
        Self {
            instances,
            dimension,
            texts: None,
        }
    }

    pub fn with_dimension(instances: Vec<LabeledInstance>, dimension: usize) -> Result<Self> {
        let ds = Self::new(instances);
        if ds.dimension > dimension {
            return arg(format!(
                "instances need dimension {} but {} was given",
                ds.dimension, dimension
            ));
        }
        Ok(Self { dimension, ..ds })
    }

    pub fn with_texts(mut self, texts: Vec<String>) -> Result<Self> {
        if texts.len() != self.instances.len() {
            return arg(format!(
                "{} display texts for {} instances",
                texts.len(),
                self.instances.len()
            ));
        }
        self.texts = Some(texts);
        Ok(self)
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn get(&self, i: usize) -> &LabeledInstance {
        &self.instances[i]
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn text(&self, i: usize) -> Option<&str> {
        self.texts.as_ref().map(|t| t[i].as_str())
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.instances.iter().map(|x| x.label)
    }

    /// Copy of the instances at `indices` (in that order), keeping the dimension.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            dimension: self.dimension,
            texts: self
                .texts
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i].clone()).collect()),
        }
    }

    /// Same features, labels replaced.
    pub fn relabeled(&self, labels: impl IntoIterator<Item = Label>) -> Dataset {
        let instances: Vec<_> = self
            .instances
            .iter()
            .zip(labels)
            .map(|(x, l)| LabeledInstance::new(x.features.clone(), l))
            .collect();
        assert_eq!(instances.len(), self.instances.len());
        Dataset {
            instances,
            dimension: self.dimension,
            texts: self.texts.clone(),
        }
    }
}

/// Parses LIBSVM sparse text (`<label> <idx>:<val> ...`, 1-based indices).
pub fn parse_libsvm<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        instances.push(parse_libsvm_line(content, lineno)?);
    }
    Ok(Dataset::new(instances))
}

pub fn parse_libsvm_str(text: &str) -> Result<Dataset> {
    parse_libsvm(text.as_bytes())
}

fn parse_libsvm_line(content: &str, line: usize) -> Result<LabeledInstance> {
    let perr = |message: String| Error::Parse { line, message };
    let mut tokens = content.split_whitespace();
    let label: Label = tokens
        .next()
        .expect("non-empty line")
        .parse()
        .map_err(perr)?;
    let mut pairs = Vec::new();
    let mut last: Option<usize> = None;
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| perr(format!("expected <index>:<value>, got `{tok}`")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| perr(format!("bad feature index `{idx}`")))?;
        if idx == 0 {
            return Err(perr("feature indices are 1-based".into()));
        }
        let val: f64 = val
            .parse()
            .map_err(|_| perr(format!("bad feature value `{val}`")))?;
        if !val.is_finite() {
            return Err(perr(format!("non-finite feature value `{val}`")));
        }
        let idx = idx - 1;
        if let Some(prev) = last {
            if idx <= prev {
                return Err(perr(format!(
                    "feature indices not strictly increasing ({} then {})",
                    prev + 1,
                    idx + 1
                )));
            }
        }
        last = Some(idx);
        pairs.push((idx, val));
    }
    let features = SparseVector::from_sorted(pairs).map_err(|e| perr(e.to_string()))?;
    Ok(LabeledInstance::new(features, label))
}

pub fn write_instance<W: Write>(out: &mut W, x: &LabeledInstance) -> std::io::Result<()> {
    write!(out, "{}", x.label)?;
    for &(i, v) in x.features.entries() {
        write!(out, " {}:{}", i + 1, v)?;
    }
    writeln!(out)
}

/// Writes LIBSVM text; values use the shortest representation that parses
/// back to the same `f64`.
pub fn write_libsvm<W: Write>(out: &mut W, data: &Dataset) -> std::io::Result<()> {
    for x in data.instances() {
        write_instance(out, x)?;
    }
    Ok(())
}

pub fn libsvm_string(data: &Dataset) -> String {
    let mut buf = Vec::new();
    write_libsvm(&mut buf, data).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("ascii output")
}

/// One document of a tokenized corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub label: Label,
    pub tokens: Vec<String>,
}

/// Parses the tokenized-corpus format: one document per line, the first
/// whitespace-separated token is `+1`/`-1`, the rest are words.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else {
            continue;
        };
        let label = first.parse().map_err(|message| Error::Parse {
            line: lineno + 1,
            message,
        })?;
        docs.push(Document {
            label,
            tokens: tokens.map(str::to_owned).collect(),
        });
    }
    Ok(docs)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Tokens ordered by feature index.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line `i` holding feature index `i`.
    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }
}

/// Keeps tokens occurring at least `min_count` times in `docs`, indexed by
/// first occurrence.
pub fn build_vocabulary<D, T>(docs: &[D], min_count: usize) -> Result<Vocabulary>
where
    D: AsRef<[T]>,
    T: AsRef<str>,
{
    if min_count == 0 {
        return arg("min_count must be at least 1");
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for doc in docs {
        for tok in doc.as_ref() {
            let tok = tok.as_ref();
            let c = counts.entry(tok).or_insert(0);
            if *c == 0 {
                order.push(tok);
            }
            *c += 1;
        }
    }
    let tokens: Vec<String> = order
        .into_iter()
        .filter(|t| counts[t] >= min_count)
        .map(str::to_owned)
        .collect();
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        index,
        tokens,
        min_count,
    })
}

/// Binary bag-of-words: 1.0 for every distinct in-vocabulary token.
pub fn vectorize<T: AsRef<str>>(doc: &[T], vocab: &Vocabulary) -> SparseVector {
    SparseVector::binary(doc.iter().filter_map(|t| vocab.get(t.as_ref())))
}

/// Vectorizes a whole corpus against `vocab`, with dimension `vocab.len()`.
pub fn vectorize_corpus(docs: &[Document], vocab: &Vocabulary) -> Dataset {
    let instances = docs
        .iter()
        .map(|d| LabeledInstance::new(vectorize(&d.tokens, vocab), d.label))
        .collect();
    Dataset::with_dimension(instances, vocab.len()).expect("vocabulary bounds every index")
}

/// Splits `0..n` into `k` disjoint folds whose sizes differ by at most one.
/// Each fold is returned sorted.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return arg(format!("fold count {k} must be in 2..={n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, 0));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

pub fn split_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    fold_indices(dataset.len(), k, seed)
}

/// Fraction of positive labels.
pub fn class_balance(dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return arg("class balance of an empty dataset");
    }
    let pos = dataset.labels().filter(|l| l.is_positive()).count();
    Ok(pos as f64 / dataset.len() as f64)
}
