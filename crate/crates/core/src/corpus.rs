//! Datasets: JSONL ingestion, a synthetic hierarchical corpus, k-shot
//! sampling and feature hashing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{build_tree, HierarchyError, LabelPath, LabelTree};

/// Tokens past this position do not contribute to a feature vector.
pub const MAX_TOKENS: usize = 128;
pub const DEFAULT_BUCKETS: usize = 4096;
/// Number of distinct `z{j}` noise tokens in the synthetic corpus.
pub const NOISE_VOCAB: usize = 1000;
/// Tokens per synthetic example.
pub const SYNTHETIC_LEN: usize = 20;
const BRANCH_TOKEN_PROB: f64 = 0.4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(split: Split) -> Self {
        Self {
            split,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.class_index).collect()
    }

    /// Example count per class, for `num_classes` classes.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for e in &self.examples {
            counts[e.class_index] += 1;
        }
        counts
    }
}

/// A label tree with its three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tree: LabelTree,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.tree.num_classes()
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Classes without a single training example.
    pub fn missing_train_classes(&self) -> Vec<usize> {
        self.train
            .class_counts(self.num_classes())
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// All examples tagged with their split, in a canonical order: by class,
    /// then split, then position.
    fn records(&self) -> Vec<(&Example, Split)> {
        let mut out: Vec<(&Example, Split)> = [&self.train, &self.validation, &self.test]
            .into_iter()
            .flat_map(|d| d.examples.iter().map(move |e| (e, d.split)))
            .collect();
        out.sort_by_key(|(e, s)| (e.class_index, *s));
        out
    }

    /// Writes the corpus as JSONL. Loading the file back yields the same
    /// class order.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut buf = Vec::new();
        self.write_jsonl_to(&mut buf).map_err(io_err(path))?;
        std::fs::write(path, buf).map_err(io_err(path))
    }

    pub fn write_jsonl_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        let paths = self.tree.label_paths();
        for (e, split) in self.records() {
            let line = JsonlRecord {
                text: e.text.clone(),
                label_path: paths[e.class_index].1.clone(),
                split: Some(split.to_string()),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    label_path: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

/// Parses JSONL lines of `{"text", "label_path", "split"?}`.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Corpus, CorpusError> {
    let mut class_of_path: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut paths: Vec<LabelPath> = Vec::new();
    let mut train = Dataset::new(Split::Train);
    let mut validation = Dataset::new(Split::Validation);
    let mut test = Dataset::new(Split::Test);

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.label_path.is_empty() {
            return Err(CorpusError::Parse {
                line: line_no,
                msg: "empty label_path".into(),
            });
        }
        let split = match rec.split.as_deref() {
            None => Split::Train,
            Some(s) => s.parse().map_err(|msg| CorpusError::Parse { line: line_no, msg })?,
        };
        let next = paths.len();
        let class_index = *class_of_path.entry(rec.label_path.clone()).or_insert_with(|| {
            paths.push((next, rec.label_path.clone()));
            next
        });
        let example = Example {
            text: rec.text,
            class_index,
        };
        match split {
            Split::Train => train.examples.push(example),
            Split::Validation => validation.examples.push(example),
            Split::Test => test.examples.push(example),
        }
    }
    if paths.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let tree = build_tree(&paths)?;
    Ok(Corpus {
        tree,
        train,
        validation,
        test,
    })
}

pub fn load_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_jsonl(BufReader::new(file))
}

/// Parameters of the synthetic hierarchical corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub branches: usize,
    pub leaves_per_branch: usize,
    pub per_class: usize,
    pub vocab_shared: usize,
    pub vocab_leaf: usize,
    pub noise: f64,
    pub seed: u64,
    /// Leaf depth. Levels between a branch and its leaves form a chain.
    pub depth: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            branches: 4,
            leaves_per_branch: 3,
            per_class: 100,
            vocab_shared: 30,
            vocab_leaf: 20,
            noise: 0.1,
            seed: 7,
            depth: 2,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("branches", self.branches),
            ("leaves_per_branch", self.leaves_per_branch),
            ("per_class", self.per_class),
            ("vocab_shared", self.vocab_shared),
            ("vocab_leaf", self.vocab_leaf),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CorpusError::InvalidArgument(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(CorpusError::InvalidArgument(format!(
                "noise must lie in [0, 1), got {}",
                self.noise
            )));
        }
        if self.depth < 2 {
            return Err(CorpusError::InvalidArgument("depth must be at least 2".into()));
        }
        Ok(())
    }

    fn label_path(&self, class_index: usize) -> Vec<String> {
        let branch = class_index / self.leaves_per_branch;
        let mut path = vec![format!("b{branch}")];
        path.extend((2..self.depth).map(|level| format!("b{branch}m{level}")));
        path.push(format!("l{class_index}"));
        path
    }
}

/// Generates a corpus whose leaf classes have private vocabularies and whose
/// branches share a vocabulary. Splits are 80/10/10, round-robin per class.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let num_classes = cfg.branches * cfg.leaves_per_branch;
    let paths: Vec<LabelPath> = (0..num_classes).map(|c| (c, cfg.label_path(c))).collect();
    let tree = build_tree(&paths)?;

    let p_noise = cfg.noise;
    let p_leaf = (1.0 - BRANCH_TOKEN_PROB - p_noise).max(0.0);
    let p_branch = 1.0 - p_leaf - p_noise;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Dataset::new(Split::Train);
    let mut validation = Dataset::new(Split::Validation);
    let mut test = Dataset::new(Split::Test);
    for class_index in 0..num_classes {
        let branch = class_index / cfg.leaves_per_branch;
        for i in 0..cfg.per_class {
            let tokens: Vec<String> = (0..SYNTHETIC_LEN)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if u < p_branch {
                        format!("b{branch}w{}", rng.gen_range(0..cfg.vocab_shared))
                    } else if u < p_branch + p_leaf {
                        format!("l{class_index}w{}", rng.gen_range(0..cfg.vocab_leaf))
                    } else {
                        format!("z{}", rng.gen_range(0..NOISE_VOCAB))
                    }
                })
                .collect();
            let example = Example {
                text: tokens.join(" "),
                class_index,
            };
            match i % 10 {
                8 => validation.examples.push(example),
                9 => test.examples.push(example),
                _ => train.examples.push(example),
            }
        }
    }
    Ok(Corpus {
        tree,
        train,
        validation,
        test,
    })
}

/// Keeps `min(k, class size)` examples of every class, drawn without
/// replacement. Survivors keep their original relative order.
pub fn kshot_sample(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidArgument("k must be at least 1".into()));
    }
    if dataset.split != Split::Train {
        return Err(CorpusError::InvalidArgument(format!(
            "k-shot sampling applies to the train split, got {}",
            dataset.split
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        by_class.entry(e.class_index).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for members in by_class.values() {
        if members.len() <= k {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(&mut rng, members.len(), k) {
                keep[members[j]] = true;
            }
        }
    }
    Ok(Dataset {
        split: dataset.split,
        examples: dataset
            .examples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(e, _)| e.clone())
            .collect(),
    })
}

/// Sparse bag of hashed tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// `(bucket, count)` pairs, ascending by bucket, counts positive.
    pub entries: Vec<(usize, u32)>,
    pub num_buckets: usize,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn count(&self, bucket: usize) -> u32 {
        self.entries
            .binary_search_by_key(&bucket, |&(b, _)| b)
            .map_or(0, |i| self.entries[i].1)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

pub fn bucket_of(token: &str, num_buckets: usize) -> usize {
    (fnv1a64(token.as_bytes()) & (num_buckets as u64 - 1)) as usize
}

/// Lowercases, splits on whitespace, keeps the first [`MAX_TOKENS`] tokens and
/// counts their FNV-1a buckets.
pub fn hash_vectorize(text: &str, num_buckets: usize) -> Result<FeatureVector, CorpusError> {
    if !num_buckets.is_power_of_two() {
        return Err(CorpusError::InvalidArgument(format!(
            "bucket count must be a power of two, got {num_buckets}"
        )));
    }
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for token in text.to_lowercase().split_whitespace().take(MAX_TOKENS) {
        *counts.entry(bucket_of(token, num_buckets)).or_insert(0) += 1;
    }
    Ok(FeatureVector {
        entries: counts.into_iter().collect(),
        num_buckets,
    })
}
