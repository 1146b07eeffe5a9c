//! Direct testing with the label centers, linear probes, hierarchical
//! accuracies and cluster geometry.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{hash_vectorize, Dataset, FeatureVector};
use crate::encoder::{cosine_sim, cosine_sim_grad, EncoderParams};
use crate::hierarchy::{HierarchyError, LabelTree};
use crate::label_space::LabelSpace;
use crate::matrix::Matrix;
use crate::optim::{adam_step, AdamMoments};
use crate::scalar::{log_sum_exp, norm, Scalar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("linear probe needs at least one training example")]
    EmptyProbeSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HierarchicalHit {
    pub node: bool,
    pub mid: bool,
    pub root: bool,
}

/// Leaf, parent and depth-1 agreement between a true and a predicted class.
///
/// When either leaf hangs directly under the root there is no mid level, and
/// `mid` takes the value of `root`.
pub fn hierarchical_accuracy(
    tree: &LabelTree,
    true_class: usize,
    pred_class: usize,
) -> Result<HierarchicalHit, HierarchyError> {
    let truth = tree.leaf(true_class)?;
    let pred = tree.leaf(pred_class)?;
    let root = tree.ancestor_at_depth(true_class, 1)? == tree.ancestor_at_depth(pred_class, 1)?;
    let (pt, pp) = (tree.parent(truth), tree.parent(pred));
    let mid = if pt == Some(tree.root()) || pp == Some(tree.root()) {
        root
    } else {
        pt == pp
    };
    Ok(HierarchicalHit {
        node: truth == pred,
        mid,
        root,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "nodeAcc")]
    pub node_acc: f64,
    #[serde(rename = "midAcc")]
    pub mid_acc: f64,
    #[serde(rename = "rootAcc")]
    pub root_acc: f64,
    /// `None` when no class has two points.
    pub intra_dist: Option<f64>,
    /// `None` with fewer than two classes present.
    pub inter_dist: Option<f64>,
    pub n_examples: usize,
}

/// Node/mid/root accuracies of `preds` against `truths`.
pub fn accuracy_report(tree: &LabelTree, truths: &[usize], preds: &[usize]) -> Result<(f64, f64, f64), EvalError> {
    if truths.len() != preds.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} labels, {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    if truths.is_empty() {
        return Err(EvalError::InsufficientData("no examples to score".into()));
    }
    let (mut node, mut mid, mut root) = (0usize, 0usize, 0usize);
    for (&t, &p) in truths.iter().zip(preds) {
        let hit = hierarchical_accuracy(tree, t, p)?;
        node += hit.node as usize;
        mid += hit.mid as usize;
        root += hit.root as usize;
    }
    let n = truths.len() as f64;
    Ok((node as f64 / n, mid as f64 / n, root as f64 / n))
}

pub fn featurize(dataset: &Dataset, num_buckets: usize) -> Vec<FeatureVector> {
    dataset
        .examples
        .iter()
        .map(|e| hash_vectorize(&e.text, num_buckets).expect("encoder bucket count is a power of two"))
        .collect()
}

pub fn embed_dataset<T: Scalar>(encoder: &EncoderParams<T>, dataset: &Dataset) -> Vec<Vec<T>> {
    encoder.encode_batch(&featurize(dataset, encoder.dims.buckets))
}

/// Builds a report from embeddings and predicted classes.
pub fn report_from_predictions<T: Scalar>(
    tree: &LabelTree,
    embeddings: &[Vec<T>],
    truths: &[usize],
    preds: &[usize],
) -> Result<MetricsReport, EvalError> {
    let (node_acc, mid_acc, root_acc) = accuracy_report(tree, truths, preds)?;
    let (intra_dist, inter_dist) = match cluster_distances(embeddings, truths) {
        Ok((a, b)) => (Some(a.as_f64()), Some(b.as_f64())),
        Err(EvalError::InsufficientData(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        node_acc,
        mid_acc,
        root_acc,
        intra_dist,
        inter_dist,
        n_examples: truths.len(),
    })
}

/// Classifies every example with the nearest label center.
pub fn direct_test<T: Scalar>(
    encoder: &EncoderParams<T>,
    labels: &LabelSpace<T>,
    dataset: &Dataset,
    tree: &LabelTree,
) -> Result<MetricsReport, EvalError> {
    if labels.num_classes() != tree.num_classes() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} label centers for {} classes",
            labels.num_classes(),
            tree.num_classes()
        )));
    }
    let z = embed_dataset(encoder, dataset);
    let preds: Vec<usize> = z.iter().map(|v| labels.nn_classify(v)).collect();
    report_from_predictions(tree, &z, &dataset.labels(), &preds)
}

/// Leaf accuracy of nearest-center classification on precomputed features.
pub fn node_accuracy<T: Scalar>(
    encoder: &EncoderParams<T>,
    labels: &LabelSpace<T>,
    features: &[FeatureVector],
    truths: &[usize],
) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let hits = features
        .iter()
        .zip(truths)
        .filter(|(fv, &t)| labels.nn_classify(&encoder.encode(fv)) == t)
        .count();
    hits as f64 / features.len() as f64
}

fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n > T::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(T::zero(), |s, x| s + x)
        .sqrt()
}

/// Mean within-class pairwise distance (averaged over classes with at least
/// two points) and mean cross-class pairwise distance, on L2-normalised
/// embeddings.
pub fn cluster_distances<T: Scalar>(embeddings: &[Vec<T>], labels: &[usize]) -> Result<(T, T), EvalError> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} embeddings, {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let units: Vec<Vec<T>> = embeddings.iter().map(|v| unit(v)).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present = members.iter().filter(|m| !m.is_empty()).count();
    if present < 2 {
        return Err(EvalError::InsufficientData("need at least two classes".into()));
    }

    let mut intra_sum = T::zero();
    let mut intra_classes = 0usize;
    for m in members.iter().filter(|m| m.len() >= 2) {
        let mut s = T::zero();
        let mut pairs = 0usize;
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                s = s + euclidean(&units[i], &units[j]);
                pairs += 1;
            }
        }
        intra_sum = intra_sum + s / T::from_count(pairs);
        intra_classes += 1;
    }
    if intra_classes == 0 {
        return Err(EvalError::InsufficientData("no class has two points".into()));
    }

    let mut inter_sum = T::zero();
    let mut inter_pairs = 0usize;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            if labels[i] != labels[j] {
                inter_sum = inter_sum + euclidean(&units[i], &units[j]);
                inter_pairs += 1;
            }
        }
    }
    Ok((
        intra_sum / T::from_count(intra_classes),
        inter_sum / T::from_count(inter_pairs),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInit {
    Random,
    LabelEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Linear head scoring `cos(z, w_c) + b_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LinearProbe<T> {
    /// `C × d`; row `c` is `w_c`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub init: ProbeInit,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn logits(&self, z: &[T]) -> Vec<T> {
        (0..self.weight.rows())
            .map(|c| cosine_sim(z, self.weight.row(c)) + self.bias[c])
            .collect()
    }

    /// Highest-scoring class; ties go to the smaller index.
    pub fn predict(&self, z: &[T]) -> usize {
        let mut best = 0;
        let mut best_score = T::neg_infinity();
        for (c, s) in self.logits(z).into_iter().enumerate() {
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    pub fn accuracy(&self, z: &[Vec<T>], y: &[usize]) -> f64 {
        if z.is_empty() {
            return 0.0;
        }
        let hits = z.iter().zip(y).filter(|(v, &t)| self.predict(v) == t).count();
        hits as f64 / z.len() as f64
    }

    /// Mean cross-entropy and gradients over a batch.
    fn loss_grad(&self, z: &[Vec<T>], y: &[usize]) -> (T, Matrix<T>, Vec<T>) {
        let c = self.weight.rows();
        let mut gw = Matrix::zeros(c, self.weight.cols());
        let mut gb = vec![T::zero(); c];
        let inv_n = T::one() / T::from_count(z.len());
        let mut loss = T::zero();
        for (v, &t) in z.iter().zip(y) {
            let logits = self.logits(v);
            let lse = log_sum_exp(&logits);
            loss = loss + (lse - logits[t]);
            for k in 0..c {
                let mut d = (logits[k] - lse).exp();
                if k == t {
                    d = d - T::one();
                }
                let d = d * inv_n;
                gb[k] = gb[k] + d;
                let (_, _, gw_k) = cosine_sim_grad(v, self.weight.row(k));
                for (g, &x) in gw.row_mut(k).iter_mut().zip(&gw_k) {
                    *g = *g + d * x;
                }
            }
        }
        (loss * inv_n, gw, gb)
    }
}

/// Trains a cosine-logit softmax head on frozen embeddings with AdamW. The
/// returned probe is the epoch with the best accuracy on `validation`
/// (or on the training set when no validation data is given).
pub fn linear_probe_train<T: Scalar>(
    embeddings: &[Vec<T>],
    labels_y: &[usize],
    num_classes: usize,
    init: ProbeInit,
    label_centers: Option<&Matrix<T>>,
    validation: Option<(&[Vec<T>], &[usize])>,
    cfg: &LpConfig,
) -> Result<LinearProbe<T>, EvalError> {
    if embeddings.is_empty() {
        return Err(EvalError::EmptyProbeSet);
    }
    if embeddings.len() != labels_y.len() {
        return Err(EvalError::ShapeMismatch(
            "embeddings and labels differ in length".into(),
        ));
    }
    let dim = embeddings[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weight = match init {
        ProbeInit::Random => {
            let bound = (6.0 / (dim + num_classes) as f64).sqrt();
            Matrix::from_fn(num_classes, dim, |_, _| T::lit(rng.gen_range(-bound..=bound)))
        }
        ProbeInit::LabelEmbeddings => {
            let u = label_centers
                .ok_or_else(|| EvalError::ShapeMismatch("label-embedding init needs label centers".into()))?;
            if u.shape() != (num_classes, dim) {
                return Err(EvalError::ShapeMismatch(format!(
                    "label centers {:?}, expected ({num_classes}, {dim})",
                    u.shape()
                )));
            }
            u.clone()
        }
    };
    let mut probe = LinearProbe {
        weight,
        bias: vec![T::zero(); num_classes],
        init,
    };
    if cfg.epochs == 0 {
        return Ok(probe);
    }

    let mut w_moments = AdamMoments::zeros(num_classes * dim);
    let mut b_moments = AdamMoments::zeros(num_classes);
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = embeddings.len().div_ceil(batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut best: Option<(f64, LinearProbe<T>)> = None;
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let z: Vec<Vec<T>> = chunk.iter().map(|&i| embeddings[i].clone()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels_y[i]).collect();
            let (_, gw, gb) = probe.loss_grad(&z, &y);
            let lr = crate::optim::lr_at(t, total, cfg.lr);
            t += 1;
            adam_step(
                probe.weight.as_mut_slice(),
                gw.as_slice(),
                &mut w_moments,
                lr,
                cfg.weight_decay,
                t,
            )
            .expect("probe shapes are consistent");
            adam_step(&mut probe.bias, &gb, &mut b_moments, lr, cfg.weight_decay, t)
                .expect("probe shapes are consistent");
        }
        let acc = match validation {
            Some((vz, vy)) if !vz.is_empty() => probe.accuracy(vz, vy),
            _ => probe.accuracy(embeddings, labels_y),
        };
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, probe.clone()));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or(probe))
}

/// Writes one CSV row per instance and one per label center:
/// `kind,class_index,x0..x{d-1}`.
pub fn write_embeddings_csv<T: Scalar>(
    out: impl Write,
    instances: &[Vec<T>],
    instance_labels: &[usize],
    centers: &Matrix<T>,
) -> Result<(), EvalError> {
    let dim = centers.cols();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["kind".to_string(), "class_index".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    let row = |kind: &str, c: usize, v: &[T]| {
        let mut r = vec![kind.to_string(), c.to_string()];
        r.extend(v.iter().map(|x| x.as_f64().to_string()));
        r
    };
    for (v, &c) in instances.iter().zip(instance_labels) {
        w.write_record(row("instance", c, v))?;
    }
    for c in 0..centers.rows() {
        w.write_record(row("label", c, centers.row(c)))?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: "<embeddings>".into(),
        source,
    })?;
    Ok(())
}

/// Embeds `dataset` and writes it together with the label centers.
pub fn export_embeddings<T: Scalar>(
    encoder: &EncoderParams<T>,
    dataset: &Dataset,
    labels: &LabelSpace<T>,
    path: &Path,
) -> Result<(), EvalError> {
    let z = embed_dataset(encoder, dataset);
    let mut buf = Vec::new();
    write_embeddings_csv(&mut buf, &z, &dataset.labels(), &labels.centers)?;
    std::fs::write(path, buf).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
