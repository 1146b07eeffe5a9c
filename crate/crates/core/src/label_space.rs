//! Learnable label centers, the class similarity matrix and its scaled form,
//! periodic re-encoding, and nearest-center classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{hash_vectorize, FeatureVector};
use crate::encoder::{cosine_sim, EncoderParams};
use crate::hierarchy::{label_sentence, HierarchyError, LabelTree, TemplateSpec};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Floor applied to class similarities before they scale a temperature.
pub const SCALE_FLOOR: f64 = 0.05;
pub const DEFAULT_REENCODE_EVERY: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LabelSpace<T> {
    /// One label sentence per class.
    pub sentences: Vec<String>,
    /// `C × d`; row `c` is the center of class `c`.
    pub centers: Matrix<T>,
    /// Pairwise cosine similarity of the centers, `C × C`.
    pub similarity: Matrix<T>,
    /// `similarity` clamped to `[SCALE_FLOOR, 1]` with a unit diagonal.
    pub scaled: Matrix<T>,
    pub reencode_every: usize,
    pub last_reencode_step: usize,
}

fn sentence_features(sentences: &[String], num_buckets: usize) -> Vec<FeatureVector> {
    sentences
        .iter()
        .map(|s| hash_vectorize(s, num_buckets).expect("encoder bucket count is a power of two"))
        .collect()
}

fn encode_sentences<T: Scalar>(encoder: &EncoderParams<T>, sentences: &[String]) -> Matrix<T> {
    let feats = sentence_features(sentences, encoder.dims.buckets);
    Matrix::from_rows(&encoder.encode_batch(&feats)).expect("uniform embedding width")
}

/// `w[c][c'] = cos(u_c, u_c')`, symmetric with a unit diagonal.
pub fn similarity_matrix<T: Scalar>(centers: &Matrix<T>) -> Matrix<T> {
    let c = centers.rows();
    let mut w = Matrix::zeros(c, c);
    for a in 0..c {
        w.set(a, a, T::one());
        for b in a + 1..c {
            let s = cosine_sim(centers.row(a), centers.row(b)).max(-T::one()).min(T::one());
            w.set(a, b, s);
            w.set(b, a, s);
        }
    }
    w
}

/// Clamps similarities into `[SCALE_FLOOR, 1]` and sets the diagonal to one.
pub fn scale_matrix<T: Scalar>(similarity: &Matrix<T>) -> Matrix<T> {
    let floor = T::lit(SCALE_FLOOR);
    Matrix::from_fn(similarity.rows(), similarity.cols(), |a, b| {
        if a == b {
            T::one()
        } else {
            similarity.get(a, b).max(floor).min(T::one())
        }
    })
}

impl<T: Scalar> LabelSpace<T> {
    /// Renders one sentence per class and encodes it to obtain the initial centers.
    pub fn init(
        encoder: &EncoderParams<T>,
        tree: &LabelTree,
        template: &TemplateSpec,
        overrides: Option<&BTreeMap<usize, String>>,
        reencode_every: usize,
    ) -> Result<Self, HierarchyError> {
        let sentences = (0..tree.num_classes())
            .map(|c| label_sentence(tree, c, template, overrides))
            .collect::<Result<Vec<_>, _>>()?;
        let centers = encode_sentences(encoder, &sentences);
        Ok(Self::from_centers(sentences, centers, reencode_every))
    }

    pub fn from_centers(sentences: Vec<String>, centers: Matrix<T>, reencode_every: usize) -> Self {
        let similarity = similarity_matrix(&centers);
        let scaled = scale_matrix(&similarity);
        Self {
            sentences,
            centers,
            similarity,
            scaled,
            reencode_every,
            last_reencode_step: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    /// Overwrites the centers with fresh encodings once `reencode_every` steps
    /// have passed since the last re-encode. Returns whether it fired.
    pub fn reencode(&mut self, encoder: &EncoderParams<T>, step: usize) -> bool {
        if step < self.last_reencode_step + self.reencode_every.max(1) {
            return false;
        }
        self.centers = encode_sentences(encoder, &self.sentences);
        self.refresh_similarity();
        self.last_reencode_step = step;
        true
    }

    /// Recomputes the similarity and scale matrices from the current centers.
    pub fn refresh_similarity(&mut self) {
        self.similarity = similarity_matrix(&self.centers);
        self.scaled = scale_matrix(&self.similarity);
    }

    /// Index of the most cosine-similar center; ties go to the smaller index.
    pub fn nn_classify(&self, z: &[T]) -> usize {
        let mut best = 0;
        let mut best_sim = T::neg_infinity();
        for c in 0..self.num_classes() {
            let s = cosine_sim(z, self.centers.row(c));
            if s > best_sim {
                best = c;
                best_sim = s;
            }
        }
        best
    }
}
