//! Stand-in sentence encoder: count-weighted mean of hashed bucket embeddings
//! followed by a two-layer tanh MLP, with an exact reverse-mode backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::FeatureVector;
use crate::matrix::Matrix;
use crate::scalar::{dot, norm, Scalar};

/// Guard added to the product of norms in [`cosine_sim`].
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Hash buckets (rows of the embedding table); a power of two.
    pub buckets: usize,
    /// Width of the bucket embeddings.
    pub embed: usize,
    pub hidden: usize,
    /// Output embedding width.
    pub output: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            buckets: crate::corpus::DEFAULT_BUCKETS,
            embed: 64,
            hidden: 64,
            output: 32,
        }
    }
}

/// Encoder parameters. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EncoderParams<T> {
    pub dims: EncoderDims,
    /// `buckets × embed`
    pub embedding: Matrix<T>,
    /// `embed × hidden`
    pub hidden_weight: Matrix<T>,
    pub hidden_bias: Vec<T>,
    /// `hidden × output`
    pub output_weight: Matrix<T>,
    pub output_bias: Vec<T>,
}

fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-bound..=bound)))
}

impl<T: Scalar> EncoderParams<T> {
    /// Glorot-uniform matrices, zero biases.
    pub fn init(dims: EncoderDims, seed: u64) -> Self {
        assert!(
            dims.buckets > 0 && dims.embed > 0 && dims.hidden > 0 && dims.output > 0,
            "encoder dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = glorot(dims.buckets, dims.embed, &mut rng);
        let hidden_weight = glorot(dims.embed, dims.hidden, &mut rng);
        let output_weight = glorot(dims.hidden, dims.output, &mut rng);
        Self {
            dims,
            embedding,
            hidden_weight,
            hidden_bias: vec![T::zero(); dims.hidden],
            output_weight,
            output_bias: vec![T::zero(); dims.output],
        }
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            dims,
            embedding: Matrix::zeros(dims.buckets, dims.embed),
            hidden_weight: Matrix::zeros(dims.embed, dims.hidden),
            hidden_bias: vec![T::zero(); dims.hidden],
            output_weight: Matrix::zeros(dims.hidden, dims.output),
            output_bias: vec![T::zero(); dims.output],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dims.output
    }

    /// Flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> [&[T]; 5] {
        [
            self.embedding.as_slice(),
            self.hidden_weight.as_slice(),
            &self.hidden_bias,
            self.output_weight.as_slice(),
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.embedding.as_mut_slice(),
            self.hidden_weight.as_mut_slice(),
            &mut self.hidden_bias,
            self.output_weight.as_mut_slice(),
            &mut self.output_bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn forward(&self, fv: &FeatureVector) -> Trace<T> {
        let d = self.dims;
        let mut pooled = vec![T::zero(); d.embed];
        let total = fv.total();
        if total > 0 {
            let inv = T::one() / T::lit(total as f64);
            for &(bucket, count) in &fv.entries {
                let w = T::lit(count as f64) * inv;
                for (p, &e) in pooled.iter_mut().zip(self.embedding.row(bucket)) {
                    *p = *p + w * e;
                }
            }
        }
        let mut hidden = self.hidden_bias.clone();
        for (i, &m) in pooled.iter().enumerate() {
            for (h, &w) in hidden.iter_mut().zip(self.hidden_weight.row(i)) {
                *h = *h + m * w;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.tanh());
        let mut out = self.output_bias.clone();
        for (j, &h) in hidden.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.output_weight.row(j)) {
                *o = *o + h * w;
            }
        }
        Trace { pooled, hidden, out }
    }

    /// Embeds one feature vector.
    pub fn encode(&self, fv: &FeatureVector) -> Vec<T> {
        debug_assert!(fv.entries.iter().all(|&(b, _)| b < self.dims.buckets));
        self.forward(fv).out
    }

    pub fn encode_batch(&self, fvs: &[FeatureVector]) -> Vec<Vec<T>> {
        fvs.iter().map(|fv| self.encode(fv)).collect()
    }

    /// Gradient of `Σ_i ⟨grad_z[i], encode(fvs[i])⟩` with respect to every
    /// parameter, accumulated in input order.
    pub fn backward(&self, fvs: &[FeatureVector], grad_z: &[Vec<T>]) -> Result<EncoderParams<T>, EncoderError> {
        let d = self.dims;
        if fvs.len() != grad_z.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "{} inputs but {} output gradients",
                fvs.len(),
                grad_z.len()
            )));
        }
        if let Some(g) = grad_z.iter().find(|g| g.len() != d.output) {
            return Err(EncoderError::ShapeMismatch(format!(
                "output gradient has width {}, expected {}",
                g.len(),
                d.output
            )));
        }
        if let Some(fv) = fvs.iter().find(|fv| fv.entries.iter().any(|&(b, _)| b >= d.buckets)) {
            return Err(EncoderError::ShapeMismatch(format!(
                "feature vector with {} buckets, encoder has {}",
                fv.num_buckets, d.buckets
            )));
        }

        let mut grads = EncoderParams::zeros(d);
        let mut g_hidden = vec![T::zero(); d.hidden];
        let mut g_pooled = vec![T::zero(); d.embed];
        for (fv, gz) in fvs.iter().zip(grad_z) {
            if gz.iter().all(|g| g.is_zero()) {
                continue;
            }
            let trace = self.forward(fv);

            for (b, &g) in grads.output_bias.iter_mut().zip(gz) {
                *b = *b + g;
            }
            for (j, &h) in trace.hidden.iter().enumerate() {
                let row = grads.output_weight.row_mut(j);
                for (w, &g) in row.iter_mut().zip(gz) {
                    *w = *w + h * g;
                }
                // d tanh = 1 - tanh²
                g_hidden[j] = dot(self.output_weight.row(j), gz) * (T::one() - h * h);
            }

            for (b, &g) in grads.hidden_bias.iter_mut().zip(&g_hidden) {
                *b = *b + g;
            }
            for (i, &m) in trace.pooled.iter().enumerate() {
                let row = grads.hidden_weight.row_mut(i);
                for (w, &g) in row.iter_mut().zip(&g_hidden) {
                    *w = *w + m * g;
                }
                g_pooled[i] = dot(self.hidden_weight.row(i), &g_hidden);
            }

            let total = fv.total();
            if total > 0 {
                let inv = T::one() / T::lit(total as f64);
                for &(bucket, count) in &fv.entries {
                    let w = T::lit(count as f64) * inv;
                    for (e, &g) in grads.embedding.row_mut(bucket).iter_mut().zip(&g_pooled) {
                        *e = *e + w * g;
                    }
                }
            }
        }
        Ok(grads)
    }
}

struct Trace<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
    out: Vec<T>,
}

/// Cosine similarity `⟨a,b⟩ / (‖a‖‖b‖ + 1e-12)`.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b) + T::lit(COSINE_EPS))
}

/// Cosine similarity together with its gradients with respect to `a` and `b`.
pub fn cosine_sim_grad<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>, Vec<T>) {
    let ab = dot(a, b);
    let (na, nb) = (norm(a), norm(b));
    let denom = na * nb + T::lit(COSINE_EPS);
    let sim = ab / denom;
    (sim, partial(a, b, ab, na, nb, denom), partial(b, a, ab, nb, na, denom))
}

/// `∂/∂x [⟨x,y⟩ / (‖x‖‖y‖ + ε)]`.
fn partial<T: Scalar>(x: &[T], y: &[T], xy: T, nx: T, ny: T, denom: T) -> Vec<T> {
    let inv = T::one() / denom;
    let radial = if nx > T::zero() {
        xy * ny / (denom * denom * nx)
    } else {
        T::zero()
    };
    x.iter().zip(y).map(|(&xi, &yi)| yi * inv - radial * xi).collect()
}
