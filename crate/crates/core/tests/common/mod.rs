//! Shared helpers for the integration tests: a direct double-loop evaluation
//! of the contrastive terms and random batch generation.

#![allow(dead_code)]

use lascl::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt() + 1e-12)
}

/// Instance-instance term; `scale` of `None` means unit scaling.
pub fn naive_instance(z: &[Vec<f64>], y: &[usize], tau: f64, scale: Option<&Matrix<f64>>) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let mut denom = 0.0;
        let mut negatives = 0;
        for k in 0..n {
            if y[k] != y[i] {
                let s = scale.map_or(1.0, |m| m.get(y[i], y[k]));
                denom += (cos(&z[i], &z[k]) / (tau * s)).exp();
                negatives += 1;
            }
        }
        let mut sum = 0.0;
        let mut positives = 0;
        for j in 0..n {
            if j != i && y[j] == y[i] {
                sum += ((cos(&z[i], &z[j]) / tau).exp() / denom).ln();
                positives += 1;
            }
        }
        if positives > 0 && negatives > 0 {
            total += sum / positives as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        -total / anchors as f64
    }
}

/// Instance-center term over all other centers.
pub fn naive_center(z: &[Vec<f64>], y: &[usize], u: &Matrix<f64>, tau: f64, scale: Option<&Matrix<f64>>) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        let mut denom = 0.0;
        for c in 0..u.rows() {
            if c != y[i] {
                let s = scale.map_or(1.0, |m| m.get(y[i], c));
                denom += (cos(&z[i], u.row(c)) / (tau * s)).exp();
            }
        }
        total += ((cos(&z[i], u.row(y[i])) / tau).exp() / denom).ln();
    }
    -total / z.len() as f64
}

pub struct Batch {
    pub z: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub centers: Matrix<f64>,
    pub scale: Matrix<f64>,
    pub tau: f64,
}

/// Random batch with `n ∈ [2, max_n]`, `C ∈ [2, max_c]`, labels drawn freely
/// (so some batches have anchors without positives or negatives).
pub fn random_batch(rng: &mut ChaCha8Rng, max_n: usize, max_c: usize) -> Batch {
    let n = rng.gen_range(2..=max_n);
    let c = rng.gen_range(2..=max_c);
    let d = rng.gen_range(1..=6);
    let z = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let y = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let centers = Matrix::from_fn(c, d, |_, _| rng.gen_range(-2.0..2.0));
    let mut scale = Matrix::filled(c, c, 1.0);
    for a in 0..c {
        for b in a + 1..c {
            let v = rng.gen_range(0.05..=1.0);
            scale.set(a, b, v);
            scale.set(b, a, v);
        }
    }
    Batch {
        z,
        y,
        centers,
        scale,
        tau: rng.gen_range(0.1..1.0),
    }
}

pub fn unit_scale(c: usize) -> Matrix<f64> {
    Matrix::filled(c, c, 1.0)
}
