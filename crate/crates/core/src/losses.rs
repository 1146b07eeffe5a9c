//! Contrastive loss terms with exact gradients.
//!
//! Every term is a log-ratio per anchor that training should make large. The
//! functions here return `-(mean over anchors)` so that the value is
//! minimised. Negative-pair temperatures may be scaled by a class-similarity
//! matrix `S` (`τ · s[y_i][y_k]`); centers are the rows of a `C × d` matrix.
//!
//! Denominators hold negatives only, so values can be negative.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::cosine_sim_grad;
use crate::matrix::Matrix;
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("temperature must be positive and finite")]
    InvalidTemperature,
    #[error("batch needs at least {min} instances, got {got}")]
    BatchTooSmall { min: usize, got: usize },
    #[error("instance-center loss needs at least two classes")]
    SingleClass,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Plain supervised contrastive loss.
    Scl,
    /// Instance-instance loss with similarity-scaled negative temperatures.
    Li,
    /// SCL plus the unscaled instance-center term.
    Liuc,
    /// Scaled instance-instance plus unscaled instance-center.
    Lic,
    /// Scaled instance-instance plus scaled instance-center.
    Lisc,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Scl,
        LossVariant::Li,
        LossVariant::Liuc,
        LossVariant::Lic,
        LossVariant::Lisc,
    ];

    /// Whether the label centers receive gradient.
    pub fn uses_centers(self) -> bool {
        matches!(self, LossVariant::Liuc | LossVariant::Lic | LossVariant::Lisc)
    }

    fn scales_instances(self) -> bool {
        matches!(self, LossVariant::Li | LossVariant::Lic | LossVariant::Lisc)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Scl => "scl",
            LossVariant::Li => "li",
            LossVariant::Liuc => "liuc",
            LossVariant::Lic => "lic",
            LossVariant::Lisc => "lisc",
        })
    }
}

impl FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown loss variant `{s}` (expected scl|li|liuc|lic|lisc)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    /// One gradient per instance embedding.
    pub grad_z: Vec<Vec<T>>,
    /// Gradient for the centers, `C × d`. Has zero rows when a standalone
    /// instance-instance term is computed without centers.
    pub grad_u: Matrix<T>,
    /// No anchor had both an in-batch positive and a negative.
    pub degenerate: bool,
}

impl<T: Scalar> LossOutput<T> {
    fn zeros(n: usize, dim: usize, num_centers: usize) -> Self {
        Self {
            value: T::zero(),
            grad_z: vec![vec![T::zero(); dim]; n],
            grad_u: Matrix::zeros(num_centers, dim),
            degenerate: false,
        }
    }

    fn accumulate(&mut self, other: &LossOutput<T>) {
        self.value = self.value + other.value;
        for (a, b) in self.grad_z.iter_mut().zip(&other.grad_z) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        if other.grad_u.rows() > 0 {
            self.grad_u.add_assign(&other.grad_u);
        }
        self.degenerate |= other.degenerate;
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<(), LossError> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidTemperature)
    }
}

fn check_batch<T: Scalar>(z: &[Vec<T>], y: &[usize], min: usize) -> Result<usize, LossError> {
    if z.len() != y.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} embeddings but {} labels",
            z.len(),
            y.len()
        )));
    }
    if z.len() < min {
        return Err(LossError::BatchTooSmall { min, got: z.len() });
    }
    let dim = z[0].len();
    if z.iter().any(|v| v.len() != dim) {
        return Err(LossError::ShapeMismatch("embeddings differ in width".into()));
    }
    Ok(dim)
}

fn check_labels(y: &[usize], num_classes: usize) -> Result<(), LossError> {
    match y.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

fn check_scale<T: Scalar>(scale: &Matrix<T>, num_classes: Option<usize>) -> Result<(), LossError> {
    if scale.rows() != scale.cols() {
        return Err(LossError::ShapeMismatch("similarity scale must be square".into()));
    }
    if let Some(c) = num_classes {
        if scale.rows() != c {
            return Err(LossError::ShapeMismatch(format!(
                "similarity scale is {}×{}, expected {c}×{c}",
                scale.rows(),
                scale.cols()
            )));
        }
    }
    Ok(())
}

/// Instance-instance term, optionally with scaled negative temperatures.
fn instance_instance<T: Scalar>(
    z: &[Vec<T>],
    y: &[usize],
    tau: T,
    scale: Option<&Matrix<T>>,
) -> Result<LossOutput<T>, LossError> {
    check_tau(tau)?;
    let dim = check_batch(z, y, 2)?;
    if let Some(s) = scale {
        check_scale(s, None)?;
        check_labels(y, s.rows())?;
    }
    let n = z.len();
    let mut out = LossOutput::zeros(n, dim, 0);

    // coef[i][j] = ∂(Σ_i -ℓ_i) / ∂sim(z_i, z_j), before division by the anchor count.
    let mut coef = vec![vec![T::zero(); n]; n];
    let mut total = T::zero();
    let mut anchors = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&k| y[k] != y[i]).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        anchors += 1;
        let temps: Vec<T> = negatives
            .iter()
            .map(|&k| match scale {
                Some(s) => tau * s.get(y[i], y[k]),
                None => tau,
            })
            .collect();
        let logits: Vec<T> = negatives
            .iter()
            .zip(&temps)
            .map(|(&k, &t)| crate::encoder::cosine_sim(&z[i], &z[k]) / t)
            .collect();
        let lse = log_sum_exp(&logits);
        let inv_p = T::one() / T::from_count(positives.len());
        let pos_mean = positives
            .iter()
            .map(|&j| crate::encoder::cosine_sim(&z[i], &z[j]) / tau)
            .fold(T::zero(), |a, b| a + b)
            * inv_p;
        total = total + (pos_mean - lse);

        for &j in &positives {
            coef[i][j] = coef[i][j] - inv_p / tau;
        }
        for ((&k, &t), &logit) in negatives.iter().zip(&temps).zip(&logits) {
            coef[i][k] = coef[i][k] + (logit - lse).exp() / t;
        }
    }

    if anchors == 0 {
        out.degenerate = true;
        return Ok(out);
    }
    let inv_a = T::one() / T::from_count(anchors);
    out.value = -total * inv_a;
    for i in 0..n {
        for j in 0..n {
            let c = coef[i][j];
            if c.is_zero() {
                continue;
            }
            let (_, ga, gb) = cosine_sim_grad(&z[i], &z[j]);
            let c = c * inv_a;
            for (g, &v) in out.grad_z[i].iter_mut().zip(&ga) {
                *g = *g + c * v;
            }
            for (g, &v) in out.grad_z[j].iter_mut().zip(&gb) {
                *g = *g + c * v;
            }
        }
    }
    Ok(out)
}

/// Instance-center term over all `C − 1` other centers.
fn instance_center<T: Scalar>(
    z: &[Vec<T>],
    y: &[usize],
    centers: &Matrix<T>,
    tau: T,
    scale: Option<&Matrix<T>>,
) -> Result<LossOutput<T>, LossError> {
    check_tau(tau)?;
    let dim = check_batch(z, y, 1)?;
    let num_classes = centers.rows();
    if num_classes < 2 {
        return Err(LossError::SingleClass);
    }
    if centers.cols() != dim {
        return Err(LossError::ShapeMismatch(format!(
            "centers have width {}, embeddings {dim}",
            centers.cols()
        )));
    }
    check_labels(y, num_classes)?;
    if let Some(s) = scale {
        check_scale(s, Some(num_classes))?;
    }
    let n = z.len();
    let mut out = LossOutput::zeros(n, dim, num_classes);
    let inv_n = T::one() / T::from_count(n);
    let mut total = T::zero();
    for i in 0..n {
        let own = y[i];
        let others: Vec<usize> = (0..num_classes).filter(|&c| c != own).collect();
        let temps: Vec<T> = others
            .iter()
            .map(|&c| match scale {
                Some(s) => tau * s.get(own, c),
                None => tau,
            })
            .collect();
        let sims: Vec<(T, Vec<T>, Vec<T>)> = others.iter().map(|&c| cosine_sim_grad(&z[i], centers.row(c))).collect();
        let logits: Vec<T> = sims.iter().zip(&temps).map(|((s, _, _), &t)| *s / t).collect();
        let lse = log_sum_exp(&logits);
        let (pos_sim, pos_gz, pos_gu) = cosine_sim_grad(&z[i], centers.row(own));
        total = total + (pos_sim / tau - lse);

        let mut push = |center: usize, c: T, gz: &[T], gu: &[T]| {
            for (g, &v) in out.grad_z[i].iter_mut().zip(gz) {
                *g = *g + c * v;
            }
            for (g, &v) in out.grad_u.row_mut(center).iter_mut().zip(gu) {
                *g = *g + c * v;
            }
        };
        push(own, -inv_n / tau, &pos_gz, &pos_gu);
        for (((&c, &t), &logit), (_, gz, gu)) in others.iter().zip(&temps).zip(&logits).zip(&sims) {
            push(c, inv_n * (logit - lse).exp() / t, gz, gu);
        }
    }
    out.value = -total * inv_n;
    Ok(out)
}

/// Supervised contrastive loss with in-batch positives and negative-only denominators.
pub fn loss_scl<T: Scalar>(z: &[Vec<T>], y: &[usize], tau: T) -> Result<LossOutput<T>, LossError> {
    instance_instance(z, y, tau, None)
}

/// Instance-instance loss whose negative pairs use temperature `τ · s[y_i][y_k]`.
pub fn loss_sii<T: Scalar>(z: &[Vec<T>], y: &[usize], tau: T, scale: &Matrix<T>) -> Result<LossOutput<T>, LossError> {
    instance_instance(z, y, tau, Some(scale))
}

/// Instance-center loss: each instance against its own center (positive) and
/// every other class center (negatives).
pub fn loss_ic<T: Scalar>(z: &[Vec<T>], y: &[usize], centers: &Matrix<T>, tau: T) -> Result<LossOutput<T>, LossError> {
    instance_center(z, y, centers, tau, None)
}

/// Instance-center loss with negative temperatures `τ · s[y_i][c]`.
pub fn loss_sic<T: Scalar>(
    z: &[Vec<T>],
    y: &[usize],
    centers: &Matrix<T>,
    tau: T,
    scale: &Matrix<T>,
) -> Result<LossOutput<T>, LossError> {
    instance_center(z, y, centers, tau, Some(scale))
}

/// Sum of the terms making up `variant`. `grad_u` always has the shape of `centers`.
pub fn loss_variant<T: Scalar>(
    variant: LossVariant,
    z: &[Vec<T>],
    y: &[usize],
    centers: &Matrix<T>,
    tau: T,
    scale: &Matrix<T>,
) -> Result<LossOutput<T>, LossError> {
    let dim = check_batch(z, y, 1)?;
    check_labels(y, centers.rows())?;
    check_scale(scale, Some(centers.rows()))?;
    let mut out = LossOutput::zeros(z.len(), dim, centers.rows());

    let instance = if variant.scales_instances() {
        loss_sii(z, y, tau, scale)?
    } else {
        loss_scl(z, y, tau)?
    };
    out.accumulate(&instance);

    let center = match variant {
        LossVariant::Scl | LossVariant::Li => None,
        LossVariant::Liuc | LossVariant::Lic => Some(loss_ic(z, y, centers, tau)?),
        LossVariant::Lisc => Some(loss_sic(z, y, centers, tau, scale)?),
    };
    if let Some(c) = center {
        out.accumulate(&c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_points() -> (Vec<Vec<f64>>, Vec<usize>) {
        (vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0, 1])
    }

    #[test]
    fn scl_hand_example() {
        let (z, y) = three_points();
        let out = loss_scl(&z, &y, 1.0).unwrap();
        assert!((out.value + 1.0).abs() < 1e-10, "{}", out.value);
        assert!(!out.degenerate);
        assert_eq!(out.grad_u.rows(), 0);
    }

    #[test]
    fn single_class_batch_is_degenerate() {
        let z = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let out = loss_scl(&z, &[3, 3], 0.3).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, 0.0);
        assert!(out.grad_z.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn argument_errors() {
        let (z, y) = three_points();
        assert_eq!(loss_scl(&z, &y, 0.0), Err(LossError::InvalidTemperature));
        assert_eq!(
            loss_scl(&z[..1], &y[..1], 0.3),
            Err(LossError::BatchTooSmall { min: 2, got: 1 })
        );
        assert!(matches!(loss_scl(&z, &y[..2], 0.3), Err(LossError::ShapeMismatch(_))));
        let one = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(loss_ic(&z, &[0, 0, 0], &one, 0.3), Err(LossError::SingleClass));
        let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            loss_ic(&z, &[0, 0, 2], &u, 0.3),
            Err(LossError::LabelOutOfRange {
                label: 2,
                num_classes: 2
            })
        );
    }

    #[test]
    fn sii_with_half_scale_on_orthogonal_negatives() {
        let (z, y) = three_points();
        let s = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let out = loss_sii(&z, &y, 1.0, &s).unwrap();
        assert!((out.value + 1.0).abs() < 1e-10);
    }

    #[test]
    fn sii_all_ones_is_scl_bitwise() {
        let z = vec![
            vec![0.3, -0.2, 0.9],
            vec![0.1, 0.8, -0.4],
            vec![-0.7, 0.2, 0.5],
            vec![0.6, 0.6, 0.1],
        ];
        let y = vec![0, 1, 0, 1];
        let ones = Matrix::filled(2, 2, 1.0);
        assert_eq!(loss_sii(&z, &y, 0.3, &ones).unwrap(), loss_scl(&z, &y, 0.3).unwrap());
    }

    #[test]
    fn lower_scale_raises_penalty() {
        // Negative pair with positive cosine.
        let z = vec![vec![1.0, 0.1], vec![1.0, 0.2], vec![0.8, 0.6]];
        let y = vec![0, 0, 1];
        let full = Matrix::filled(2, 2, 1.0);
        let half = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let a = loss_sii(&z, &y, 0.3, &full).unwrap().value;
        let b = loss_sii(&z, &y, 0.3, &half).unwrap().value;
        assert!(b > a, "{b} <= {a}");
    }

    #[test]
    fn ic_hand_example() {
        let z: Vec<Vec<f64>> = vec![vec![1.0, 0.0]];
        let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = loss_ic(&z, &[0], &u, 1.0).unwrap();
        assert!((out.value + 1.0).abs() < 1e-10);
    }

    #[test]
    fn sic_all_ones_is_ic() {
        let z = vec![vec![0.2, 0.4, -0.1], vec![-0.3, 0.5, 0.9]];
        let u = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.1, 0.0], vec![0.3, -0.3, 0.7]]).unwrap();
        let ones = Matrix::filled(3, 3, 1.0);
        assert_eq!(
            loss_sic(&z, &[2, 0], &u, 0.3, &ones).unwrap(),
            loss_ic(&z, &[2, 0], &u, 0.3).unwrap()
        );
    }

    #[test]
    fn every_center_gets_gradient() {
        let z = vec![vec![0.2, 0.4, -0.1], vec![-0.3, 0.5, 0.9]];
        let u = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.1, 0.0], vec![0.3, -0.3, 0.7]]).unwrap();
        let out = loss_ic(&z, &[2, 0], &u, 0.3).unwrap();
        for c in 0..3 {
            assert!(out.grad_u.row(c).iter().any(|&g| g != 0.0), "center {c}");
        }
    }

    #[test]
    fn variants_are_sums() {
        let z: Vec<Vec<f64>> = vec![
            vec![0.3, -0.2, 0.9],
            vec![0.1, 0.8, -0.4],
            vec![-0.7, 0.2, 0.5],
            vec![0.6, 0.6, 0.1],
            vec![0.2, -0.9, 0.3],
        ];
        let y = vec![0, 1, 0, 1, 2];
        let u = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.1, 0.0], vec![0.3, -0.3, 0.7]]).unwrap();
        let s = Matrix::from_rows(&[vec![1.0, 0.6, 0.2], vec![0.6, 1.0, 0.4], vec![0.2, 0.4, 1.0]]).unwrap();
        let tau = 0.3;

        let liuc = loss_variant(LossVariant::Liuc, &z, &y, &u, tau, &s).unwrap();
        let scl = loss_scl(&z, &y, tau).unwrap();
        let ic = loss_ic(&z, &y, &u, tau).unwrap();
        assert!((liuc.value - (scl.value + ic.value)).abs() < 1e-15);

        let lisc = loss_variant(LossVariant::Lisc, &z, &y, &u, tau, &s).unwrap();
        let sii = loss_sii(&z, &y, tau, &s).unwrap();
        let sic = loss_sic(&z, &y, &u, tau, &s).unwrap();
        for i in 0..z.len() {
            for k in 0..3 {
                assert!((lisc.grad_z[i][k] - (sii.grad_z[i][k] + sic.grad_z[i][k])).abs() < 1e-15);
            }
        }
        assert_eq!(lisc.grad_u, sic.grad_u);

        for v in [LossVariant::Scl, LossVariant::Li] {
            let out = loss_variant(v, &z, &y, &u, tau, &s).unwrap();
            assert_eq!(out.grad_u.shape(), (3, 3));
            assert!(out.grad_u.as_slice().iter().all(|&g| g == 0.0));
        }
        let ones = Matrix::filled(3, 3, 1.0);
        assert_eq!(
            loss_variant(LossVariant::Li, &z, &y, &u, tau, &ones).unwrap(),
            loss_variant(LossVariant::Scl, &z, &y, &u, tau, &ones).unwrap()
        );
    }

    #[test]
    fn variant_parsing() {
        for v in LossVariant::ALL {
            assert_eq!(v.to_string().parse::<LossVariant>().unwrap(), v);
        }
        assert_eq!("LISC".parse::<LossVariant>().unwrap(), LossVariant::Lisc);
        assert!("foo".parse::<LossVariant>().is_err());
    }
}
