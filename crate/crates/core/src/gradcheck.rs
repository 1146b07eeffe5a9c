//! Central finite-difference checks of the encoder backward pass and of every
//! loss variant with respect to instance embeddings and label centers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{hash_vectorize, FeatureVector};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::losses::{loss_variant, LossVariant};
use crate::matrix::Matrix;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Coordinates whose analytic gradient is at most this large are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Worst-case agreement for one gradient component across all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: usize,
}

impl ComponentReport {
    fn new(name: String) -> Self {
        Self {
            name,
            max_rel_err: 0.0,
            checked: 0,
            failures: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        if analytic.abs() <= GRAD_FLOOR {
            return;
        }
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        self.checked += 1;
        if err.is_nan() || err > REL_TOL {
            self.failures += 1;
        }
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = err;
        }
    }
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn check_coordinates(
    report: &mut ComponentReport,
    x: &mut [f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) {
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let plus = f(x);
        x[i] = orig - FD_STEP;
        let minus = f(x);
        x[i] = orig;
        report.record(analytic[i], (plus - minus) / (2.0 * FD_STEP));
    }
}

const GC_DIMS: EncoderDims = EncoderDims {
    buckets: 32,
    embed: 4,
    hidden: 5,
    output: 3,
};

const WORDS: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu",
];

fn random_text(rng: &mut ChaCha8Rng) -> FeatureVector {
    let len = rng.gen_range(1..=8);
    let text: Vec<&str> = (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
    hash_vectorize(&text.join(" "), GC_DIMS.buckets).expect("power-of-two buckets")
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check_encoder(rng: &mut ChaCha8Rng, report: &mut ComponentReport) {
    let mut params = EncoderParams::<f64>::init(GC_DIMS, rng.gen());
    // Perturb biases away from zero so every tensor is exercised generically.
    for b in params.hidden_bias.iter_mut().chain(params.output_bias.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    let n = rng.gen_range(1..=4);
    let fvs: Vec<FeatureVector> = (0..n).map(|_| random_text(rng)).collect();
    let weights: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, GC_DIMS.output)).collect();
    let objective = |p: &EncoderParams<f64>| -> f64 {
        p.encode_batch(&fvs)
            .iter()
            .zip(&weights)
            .map(|(z, w)| z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let grads = params.backward(&fvs, &weights).expect("matching shapes");
    let grad_tensors: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    for (t, g) in grad_tensors.iter().enumerate() {
        for (i, &gi) in g.iter().enumerate() {
            let orig = params.tensors()[t][i];
            params.tensors_mut()[t][i] = orig + FD_STEP;
            let plus = objective(&params);
            params.tensors_mut()[t][i] = orig - FD_STEP;
            let minus = objective(&params);
            params.tensors_mut()[t][i] = orig;
            report.record(gi, (plus - minus) / (2.0 * FD_STEP));
        }
    }
}

/// Random scaled-temperature matrix: symmetric, unit diagonal, entries in `[0.05, 1]`.
fn random_scale(rng: &mut ChaCha8Rng, c: usize) -> Matrix<f64> {
    let mut s = Matrix::filled(c, c, 1.0);
    for a in 0..c {
        for b in a + 1..c {
            let v = rng.gen_range(0.05..=1.0);
            s.set(a, b, v);
            s.set(b, a, v);
        }
    }
    s
}

fn check_variant(
    rng: &mut ChaCha8Rng,
    variant: LossVariant,
    z_report: &mut ComponentReport,
    u_report: &mut ComponentReport,
) {
    let d = rng.gen_range(2..=5);
    let c = rng.gen_range(2..=4);
    let n = rng.gen_range(3..=8);
    let mut y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    // Guarantee at least one positive pair and one negative.
    y[0] = 0;
    y[1] = 0;
    y[2] = 1;
    let tau = rng.gen_range(0.1..1.0);
    let mut z: Vec<f64> = normal_vec(rng, n * d);
    let mut u: Vec<f64> = normal_vec(rng, c * d);
    let s = random_scale(rng, c);

    let rows = |flat: &[f64]| -> Vec<Vec<f64>> { flat.chunks(d).map(<[f64]>::to_vec).collect() };
    let centers = |flat: &[f64]| Matrix::from_rows(&rows(flat)).expect("rectangular");
    let out = loss_variant(variant, &rows(&z), &y, &centers(&u), tau, &s).expect("valid batch");
    let gz: Vec<f64> = out.grad_z.concat();
    let gu: Vec<f64> = out.grad_u.as_slice().to_vec();

    let u_fixed = centers(&u);
    check_coordinates(z_report, &mut z, &gz, |zz| {
        loss_variant(variant, &rows(zz), &y, &u_fixed, tau, &s).unwrap().value
    });
    let z_fixed = rows(&z);
    check_coordinates(u_report, &mut u, &gu, |uu| {
        loss_variant(variant, &z_fixed, &y, &centers(uu), tau, &s)
            .unwrap()
            .value
    });
}

/// Runs `trials` random instances per component starting from `seed`.
pub fn run_gradcheck(trials: usize, seed: u64) -> Vec<ComponentReport> {
    let mut reports = vec![ComponentReport::new("encoder".into())];
    for v in LossVariant::ALL {
        reports.push(ComponentReport::new(format!("{v}/z")));
        reports.push(ComponentReport::new(format!("{v}/u")));
    }
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        check_encoder(&mut rng, &mut reports[0]);
        for (k, v) in LossVariant::ALL.into_iter().enumerate() {
            let (head, tail) = reports.split_at_mut(2 + 2 * k);
            check_variant(&mut rng, v, &mut head[1 + 2 * k], &mut tail[0]);
        }
    }
    reports
}
