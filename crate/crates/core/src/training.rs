//! Training loop: shuffled mini-batches, variant loss, backprop into the
//! encoder and (for center-based variants) the label centers, AdamW with a
//! linear schedule, periodic label re-encoding and early stopping on
//! validation leaf accuracy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, FeatureVector};
use crate::encoder::{EncoderDims, EncoderError, EncoderParams};
use crate::evaluation::{featurize, node_accuracy};
use crate::hierarchy::{HierarchyError, LabelTree, TemplateSpec};
use crate::label_space::{LabelSpace, DEFAULT_REENCODE_EVERY};
use crate::losses::{loss_ic, loss_sic, loss_variant, LossError, LossOutput, LossVariant};
use crate::matrix::Matrix;
use crate::optim::{adam_step, AdamMoments, OptimError};
use crate::scalar::Scalar;

pub use crate::optim::lr_at;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("validation split is empty")]
    NoValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: LossVariant,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub reencode_every: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub dims: EncoderDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Lisc,
            tau: 0.3,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.1,
            reencode_every: DEFAULT_REENCODE_EVERY,
            eval_every: 256,
            patience: 5,
            seed: 0,
            dims: EncoderDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.reencode_every == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("reencode_every, eval_every and patience must be positive");
        }
        if !self.dims.buckets.is_power_of_two() {
            return bad("bucket count must be a power of two");
        }
        if self.dims.embed == 0 || self.dims.hidden == 0 || self.dims.output == 0 {
            return bad("encoder dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Set on steps where validation ran.
    pub val_node_acc: Option<f64>,
}

/// Encoder and label space captured at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub encoder: EncoderParams<T>,
    pub labels: LabelSpace<T>,
    pub step: usize,
    pub val_node_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub encoder: EncoderParams<T>,
    encoder_moments: Vec<AdamMoments<T>>,
    pub labels: LabelSpace<T>,
    label_moments: AdamMoments<T>,
    pub step: usize,
    pub best: Snapshot<T>,
    pub history: Vec<HistoryRow>,
}

impl<T: Scalar> TrainState<T> {
    fn new(encoder: EncoderParams<T>, labels: LabelSpace<T>, initial_acc: f64) -> Self {
        let encoder_moments = encoder.tensors().iter().map(|t| AdamMoments::zeros(t.len())).collect();
        let label_moments = AdamMoments::zeros(labels.centers.as_slice().len());
        let best = Snapshot {
            encoder: encoder.clone(),
            labels: labels.clone(),
            step: 0,
            val_node_acc: initial_acc,
        };
        Self {
            encoder,
            encoder_moments,
            labels,
            label_moments,
            step: 0,
            best,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    /// Validation leaf accuracy before the first update.
    pub initial_val_node_acc: f64,
    pub stopped_early: bool,
}

impl<T> TrainOutcome<T> {
    pub fn best(&self) -> &Snapshot<T> {
        &self.state.best
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.state.history
    }
}

/// Loss for one batch. Batches too small for the instance-instance term fall
/// back to the center term alone (or nothing, for variants without one).
fn batch_loss<T: Scalar>(
    variant: LossVariant,
    z: &[Vec<T>],
    y: &[usize],
    centers: &Matrix<T>,
    tau: T,
    scale: &Matrix<T>,
) -> Result<Option<LossOutput<T>>, LossError> {
    match loss_variant(variant, z, y, centers, tau, scale) {
        Ok(out) => Ok(Some(out)),
        Err(LossError::BatchTooSmall { .. }) if !z.is_empty() => match variant {
            LossVariant::Liuc | LossVariant::Lic => loss_ic(z, y, centers, tau).map(Some),
            LossVariant::Lisc => loss_sic(z, y, centers, tau, scale).map(Some),
            LossVariant::Scl | LossVariant::Li => Ok(None),
        },
        Err(e) => Err(e),
    }
}

/// Trains an encoder and label space on `train`, selecting the best
/// checkpoint by validation leaf accuracy.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train_set: &Dataset,
    validation: &Dataset,
    tree: &LabelTree,
    template: &TemplateSpec,
    overrides: Option<&BTreeMap<usize, String>>,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if validation.is_empty() {
        return Err(TrainError::NoValidation);
    }
    let encoder = EncoderParams::<T>::init(config.dims, config.seed);
    let labels = LabelSpace::init(&encoder, tree, template, overrides, config.reencode_every)?;

    let train_feats: Vec<FeatureVector> = featurize(train_set, config.dims.buckets);
    let train_y = train_set.labels();
    let val_feats = featurize(validation, config.dims.buckets);
    let val_y = validation.labels();

    let initial_acc = node_accuracy(&encoder, &labels, &val_feats, &val_y);
    let mut state = TrainState::new(encoder, labels, initial_acc);
    let mut outcome_stopped = false;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            state,
            initial_val_node_acc: initial_acc,
            stopped_early: false,
        });
    }

    let tau = T::lit(config.tau);
    let steps_per_epoch = train_feats.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_feats.len()).collect();
    let mut since_best = 0usize;

    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = lr_at(state.step, total_steps, config.lr);
            state.step += 1;
            let step = state.step;

            let fvs: Vec<FeatureVector> = chunk.iter().map(|&i| train_feats[i].clone()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let z = state.encoder.encode_batch(&fvs);
            let out = batch_loss(config.variant, &z, &y, &state.labels.centers, tau, &state.labels.scaled)?;

            let loss = match out {
                Some(out) => {
                    let grads = state.encoder.backward(&fvs, &out.grad_z)?;
                    for ((p, g), m) in state
                        .encoder
                        .tensors_mut()
                        .into_iter()
                        .zip(grads.tensors())
                        .zip(state.encoder_moments.iter_mut())
                    {
                        adam_step(p, g, m, lr, config.weight_decay, step)?;
                    }
                    if config.variant.uses_centers() {
                        adam_step(
                            state.labels.centers.as_mut_slice(),
                            out.grad_u.as_slice(),
                            &mut state.label_moments,
                            lr,
                            config.weight_decay,
                            step,
                        )?;
                    }
                    out.value.as_f64()
                }
                None => 0.0,
            };

            if state.labels.reencode(&state.encoder, step) {
                state.label_moments.reset();
            }

            let mut row = HistoryRow {
                step,
                lr,
                loss,
                val_node_acc: None,
            };
            if step % config.eval_every == 0 || step == total_steps {
                let acc = node_accuracy(&state.encoder, &state.labels, &val_feats, &val_y);
                row.val_node_acc = Some(acc);
                if acc > state.best.val_node_acc {
                    state.best = Snapshot {
                        encoder: state.encoder.clone(),
                        labels: state.labels.clone(),
                        step,
                        val_node_acc: acc,
                    };
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            state.history.push(row);
            if since_best >= config.patience {
                outcome_stopped = true;
                break 'epochs;
            }
        }
    }

    Ok(TrainOutcome {
        state,
        initial_val_node_acc: initial_acc,
        stopped_early: outcome_stopped,
    })
}

/// Writes `step,lr,loss,val_nodeAcc` rows; the accuracy column is empty on
/// steps without validation.
pub fn write_history_csv(out: impl std::io::Write, history: &[HistoryRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "lr", "loss", "val_nodeAcc"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.val_node_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};

    fn small_config(variant: LossVariant) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: 2,
            batch_size: 16,
            eval_every: 10,
            dims: EncoderDims {
                buckets: 256,
                embed: 8,
                hidden: 8,
                output: 8,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn small_corpus() -> crate::corpus::Corpus {
        generate_synthetic(&SyntheticConfig {
            branches: 2,
            leaves_per_branch: 2,
            per_class: 20,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let c = small_corpus();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config(LossVariant::Lisc)
        };
        let out = train::<f64>(&cfg, &c.train, &c.validation, &c.tree, &TemplateSpec::default(), None).unwrap();
        assert!(out.history().is_empty());
        assert_eq!(out.state.step, 0);
        assert_eq!(out.state.encoder, EncoderParams::init(cfg.dims, cfg.seed));
    }

    #[test]
    fn repeat_runs_are_identical() {
        let c = small_corpus();
        let cfg = small_config(LossVariant::Lic);
        let a = train::<f64>(&cfg, &c.train, &c.validation, &c.tree, &TemplateSpec::default(), None).unwrap();
        let b = train::<f64>(&cfg, &c.train, &c.validation, &c.tree, &TemplateSpec::default(), None).unwrap();
        assert_eq!(a.history(), b.history());
        assert_eq!(a.state.encoder, b.state.encoder);
        assert_eq!(a.best(), b.best());
    }

    #[test]
    fn centers_move_only_for_center_variants() {
        let c = small_corpus();
        for v in LossVariant::ALL {
            let cfg = small_config(v);
            let out = train::<f64>(&cfg, &c.train, &c.validation, &c.tree, &TemplateSpec::default(), None).unwrap();
            let init_enc = EncoderParams::<f64>::init(cfg.dims, cfg.seed);
            let init =
                LabelSpace::init(&init_enc, &c.tree, &TemplateSpec::default(), None, cfg.reencode_every).unwrap();
            // Fewer steps than the re-encode period: only optimizer updates can move U.
            assert!(out.state.step < cfg.reencode_every);
            assert_eq!(out.state.labels.centers == init.centers, !v.uses_centers(), "{v}");
            assert_eq!(out.state.labels.similarity, init.similarity);
        }
    }

    #[test]
    fn early_stopping_bounds_trailing_validations() {
        let c = small_corpus();
        let cfg = TrainConfig {
            epochs: 30,
            eval_every: 1,
            patience: 2,
            lr: 0.0,
            ..small_config(LossVariant::Scl)
        };
        let out = train::<f64>(&cfg, &c.train, &c.validation, &c.tree, &TemplateSpec::default(), None).unwrap();
        // lr = 0 never improves, so training stops after `patience` validations.
        assert!(out.stopped_early);
        let evals: Vec<usize> = out
            .history()
            .iter()
            .filter(|r| r.val_node_acc.is_some())
            .map(|r| r.step)
            .collect();
        let after_best = evals.iter().filter(|&&s| s > out.best().step).count();
        assert!(after_best <= cfg.patience);
        assert_eq!(out.best().step, 0);
    }

    #[test]
    fn rejects_bad_config() {
        let c = small_corpus();
        let cfg = TrainConfig {
            tau: 0.0,
            ..small_config(LossVariant::Scl)
        };
        assert!(matches!(
            train::<f64>(&cfg, &c.train, &c.validation, &c.tree, &TemplateSpec::default(), None),
            Err(TrainError::InvalidConfig(_))
        ));
        let empty = Dataset::new(crate::corpus::Split::Validation);
        assert!(matches!(
            train::<f64>(
                &small_config(LossVariant::Scl),
                &c.train,
                &empty,
                &c.tree,
                &TemplateSpec::default(),
                None
            ),
            Err(TrainError::NoValidation)
        ));
    }

    #[test]
    fn single_instance_batch_falls_back_to_center_term() {
        let z = vec![vec![1.0, 0.5]];
        let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = Matrix::filled(2, 2, 1.0);
        assert!(batch_loss(LossVariant::Scl, &z, &[0], &u, 0.3, &s).unwrap().is_none());
        let out = batch_loss(LossVariant::Lisc, &z, &[0], &u, 0.3, &s).unwrap().unwrap();
        assert_eq!(out.value, loss_ic(&z, &[0], &u, 0.3).unwrap().value);
    }

    #[test]
    fn history_csv_has_header_and_blank_accuracy() {
        let rows = vec![
            HistoryRow {
                step: 1,
                lr: 0.001,
                loss: -0.5,
                val_node_acc: None,
            },
            HistoryRow {
                step: 2,
                lr: 0.0005,
                loss: -0.75,
                val_node_acc: Some(0.5),
            },
        ];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,lr,loss,val_nodeAcc\n1,0.001,-0.5,\n2,0.0005,-0.75,0.5\n"
        );
    }
}
