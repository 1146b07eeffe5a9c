//! JSON checkpoints holding a trained encoder, its label space and the
//! configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderDims, EncoderParams};
use crate::hierarchy::{build_tree, HierarchyError, LabelPath, LabelTree, TemplateSpec};
use crate::label_space::LabelSpace;
use crate::scalar::Scalar;
use crate::training::{Snapshot, TrainConfig};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub dims: EncoderDims,
    pub seed: u64,
    pub config: TrainConfig,
    pub template: TemplateSpec,
    /// Label paths the label sentences were built from (after any truncation).
    pub label_paths: Vec<LabelPath>,
    pub step: usize,
    pub val_node_acc: f64,
    pub encoder: EncoderParams<T>,
    pub label_space: LabelSpace<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_snapshot(
        snapshot: &Snapshot<T>,
        config: &TrainConfig,
        template: &TemplateSpec,
        tree: &LabelTree,
    ) -> Self {
        Self {
            dims: config.dims,
            seed: config.seed,
            config: config.clone(),
            template: template.clone(),
            label_paths: tree.label_paths(),
            step: snapshot.step,
            val_node_acc: snapshot.val_node_acc,
            encoder: snapshot.encoder.clone(),
            label_space: snapshot.labels.clone(),
        }
    }

    pub fn tree(&self) -> Result<LabelTree, HierarchyError> {
        build_tree(&self.label_paths)
    }

    fn check(&self) -> Result<(), CheckpointError> {
        let bad = |m: String| Err(CheckpointError::Inconsistent(m));
        if self.encoder.dims != self.dims {
            return bad("encoder shape differs from recorded dims".into());
        }
        let shapes = [
            (self.encoder.embedding.shape(), (self.dims.buckets, self.dims.embed)),
            (self.encoder.hidden_weight.shape(), (self.dims.embed, self.dims.hidden)),
            (self.encoder.output_weight.shape(), (self.dims.hidden, self.dims.output)),
        ];
        if shapes.iter().any(|(got, want)| got != want)
            || self.encoder.hidden_bias.len() != self.dims.hidden
            || self.encoder.output_bias.len() != self.dims.output
        {
            return bad("encoder tensor shapes differ from recorded dims".into());
        }
        let c = self.label_paths.len();
        let ls = &self.label_space;
        if ls.centers.shape() != (c, self.dims.output)
            || ls.similarity.shape() != (c, c)
            || ls.scaled.shape() != (c, c)
            || ls.sentences.len() != c
        {
            return bad(format!("label space does not match {c} classes"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(json: &str) -> Result<Self, CheckpointError> {
        let ckpt: Self = serde_json::from_str(json)?;
        ckpt.check()?;
        ckpt.tree()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let raw = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw)
    }
}
