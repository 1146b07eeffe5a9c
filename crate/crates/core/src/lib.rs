//! Label-aware supervised contrastive learning over a label taxonomy.
//!
//! The numeric core ([`encoder`], [`losses`], [`label_space`], [`training`],
//! [`evaluation`]) is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which is what the CLI and checkpoints use.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod gradcheck;
pub mod hierarchy;
pub mod label_space;
pub mod losses;
pub mod matrix;
pub mod optim;
pub mod scalar;
pub mod training;

pub use corpus::{Corpus, Dataset, Example, FeatureVector, Split, SyntheticConfig};
pub use encoder::{EncoderDims, EncoderParams};
pub use hierarchy::{LabelTree, TemplateSpec};
pub use label_space::LabelSpace;
pub use losses::{LossOutput, LossVariant};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use training::TrainConfig;

pub type Encoder = EncoderParams<f64>;
pub type Labels = LabelSpace<f64>;
pub type Loss = LossOutput<f64>;
