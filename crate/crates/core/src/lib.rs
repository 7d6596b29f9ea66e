//! Bottleneck adapters for frozen transformer encoders, an open-vocabulary
//! region classifier built on them, and a synthetic benchmark to train and
//! evaluate it. Everything runs on a small reverse-mode autodiff tape over
//! `f64` tensors.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod config;
pub mod encoders;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod gradsuite;
pub mod harness;
pub mod layers;
pub mod model;
pub mod optim;
pub mod ovod;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod toybench;

pub use adapters::{AdapterConfig, AdapterKind, AdapterParams};
pub use config::{ModelConfig, ProjInit, RunConfig, TrainConfig};
pub use encoders::{EncoderConfig, EncoderStack, Modality, VitBlock, XaaMode, XiaMode};
pub use error::{Error, Result};
pub use model::{Checkpoint, OvxdModel};
pub use optim::Sgd;
pub use ovod::{BoxCoords, ClassVocabulary, RegionBag, Split};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{OpKind, Tape, Var};
pub use tensor::{init_gaussian, Tensor};
pub use toybench::{BenchConfig, EvalSplit, Metrics, ToyBenchmark};
