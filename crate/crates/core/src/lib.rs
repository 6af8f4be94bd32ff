//! Duration-aware nested speaker embeddings.
//!
//! A mean-pooling encoder emits a `D`-dimensional embedding whose leading
//! prefixes are trained as embeddings in their own right, with short chunks
//! steered toward small prefixes and long chunks toward large ones. The crate
//! covers the losses and their gradients, the training loops, a synthetic
//! speaker population and verification scoring.

mod binio;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod margin_head;
pub mod nesting;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod schedules;
pub mod selftest;
pub mod synthdata;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use encoder::{encode, prefix, EncoderParams, FullEmbedding, Utterance};
pub use error::{DameError, Result};
pub use eval::{compute_eer, cosine_score, evaluate, evaluate_dataset, EvalReport, ScoreSet};
pub use margin_head::{margin_loss, HeadBank, HeadMode, MarginConfig};
pub use nesting::{DurationSet, PrefixSpec};
pub use numerics::{Matrix, RngStream};
pub use objective::{alignment_weights, dame_loss, AlignmentWeights, DameObjective, WeightScheme};
pub use schedules::{alpha_at, lr_at, margin_at, Regime, ScheduleConfig};
pub use synthdata::{Dataset, GeneratorConfig, InstanceBatch, TrialList};
pub use trainer::{train_ft, train_ft_from, train_gt, RunConfig, TrainLog, TrainScheme, TrainedModel};
