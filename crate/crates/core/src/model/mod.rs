//! Encoder-decoder transformer with rule injection, built on a small
//! reverse-mode tape.

pub mod attention;
pub mod checkpoint;
pub mod decode;
mod init;
pub mod optim;
pub mod tape;
pub mod train;
pub mod transformer;

pub use attention::{multi_head, prefix_attention, AttentionParams, HeadTrace};
pub use checkpoint::ModelCheckpoint;
pub use decode::{decode_beam, decode_greedy, GenerationOutput, StopReason};
pub use tape::{Mask, Mat, ParamId, ParamStore, Tape, Var};
pub use train::{batch_loss_and_grads, train_step, TrainExample, Trainer};
pub use transformer::{Encoded, ModelConfig, ModelInput, RuleCapModel, RuleTokenMode, Variant};
