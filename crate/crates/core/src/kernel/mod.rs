//! Dense-tensor math, reverse-mode differentiation, Adam and the
//! learning-rate schedule.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::SeqLayout;
pub use optim::{adam_step, lr_schedule, sgd_step, AdamConfig};
pub use param::{Gradients, ParamId, ParamStore};
pub use tape::{RowMap, Tape, Var};
pub use tensor::{cross_entropy, linear_forward, softmax, Tensor};
