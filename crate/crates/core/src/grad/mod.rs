//! Dense arrays, a reverse-mode tape, and the optimizers used for training.

mod array;
mod cell;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use cell::{lstm_cell, softmax_temperature, LstmWeights};
pub use optim::{adam_step, clip_global_norm, sgd_step, AdamState, SgdConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{NodeId, Tape, TapeGrads};
