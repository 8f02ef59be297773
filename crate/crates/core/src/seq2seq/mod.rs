//! Attentional encoder-decoder translation model.
//!
//! The encoder is a stack of bidirectional LSTMs (each direction carries half
//! of the hidden size). The decoder is a stack of LSTMs whose first layer
//! consumes the previous attentional output next to the token embedding
//! (input feeding). Attention uses the concat score
//! `v · tanh(W_enc h_i + W_dec s_t)`.

mod checkpoint;
mod decode;
mod model;
mod params;
mod vocab;

pub use checkpoint::{load_critic, save_critic, Checkpoint, TranslationModel, CHECKPOINT_TAG};
pub use decode::{decode, decode_with_rng, DecodeConfig, DecodeMode, Decoded};
pub use model::{
    attend, decode_step, encode, sequence_log_prob, token_log_probs, DecoderState, Dropout, EncoderOutput,
};
pub(crate) use model::{NoRng, Trunk};
pub use params::{CriticParams, ModelDims, NmtParams};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
