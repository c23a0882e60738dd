//! Small neural building blocks over candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are
//! initialized from a seeded generator, so a model is a pure function of its
//! config and seed. Sequences are batch-major: `(batch, time, channels)`.

mod layers;
pub mod loss;
pub mod ops;
mod store;

pub use layers::{
    softmax_last, log_softmax_last, Dropout, FeedForward, LayerNorm, Linear, Lstm, LstmState,
    MultiHeadAttention, TemporalConv, TransformerBlock,
};
pub use store::{ParamStore, ParamTable, ParamTensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Training carries the generator used for dropout masks.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        }
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
