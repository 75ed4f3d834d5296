//! Minimal layer library with hand-written backward passes.
//!
//! Every layer keeps the activations it needs for its backward pass when run
//! in [`Mode::Train`] or [`Mode::Trace`]; [`Mode::Infer`] (and the `infer`
//! methods taking `&self`) record nothing.

mod act;
mod block;
mod conv;
mod linear;
mod norm;
mod optim;
pub(crate) mod param;

pub use act::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, upsample2,
    upsample2_backward, Relu, Tanh,
};
pub use block::ConvBnRelu;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use norm::BatchNorm;
pub use optim::{Adam, AdamConfig};
pub use param::{checksum_state, load_tensor, Module, Param, StateDict, StateKind};
pub(crate) use param::impl_module;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How a forward pass treats batch statistics and activation caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, caches recorded.
    Train,
    /// Running statistics, caches recorded (gradients through a frozen net).
    Trace,
    /// Running statistics, nothing recorded.
    Infer,
}

impl Mode {
    pub fn records(self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
