//! Energy-based dropout that converges to a pruned network.
//!
//! A population of binary pruning states is evolved by binary differential
//! evolution to minimise an energy loss computed from the network's logits,
//! interleaved with backpropagation on the current best sub-network. Once the
//! population collapses (or the exploration budget runs out) the best
//! sub-network is fine-tuned and its dropped units stay pruned.

pub mod bde;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod state;
pub mod tensor;
pub mod trainer;
pub mod unitmap;

pub use error::{Error, Result};
pub use nn::{LayerSpec, Network};
pub use state::PruningState;
pub use tensor::Tensor;
pub use unitmap::UnitMap;
