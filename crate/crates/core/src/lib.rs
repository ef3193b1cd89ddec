//! Neural movie recommendation on MovieLens-format data.
//!
//! - [`ingest`]: parsing `users.dat` / `movies.dat` / `ratings.dat`, vocabularies, encoding
//! - [`autograd`]: dense tensors, reverse-mode gradients, gradient checking, Adam
//! - [`relattn`]: multi-head self-attention with 2-D relative position logits
//! - [`towers`]: the user and movie towers and the dot-product rating head
//! - [`trainer`]: splitting, the training loop, evaluation, checkpoints, recommendation
//! - [`verify`]: gradient and attention check suites with scalar reference oracles

pub mod autograd;
pub mod ingest;
pub mod relattn;
pub mod rng;
pub mod synth;
pub mod towers;
pub mod trainer;
pub mod verify;
