// SPDX-License-Identifier: Apache-2.0

//! Compact binary image descriptors from a regularized GAN discriminator.
//!
//! The discriminator exposes a low-dimensional layer `f(x)` and a
//! high-dimensional layer `h(x)`. Training adds two regularizers to the usual
//! adversarial loss: a distance-matching term that aligns pairwise code
//! similarities of `sign(h)` with those of `softsign(f)`, and a weighted
//! bit-entropy term that balances and decorrelates the bits of `f`. The signs
//! of `f(x)` are the descriptor.
//!
//! Module map:
//!
//! - [`tensor`]: `f64` tensors with reverse-mode differentiation.
//! - [`nn`]: layer specs, generator and discriminator builders.
//! - [`quantize`]: sign/softsign, bit-packed codes, Hamming search.
//! - [`losses`]: adversarial, feature-matching and regularizer losses.
//! - [`train`]: alternating training loop, optimizer, checkpoints.
//! - [`data`]: dataset container, synthetic toy sets, downsampling.
//! - [`eval`]: mAP@k retrieval, FPR at 95% TPR matching, ablation grid.
//! - [`cli`]: the `bingan` command-line frontend.

pub mod cli;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod quantize;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
