//! Multi-region bilinear CNN embeddings for person re-identification.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape
//! ([`tensor`]), convolutional layers ([`nn`]), bilinear and region pooling
//! ([`bilinear`]), the three-part embedding network ([`net`]), pairwise
//! embedding losses ([`loss`]), dataset handling ([`data`]), retrieval
//! metrics ([`eval`]), and the training loop with checkpointing ([`train`],
//! [`checkpoint`], [`config`]).

pub mod bench;
pub mod bilinear;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{Embedding, Model, NetworkConfig, Variant};
pub use rng::RngStream;
pub use tensor::{Graph, Tensor, Var};
