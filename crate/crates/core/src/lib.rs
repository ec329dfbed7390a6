//! Branching temporal adapter for a frozen image-text dual encoder.
//!
//! A small frozen CLIP-style backbone encodes each frame independently; a
//! trainable branch of divided space-time layers reads the backbone's last
//! `K + 1` layers through a tube mask and is mixed back in with sigmoid
//! gates. Training uses video-text contrast plus two masked-branch
//! alignment objectives. Everything runs on the in-crate float64 autodiff
//! engine in [`tensor`].

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::BtModel;
pub use tensor::{Tape, Tensor, Var};
