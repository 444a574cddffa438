// `!(x > 0.0)` is the NaN-rejecting check throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod decode;
pub mod embed;
pub mod encoding;
pub mod error;
pub mod glove;
pub mod io;
pub mod maps;
pub mod minigpt;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
