//! Text-conditioned attention pooling for vision-language pre-training,
//! scaled down so every mechanism can be trained and checked on a laptop.

pub mod caption;
pub mod checkpoint;
pub mod diffmath;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pairing;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
