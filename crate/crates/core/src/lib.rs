pub mod al;
pub mod cagan;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod pipeline;
pub mod segmenter;
pub mod selftest;
pub mod uncertainty;
pub mod util;

pub use error::{Error, Result};
