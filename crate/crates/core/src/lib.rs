//! Cross-modal contrastive pre-training of paired particle image and optical
//! profile encoders, with a k-NN gallery classifier and an evaluation harness
//! for every gallery/query modality combination.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gallery;
pub mod losses;
pub mod nn;
pub mod plot;
pub mod preprocess;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
