pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod interface;
pub mod lm;
pub mod optim;
pub mod params;
pub mod perturb;
pub mod pretrain;
pub mod report;
pub mod scoring;
pub mod training;
pub mod transformer;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
