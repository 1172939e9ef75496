pub mod autograd;
pub mod error;
pub mod params;

pub use error::{Error, Result};
pub mod config;
pub mod nn;
pub mod optim;
pub mod registry;
pub mod seeds;
pub mod corpus;
pub mod backbone;
pub mod disent;
pub mod training;
pub mod metrics;
pub mod asr;
pub mod pipelines;
pub mod evaluation;
pub mod report;
pub mod checkpoint;
