pub mod experiment;
pub mod gape;
pub mod gavr;
pub mod gradcheck;
pub mod inference_eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod train;
pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod cooccur;
pub mod data;
pub mod dgp;
pub mod encoders;
pub mod error;

pub use error::{Error, Result};
