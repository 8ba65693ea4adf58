pub mod cli;
pub mod data_io;
pub mod depth_net;
pub mod error;
pub mod eval_metrics;
pub mod geometry;
pub mod kv;
pub mod latent_bank;
pub mod nn;
pub mod optim;
pub mod pose_net;
pub mod raster;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
