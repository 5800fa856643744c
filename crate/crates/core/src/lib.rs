//! Animatable Gaussian avatars driven by spatially distributed pose MLPs.

pub mod avatar;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod field;
pub mod image_io;
pub mod interp;
pub mod kdtree;
pub mod metrics;
pub mod model;
pub mod pca;
pub mod raster;
pub mod skinning;
pub mod synth;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
