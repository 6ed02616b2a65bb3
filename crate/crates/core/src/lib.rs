pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod grad;
pub mod gradsuite;
pub mod init;
pub mod motion;
pub mod optim;
pub mod sequence;
pub mod splat;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
