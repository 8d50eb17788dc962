//! Product quantization, differentiable quantization training and
//! adversarial attacks against quantized retrieval.

pub mod attack;
mod binio;
pub mod dataio;
pub mod dpqtrain;
pub mod error;
pub mod evalkit;
pub mod featnet;
pub mod kmeans;
pub mod numkit;
pub mod pq;
pub mod softpq;

pub use error::{Error, Result};
pub use numkit::DenseVector;
