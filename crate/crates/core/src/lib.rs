//! Zero-shot dense image correspondence with spectral functional maps.

pub mod eigensolver;
pub mod error;
pub mod fmap_optimizer;
pub mod grad_engine;
pub mod interchange;
pub mod laplacian;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pointmap_transfer;
pub mod refine_net;

pub use error::{FmapError, Result};
