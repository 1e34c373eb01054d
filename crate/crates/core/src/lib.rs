//! Segmentation toolkit for gross tumor volumes on anisotropic CT.
//!
//! The crate bundles a small dense tensor engine with reverse-mode
//! differentiation, a 2.5D attention U-Net, the preprocessing and patch
//! sampling pipeline, training, ensembling with voxelwise uncertainty, and
//! the binary volume / checkpoint formats used by the command line tool.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod tensor;

pub use config::RunConfig;
pub use ensemble::{ProbabilityMap, UncertaintyMap};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use nn::{KernelMode, NetworkConfig, NetworkParams};
pub use phantom::PhantomSpec;
pub use preprocess::{LabelMask, RegionBox, Scale, Volume};
pub use scalar::Scalar;
pub use tape::{Activation, BnUpdate, GradTape, Mode, TensorId};
pub use tensor::Tensor;
pub use train::TrainConfig;
