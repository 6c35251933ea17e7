//! Cross-modality feature alignment toolkit.
//!
//! * [`amk_mmd`]: multi-scale Gaussian-kernel MMD with analytic gradients.
//! * [`pesam`]: log-Gabor phase congruency, edge attention and adaptive fusion.
//! * [`iffs`]: intra-, cross- and hierarchical feature fusion plus GeM pooling.
//! * [`losses`]: identity, batch-hard triplet and alignment losses.
//! * [`encoder`]: a small dual-branch token encoder with exact backprop and SGD.
//! * [`eval`]: CMC, mAP, mINP and distance-gap statistics.
//! * [`harness`]: synthetic data, training, evaluation and sweeps.

pub mod amk_mmd;
pub mod error;
pub mod eval;
pub mod exec;
pub mod harness;
pub mod iffs;
pub mod encoder;
pub mod image;
pub mod losses;
pub mod pesam;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use image::{crop_upper_body, GrayImage};
pub use rng::Rng;
pub use tensor::{concat_rows_dimwise, Branch, FeatureBatch, Matrix, Modality};
