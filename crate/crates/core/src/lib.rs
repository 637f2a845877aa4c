//! A complex-valued deep-learning engine for dense pixel labeling of
//! polarimetric SAR imagery.
//!
//! Everything is built from first principles on top of [`CTensor`], an
//! interleaved complex tensor: convolution, batch normalization, activation,
//! pooling and unpooling with location maps, losses and Adam all operate on
//! complex numbers end to end, with hand-derived backward passes that are
//! validated against finite differences (see [`gradcheck`]).
//!
//! The top-level model, [`net::NetModel`], is an encoder/decoder fully
//! convolutional network: five downsampling blocks, a 1x1 bottleneck, and
//! five upsampling blocks that restore resolution through max-location
//! unpooling and element-wise skip connections, ending in a per-component
//! logistic output. [`data`] generates and slices coherency-matrix datasets,
//! [`train`] runs the optimization loop, and [`metrics`] scores predictions.

// Validation guards are written `if !(x > 0.0)` on purpose: unlike
// `x <= 0.0`, the negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Small fixed-size matrix kernels (2x2 and 3x3 algebra, Cholesky,
// eigensystems) read clearest with explicit numeric indices.
#![allow(clippy::needless_range_loop)]

pub mod ctensor;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod init;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod scalar;
pub mod train;

pub use ctensor::CTensor;
pub use error::{Error, Result};
pub use grid::LabelGrid;
pub use scalar::Real;
