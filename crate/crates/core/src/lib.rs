//! Multi-modal trajectory prediction with distance attention and an
//! ensemble of winner-take-all decoders.
//!
//! Modules follow the data path: [`scene`] types and frames, [`raster`]
//! bird's-eye images, [`net`] the model, [`objective`] its losses,
//! [`train`] the optimizer loop, [`metrics`] and [`predict`] evaluation, and
//! [`datagen`] synthetic scenarios.

pub mod datagen;
pub mod error;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod predict;
pub mod raster;
pub mod scene;
pub mod train;

pub use error::{RecoatError, Result};
