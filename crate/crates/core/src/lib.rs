//! Leaf-trait upscaling: trait-table gap filling, raster features, PFT
//! classification, community-weighted means and trait regression.

pub mod cwm;
pub mod error;
pub mod forest;
pub mod gapfill;
pub mod par;
pub mod pipeline;
pub mod pft;
pub mod raster;
pub mod regress;
pub mod seed;
pub mod stats;
pub mod trait_table;

pub use error::{Error, Result};
