//! Raster grids, time-series compositing and feature stacks.

pub mod features;
pub mod grid;
pub mod ops;

pub use features::{
    build_features, feature_band_names, load_stack, save_stack, standardize_features, BandRoles, FeatureRaster,
    FeatureStats, StackEntry, StackIndex,
};
pub use grid::{
    read_tsr, read_tsr_bands, read_tsr_header, write_tsr, write_tsr_bands, write_tsr_classes, Geometry, RasterGrid,
    TsrHeader, DEFAULT_NODATA,
};
pub use ops::{
    annual_summary, bilinear_resample, median_over, mode_composite, monthly_median_composite, parse_date,
    vegetation_index, AnnualSummary, Scene, SpectralBands, TimeStack, VegetationIndex,
};
