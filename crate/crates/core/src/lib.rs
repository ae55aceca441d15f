//! Object removal from posed multi-view captures: propagate a point prompt
//! from one view to all views through a sparse reconstruction, then retrain a
//! voxel radiance field on inpainted color and depth priors.

pub mod colmap;
pub mod field;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod propagation;
pub mod raster;
pub mod service;
pub mod synthetic;
pub mod trainer;
