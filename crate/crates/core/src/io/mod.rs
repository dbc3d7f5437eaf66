//! On-disk formats: the array container used for datasets, checkpoints and
//! trajectories, and a reader/writer for classic NetCDF files.

pub mod container;
pub mod netcdf;

pub use container::ArrayContainer;
