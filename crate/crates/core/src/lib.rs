// Index loops read better than zipped iterators in the voxel kernels.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod plans;
pub mod topology;
pub mod train;
