pub mod allocation;
pub mod error;
pub mod index;
pub mod integration;
pub mod math;
pub mod pipeline;
pub mod raycast;
pub mod swap;
pub mod tracking;
pub mod view;
pub mod voxel;
