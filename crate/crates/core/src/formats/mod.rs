//! Disparity and image file formats.

pub mod pfm;
pub mod png;

pub use pfm::{decode_pfm, encode_pfm, read_disparity_pfm, read_pfm, write_disparity_pfm, write_pfm, PfmImage};
pub use png::{quantize_disparity, read_image, read_kitti_disparity, write_image, write_kitti_disparity};
