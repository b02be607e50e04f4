//! Two-stage cascaded U-net segmentation.

pub mod augment;
pub mod cascade;
pub mod loss;
pub mod train;
pub mod unet;
