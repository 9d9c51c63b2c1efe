pub mod data;
pub mod dip;
pub mod error;
pub mod image;
pub mod labels;
pub mod nn;
pub mod pipeline;
pub mod quality;
pub mod stop;
pub mod synthetic;

pub use error::{Error, Result};
pub use image::Image;
