//! On-disk formats: binary PPM images and the parameter checkpoint.

pub mod checkpoint;
pub mod ppm;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image};
