//! Scene, camera and image files.

pub mod cameras;
pub mod image_io;
pub mod ply;
pub mod wsplat;

pub use cameras::{load_cameras, save_cameras, CameraId, CameraRecord};
pub use image_io::{read_image, write_image};
pub use ply::{load_ply, save_ply};
pub use wsplat::{export_wsplat, load_wsplat, parse_wsplat};
