//! Sort-free Gaussian splatting with weighted sum rendering.
//!
//! Splat contributions are combined with commutative weighted sums instead
//! of depth-ordered alpha blending, so no per-frame sort is needed. The
//! crate contains the forward renderers, an analytic gradient trainer, image
//! metrics, and scene/camera/image file formats.

pub mod camera;
pub mod error;
pub mod io;
pub mod math;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;

pub use camera::{frustum_cull, project_gaussian, world_to_camera, Camera, SplatProjection};
pub use error::{Result, WsrError};
pub use render::{
    depth_order, render_sorted_reference, render_wsr, weight_eval, Image, Precision, RenderOptions,
};
pub use scene::{scene_new_random, Aabb, GaussianElement, Scene, WeightKind, WeightModel};
