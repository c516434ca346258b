pub mod accum;
pub mod cov;
pub mod sh;

pub use accum::{CompensatedSum, Quotient, StableAccumulator, WeightedSum};
pub use cov::{quat_scale_to_cov, Cov3D};
pub use sh::{compact_color_eval, sh_basis, sh_eval, ShCoeffs};
