//! Forward model: positron kernel, voxel grid, X-ray transform, detection
//! response and the assembled operator.

pub mod events;
pub mod grid;
pub mod kernel;
pub mod operator;
pub mod response;
pub mod xray;

use serde::{Deserialize, Serialize};

pub use events::EventData;
pub use grid::{GridMeasure, VoxelGrid};
pub use kernel::PositronKernel;
pub use operator::{
    apply_forward, apply_scatter, apply_unbiased_forward, bound_constant, discretize, BinnedIntensity, Bounds,
    DetectionOperator,
};
pub use response::Quadrature;
pub use xray::xray_transform;

/// Measurement model: events binned into `(τ_i, Γ_j, Γ_k)` atoms, or exact
/// times and detection points with a density against `dt ⊗ 𝓗 ⊗ 𝓗`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discrete,
    Continuous,
}
