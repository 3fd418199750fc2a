//! Dynamic PET from listmode data.
//!
//! A tracer distribution moving inside a ball `D` emits photon pairs that are
//! detected on the surrounding sphere `∂𝒟`. This crate simulates such
//! listmode measurements as a Poisson point process and reconstructs the
//! spacetime mass `ρ` and flux `η` by minimizing
//!
//! ```text
//! J(ρ, η) = (p_s + p_d)‖ρ‖/T_half − Σ_e log λ_e(ρ) + β S(ρ, η)
//! ```
//!
//! subject to the continuity equation, where `S` is the Benamou–Brenier
//! transport energy and the event intensity `λ_e` weighs the scatter channel
//! by a debiasing factor `q`.
//!
//! ## Examples
//!
//! ```text
//! examples/
//! ├── simulate.rs               # ground truth and Poisson listmode
//! ├── reconstruct_grid.rs       # primal-dual grid reconstruction
//! ├── reconstruct_particles.rs  # sparse trajectory reconstruction
//! ├── toy_bias.rs               # scatter bias in the two-mass toy model
//! ├── sweep_q.rs                # scatter count as a function of q
//! └── verify_scaling.rs         # rescaling identities of the functional
//! ```
//!
//! ```bash
//! cargo run --release -p dynpet --example simulate
//! ```

pub mod cli;
pub mod config;
pub mod debias;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod listmode;
pub mod objective;
pub mod rng;
pub mod scaling;
pub mod solver_grid;
pub mod solver_particles;
pub mod svg;
pub mod transport;

pub use error::{Error, Result};
pub use forward::{GridMeasure, Mode, PositronKernel, VoxelGrid};
pub use geometry::{Point, ScannerGeometry};
