//! Numerical laboratory for the restricted two-body problem on the sphere.
//!
//! The crate builds the collision-orbit skeleton of the unperturbed rotating
//! geodesic flow, continues prescribed collision chains to true trajectories
//! of the singular problem by multiple shooting, and measures the quantities
//! that certify chaotic behavior: close-approach scaling, inclinations and
//! revolution counts of the near-collision arcs, Floquet multipliers, and
//! persistence under the mass-ratio coupling of the full two-body system.

pub mod action;
pub mod dynamics;
pub mod error;
pub mod geom;
pub mod integrate;
pub mod report;
pub mod shadow;
pub mod skeleton;
pub mod twobody;

pub use error::{Error, Result};
