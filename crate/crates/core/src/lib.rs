//! Differentiable material point method with analytic and neural
//! constitutive laws.

pub mod adjoint;
pub mod error;
pub mod law;
pub mod linalg3;
pub mod materials;
pub mod mpm;
pub mod neural;
pub mod scenarios;
pub mod trajectory;
pub mod training;

pub use error::{Error, Result};
pub use law::{ConstitutiveLaw, StressMeasure};
pub use linalg3::{Mat3, Vec3};
