//! The two-map constitutive law interface shared by analytic and neural laws.

use crate::error::Result;
use crate::linalg3::Mat3;

/// Which stress tensor [`ConstitutiveLaw::elastic`] returns natively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StressMeasure {
    /// First Piola-Kirchhoff stress `P`.
    FirstPiola,
    /// Kirchhoff stress `τ = P·Fᵀ`.
    Kirchhoff,
}

/// An elastic map `Fᵉ ↦ stress` paired with a plastic return map
/// `Fᵉ,trial ↦ Fᵉ,new`.
///
/// The simulator consumes Kirchhoff stress. Trainable laws expose a flat
/// parameter vector (concatenation of the tensors listed by
/// [`param_shapes`](Self::param_shapes)) and accumulate into it in the
/// `*_vjp` methods.
pub trait ConstitutiveLaw: Send + Sync {
    fn stress_measure(&self) -> StressMeasure;

    /// Stress in the law's native measure.
    fn elastic(&self, f: &Mat3) -> Result<Mat3>;

    fn plastic(&self, f_trial: &Mat3) -> Result<Mat3>;

    fn kirchhoff(&self, f: &Mat3) -> Result<Mat3> {
        let s = self.elastic(f)?;
        Ok(match self.stress_measure() {
            StressMeasure::FirstPiola => s * f.transpose(),
            StressMeasure::Kirchhoff => s,
        })
    }

    /// Shapes `[rows, cols]` of the trainable tensors, in flattening order.
    fn param_shapes(&self) -> Vec<[usize; 2]> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|[r, c]| r * c).sum()
    }

    /// Given `∂L/∂τ`, returns `∂L/∂F` and adds `∂L/∂θ` into `param_grad`.
    fn kirchhoff_vjp(&self, f: &Mat3, tau_bar: &Mat3, param_grad: &mut [f64]) -> Result<Mat3>;

    /// Given `∂L/∂Fᵉ,new`, returns `∂L/∂Fᵉ,trial` and adds `∂L/∂θ`.
    fn plastic_vjp(&self, f_trial: &Mat3, out_bar: &Mat3, param_grad: &mut [f64]) -> Result<Mat3>;
}
