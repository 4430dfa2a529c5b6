//! Analytic elastoplastic models used to generate ground truth and as
//! system-identification targets.
//!
//! | environment | elastic map            | plastic map      |
//! |-------------|------------------------|------------------|
//! | jello       | fixed corotated        | identity         |
//! | sand        | StVK (Hencky strain)   | Drucker-Prager   |
//! | plasticine  | StVK (Hencky strain)   | von Mises        |
//! | water       | volumetric (`μ = 0`)   | hydrostatic axis |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::{ConstitutiveLaw, StressMeasure};
use crate::linalg3::{cofactor3, det3, inv_transpose3, polar3, polar3_adjoint, spectral_vjp, svd3, Mat3, Svd3, Vec3};

/// Lamé coefficients in Pa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LameParams {
    pub mu: f64,
    pub lam: f64,
}

impl LameParams {
    pub fn from_youngs(youngs_modulus: f64, poissons_ratio: f64) -> Self {
        let (e, nu) = (youngs_modulus, poissons_ratio);
        LameParams { mu: e / (2.0 * (1.0 + nu)), lam: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)) }
    }

    /// `[[∂μ/∂E, ∂μ/∂ν], [∂λ/∂E, ∂λ/∂ν]]`.
    fn jacobian(e: f64, nu: f64) -> [[f64; 2]; 2] {
        let a = 1.0 + nu;
        let b = 1.0 - 2.0 * nu;
        [[1.0 / (2.0 * a), -e / (2.0 * a * a)], [nu / (a * b), e * (1.0 + 2.0 * nu * nu) / (a * a * b * b)]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasticParams {
    /// Drucker-Prager friction angle, radians.
    pub friction_angle: f64,
    /// von Mises yield stress, Pa.
    pub yield_stress: f64,
}

/// Drucker-Prager cone coefficient `√(2/3)·2 sin θ / (3 − sin θ)`.
pub fn friction_alpha(friction_angle: f64) -> f64 {
    let s = friction_angle.sin();
    (2.0f64 / 3.0).sqrt() * 2.0 * s / (3.0 - s)
}

fn friction_alpha_derivative(friction_angle: f64) -> f64 {
    let s = friction_angle.sin();
    (2.0f64 / 3.0).sqrt() * 6.0 * friction_angle.cos() / ((3.0 - s) * (3.0 - s))
}

/// `P = 2μ(F − R) + λJ(J − 1)F⁻ᵀ`.
pub fn fixed_corotated_stress(f: &Mat3, p: &LameParams) -> Result<Mat3> {
    let inv_t = inv_transpose3(f)?;
    let (r, _) = polar3(f);
    let j = det3(f);
    Ok(2.0 * p.mu * (f - r) + p.lam * j * (j - 1.0) * inv_t)
}

fn positive_svd(f: &Mat3) -> Result<Svd3> {
    let svd = svd3(f);
    if !(svd.sigma[2] > 0.0) {
        return Err(Error::InvalidDeformation(format!("non-positive singular value {:e}", svd.sigma[2])));
    }
    Ok(svd)
}

/// Kirchhoff stress `τ = U(2με + λ tr(ε) I)Uᵀ` with Hencky strain `ε = log Σ`.
pub fn stvk_hencky_stress(f: &Mat3, p: &LameParams) -> Result<Mat3> {
    let svd = positive_svd(f)?;
    let eps = svd.sigma.map(f64::ln);
    let tr = eps.sum();
    let d = eps * (2.0 * p.mu) + Vec3::repeat(p.lam * tr);
    let tau = svd.u * Mat3::from_diagonal(&d) * svd.u.transpose();
    Ok(0.5 * (tau + tau.transpose()))
}

/// Hencky strain split used by both return maps.
struct HenckySplit {
    svd: Svd3,
    trace: f64,
    /// Unit deviatoric direction; zero when the deviator vanishes.
    dir: Vec3,
    dev_norm: f64,
}

impl HenckySplit {
    fn new(f: &Mat3) -> Result<Self> {
        let svd = positive_svd(f)?;
        let eps = svd.sigma.map(f64::ln);
        let trace = eps.sum();
        let dev = eps - Vec3::repeat(trace / 3.0);
        let dev_norm = dev.norm();
        let dir = if dev_norm > 0.0 { dev / dev_norm } else { Vec3::zeros() };
        Ok(HenckySplit { svd, trace, dir, dev_norm })
    }

    /// `∂(ε̂/‖ε̂‖)/∂ε = (P_dev − d·dᵀ)/‖ε̂‖`.
    fn dir_jacobian(&self) -> Mat3 {
        let pdev = Mat3::identity() - Mat3::repeat(1.0 / 3.0);
        (pdev - self.dir * self.dir.transpose()) / self.dev_norm
    }

    /// `U·exp(H)·Vᵀ` together with `∂g/∂σ` given `∂H/∂ε`.
    fn exp_map(&self, h: &Vec3, dh_deps: &Mat3) -> (Mat3, Vec3, Mat3) {
        let g = h.map(f64::exp);
        let inv_sigma = self.svd.sigma.map(|s| 1.0 / s);
        let jac = Mat3::from_diagonal(&g) * dh_deps * Mat3::from_diagonal(&inv_sigma);
        (self.svd.u * Mat3::from_diagonal(&g) * self.svd.v.transpose(), g, jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DpBranch {
    Tension,
    Elastic,
    Project,
}

fn dp_branch(split: &HenckySplit, p: &LameParams, alpha: f64) -> (DpBranch, f64) {
    let k = alpha * (3.0 * p.lam + 2.0 * p.mu) / (2.0 * p.mu);
    let delta_gamma = split.dev_norm + k * split.trace;
    let branch = if split.trace > 0.0 {
        DpBranch::Tension
    } else if delta_gamma <= 0.0 {
        DpBranch::Elastic
    } else {
        DpBranch::Project
    };
    (branch, k)
}

/// Projected log-stretch for Drucker-Prager case 3,
/// `ε − δγ·ε̂/‖ε̂‖ = tr(ε)/3 − k·tr(ε)·ε̂/‖ε̂‖`, and its ε-Jacobian.
fn dp_projection(split: &HenckySplit, k: f64) -> (Vec3, Mat3) {
    let tr = split.trace;
    let h = Vec3::repeat(tr / 3.0) - split.dir * (k * tr);
    let dh = Mat3::repeat(1.0 / 3.0) - k * (split.dir * Vec3::repeat(1.0).transpose() + tr * split.dir_jacobian());
    (h, dh)
}

/// Drucker-Prager return map on the Hencky strain.
pub fn drucker_prager_return(f_trial: &Mat3, p: &LameParams, q: &PlasticParams) -> Result<Mat3> {
    let split = HenckySplit::new(f_trial)?;
    let (branch, k) = dp_branch(&split, p, friction_alpha(q.friction_angle));
    Ok(match branch {
        DpBranch::Tension => split.svd.rotation(),
        DpBranch::Elastic => *f_trial,
        DpBranch::Project => {
            let (h, dh) = dp_projection(&split, k);
            split.exp_map(&h, &dh).0
        }
    })
}

/// Projected log-stretch for von Mises, `tr(ε)/3 + (τ_Y/2μ)·ε̂/‖ε̂‖`.
fn vm_projection(split: &HenckySplit, c: f64) -> (Vec3, Mat3) {
    let h = Vec3::repeat(split.trace / 3.0) + split.dir * c;
    let dh = Mat3::repeat(1.0 / 3.0) + c * split.dir_jacobian();
    (h, dh)
}

/// von Mises return map: isochoric projection onto `‖ε̂‖ = τ_Y / 2μ`.
pub fn von_mises_return(f_trial: &Mat3, p: &LameParams, q: &PlasticParams) -> Result<Mat3> {
    let split = HenckySplit::new(f_trial)?;
    let c = q.yield_stress / (2.0 * p.mu);
    if split.dev_norm - c <= 0.0 {
        return Ok(*f_trial);
    }
    let (h, dh) = vm_projection(&split, c);
    Ok(split.exp_map(&h, &dh).0)
}

/// Weakly compressible fluid: `P = λJ(J − 1)F⁻ᵀ`; `mu` is ignored.
pub fn fluid_stress(f: &Mat3, p: &LameParams) -> Result<Mat3> {
    let j = det3(f);
    Ok(p.lam * j * (j - 1.0) * inv_transpose3(f)?)
}

/// Projects onto the hydrostatic axis, `J^{1/3}·I`.
pub fn fluid_return(f_trial: &Mat3) -> Result<Mat3> {
    let j = det3(f_trial);
    if !(j > 0.0) {
        return Err(Error::InvalidDeformation(format!("fluid return needs det > 0, got {j:e}")));
    }
    Ok(Mat3::identity() * j.cbrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Jello,
    Sand,
    Plasticine,
    Water,
}

impl Environment {
    pub const ALL: [Environment; 4] = [Environment::Jello, Environment::Sand, Environment::Plasticine, Environment::Water];

    pub fn name(self) -> &'static str {
        match self {
            Environment::Jello => "jello",
            Environment::Sand => "sand",
            Environment::Plasticine => "plasticine",
            Environment::Water => "water",
        }
    }

    /// Names of the physical parameters identified by system identification.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Environment::Jello => &["youngs_modulus", "poissons_ratio"],
            Environment::Sand => &["youngs_modulus", "poissons_ratio", "friction_angle"],
            Environment::Plasticine => &["youngs_modulus", "poissons_ratio", "yield_stress"],
            Environment::Water => &["fluid_lambda"],
        }
    }
}

impl std::str::FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Environment::ALL
            .into_iter()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown environment '{s}'")))
    }
}

/// Physical material parameters. Units: Pa, radians, kg/m³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poissons_ratio: f64,
    pub friction_angle: f64,
    pub yield_stress: f64,
    pub fluid_lambda: f64,
    pub density: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            youngs_modulus: 1e5,
            poissons_ratio: 0.3,
            friction_angle: 25f64.to_radians(),
            yield_stress: 5e3,
            fluid_lambda: 1e5,
            density: 1e3,
        }
    }
}

impl MaterialParams {
    pub fn lame(&self) -> LameParams {
        LameParams::from_youngs(self.youngs_modulus, self.poissons_ratio)
    }

    pub fn plastic(&self) -> PlasticParams {
        PlasticParams { friction_angle: self.friction_angle, yield_stress: self.yield_stress }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "youngs_modulus" => self.youngs_modulus,
            "poissons_ratio" => self.poissons_ratio,
            "friction_angle" => self.friction_angle,
            "yield_stress" => self.yield_stress,
            "fluid_lambda" => self.fluid_lambda,
            "density" => self.density,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "youngs_modulus" => &mut self.youngs_modulus,
            "poissons_ratio" => &mut self.poissons_ratio,
            "friction_angle" => &mut self.friction_angle,
            "yield_stress" => &mut self.yield_stress,
            "fluid_lambda" => &mut self.fluid_lambda,
            "density" => &mut self.density,
            _ => return Err(Error::Config(format!("unknown material parameter '{name}'"))),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.youngs_modulus >= 0.0
            && (0.0..0.5).contains(&self.poissons_ratio)
            && self.friction_angle > 0.0
            && self.friction_angle < std::f64::consts::FRAC_PI_2
            && self.yield_stress > 0.0
            && self.fluid_lambda >= 0.0
            && self.density > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("material parameters out of range: {self:?}")))
        }
    }
}

/// One of the four environment laws.
///
/// By default it exposes no trainable parameters; [`AnalyticLaw::trainable`]
/// makes the physical parameters of [`Environment::param_names`] trainable
/// for system identification.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticLaw {
    pub env: Environment,
    pub params: MaterialParams,
    trainable: bool,
}

pub fn make_environment_law(env: Environment, params: MaterialParams) -> AnalyticLaw {
    AnalyticLaw { env, params, trainable: false }
}

impl AnalyticLaw {
    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn param_values(&self) -> Vec<f64> {
        self.env.param_names().iter().map(|n| self.params.get(n).expect("known name")).collect()
    }

    pub fn set_param_values(&mut self, values: &[f64]) -> Result<()> {
        let names = self.env.param_names();
        if values.len() != names.len() {
            return Err(Error::ShapeMismatch(format!("{} parameters for {}, got {}", names.len(), self.env.name(), values.len())));
        }
        for (n, v) in names.iter().zip(values) {
            self.params.set(n, *v)?;
        }
        Ok(())
    }

    /// Adds `(∂L/∂μ, ∂L/∂λ)` into the physical parameter gradient.
    fn add_lame_grad(&self, mu_bar: f64, lam_bar: f64, param_grad: &mut [f64]) {
        if !self.trainable {
            return;
        }
        match self.env {
            Environment::Water => param_grad[0] += lam_bar,
            _ => {
                let jac = LameParams::jacobian(self.params.youngs_modulus, self.params.poissons_ratio);
                param_grad[0] += mu_bar * jac[0][0] + lam_bar * jac[1][0];
                param_grad[1] += mu_bar * jac[0][1] + lam_bar * jac[1][1];
            }
        }
    }

    fn water_lame(&self) -> LameParams {
        LameParams { mu: 0.0, lam: self.params.fluid_lambda }
    }
}

impl ConstitutiveLaw for AnalyticLaw {
    fn stress_measure(&self) -> StressMeasure {
        match self.env {
            Environment::Jello | Environment::Water => StressMeasure::FirstPiola,
            Environment::Sand | Environment::Plasticine => StressMeasure::Kirchhoff,
        }
    }

    fn elastic(&self, f: &Mat3) -> Result<Mat3> {
        match self.env {
            Environment::Jello => fixed_corotated_stress(f, &self.params.lame()),
            Environment::Water => fluid_stress(f, &self.water_lame()),
            Environment::Sand | Environment::Plasticine => stvk_hencky_stress(f, &self.params.lame()),
        }
    }

    fn kirchhoff(&self, f: &Mat3) -> Result<Mat3> {
        // P·Fᵀ simplifies for the Piola laws and needs no inverse.
        match self.env {
            Environment::Jello => {
                let p = self.params.lame();
                let (r, _) = polar3(f);
                let j = det3(f);
                Ok(2.0 * p.mu * (f - r) * f.transpose() + Mat3::identity() * (p.lam * j * (j - 1.0)))
            }
            Environment::Water => {
                let j = det3(f);
                Ok(Mat3::identity() * (self.params.fluid_lambda * j * (j - 1.0)))
            }
            Environment::Sand | Environment::Plasticine => stvk_hencky_stress(f, &self.params.lame()),
        }
    }

    fn plastic(&self, f_trial: &Mat3) -> Result<Mat3> {
        match self.env {
            Environment::Jello => Ok(*f_trial),
            Environment::Sand => drucker_prager_return(f_trial, &self.params.lame(), &self.params.plastic()),
            Environment::Plasticine => von_mises_return(f_trial, &self.params.lame(), &self.params.plastic()),
            Environment::Water => fluid_return(f_trial),
        }
    }

    fn param_shapes(&self) -> Vec<[usize; 2]> {
        if self.trainable {
            vec![[self.env.param_names().len(), 1]]
        } else {
            Vec::new()
        }
    }

    fn kirchhoff_vjp(&self, f: &Mat3, tau_bar: &Mat3, param_grad: &mut [f64]) -> Result<Mat3> {
        match self.env {
            Environment::Jello => {
                let p = self.params.lame();
                let svd = svd3(f);
                let r = svd.rotation();
                let j = det3(f);
                let tr_bar = tau_bar.trace();
                let f_bar = 2.0 * p.mu * ((tau_bar + tau_bar.transpose()) * f - tau_bar.transpose() * r)
                    + polar3_adjoint(&svd, &(-2.0 * p.mu * tau_bar * f))
                    + cofactor3(f) * (p.lam * (2.0 * j - 1.0) * tr_bar);
                let mu_bar = tau_bar.component_mul(&(2.0 * (f - r) * f.transpose())).sum();
                self.add_lame_grad(mu_bar, tr_bar * (j * j - j), param_grad);
                Ok(f_bar)
            }
            Environment::Water => {
                let j = det3(f);
                let tr_bar = tau_bar.trace();
                self.add_lame_grad(0.0, tr_bar * (j * j - j), param_grad);
                Ok(cofactor3(f) * (self.params.fluid_lambda * (2.0 * j - 1.0) * tr_bar))
            }
            Environment::Sand | Environment::Plasticine => {
                let p = self.params.lame();
                let svd = positive_svd(f)?;
                let s = svd.sigma;
                let eps = s.map(f64::ln);
                let tr = eps.sum();
                // τ = G·Fᵀ with G = U·diag(g)·Vᵀ, gᵢ = (2μεᵢ + λ tr ε)/σᵢ.
                let g = Vec3::from_fn(|i, _| (2.0 * p.mu * eps[i] + p.lam * tr) / s[i]);
                let jac = Mat3::from_fn(|i, k| {
                    let mut v = (p.lam + if i == k { 2.0 * p.mu } else { 0.0 }) / (s[i] * s[k]);
                    if i == k {
                        v -= g[i] / s[i];
                    }
                    v
                });
                let gm = svd.u * Mat3::from_diagonal(&g) * svd.v.transpose();
                let (f_bar, w) = spectral_vjp(&svd, &g, &jac, &(tau_bar * f));
                let mu_bar: f64 = (0..3).map(|i| w[i] * 2.0 * eps[i] / s[i]).sum();
                let lam_bar: f64 = (0..3).map(|i| w[i] * tr / s[i]).sum();
                self.add_lame_grad(mu_bar, lam_bar, param_grad);
                Ok(f_bar + tau_bar.transpose() * gm)
            }
        }
    }

    fn plastic_vjp(&self, f_trial: &Mat3, out_bar: &Mat3, param_grad: &mut [f64]) -> Result<Mat3> {
        match self.env {
            Environment::Jello => Ok(*out_bar),
            Environment::Water => {
                let j = det3(f_trial);
                if !(j > 0.0) {
                    return Err(Error::InvalidDeformation(format!("fluid return needs det > 0, got {j:e}")));
                }
                Ok(cofactor3(f_trial) * (out_bar.trace() / (3.0 * j.cbrt().powi(2))))
            }
            Environment::Sand => {
                let p = self.params.lame();
                let theta = self.params.friction_angle;
                let alpha = friction_alpha(theta);
                let split = HenckySplit::new(f_trial)?;
                let (branch, k) = dp_branch(&split, &p, alpha);
                match branch {
                    DpBranch::Tension => Ok(polar3_adjoint(&split.svd, out_bar)),
                    DpBranch::Elastic => Ok(*out_bar),
                    DpBranch::Project => {
                        let (h, dh) = dp_projection(&split, k);
                        let (_, g, jac) = split.exp_map(&h, &dh);
                        let (f_bar, w) = spectral_vjp(&split.svd, &g, &jac, out_bar);
                        if self.trainable {
                            // ∂Hᵢ/∂k = −tr·dᵢ
                            let k_bar: f64 = (0..3).map(|i| w[i] * g[i] * (-split.trace * split.dir[i])).sum();
                            let two_mu = 2.0 * p.mu;
                            let mu_bar = k_bar * (-3.0 * alpha * p.lam / (two_mu * p.mu));
                            let lam_bar = k_bar * (3.0 * alpha / two_mu);
                            let alpha_bar = k_bar * (3.0 * p.lam + two_mu) / two_mu;
                            self.add_lame_grad(mu_bar, lam_bar, param_grad);
                            param_grad[2] += alpha_bar * friction_alpha_derivative(theta);
                        }
                        Ok(f_bar)
                    }
                }
            }
            Environment::Plasticine => {
                let p = self.params.lame();
                let split = HenckySplit::new(f_trial)?;
                let c = self.params.yield_stress / (2.0 * p.mu);
                if split.dev_norm - c <= 0.0 {
                    return Ok(*out_bar);
                }
                let (h, dh) = vm_projection(&split, c);
                let (_, g, jac) = split.exp_map(&h, &dh);
                let (f_bar, w) = spectral_vjp(&split.svd, &g, &jac, out_bar);
                if self.trainable {
                    let c_bar: f64 = (0..3).map(|i| w[i] * g[i] * split.dir[i]).sum();
                    self.add_lame_grad(-c_bar * c / p.mu, 0.0, param_grad);
                    param_grad[2] += c_bar / (2.0 * p.mu);
                }
                Ok(f_bar)
            }
        }
    }
}

/// Zero stress and identity return; free ballistic motion.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullLaw;

impl ConstitutiveLaw for NullLaw {
    fn stress_measure(&self) -> StressMeasure {
        StressMeasure::Kirchhoff
    }

    fn elastic(&self, _f: &Mat3) -> Result<Mat3> {
        Ok(Mat3::zeros())
    }

    fn plastic(&self, f_trial: &Mat3) -> Result<Mat3> {
        Ok(*f_trial)
    }

    fn kirchhoff_vjp(&self, _f: &Mat3, _tau_bar: &Mat3, _param_grad: &mut [f64]) -> Result<Mat3> {
        Ok(Mat3::zeros())
    }

    fn plastic_vjp(&self, _f_trial: &Mat3, out_bar: &Mat3, _param_grad: &mut [f64]) -> Result<Mat3> {
        Ok(*out_bar)
    }
}
