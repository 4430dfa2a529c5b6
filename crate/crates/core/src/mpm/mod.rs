//! MLS-MPM forward simulator with quadratic B-spline kernels and APIC
//! affine velocities.
//!
//! The background grid covers `[0, domain_size]³` with `grid_resolution`
//! cells per axis plus a two-node halo so every particle within one cell
//! of the domain keeps a full 3×3×3 stencil.

pub(crate) mod grid;
pub(crate) mod kernel;
pub(crate) mod transfer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg3::{Mat3, Vec3};

pub use grid::{apply_boundary, Grid};
pub use kernel::Stencil;
pub use transfer::{g2p, grid_update, p2g, run, step, GatherOutput, Recording};

/// Free-slip plane: nodes with `(x − point)·normal ≤ 0` lose their velocity
/// component into the plane. `normal` points into the free side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl Plane {
    pub fn unit_normal(&self) -> Vec3 {
        Vec3::from(self.normal).normalize()
    }
}

/// At most this many extra planes (the boundary mask packs them in a byte).
pub const MAX_PLANES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Time step, s.
    pub dt: f64,
    /// m/s², z up.
    pub gravity: [f64; 3],
    /// Edge of the cubic domain, m.
    pub domain_size: f64,
    pub grid_resolution: usize,
    pub boundary_margin_cells: usize,
    pub planes: Vec<Plane>,
    /// Fixed-order reductions; reruns are bit-identical for any thread count.
    pub deterministic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 5e-4,
            gravity: [0.0, 0.0, -9.8],
            domain_size: 1.0,
            grid_resolution: 20,
            boundary_margin_cells: 3,
            planes: Vec::new(),
            deterministic: true,
        }
    }
}

impl SimConfig {
    pub fn dx(&self) -> f64 {
        self.domain_size / self.grid_resolution as f64
    }

    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.domain_size > 0.0) {
            return bad(format!("domain_size must be positive, got {}", self.domain_size));
        }
        if self.grid_resolution < 2 {
            return bad(format!("grid_resolution must be at least 2, got {}", self.grid_resolution));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return bad("gravity must be finite".into());
        }
        if self.planes.len() > MAX_PLANES {
            return bad(format!("at most {MAX_PLANES} planes supported, got {}", self.planes.len()));
        }
        for p in &self.planes {
            let n = Vec3::from(p.normal).norm();
            if !(n > 0.0 && n.is_finite()) || p.point.iter().any(|x| !x.is_finite()) {
                return bad(format!("invalid plane {p:?}"));
            }
        }
        Ok(())
    }
}

/// Dynamic per-particle state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    /// Elastic deformation gradient.
    pub f: Vec<Mat3>,
    /// APIC affine velocity matrix, 1/s.
    pub c: Vec<Mat3>,
}

impl ParticleState {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Undeformed state at rest.
    pub fn at_rest(x: Vec<Vec3>) -> Self {
        let n = x.len();
        ParticleState { x, v: vec![Vec3::zeros(); n], f: vec![Mat3::identity(); n], c: vec![Mat3::zeros(); n] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|a| a.iter().all(|x| x.is_finite()))
            && self.f.iter().chain(&self.c).all(|m| m.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particles {
    pub state: ParticleState,
    /// kg
    pub mass: Vec<f64>,
    /// m³
    pub rest_volume: Vec<f64>,
    /// Index into the law slice passed to the simulator.
    pub material: Vec<usize>,
}

impl Particles {
    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn validate(&self, cfg: &SimConfig, num_laws: usize) -> Result<()> {
        let n = self.len();
        let s = &self.state;
        if [s.v.len(), s.f.len(), s.c.len(), self.mass.len(), self.rest_volume.len(), self.material.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::ShapeMismatch("particle arrays have inconsistent lengths".into()));
        }
        if self.mass.iter().chain(&self.rest_volume).any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config("particle masses and rest volumes must be positive".into()));
        }
        if let Some(m) = self.material.iter().find(|&&m| m >= num_laws) {
            return Err(Error::Config(format!("material id {m} but only {num_laws} laws")));
        }
        if !s.is_finite() {
            return Err(Error::Config("non-finite particle state".into()));
        }
        let l = cfg.domain_size;
        if let Some(p) = s.x.iter().find(|p| p.iter().any(|&c| !(0.0..=l).contains(&c))) {
            return Err(Error::Config(format!("particle at {:?} lies outside the domain", p.as_slice())));
        }
        Ok(())
    }
}
