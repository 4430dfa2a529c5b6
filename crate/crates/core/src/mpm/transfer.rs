use rayon::prelude::*;

use super::grid::{apply_boundary, boundary_normals};
use super::kernel::{offsets, Stencil};
use super::{Grid, ParticleState, Particles, SimConfig};
use crate::error::{Error, Result};
use crate::law::ConstitutiveLaw;
use crate::linalg3::{Mat3, Vec3};
use crate::trajectory::Trajectory;

/// Particles per scatter chunk in deterministic mode.
const SCATTER_CHUNK: usize = 4096;

fn check_positions(x: &[Vec3], cfg: &SimConfig) -> Result<()> {
    let dx = cfg.dx();
    let (lo, hi) = (-dx, cfg.domain_size + dx);
    match x.iter().position(|p| p.iter().any(|&c| !(lo..=hi).contains(&c))) {
        None => Ok(()),
        Some(i) => Err(Error::SimulationDiverged {
            step: 0,
            reason: format!("particle {i} at {:?} left the grid", x[i].as_slice()),
        }),
    }
}

pub(crate) fn compute_stencils(x: &[Vec3], cfg: &SimConfig) -> Result<Vec<Stencil>> {
    check_positions(x, cfg)?;
    let inv_dx = 1.0 / cfg.dx();
    Ok(x.par_iter().map(|p| Stencil::new(p, inv_dx)).collect())
}

pub(crate) fn kirchhoff_all(state: &ParticleState, material: &[usize], laws: &[&dyn ConstitutiveLaw]) -> Result<Vec<Mat3>> {
    state.f.par_iter().zip(material).map(|(f, &m)| laws[m].kirchhoff(f)).collect()
}

type GridBuffers = (Vec<f64>, Vec<Vec3>);

fn scatter_range(grid: &Grid, stencils: &[Stencil], mass: &[f64], v: &[Vec3], affine: &[Mat3], range: std::ops::Range<usize>, out: &mut GridBuffers) {
    let dx = grid.dx;
    for p in range {
        let s = &stencils[p];
        let mv = mass[p] * v[p];
        for o in offsets() {
            let idx = grid.index([s.base[0] + o[0] as i32, s.base[1] + o[1] as i32, s.base[2] + o[2] as i32]);
            let w = s.weight(o);
            out.0[idx] += w * mass[p];
            out.1[idx] += w * (mv + affine[p] * s.dpos(o, dx));
        }
    }
}

fn add_buffers(mut a: GridBuffers, b: GridBuffers) -> GridBuffers {
    for (x, y) in a.0.iter_mut().zip(&b.0) {
        *x += y;
    }
    for (x, y) in a.1.iter_mut().zip(&b.1) {
        *x += y;
    }
    a
}

fn scatter(grid: &mut Grid, stencils: &[Stencil], mass: &[f64], v: &[Vec3], affine: &[Mat3], deterministic: bool) {
    let n = stencils.len();
    let empty = || (vec![0.0; grid.len()], vec![Vec3::zeros(); grid.len()]);
    let g: &Grid = grid;
    let (m, mom) = if deterministic {
        // Fixed chunk boundaries and a fixed summation order keep the result
        // independent of the thread count.
        let starts: Vec<usize> = (0..n).step_by(SCATTER_CHUNK).collect();
        let parts: Vec<GridBuffers> = starts
            .par_iter()
            .map(|&s| {
                let mut buf = empty();
                scatter_range(g, stencils, mass, v, affine, s..(s + SCATTER_CHUNK).min(n), &mut buf);
                buf
            })
            .collect();
        parts.into_iter().reduce(add_buffers).unwrap_or_else(empty)
    } else {
        (0..n)
            .into_par_iter()
            .fold(empty, |mut buf, p| {
                scatter_range(g, stencils, mass, v, affine, p..p + 1, &mut buf);
                buf
            })
            .reduce(empty, add_buffers)
    };
    grid.mass = m;
    grid.momentum = mom;
    grid.velocity.fill(Vec3::zeros());
}

/// APIC affine term with the fused MLS stress force,
/// `A = −Δt·V⁰·(4/Δx²)·τ + m·C`.
pub(crate) fn affine_matrix(tau: &Mat3, c: &Mat3, mass: f64, rest_volume: f64, dt: f64, inv_dx: f64) -> Mat3 {
    -dt * rest_volume * 4.0 * inv_dx * inv_dx * tau + mass * c
}

/// Particle-to-grid transfer of mass and momentum including stress forces.
pub fn p2g(particles: &Particles, laws: &[&dyn ConstitutiveLaw], cfg: &SimConfig, grid: &mut Grid) -> Result<()> {
    let stencils = compute_stencils(&particles.state.x, cfg)?;
    let tau = kirchhoff_all(&particles.state, &particles.material, laws)?;
    p2g_with(&particles.state, &particles.mass, &particles.rest_volume, &stencils, &tau, cfg, grid);
    Ok(())
}

/// Returns the per-particle affine matrices used in the scatter.
pub(crate) fn p2g_with(
    s: &ParticleState,
    mass: &[f64],
    rest_volume: &[f64],
    stencils: &[Stencil],
    tau: &[Mat3],
    cfg: &SimConfig,
    grid: &mut Grid,
) -> Vec<Mat3> {
    let inv_dx = 1.0 / cfg.dx();
    let affine: Vec<Mat3> = (0..s.len())
        .into_par_iter()
        .map(|p| affine_matrix(&tau[p], &s.c[p], mass[p], rest_volume[p], cfg.dt, inv_dx))
        .collect();
    scatter(grid, stencils, mass, &s.v, &affine, cfg.deterministic);
    affine
}

/// Explicit grid velocity update with gravity and free-slip boundaries.
/// Massless nodes keep zero velocity.
pub fn grid_update(grid: &mut Grid, cfg: &SimConfig) {
    let dt_g = cfg.dt * cfg.gravity_vec();
    let dx = grid.dx;
    let g: &Grid = grid;
    let velocity: Vec<Vec3> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let m = g.mass[idx];
            if m <= 0.0 {
                return Vec3::zeros();
            }
            let mut v = g.momentum[idx] / m + dt_g;
            let (normals, count) = boundary_normals(cfg, g.node(idx), dx);
            for n in &normals[..count] {
                v = apply_boundary(&v, n);
            }
            v
        })
        .collect();
    grid.velocity = velocity;
}

/// Result of the grid-to-particle gather.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherOutput {
    pub v: Vec<Vec3>,
    pub c: Vec<Mat3>,
    pub f_trial: Vec<Mat3>,
}

pub(crate) fn gather_one(grid: &Grid, s: &Stencil, f: &Mat3, dt: f64) -> (Vec3, Mat3, Mat3) {
    let dx = grid.dx;
    let inv_dx = 1.0 / dx;
    let mut v = Vec3::zeros();
    let mut b = Mat3::zeros();
    for o in offsets() {
        let idx = grid.index([s.base[0] + o[0] as i32, s.base[1] + o[1] as i32, s.base[2] + o[2] as i32]);
        let wv = s.weight(o) * grid.velocity[idx];
        v += wv;
        b += wv * s.dpos(o, dx).transpose();
    }
    let c = 4.0 * inv_dx * inv_dx * b;
    let f_trial = (Mat3::identity() + dt * c) * f;
    (v, c, f_trial)
}

/// Grid-to-particle gather of velocity, affine matrix and trial
/// deformation gradient.
pub fn g2p(grid: &Grid, particles: &Particles, cfg: &SimConfig) -> Result<GatherOutput> {
    let stencils = compute_stencils(&particles.state.x, cfg)?;
    Ok(g2p_with(grid, &stencils, &particles.state.f, cfg.dt))
}

pub(crate) fn g2p_with(grid: &Grid, stencils: &[Stencil], f: &[Mat3], dt: f64) -> GatherOutput {
    let rows: Vec<(Vec3, Mat3, Mat3)> = stencils.par_iter().zip(f).map(|(s, f)| gather_one(grid, s, f, dt)).collect();
    let mut out = GatherOutput { v: Vec::with_capacity(rows.len()), c: Vec::with_capacity(rows.len()), f_trial: Vec::with_capacity(rows.len()) };
    for (v, c, f) in rows {
        out.v.push(v);
        out.c.push(c);
        out.f_trial.push(f);
    }
    out
}

/// One MPM step: P2G, grid update, G2P, plastic return, advection.
pub fn step(particles: &mut Particles, laws: &[&dyn ConstitutiveLaw], cfg: &SimConfig, grid: &mut Grid) -> Result<()> {
    let stencils = compute_stencils(&particles.state.x, cfg)?;
    let tau = kirchhoff_all(&particles.state, &particles.material, laws)?;
    p2g_with(&particles.state, &particles.mass, &particles.rest_volume, &stencils, &tau, cfg, grid);
    grid_update(grid, cfg);
    let gathered = g2p_with(grid, &stencils, &particles.state.f, cfg.dt);
    let f_new: Vec<Mat3> = gathered
        .f_trial
        .par_iter()
        .zip(&particles.material)
        .map(|(f, &m)| laws[m].plastic(f))
        .collect::<Result<_>>()?;
    let s = &mut particles.state;
    for (x, v) in s.x.iter_mut().zip(&gathered.v) {
        *x += cfg.dt * v;
    }
    s.v = gathered.v;
    s.c = gathered.c;
    s.f = f_new;
    if !s.is_finite() {
        return Err(Error::SimulationDiverged { step: 0, reason: "non-finite particle state".into() });
    }
    check_positions(&s.x, cfg)
}

/// What [`run`] keeps for each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    Positions,
    FullState,
}

pub(crate) fn with_step(err: Error, n: usize) -> Error {
    match err {
        Error::SimulationDiverged { reason, .. } => Error::SimulationDiverged { step: n, reason },
        Error::InvalidDeformation(reason) => Error::SimulationDiverged { step: n, reason },
        e => e,
    }
}

/// Simulates `steps` steps; frame 0 is the initial state.
pub fn run(particles: &Particles, laws: &[&dyn ConstitutiveLaw], cfg: &SimConfig, steps: usize, recording: Recording) -> Result<Trajectory> {
    cfg.validate()?;
    particles.validate(cfg, laws.len())?;
    let mut p = particles.clone();
    let mut grid = Grid::new(cfg);
    let mut traj = Trajectory::new(cfg.dt);
    let record = |traj: &mut Trajectory, s: &ParticleState| match recording {
        Recording::Positions => traj.push_positions(s.x.clone()),
        Recording::FullState => traj.push_full(s.clone()),
    };
    record(&mut traj, &p.state);
    let mut warned = false;
    for n in 0..steps {
        step(&mut p, laws, cfg, &mut grid).map_err(|e| with_step(e, n))?;
        if !warned {
            let vmax = p.state.v.iter().map(|v| v.norm()).fold(0.0, f64::max);
            if cfg.dt * vmax >= cfg.dx() {
                log::warn!("CFL violated at step {n}: dt*|v|max = {:.3e} >= dx = {:.3e}", cfg.dt * vmax, cfg.dx());
                warned = true;
            }
        }
        record(&mut traj, &p.state);
    }
    Ok(traj)
}
