//! Reverse-mode differentiation through MPM rollouts.
//!
//! The forward pass stores the full particle state at every step. The
//! backward pass recomputes each step's grid and stencils from its stored
//! state (so branch decisions match the forward pass) and propagates
//! adjoints through advection, the plastic return, G2P, the grid update
//! with its boundary projections, P2G and the elastic law.
//!
//! Particle masses and rest volumes are treated as constants.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::law::ConstitutiveLaw;
use crate::linalg3::{Mat3, Vec3};
use crate::mpm::grid::{apply_boundary, boundary_normals};
use crate::mpm::kernel::{offsets, Stencil};
use crate::mpm::transfer::{compute_stencils, g2p_with, grid_update, kirchhoff_all, p2g_with, with_step};
use crate::mpm::{run, Grid, ParticleState, Particles, Recording, SimConfig};
use crate::trajectory::Trajectory;

/// Particles per chunk when reducing parameter gradients; fixed so the
/// summation order does not depend on the thread count.
const REDUCE_CHUNK: usize = 256;

/// One gradient buffer per law, sized by [`ConstitutiveLaw::num_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub grads: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(laws: &[&dyn ConstitutiveLaw]) -> Self {
        GradAccumulator { grads: laws.iter().map(|l| vec![0.0; l.num_params()]).collect() }
    }

    fn zeros_like(&self) -> Self {
        GradAccumulator { grads: self.grads.iter().map(|g| vec![0.0; g.len()]).collect() }
    }

    fn add(&mut self, other: &GradAccumulator) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(acc: &mut GradAccumulator, max_norm: f64) -> f64 {
    let norm = acc.norm();
    if norm > max_norm {
        acc.scale(max_norm / norm);
    }
    norm
}

/// Forward states `s_0..=s_T` of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub trajectory: Trajectory,
}

impl Tape {
    pub fn num_steps(&self) -> usize {
        self.trajectory.num_steps()
    }
}

/// Runs the simulator keeping everything the backward pass needs.
pub fn record_forward(particles: &Particles, laws: &[&dyn ConstitutiveLaw], cfg: &SimConfig, steps: usize) -> Result<Tape> {
    Ok(Tape { trajectory: run(particles, laws, cfg, steps, Recording::FullState)? })
}

/// Adjoint of a particle state; unused fields may be left empty.
pub type StateGrad = ParticleState;

fn zero_grad(n: usize) -> StateGrad {
    ParticleState { x: vec![Vec3::zeros(); n], v: vec![Vec3::zeros(); n], f: vec![Mat3::zeros(); n], c: vec![Mat3::zeros(); n] }
}

fn add_frame_grad(adj: &mut StateGrad, g: &StateGrad) {
    for (a, b) in adj.x.iter_mut().zip(&g.x) {
        *a += b;
    }
    for (a, b) in adj.v.iter_mut().zip(&g.v) {
        *a += b;
    }
    for (a, b) in adj.f.iter_mut().zip(&g.f) {
        *a += b;
    }
    for (a, b) in adj.c.iter_mut().zip(&g.c) {
        *a += b;
    }
}

/// Backpropagates `∂L/∂s_n` for every frame (`frame_grads[n]`, empty fields
/// meaning zero) to the parameters of every law and to the initial state.
///
/// `particles` supplies masses, rest volumes and material ids; its state is
/// ignored in favour of the tape.
pub fn backward(
    tape: &Tape,
    particles: &Particles,
    laws: &[&dyn ConstitutiveLaw],
    cfg: &SimConfig,
    frame_grads: &[StateGrad],
) -> Result<(GradAccumulator, StateGrad)> {
    let frames = &tape.trajectory.frames;
    if frame_grads.len() != frames.len() {
        return Err(Error::ShapeMismatch(format!("{} frame gradients for {} frames", frame_grads.len(), frames.len())));
    }
    let n = particles.len();
    let mut acc = GradAccumulator::new(laws);
    let mut adj = zero_grad(n);
    add_frame_grad(&mut adj, &frame_grads[frames.len() - 1]);
    for step in (0..tape.num_steps()).rev() {
        adj = backward_step(&frames[step], &adj, particles, laws, cfg, &mut acc).map_err(|e| with_step(e, step))?;
        add_frame_grad(&mut adj, &frame_grads[step]);
        if !acc.is_finite() || !adj.is_finite() {
            return Err(Error::GradientDiverged { step });
        }
    }
    Ok((acc, adj))
}

/// Maps `f` over particles in fixed chunks, each with its own gradient
/// buffer, then sums the buffers in chunk order.
fn map_with_grads<T: Send>(
    n: usize,
    template: &GradAccumulator,
    f: impl Fn(usize, &mut GradAccumulator) -> Result<T> + Sync,
) -> Result<(Vec<T>, GradAccumulator)> {
    let starts: Vec<usize> = (0..n).step_by(REDUCE_CHUNK).collect();
    let parts: Vec<(Vec<T>, GradAccumulator)> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = template.zeros_like();
            let out = (s..(s + REDUCE_CHUNK).min(n)).map(|p| f(p, &mut acc)).collect::<Result<Vec<T>>>()?;
            Ok((out, acc))
        })
        .collect::<Result<_>>()?;
    let mut total = template.zeros_like();
    let mut out = Vec::with_capacity(n);
    for (chunk, acc) in parts {
        out.extend(chunk);
        total.add(&acc);
    }
    Ok((out, total))
}

fn node_index(grid: &Grid, s: &Stencil, o: [usize; 3]) -> usize {
    grid.index([s.base[0] + o[0] as i32, s.base[1] + o[1] as i32, s.base[2] + o[2] as i32])
}

/// Sums per-particle node contributions into a grid-sized buffer in fixed
/// chunk order.
fn scatter_grid_adjoint(grid: &Grid, n: usize, f: impl Fn(usize, &mut [Vec3]) + Sync) -> Vec<Vec3> {
    let starts: Vec<usize> = (0..n).step_by(4096).collect();
    let parts: Vec<Vec<Vec3>> = starts
        .par_iter()
        .map(|&s| {
            let mut buf = vec![Vec3::zeros(); grid.len()];
            for p in s..(s + 4096).min(n) {
                f(p, &mut buf);
            }
            buf
        })
        .collect();
    parts.into_iter().reduce(|mut a, b| {
        for (x, y) in a.iter_mut().zip(&b) {
            *x += y;
        }
        a
    }).unwrap_or_else(|| vec![Vec3::zeros(); grid.len()])
}

/// Per-particle adjoints after the plastic return and F_trial product.
struct PostGather {
    x_bar: Vec3,
    v_bar: Vec3,
    c_bar: Mat3,
    f_bar: Mat3,
}

fn backward_step(
    s: &ParticleState,
    adj: &StateGrad,
    particles: &Particles,
    laws: &[&dyn ConstitutiveLaw],
    cfg: &SimConfig,
    acc: &mut GradAccumulator,
) -> Result<StateGrad> {
    let n = s.len();
    let dt = cfg.dt;
    let dx = cfg.dx();
    let inv_dx = 1.0 / dx;
    let d = 4.0 * inv_dx * inv_dx;
    let material = &particles.material;

    // Recompute the forward step from its checkpoint.
    let stencils = compute_stencils(&s.x, cfg)?;
    let tau = kirchhoff_all(s, material, laws)?;
    let mut grid = Grid::new(cfg);
    let affine = p2g_with(s, &particles.mass, &particles.rest_volume, &stencils, &tau, cfg, &mut grid);
    grid_update(&mut grid, cfg);
    let gathered = g2p_with(&grid, &stencils, &s.f, dt);

    // Advection x' = x + dt·v', plastic return, F_trial = (I + dt·C')·F.
    let (post, plastic_grads) = map_with_grads(n, acc, |p, pg| {
        let f_trial_bar = laws[material[p]].plastic_vjp(&gathered.f_trial[p], &adj.f[p], &mut pg.grads[material[p]])?;
        Ok(PostGather {
            x_bar: adj.x[p],
            v_bar: adj.v[p] + dt * adj.x[p],
            c_bar: adj.c[p] + dt * f_trial_bar * s.f[p].transpose(),
            f_bar: (Mat3::identity() + dt * gathered.c[p]).transpose() * f_trial_bar,
        })
    })?;
    acc.add(&plastic_grads);

    // G2P: v' = Σ w·v_b, C' = D·Σ w·v_b·dposᵀ.
    let grid_v_bar = scatter_grid_adjoint(&grid, n, |p, buf| {
        let st = &stencils[p];
        let q = &post[p];
        for o in offsets() {
            buf[node_index(&grid, st, o)] += st.weight(o) * (q.v_bar + d * q.c_bar * st.dpos(o, dx));
        }
    });
    let x_bar_gather: Vec<Vec3> = (0..n)
        .into_par_iter()
        .map(|p| {
            let st = &stencils[p];
            let q = &post[p];
            let mut x_bar = q.x_bar;
            for o in offsets() {
                let vb = grid.velocity[node_index(&grid, st, o)];
                let dpos = st.dpos(o, dx);
                let w_bar = q.v_bar.dot(&vb) + d * vb.dot(&(q.c_bar * dpos));
                x_bar += w_bar * st.weight_grad(o, inv_dx) - d * st.weight(o) * (q.c_bar.transpose() * vb);
            }
            x_bar
        })
        .collect();

    // Grid update: v = BC(mv/m + dt·g).
    let dt_g = dt * cfg.gravity_vec();
    let (mom_bar, mass_bar): (Vec<Vec3>, Vec<f64>) = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let m = grid.mass[idx];
            if m <= 0.0 {
                return (Vec3::zeros(), 0.0);
            }
            let v_free = grid.momentum[idx] / m;
            let (normals, count) = boundary_normals(cfg, grid.node(idx), dx);
            let mut active = [false; 8];
            let mut v = v_free + dt_g;
            for k in 0..count {
                active[k] = v.dot(&normals[k]) < 0.0;
                v = apply_boundary(&v, &normals[k]);
            }
            let mut g = grid_v_bar[idx];
            for k in (0..count).rev() {
                if active[k] {
                    g -= g.dot(&normals[k]) * normals[k];
                }
            }
            (g / m, -g.dot(&v_free) / m)
        })
        .unzip();

    // P2G: m_b = Σ w·m, mv_b = Σ w·(m·v + A·dpos), A = −dt·V⁰·D·τ + m·C.
    let (out, law_grads) = map_with_grads(n, acc, |p, pg| {
        let st = &stencils[p];
        let m = particles.mass[p];
        let a = &affine[p];
        let mv = m * s.v[p];
        let mut x_bar = x_bar_gather[p];
        let mut v_bar = Vec3::zeros();
        let mut a_bar = Mat3::zeros();
        for o in offsets() {
            let idx = node_index(&grid, st, o);
            let w = st.weight(o);
            let dpos = st.dpos(o, dx);
            let mb = mom_bar[idx];
            let w_bar = mass_bar[idx] * m + mb.dot(&(mv + a * dpos));
            v_bar += w * m * mb;
            a_bar += w * mb * dpos.transpose();
            x_bar += w_bar * st.weight_grad(o, inv_dx) - w * (a.transpose() * mb);
        }
        let tau_bar = -dt * particles.rest_volume[p] * d * a_bar;
        let f_bar = post[p].f_bar + laws[material[p]].kirchhoff_vjp(&s.f[p], &tau_bar, &mut pg.grads[material[p]])?;
        Ok((x_bar, v_bar, f_bar, m * a_bar))
    })?;
    acc.add(&law_grads);

    let mut prev = ParticleState::default();
    for (x, v, f, c) in out {
        prev.x.push(x);
        prev.v.push(v);
        prev.f.push(f);
        prev.c.push(c);
    }
    Ok(prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg3::test_util::rng;
    use crate::materials::{make_environment_law, Environment, MaterialParams};
    use crate::mpm::Plane;
    use crate::neural::{init_params, NeuralLaw};
    use rand::Rng;

    fn block(g: &mut impl Rng, center: Vec3, n_side: usize, spacing: f64) -> Particles {
        let mut x = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                for k in 0..n_side {
                    let jitter = Vec3::new(g.random_range(-0.2..0.2), g.random_range(-0.2..0.2), g.random_range(-0.2..0.2));
                    let ijk = Vec3::new(i as f64, j as f64, k as f64) - Vec3::repeat((n_side - 1) as f64 / 2.0);
                    x.push(center + (ijk + jitter) * spacing);
                }
            }
        }
        let n = x.len();
        let vol = spacing.powi(3);
        let mut state = ParticleState::at_rest(x);
        for v in &mut state.v {
            *v = Vec3::new(0.3, -0.2, -1.0) + Vec3::new(g.random_range(-0.2..0.2), g.random_range(-0.2..0.2), g.random_range(-0.2..0.2));
        }
        Particles { state, mass: vec![1e3 * vol; n], rest_volume: vec![vol; n], material: vec![0; n] }
    }

    /// Loss `Σ_n Σ_p (a·x + b·v)` with fixed random weights, plus its frame gradients.
    struct LinearLoss {
        wx: Vec<Vec<Vec3>>,
        wv: Vec<Vec<Vec3>>,
    }

    impl LinearLoss {
        fn new(g: &mut impl Rng, frames: usize, n: usize) -> Self {
            let mut r = || (0..n).map(|_| Vec3::new(g.random_range(-1.0..1.0), g.random_range(-1.0..1.0), g.random_range(-1.0..1.0))).collect();
            let wx = (0..frames).map(|_| r()).collect();
            let wv = (0..frames).map(|_| r()).collect();
            LinearLoss { wx, wv }
        }

        fn value(&self, t: &Trajectory) -> f64 {
            let mut s = 0.0;
            for (n, f) in t.frames.iter().enumerate() {
                for p in 0..f.len() {
                    s += self.wx[n][p].dot(&f.x[p]) + self.wv[n][p].dot(&f.v[p]);
                }
            }
            s
        }

        fn grads(&self) -> Vec<StateGrad> {
            self.wx.iter().zip(&self.wv).map(|(x, v)| ParticleState { x: x.clone(), v: v.clone(), ..Default::default() }).collect()
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    fn check_initial_state_grad(law: &dyn ConstitutiveLaw, cfg: &SimConfig, p: &Particles, steps: usize, tol: f64) {
        let mut g = rng(61);
        let loss = LinearLoss::new(&mut g, steps + 1, p.len());
        let laws = [law];
        let tape = record_forward(p, &laws, cfg, steps).unwrap();
        let (_, init) = backward(&tape, p, &laws, cfg, &loss.grads()).unwrap();
        let eval = |q: &Particles| loss.value(&run(q, &laws, cfg, steps, Recording::FullState).unwrap());
        let h = 1e-7;
        for i in [0, p.len() / 2, p.len() - 1] {
            for a in 0..3 {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.state.x[i][a] += h;
                minus.state.x[i][a] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(rel(fd, init.x[i][a]) < tol, "x[{i}][{a}]: fd {fd} vs {}", init.x[i][a]);
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.state.v[i][a] += h;
                minus.state.v[i][a] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(rel(fd, init.v[i][a]) < tol, "v[{i}][{a}]: fd {fd} vs {}", init.v[i][a]);
            }
        }
    }

    #[test]
    fn initial_state_gradient_jello() {
        let cfg = SimConfig::default();
        let law = make_environment_law(Environment::Jello, MaterialParams::default());
        let p = block(&mut rng(62), Vec3::new(0.5, 0.5, 0.5), 2, 0.03);
        check_initial_state_grad(&law, &cfg, &p, 8, 1e-5);
    }

    #[test]
    fn initial_state_gradient_through_floor_contact() {
        let cfg = SimConfig::default();
        let law = make_environment_law(Environment::Water, MaterialParams::default());
        // Starts inside the floor margin so the boundary projection is active.
        let p = block(&mut rng(63), Vec3::new(0.5, 0.5, 0.17), 2, 0.03);
        check_initial_state_grad(&law, &cfg, &p, 6, 1e-5);
    }

    #[test]
    fn initial_state_gradient_with_inclined_plane() {
        let mut cfg = SimConfig::default();
        let s = 30f64.to_radians();
        cfg.planes.push(Plane { point: [0.5, 0.5, 0.45], normal: [-s.sin(), 0.0, s.cos()] });
        let law = make_environment_law(Environment::Plasticine, MaterialParams::default());
        let p = block(&mut rng(64), Vec3::new(0.5, 0.5, 0.47), 2, 0.03);
        check_initial_state_grad(&law, &cfg, &p, 6, 1e-5);
    }

    #[test]
    fn parameter_gradient_analytic_laws() {
        let cfg = SimConfig::default();
        for env in Environment::ALL {
            let law = make_environment_law(env, MaterialParams::default()).trainable();
            let p = block(&mut rng(65), Vec3::new(0.5, 0.5, 0.5), 2, 0.03);
            let steps = 8;
            let mut g = rng(66);
            let loss = LinearLoss::new(&mut g, steps + 1, p.len());
            let laws: [&dyn ConstitutiveLaw; 1] = [&law];
            let tape = record_forward(&p, &laws, &cfg, steps).unwrap();
            let (acc, _) = backward(&tape, &p, &laws, &cfg, &loss.grads()).unwrap();
            let base = law.param_values();
            for k in 0..base.len() {
                let eval = |val: f64| {
                    let mut l = law.clone();
                    let mut v = base.clone();
                    v[k] = val;
                    l.set_param_values(&v).unwrap();
                    loss.value(&run(&p, &[&l], &cfg, steps, Recording::FullState).unwrap())
                };
                let h = 1e-5 * base[k];
                let fd = (eval(base[k] + h) - eval(base[k] - h)) / (2.0 * h);
                let an = acc.grads[0][k];
                assert!(rel(fd, an) < 1e-4 || (fd - an).abs() < 1e-12, "{env:?} param {k}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn parameter_gradient_neural_law() {
        let cfg = SimConfig::default();
        let mut params = init_params(67);
        params.stress_scale = 1e3;
        let law = NeuralLaw::new(params);
        let p = block(&mut rng(68), Vec3::new(0.5, 0.5, 0.5), 2, 0.03);
        let steps = 8;
        let mut g = rng(69);
        let loss = LinearLoss::new(&mut g, steps + 1, p.len());
        let laws: [&dyn ConstitutiveLaw; 1] = [&law];
        let tape = record_forward(&p, &laws, &cfg, steps).unwrap();
        let (acc, _) = backward(&tape, &p, &laws, &cfg, &loss.grads()).unwrap();
        let base = law.params.to_flat();
        let dir: Vec<f64> = (0..base.len()).map(|_| g.random_range(-1.0..1.0)).collect();
        let eval = |t: f64| {
            let mut l = law.clone();
            let v: Vec<f64> = base.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            l.params.set_flat(&v).unwrap();
            loss.value(&run(&p, &[&l], &cfg, steps, Recording::FullState).unwrap())
        };
        let h = 1e-6;
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an: f64 = acc.grads[0].iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(rel(fd, an) < 1e-5, "fd {fd} vs {an}");
    }

    #[test]
    fn backward_is_deterministic_across_thread_counts() {
        let cfg = SimConfig::default();
        let law = NeuralLaw::new(init_params(70));
        let p = block(&mut rng(71), Vec3::new(0.5, 0.5, 0.5), 8, 0.012);
        let laws: [&dyn ConstitutiveLaw; 1] = [&law];
        let loss = LinearLoss::new(&mut rng(72), 4, p.len());
        let tape = record_forward(&p, &laws, &cfg, 3).unwrap();
        let a = backward(&tape, &p, &laws, &cfg, &loss.grads()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| backward(&tape, &p, &laws, &cfg, &loss.grads()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn clipping() {
        let mut acc = GradAccumulator { grads: vec![vec![3.0], vec![4.0]] };
        assert_eq!(clip_grad_norm(&mut acc, 10.0), 5.0);
        assert_eq!(acc.grads, vec![vec![3.0], vec![4.0]]);
        assert_eq!(clip_grad_norm(&mut acc, 1.0), 5.0);
        assert!((acc.norm() - 1.0).abs() < 1e-15);
        assert!((acc.grads[0][0] - 0.6).abs() < 1e-15);
    }
}
