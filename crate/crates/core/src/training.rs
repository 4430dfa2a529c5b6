//! Learning neural laws (and fitting analytic ones) from trajectories by
//! backpropagation through the simulator.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{backward, clip_grad_norm, record_forward, GradAccumulator, StateGrad};
use crate::error::{Error, Result};
use crate::law::ConstitutiveLaw;
use crate::linalg3::{Mat3, Vec3};
use crate::materials::{make_environment_law, Environment, MaterialParams};
use crate::mpm::{run, ParticleState, Particles, Recording, SimConfig};
use crate::neural::{MlpParams, NeuralLaw, NeuralLawParams};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_elastic: f64,
    pub lr_plastic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm per update.
    pub grad_clip: f64,
    /// Teacher-forcing window length at the first epoch, in steps.
    pub teacher_forcing_start: usize,
    /// Window length at the last epoch.
    pub teacher_forcing_end: usize,
    pub cosine_lr: bool,
    pub depth_reg_weight: f64,
    pub depth_axis: usize,
    pub seed: u64,
    /// Output scaling of the elastic network for freshly initialized laws, Pa.
    pub stress_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr_elastic: 1.0,
            lr_plastic: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.1,
            teacher_forcing_start: 25,
            teacher_forcing_end: 200,
            cosine_lr: true,
            depth_reg_weight: 0.0,
            depth_axis: 1,
            seed: 0,
            stress_scale: crate::neural::DEFAULT_STRESS_SCALE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_elastic > 0.0
            && self.lr_plastic > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip > 0.0
            && self.teacher_forcing_start >= 1
            && self.teacher_forcing_start <= self.teacher_forcing_end
            && self.depth_reg_weight >= 0.0
            && self.depth_axis < 3
            && self.stress_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration: {self:?}")))
        }
    }

    /// Teacher-forcing window length for `epoch`, clamped to `[1, steps]`.
    pub fn window_len(&self, epoch: usize, steps: usize) -> usize {
        let total = self.epochs.saturating_sub(1).max(1);
        let w = cosine_anneal(self.teacher_forcing_start as f64, self.teacher_forcing_end as f64, epoch.min(total), total).round() as usize;
        w.clamp(1, steps.max(1))
    }

    fn lr_factor(&self, epoch: usize) -> f64 {
        if self.cosine_lr {
            cosine_anneal(1.0, 0.0, epoch, self.epochs.max(1))
        } else {
            1.0
        }
    }
}

/// `value1 + (value0 − value1)·(1 + cos(π·epoch/total))/2`.
pub fn cosine_anneal(value0: f64, value1: f64, epoch: usize, total: usize) -> f64 {
    let t = if total == 0 { 1.0 } else { epoch as f64 / total as f64 };
    value1 + (value0 - value1) * (1.0 + (PI * t).cos()) / 2.0
}

fn check_shapes(sim: &Trajectory, gt: &Trajectory) -> Result<()> {
    if sim.frames.len() != gt.frames.len() || sim.num_particles() != gt.num_particles() {
        return Err(Error::ShapeMismatch(format!(
            "trajectory shapes differ: {}x{} vs {}x{}",
            sim.frames.len(),
            sim.num_particles(),
            gt.frames.len(),
            gt.num_particles()
        )));
    }
    if sim.frames.is_empty() || sim.num_particles() == 0 {
        return Err(Error::ShapeMismatch("empty trajectory".into()));
    }
    Ok(())
}

/// Mean over frames `n ≡ 0 (mod every)` and particles of `‖x − x_gt‖²`.
pub fn position_loss_every(sim: &Trajectory, gt: &Trajectory, every: usize) -> Result<f64> {
    check_shapes(sim, gt)?;
    let every = every.max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in (0..sim.frames.len()).step_by(every) {
        for (a, b) in sim.frames[n].x.iter().zip(&gt.frames[n].x) {
            sum += (a - b).norm_squared();
        }
        count += sim.num_particles();
    }
    Ok(sum / count as f64)
}

/// Mean over all frames and particles of `‖x − x_gt‖²`.
pub fn position_loss(sim: &Trajectory, gt: &Trajectory) -> Result<f64> {
    position_loss_every(sim, gt, 1)
}

fn frame_velocities(sim: &Trajectory, n: usize) -> Vec<Vec3> {
    let f = &sim.frames[n];
    if f.v.len() == f.len() {
        return f.v.clone();
    }
    // Position-only trajectories: backward differences, forward at frame 0.
    let (a, b) = if n == 0 { (0, 1.min(sim.num_steps())) } else { (n - 1, n) };
    if a == b {
        return vec![Vec3::zeros(); f.len()];
    }
    sim.frames[a].x.iter().zip(&sim.frames[b].x).map(|(p, q)| (q - p) / sim.dt).collect()
}

/// Mean over frames and particles of the squared velocity along `axis`.
pub fn depth_regularization(sim: &Trajectory, axis: usize) -> Result<f64> {
    if sim.frames.is_empty() || sim.num_particles() == 0 || axis > 2 {
        return Err(Error::ShapeMismatch("depth regularization needs a non-empty trajectory and axis < 3".into()));
    }
    let mut sum = 0.0;
    for n in 0..sim.frames.len() {
        sum += frame_velocities(sim, n).iter().map(|v| v[axis] * v[axis]).sum::<f64>();
    }
    Ok(sum / (sim.frames.len() * sim.num_particles()) as f64)
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!("adam: {} params, {} grads, {} moments", params.len(), grads.len(), state.m.len())));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Separate Adam states for the elastic and plastic networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOptimizer {
    pub elastic: AdamState,
    pub plastic: AdamState,
}

impl NeuralOptimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        let s = || AdamState::new(MlpParams::NUM_PARAMS, cfg.beta1, cfg.beta2, cfg.eps);
        NeuralOptimizer { elastic: s(), plastic: s() }
    }

    fn apply(&mut self, params: &mut NeuralLawParams, grad: &[f64], lr_elastic: f64, lr_plastic: f64) -> Result<()> {
        let mut flat = params.to_flat();
        let (fe, fp) = flat.split_at_mut(MlpParams::NUM_PARAMS);
        let (ge, gp) = grad.split_at(MlpParams::NUM_PARAMS);
        adam_step(fe, ge, &mut self.elastic, lr_elastic)?;
        adam_step(fp, gp, &mut self.plastic, lr_plastic)?;
        params.set_flat(&flat)
    }
}

/// Frame ranges `[start, end]` of the teacher-forcing windows; consecutive
/// windows share their boundary frame.
pub fn teacher_forcing_windows(steps: usize, window: usize) -> Vec<(usize, usize)> {
    let w = window.max(1);
    (0..steps).step_by(w).map(|s| (s, (s + w).min(steps))).collect()
}

fn particles_from_frame(template: &Particles, frame: &ParticleState) -> Result<Particles> {
    if frame.v.len() != frame.len() || frame.f.len() != frame.len() || frame.c.len() != frame.len() {
        return Err(Error::Config("teacher forcing needs a full-state ground-truth trajectory".into()));
    }
    if frame.len() != template.len() {
        return Err(Error::ShapeMismatch(format!("ground truth has {} particles, scenario {}", frame.len(), template.len())));
    }
    Ok(Particles { state: frame.clone(), ..template.clone() })
}

/// Loss of a simulated window against ground truth and its frame gradients.
struct WindowLoss {
    position: f64,
    depth: f64,
    grads: Vec<StateGrad>,
}

fn window_loss(sim: &Trajectory, gt: &Trajectory, depth_weight: f64, depth_axis: usize) -> Result<WindowLoss> {
    check_shapes(sim, gt)?;
    let q = sim.num_particles();
    let scale = 1.0 / (sim.frames.len() * q) as f64;
    let mut position = 0.0;
    let mut depth = 0.0;
    let mut grads = Vec::with_capacity(sim.frames.len());
    for (a, b) in sim.frames.iter().zip(&gt.frames) {
        let mut g = StateGrad::default();
        for (x, y) in a.x.iter().zip(&b.x) {
            let d = x - y;
            position += d.norm_squared();
            g.x.push(2.0 * scale * d);
        }
        if depth_weight > 0.0 {
            g.v = a
                .v
                .iter()
                .map(|v| {
                    depth += v[depth_axis] * v[depth_axis];
                    let mut e = Vec3::zeros();
                    e[depth_axis] = 2.0 * scale * depth_weight * v[depth_axis];
                    e
                })
                .collect();
        }
        grads.push(g);
    }
    Ok(WindowLoss { position: position * scale, depth: depth * scale, grads })
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub window_len: usize,
    /// Mean position loss over the epoch's windows.
    pub train_loss: f64,
    /// Every-5-frames MSE of a free rollout from frame 0 (infinite if it
    /// diverged).
    pub eval_loss_every5: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,window_len,train_loss,eval_loss_every5";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{:e}", self.epoch, self.window_len, self.train_loss, self.eval_loss_every5)
    }
}

/// Loss and clipped-before norm of the gradient of one window.
fn window_gradient(
    law: &NeuralLaw,
    template: &Particles,
    gt: &Trajectory,
    (start, end): (usize, usize),
    sim_cfg: &SimConfig,
    cfg: &TrainConfig,
) -> Result<(f64, GradAccumulator)> {
    let init = particles_from_frame(template, &gt.frames[start])?;
    let laws: [&dyn ConstitutiveLaw; 1] = [law];
    let tape = record_forward(&init, &laws, sim_cfg, end - start)?;
    let loss = window_loss(&tape.trajectory, &gt.slice(start, end), cfg.depth_reg_weight, cfg.depth_axis)?;
    let (acc, _) = backward(&tape, &init, &laws, sim_cfg, &loss.grads)?;
    Ok((loss.position + cfg.depth_reg_weight * loss.depth, acc))
}

/// One epoch of teacher-forced BPTT with one clipped Adam update per window.
///
/// All particles use material 0 (the neural law). Returns the mean window
/// loss; on divergence the error names the window index.
pub fn train_epoch(
    law: &mut NeuralLaw,
    opt: &mut NeuralOptimizer,
    template: &Particles,
    gt: &Trajectory,
    sim_cfg: &SimConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, usize)> {
    let steps = gt.num_steps();
    let w = cfg.window_len(epoch, steps);
    let lr = cfg.lr_factor(epoch);
    let windows = teacher_forcing_windows(steps, w);
    let mut total = 0.0;
    for (k, win) in windows.iter().enumerate() {
        let (loss, mut acc) = window_gradient(law, template, gt, *win, sim_cfg, cfg).map_err(|e| match e {
            Error::SimulationDiverged { step, reason } => Error::SimulationDiverged { step: win.0 + step, reason: format!("window {k}: {reason}") },
            e => e,
        })?;
        let norm = clip_grad_norm(&mut acc, cfg.grad_clip);
        log::debug!("epoch {epoch} window {k}: loss {loss:e}, grad norm {norm:e}");
        opt.apply(&mut law.params, &acc.grads[0], cfg.lr_elastic * lr, cfg.lr_plastic * lr)?;
        total += loss;
    }
    Ok((total / windows.len().max(1) as f64, w))
}

/// Every-5-frames MSE of a free rollout of `law` from the first ground-truth
/// frame.
pub fn evaluate(law: &dyn ConstitutiveLaw, template: &Particles, gt: &Trajectory, sim_cfg: &SimConfig, steps: usize) -> Result<(f64, Trajectory)> {
    let sim = run(template, &[law], sim_cfg, steps, Recording::Positions)?;
    Ok((position_loss_every(&sim, &gt.positions_only(), 5)?, sim))
}

/// Result of [`train`]; `error` holds the failure that stopped training
/// early, with `params` from the last completed epoch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: NeuralLawParams,
    pub history: Vec<EpochStats>,
    pub error: Option<Error>,
}

/// Full training loop. `on_epoch` sees each epoch's stats as they arrive.
pub fn train(
    init: NeuralLawParams,
    template: &Particles,
    gt: &Trajectory,
    sim_cfg: &SimConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sim_cfg.validate()?;
    template.validate(sim_cfg, 1)?;
    if !gt.has_full_state() {
        return Err(Error::Config("training needs a full-state ground-truth trajectory".into()));
    }
    let mut law = NeuralLaw::new(init);
    let mut opt = NeuralOptimizer::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let before = law.params.clone();
        let (train_loss, window_len) = match train_epoch(&mut law, &mut opt, template, gt, sim_cfg, cfg, epoch) {
            Ok(r) => r,
            Err(e) => return Ok(TrainOutcome { params: before, history, error: Some(e) }),
        };
        let eval_loss_every5 = match evaluate(&law, template, gt, sim_cfg, gt.num_steps()) {
            Ok((l, _)) => l,
            Err(Error::SimulationDiverged { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let stats = EpochStats { epoch, window_len, train_loss, eval_loss_every5 };
        log::info!("{}", stats.csv_row());
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { params: law.params, history, error: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysIdConfig {
    pub iterations: usize,
    /// Adam step in log-parameter space, cosine-annealed to zero.
    pub lr: f64,
    /// Stops once the loss drops below this.
    pub tolerance: f64,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        SysIdConfig { iterations: 200, lr: 0.1, tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdResult {
    pub params: MaterialParams,
    /// Loss before each update, then the final loss.
    pub losses: Vec<f64>,
}

/// Fits the physical parameters of one analytic law to a trajectory by
/// gradient descent (Adam) on their logarithms through full-horizon BPTT.
pub fn sys_id_fit(env: Environment, init: MaterialParams, template: &Particles, gt: &Trajectory, sim_cfg: &SimConfig, cfg: &SysIdConfig) -> Result<SysIdResult> {
    let mut law = make_environment_law(env, init).trainable();
    let names = env.param_names();
    let mut log_p: Vec<f64> = law.param_values().iter().map(|v| v.ln()).collect();
    let mut adam = AdamState::new(names.len(), 0.9, 0.999, 1e-8);
    let gt_pos = gt.positions_only();
    let steps = gt.num_steps();
    let mut losses = Vec::new();
    for it in 0..=cfg.iterations {
        let values: Vec<f64> = log_p.iter().zip(names).map(|(l, n)| clamp_physical(n, l.exp())).collect();
        law.set_param_values(&values)?;
        let laws: [&dyn ConstitutiveLaw; 1] = [&law];
        let tape = record_forward(template, &laws, sim_cfg, steps)?;
        let loss = window_loss(&tape.trajectory, &gt_pos, 0.0, 0)?;
        losses.push(loss.position);
        log::debug!("sys-id iteration {it}: loss {:e}, params {values:?}", loss.position);
        if it == cfg.iterations || loss.position < cfg.tolerance {
            break;
        }
        let (acc, _) = backward(&tape, template, &laws, sim_cfg, &loss.grads)?;
        let log_grad: Vec<f64> = acc.grads[0].iter().zip(&values).map(|(g, v)| g * v).collect();
        adam_step(&mut log_p, &log_grad, &mut adam, cosine_anneal(cfg.lr, 0.0, it, cfg.iterations))?;
    }
    Ok(SysIdResult { params: law.params, losses })
}

fn clamp_physical(name: &str, value: f64) -> f64 {
    match name {
        "poissons_ratio" => value.min(0.49),
        "friction_angle" => value.min(85f64.to_radians()),
        _ => value,
    }
}

/// A supervised sample for [`labeled_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub f: Mat3,
    /// First Piola stress at `f`.
    pub stress: Mat3,
    /// Plastic return of `f`.
    pub f_new: Mat3,
}

/// Labels random deformations with an analytic law.
pub fn label_samples(law: &dyn ConstitutiveLaw, deformations: &[Mat3]) -> Result<Vec<LabeledSample>> {
    deformations
        .iter()
        .map(|f| {
            let tau = law.kirchhoff(f)?;
            let stress = tau * crate::linalg3::inv_transpose3(f)?;
            Ok(LabeledSample { f: *f, stress, f_new: law.plastic(f)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabeledFitConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for LabeledFitConfig {
    fn default() -> Self {
        LabeledFitConfig { iterations: 500, lr: 1e-3 }
    }
}

/// Mean squared errors `(‖P − P_gt‖² / s², ‖F_new − F_new_gt‖² / α²)` of a
/// neural law on labeled samples, with `s` the stress scale.
pub fn labeled_losses(params: &NeuralLawParams, samples: &[LabeledSample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let law = NeuralLaw::new(params.clone());
    let (e, p) = samples
        .par_iter()
        .map(|s| {
            let de = (law.elastic(&s.f).expect("neural law is total") - s.stress) / params.stress_scale;
            let dp = (law.plastic(&s.f).expect("neural law is total") - s.f_new) / params.alpha;
            (de.norm_squared(), dp.norm_squared())
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (e / samples.len() as f64, p / samples.len() as f64)
}

/// Supervised regression of the neural maps onto labeled stress and plastic
/// returns, full batch with Adam. Returns the fitted parameters and the
/// summed loss before each update.
pub fn labeled_fit(params: NeuralLawParams, samples: &[LabeledSample], cfg: &LabeledFitConfig) -> Result<(NeuralLawParams, Vec<f64>)> {
    let mut law = NeuralLaw::new(params);
    if samples.is_empty() {
        return Ok((law.params, Vec::new()));
    }
    let mut adam = AdamState::new(NeuralLawParams::NUM_PARAMS, 0.9, 0.999, 1e-8);
    let n = samples.len() as f64;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (le, lp) = labeled_losses(&law.params, samples);
        history.push(le + lp);
        let s = law.params.stress_scale;
        let alpha = law.params.alpha;
        let grad = samples
            .par_chunks(64)
            .map(|chunk| {
                let mut g = vec![0.0; NeuralLawParams::NUM_PARAMS];
                for smp in chunk {
                    let p_bar = 2.0 * (law.elastic(&smp.f).expect("total") - smp.stress) / (s * s * n);
                    law.piola_vjp(&smp.f, &p_bar, &mut g);
                    let f_bar = 2.0 * (law.plastic(&smp.f).expect("total") - smp.f_new) / (alpha * alpha * n);
                    law.plastic_vjp(&smp.f, &f_bar, &mut g)?;
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .reduce(|mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            })
            .expect("non-empty");
        let mut flat = law.params.to_flat();
        adam_step(&mut flat, &grad, &mut adam, cosine_anneal(cfg.lr, 0.0, it, cfg.iterations))?;
        law.params.set_flat(&flat)?;
    }
    Ok((law.params, history))
}
