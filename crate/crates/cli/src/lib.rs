//! Command implementations behind the `nclaw` binary.
//!
//! Every command returns a [`CliError`] whose [`exit_code`](CliError::exit_code)
//! is 2 for user errors (bad files, configs, shapes) and 3 for numerical
//! divergence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nclaw::materials::AnalyticLaw;
use nclaw::mpm::{run, Particles, Recording};
use nclaw::neural::{init_params, NeuralLaw, NeuralLawParams};
use nclaw::scenarios::Scenario;
use nclaw::trajectory::Trajectory;
use nclaw::training::{position_loss_every, train, EpochStats, TrainConfig};
use nclaw::{ConstitutiveLaw, Error};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::SimulationDiverged { .. } | Error::GradientDiverged { .. } | Error::SingularMatrix { .. } | Error::InvalidDeformation(_) => {
                CliError::Diverged(e.to_string())
            }
            _ => CliError::User(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Caps the global worker pool; `None` leaves rayon's default.
pub fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::User("NCLAW_THREADS must be at least 1".into()));
        }
        // A pool built earlier in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// `name=value` overrides of material parameters, applied to every material
/// in the scenario.
pub fn apply_overrides(scenario: &mut Scenario, overrides: &[(String, f64)]) -> CliResult<()> {
    for m in &mut scenario.materials {
        for (name, value) in overrides {
            m.params.set(name, *value)?;
        }
        m.params.validate()?;
    }
    Ok(())
}

pub fn parse_override(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("bad number in '{s}'"))?;
    Ok((k.trim().to_string(), v))
}

fn load_scenario(path: &Path, deterministic: bool) -> CliResult<Scenario> {
    let mut s = Scenario::load(path)?;
    if deterministic {
        s.sim.deterministic = true;
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub scenario: PathBuf,
    pub overrides: Vec<(String, f64)>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateReport {
    pub frames: usize,
    pub particles: usize,
    pub seconds: f64,
}

/// Simulates the scenario with its analytic laws and writes a full-state
/// trajectory. The simulator always runs in deterministic mode here.
pub fn cmd_generate(args: &GenerateArgs) -> CliResult<GenerateReport> {
    let mut scenario = load_scenario(&args.scenario, true)?;
    apply_overrides(&mut scenario, &args.overrides)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(steps) = args.steps {
        scenario.steps = steps;
    }
    let t0 = Instant::now();
    let particles = scenario.build_particles()?;
    let laws = scenario.laws();
    let traj = run(&particles, &law_refs(&laws), &scenario.sim, scenario.steps, Recording::FullState)?;
    traj.save(&args.out).map_err(|e| io_err(&args.out, e))?;
    Ok(GenerateReport { frames: traj.frames.len(), particles: particles.len(), seconds: t0.elapsed().as_secs_f64() })
}

fn law_refs(laws: &[AnalyticLaw]) -> Vec<&dyn ConstitutiveLaw> {
    laws.iter().map(|l| l as &dyn ConstitutiveLaw).collect()
}

fn load_trajectory(path: &Path) -> CliResult<Trajectory> {
    Trajectory::load(path).map_err(|e| io_err(path, e))
}

/// Particle template for a neural law: every particle uses material 0.
fn neural_template(scenario: &Scenario) -> CliResult<Particles> {
    let mut p = scenario.build_particles()?;
    p.material.iter_mut().for_each(|m| *m = 0);
    Ok(p)
}

fn check_matches(p: &Particles, gt: &Trajectory) -> CliResult<()> {
    if gt.num_particles() != p.len() {
        return Err(CliError::User(format!("trajectory has {} particles but the scenario samples {}", gt.num_particles(), p.len())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub gt: PathBuf,
    pub scenario: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub init: Option<PathBuf>,
    pub deterministic: bool,
}

pub fn load_train_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text).map_err(|e| io_err(p, e))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
}

/// Trains a neural law on a ground-truth trajectory. Metrics rows go to
/// stdout and to the metrics file as they are produced. The checkpoint is
/// written even when training stops on divergence.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainReport> {
    let scenario = load_scenario(&args.scenario, args.deterministic)?;
    let mut cfg = load_train_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    let gt = load_trajectory(&args.gt)?;
    let template = neural_template(&scenario)?;
    check_matches(&template, &gt)?;
    let init = match &args.init {
        Some(p) => NeuralLawParams::load(p).map_err(|e| io_err(p, e))?,
        None => NeuralLawParams { stress_scale: cfg.stress_scale, ..init_params(cfg.seed) },
    };

    let mut metrics = match &args.metrics {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p).map_err(|e| io_err(p, e))?);
            writeln!(w, "{}", EpochStats::CSV_HEADER).map_err(|e| io_err(p, e))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    println!("{}", EpochStats::CSV_HEADER);
    let mut write_err = None;
    let outcome = train(init, &template, &gt, &scenario.sim, &cfg, |s| {
        let row = s.csv_row();
        println!("{row}");
        if let Some((p, w)) = metrics.as_mut() {
            if let Err(e) = writeln!(w, "{row}").and_then(|_| w.flush()) {
                write_err.get_or_insert_with(|| io_err(p, e));
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    outcome.params.save(&args.out).map_err(|e| io_err(&args.out, e))?;
    match outcome.error {
        Some(e) => Err(e.into()),
        None => Ok(TrainReport { history: outcome.history }),
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    /// Neural checkpoint; the scenario's analytic laws are used when absent.
    pub checkpoint: Option<PathBuf>,
    pub scenario: PathBuf,
    /// Reference trajectory; regenerated from the scenario's analytic laws
    /// when absent.
    pub gt: Option<PathBuf>,
    pub every: usize,
    pub series: Option<PathBuf>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse_every: f64,
    /// Per-particle mean squared error of each frame.
    pub per_frame: Vec<f64>,
    pub all_finite: bool,
    pub in_domain: bool,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    if args.every == 0 {
        return Err(CliError::User("--every must be at least 1".into()));
    }
    let scenario = load_scenario(&args.scenario, args.deterministic)?;
    let analytic = scenario.laws();
    let gt = match &args.gt {
        Some(p) => load_trajectory(p)?,
        None => {
            let particles = scenario.build_particles()?;
            run(&particles, &law_refs(&analytic), &scenario.sim, scenario.steps, Recording::Positions)?
        }
    };
    let sim = match &args.checkpoint {
        Some(p) => {
            let law = NeuralLaw::new(NeuralLawParams::load(p).map_err(|e| io_err(p, e))?);
            let template = neural_template(&scenario)?;
            check_matches(&template, &gt)?;
            run(&template, &[&law], &scenario.sim, gt.num_steps(), Recording::Positions)?
        }
        None => {
            let particles = scenario.build_particles()?;
            check_matches(&particles, &gt)?;
            run(&particles, &law_refs(&analytic), &scenario.sim, gt.num_steps(), Recording::Positions)?
        }
    };
    let gt = gt.positions_only();
    let mse_every = position_loss_every(&sim, &gt, args.every)?;
    let per_frame: Vec<f64> = sim
        .frames
        .iter()
        .zip(&gt.frames)
        .map(|(a, b)| a.x.iter().zip(&b.x).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / a.x.len() as f64)
        .collect();
    let l = scenario.sim.domain_size;
    let all_finite = sim.frames.iter().all(|f| f.is_finite());
    let in_domain = sim.frames.iter().all(|f| f.x.iter().all(|p| p.iter().all(|&c| (0.0..=l).contains(&c))));
    if let Some(path) = &args.series {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "frame,mse")?;
            for (n, m) in per_frame.iter().enumerate() {
                writeln!(w, "{n},{m}")?;
            }
            w.flush()
        };
        write().map_err(|e| io_err(path, e))?;
    }
    Ok(EvalReport { mse_every, per_frame, all_finite, in_domain })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    PlySequence,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "ply-sequence" | "ply" => Ok(ExportFormat::PlySequence),
            _ => Err(format!("unknown export format '{s}' (csv or ply-sequence)")),
        }
    }
}

/// Writes `trajectory.csv` or `frame_00000.ply`, … into `out_dir` and
/// returns the written paths.
pub fn cmd_export(trajectory: &Path, format: ExportFormat, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let traj = load_trajectory(trajectory)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let write = |path: PathBuf, f: &dyn Fn(&mut BufWriter<fs::File>) -> nclaw::Result<()>| -> CliResult<PathBuf> {
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
        f(&mut w).map_err(|e| io_err(&path, e))?;
        w.flush().map_err(|e| io_err(&path, e))?;
        Ok(path)
    };
    match format {
        ExportFormat::Csv => Ok(vec![write(out_dir.join("trajectory.csv"), &|w| traj.write_csv(w))?]),
        ExportFormat::PlySequence => (0..traj.frames.len())
            .map(|n| write(out_dir.join(format!("frame_{n:05}.ply")), &|w| traj.write_ply_frame(n, w)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        let e: CliError = Error::SimulationDiverged { step: 3, reason: "x".into() }.into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = Error::Config("bad".into()).into();
        assert_eq!(e.exit_code(), 2);
        let e: CliError = Error::Io(std::io::Error::other("x")).into();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("youngs_modulus=2e5").unwrap(), ("youngs_modulus".to_string(), 2e5));
        assert!(parse_override("youngs_modulus").is_err());
        assert!(parse_override("a=b").is_err());
        assert_eq!("ply-sequence".parse::<ExportFormat>().unwrap(), ExportFormat::PlySequence);
        assert!("obj".parse::<ExportFormat>().is_err());
    }
}
