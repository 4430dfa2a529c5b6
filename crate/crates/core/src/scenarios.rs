//! Declarative scene setup: geometry sampling, initial velocities, material
//! assignment and the generalization task variants.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! steps = 1000
//! seed = 0
//!
//! [sim]                      # any SimConfig field, defaults otherwise
//! dt = 5e-4
//!
//! [[materials]]
//! environment = "jello"      # plus any MaterialParams field
//! youngs_modulus = 1e5
//!
//! [[bodies]]
//! material = 0
//! particle_count = 1000
//! linear_velocity = [1.0, 0.0, -1.0]
//! angular_velocity = [0.0, 0.0, 2.0]
//! geometry = { kind = "box", center = [0.5, 0.5, 0.5], size = [0.5, 0.5, 0.5] }
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg3::{rotation_from_axis_angle, Mat3, Vec3};
use crate::materials::{make_environment_law, AnalyticLaw, Environment, MaterialParams};
use crate::mpm::{ParticleState, Particles, Plane, SimConfig};

/// Relative tolerance on the sampled particle count.
pub const COUNT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// Axis-aligned box before `rotation` (axis-angle, radians) about its centre.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    Sphere { center: [f64; 3], radius: f64 },
    /// Cylinder along z before `rotation`.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        height: f64,
        #[serde(default)]
        rotation: [f64; 3],
    },
    /// Whitespace-separated `x y z` rows; the cloud is scaled, then its
    /// centroid moved to `center`. `spacing` is the mean point spacing of the
    /// file before scaling and sets each particle's rest volume.
    PointCloud {
        path: PathBuf,
        center: [f64; 3],
        spacing: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Geometry {
    fn rotation(&self) -> Mat3 {
        match self {
            Geometry::Box { rotation, .. } | Geometry::Cylinder { rotation, .. } => rotation_from_axis_angle(&Vec3::from(*rotation)),
            _ => Mat3::identity(),
        }
    }

    pub fn center(&self) -> Vec3 {
        match self {
            Geometry::Box { center, .. } | Geometry::Sphere { center, .. } | Geometry::Cylinder { center, .. } | Geometry::PointCloud { center, .. } => Vec3::from(*center),
        }
    }

    /// Analytic volume of a primitive, m³.
    pub fn volume(&self) -> Option<f64> {
        match self {
            Geometry::Box { size, .. } => Some(size.iter().product()),
            Geometry::Sphere { radius, .. } => Some(4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)),
            Geometry::Cylinder { radius, height, .. } => Some(std::f64::consts::PI * radius * radius * height),
            Geometry::PointCloud { .. } => None,
        }
    }

    /// Half extents of the local (unrotated) bounding box.
    fn local_half_extent(&self) -> Vec3 {
        match self {
            Geometry::Box { size, .. } => Vec3::from(*size) / 2.0,
            Geometry::Sphere { radius, .. } => Vec3::repeat(*radius),
            Geometry::Cylinder { radius, height, .. } => Vec3::new(*radius, *radius, height / 2.0),
            Geometry::PointCloud { .. } => Vec3::zeros(),
        }
    }

    fn contains_local(&self, p: &Vec3) -> bool {
        match self {
            Geometry::Box { size, .. } => (0..3).all(|a| p[a].abs() <= size[a] / 2.0),
            Geometry::Sphere { radius, .. } => p.norm() <= *radius,
            Geometry::Cylinder { radius, height, .. } => p.xy().norm() <= *radius && p.z.abs() <= height / 2.0,
            Geometry::PointCloud { .. } => false,
        }
    }

    /// World-space axis-aligned bounds of a primitive.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        if let Geometry::PointCloud { .. } = self {
            return None;
        }
        let r = self.rotation();
        let h = self.local_half_extent();
        let ext = Vec3::from_fn(|i, _| (0..3).map(|j| r[(i, j)].abs() * h[j]).sum());
        Some((self.center() - ext, self.center() + ext))
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Geometry::Box { size, .. } => size.iter().all(|s| *s >= 0.0),
            Geometry::Sphere { radius, .. } => *radius >= 0.0,
            Geometry::Cylinder { radius, height, .. } => *radius >= 0.0 && *height >= 0.0,
            Geometry::PointCloud { spacing, scale, .. } => *spacing > 0.0 && *scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid geometry {self:?}")))
        }
    }
}

/// Positions and per-particle rest volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub positions: Vec<Vec3>,
    pub rest_volume: f64,
}

fn stratified(geom: &Geometry, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let h = geom.local_half_extent();
    let r = geom.rotation();
    let c = geom.center();
    let cells: [usize; 3] = std::array::from_fn(|a| ((2.0 * h[a] / spacing).ceil() as usize).max(1));
    let mut out = Vec::new();
    for i in 0..cells[0] {
        for j in 0..cells[1] {
            for k in 0..cells[2] {
                let ijk = [i, j, k];
                let p = Vec3::from_fn(|a, _| -h[a] + (ijk[a] as f64 + rng.random::<f64>()) * spacing);
                if geom.contains_local(&p) {
                    out.push(c + r * p);
                }
            }
        }
    }
    out
}

/// Stratified jittered sampling with one point per cubic stratum; the
/// stratum size is adjusted until the count is within 2 % of the target.
pub fn sample_primitive(geom: &Geometry, target_count: usize, seed: u64) -> Result<Sampled> {
    geom.validate()?;
    let volume = geom.volume().ok_or_else(|| Error::Config("sample_primitive needs a primitive geometry".into()))?;
    if target_count == 0 || volume == 0.0 {
        return Ok(Sampled { positions: Vec::new(), rest_volume: 0.0 });
    }
    let mut spacing = (volume / target_count as f64).cbrt();
    let mut best: Option<Vec<Vec3>> = None;
    for attempt in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let pts = stratified(geom, spacing, &mut rng);
        let err = |n: usize| (n as f64 - target_count as f64).abs() / target_count as f64;
        if best.as_ref().is_none_or(|b| err(pts.len()) < err(b.len())) {
            best = Some(pts.clone());
        }
        if err(pts.len()) <= COUNT_TOLERANCE {
            break;
        }
        if !pts.is_empty() {
            spacing *= (pts.len() as f64 / target_count as f64).cbrt().clamp(0.8, 1.25);
        } else {
            spacing *= 0.8;
        }
    }
    let positions = best.unwrap_or_default();
    let rest_volume = if positions.is_empty() { 0.0 } else { volume / positions.len() as f64 };
    Ok(Sampled { positions, rest_volume })
}

/// Reads an `x y z` point cloud; `#` starts a comment.
pub fn read_point_cloud(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read point cloud {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| Error::Config(format!("{}:{}: bad point", path.display(), i + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Config(format!("{}:{}: expected 3 coordinates", path.display(), i + 1)));
        }
        out.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    Ok(out)
}

pub fn sample_geometry(geom: &Geometry, target_count: usize, seed: u64) -> Result<Sampled> {
    match geom {
        Geometry::PointCloud { path, center, spacing, scale } => {
            geom.validate()?;
            let pts = read_point_cloud(path)?;
            if pts.is_empty() {
                return Ok(Sampled { positions: pts, rest_volume: 0.0 });
            }
            let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
            let c = Vec3::from(*center);
            Ok(Sampled { positions: pts.iter().map(|p| c + (p - centroid) * *scale).collect(), rest_volume: (spacing * scale).powi(3) })
        }
        _ => sample_primitive(geom, target_count, seed),
    }
}

pub fn centroid(positions: &[Vec3]) -> Vec3 {
    if positions.is_empty() {
        return Vec3::zeros();
    }
    positions.iter().sum::<Vec3>() / positions.len() as f64
}

/// `v(x) = v_lin + ω × (x − centroid)`.
pub fn initial_velocity_field(positions: &[Vec3], v_lin: Vec3, omega: Vec3) -> Vec<Vec3> {
    let c = centroid(positions);
    positions.iter().map(|x| v_lin + omega.cross(&(x - c))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub environment: Environment,
    #[serde(flatten)]
    pub params: MaterialParams,
}

impl MaterialSpec {
    pub fn new(environment: Environment) -> Self {
        MaterialSpec { environment, params: MaterialParams::default() }
    }

    pub fn law(&self) -> AnalyticLaw {
        make_environment_law(self.environment, self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Body {
    pub geometry: Geometry,
    /// Index into [`Scenario::materials`].
    #[serde(default)]
    pub material: usize,
    /// Target for primitive sampling; ignored for point clouds.
    #[serde(default)]
    pub particle_count: usize,
    #[serde(default)]
    pub linear_velocity: [f64; 3],
    /// rad/s about the body's centroid.
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sim: SimConfig,
    pub materials: Vec<MaterialSpec>,
    pub bodies: Vec<Body>,
}

/// Generalization variants of a base scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// Doubles the step count.
    ExtendedTime,
    /// Replaces every body's velocities with seeded random ones.
    NewVelocity { seed: u64 },
    /// Replaces the first body's geometry.
    NewGeometry { geometry: Geometry, particle_count: usize },
    /// Adds one free-slip plane tilted by `angle_deg` about y, placed just
    /// below the first body.
    InclinedBoundary { angle_deg: f64 },
    /// Lifts the first body and adds a pool of water beneath it.
    MultiMaterial { pool_particles: usize },
}

impl Scenario {
    /// A single cube of `env` material with the default training motion.
    pub fn preset(env: Environment) -> Self {
        Scenario {
            steps: 1000,
            seed: 0,
            sim: SimConfig::default(),
            materials: vec![MaterialSpec::new(env)],
            bodies: vec![Body {
                geometry: Geometry::Box { center: [0.5, 0.5, 0.5], size: [0.5, 0.5, 0.5], rotation: [0.0; 3] },
                material: 0,
                particle_count: 1000,
                linear_velocity: [1.0, 0.5, -1.5],
                angular_velocity: [0.0, 0.0, 3.0],
            }],
        }
    }

    /// Small water scene: 512 particles in a 0.4 m cube, 300 steps, hitting
    /// the floor after about 100 steps.
    pub fn water_desk() -> Self {
        Scenario {
            steps: 300,
            seed: 0,
            sim: SimConfig::default(),
            materials: vec![MaterialSpec::new(Environment::Water)],
            bodies: vec![Body {
                geometry: Geometry::Box { center: [0.5, 0.5, 0.5], size: [0.4, 0.4, 0.4], rotation: [0.0; 3] },
                material: 0,
                particle_count: 512,
                linear_velocity: [0.5, 0.0, -2.5],
                angular_velocity: [2.0, 0.0, 0.0],
            }],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    /// Loads a scenario; relative point-cloud paths are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut s = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for b in &mut s.bodies {
            if let Geometry::PointCloud { path: p, .. } = &mut b.geometry {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.materials.is_empty() || self.bodies.is_empty() {
            return Err(Error::Config("scenario needs at least one material and one body".into()));
        }
        for m in &self.materials {
            m.params.validate()?;
        }
        for b in &self.bodies {
            b.geometry.validate()?;
            if b.material >= self.materials.len() {
                return Err(Error::Config(format!("body material {} out of range", b.material)));
            }
        }
        Ok(())
    }

    pub fn laws(&self) -> Vec<AnalyticLaw> {
        self.materials.iter().map(MaterialSpec::law).collect()
    }

    /// Samples all bodies into one particle set.
    pub fn build_particles(&self) -> Result<Particles> {
        self.validate()?;
        let mut x = Vec::new();
        let mut v = Vec::new();
        let mut mass = Vec::new();
        let mut rest_volume = Vec::new();
        let mut material = Vec::new();
        for (i, body) in self.bodies.iter().enumerate() {
            let s = sample_geometry(&body.geometry, body.particle_count, self.seed.wrapping_add(i as u64))?;
            let density = self.materials[body.material].params.density;
            v.extend(initial_velocity_field(&s.positions, Vec3::from(body.linear_velocity), Vec3::from(body.angular_velocity)));
            mass.extend(std::iter::repeat_n(density * s.rest_volume, s.positions.len()));
            rest_volume.extend(std::iter::repeat_n(s.rest_volume, s.positions.len()));
            material.extend(std::iter::repeat_n(body.material, s.positions.len()));
            x.extend(s.positions);
        }
        if x.is_empty() {
            return Err(Error::Config("scenario produced no particles".into()));
        }
        let margin = self.sim.boundary_margin_cells as f64 * self.sim.dx();
        let (lo, hi) = (margin, self.sim.domain_size - margin);
        if let Some(p) = x.iter().find(|p| p.iter().any(|&c| c < lo || c > hi)) {
            return Err(Error::Config(format!("particle at {:?} is outside the domain interior [{lo}, {hi}]", p.as_slice())));
        }
        let mut state = ParticleState::at_rest(x);
        state.v = v;
        let particles = Particles { state, mass, rest_volume, material };
        particles.validate(&self.sim, self.materials.len())?;
        Ok(particles)
    }
}

/// Builds a generalization variant of `base`.
pub fn build_task(base: &Scenario, task: &Task) -> Result<Scenario> {
    let mut s = base.clone();
    match task {
        Task::ExtendedTime => s.steps *= 2,
        Task::NewVelocity { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for b in &mut s.bodies {
                b.linear_velocity = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-2.0..0.0)];
                b.angular_velocity = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            }
        }
        Task::NewGeometry { geometry, particle_count } => {
            let b = s.bodies.first_mut().ok_or_else(|| Error::Config("scenario has no bodies".into()))?;
            b.geometry = geometry.clone();
            b.particle_count = *particle_count;
        }
        Task::InclinedBoundary { angle_deg } => {
            let a = angle_deg.to_radians();
            let (lo, hi) = s.bodies.first().and_then(|b| b.geometry.bounds()).unwrap_or((Vec3::repeat(0.3), Vec3::repeat(0.7)));
            // Highest plane through x = 0.5 that stays below the body's bounding box.
            let z0 = lo.z - a.tan() * (hi.x - 0.5).max(lo.x - 0.5) - s.sim.dx();
            s.sim.planes.push(Plane { point: [0.5, 0.5, z0], normal: [-a.sin(), 0.0, a.cos()] });
        }
        Task::MultiMaterial { pool_particles } => {
            let margin = s.sim.boundary_margin_cells as f64 * s.sim.dx();
            let l = s.sim.domain_size;
            let inner = l - 2.0 * margin - 1e-6;
            let depth = 0.3 * inner;
            let pool = Body {
                geometry: Geometry::Box { center: [l / 2.0, l / 2.0, margin + depth / 2.0], size: [inner, inner, depth], rotation: [0.0; 3] },
                material: s.materials.len(),
                particle_count: *pool_particles,
                linear_velocity: [0.0; 3],
                angular_velocity: [0.0; 3],
            };
            s.materials.push(MaterialSpec::new(Environment::Water));
            if let Some(b) = s.bodies.first_mut() {
                if let Some((lo, _)) = b.geometry.bounds() {
                    let lift = (margin + depth + 0.05 - lo.z).max(0.0);
                    shift_geometry(&mut b.geometry, Vec3::new(0.0, 0.0, lift));
                }
            }
            s.bodies.push(pool);
        }
    }
    s.validate()?;
    Ok(s)
}

fn shift_geometry(g: &mut Geometry, d: Vec3) {
    match g {
        Geometry::Box { center, .. } | Geometry::Sphere { center, .. } | Geometry::Cylinder { center, .. } | Geometry::PointCloud { center, .. } => {
            *center = (Vec3::from(*center) + d).into();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_sampling_hits_target() {
        let g = Geometry::Box { center: [0.5, 0.5, 0.5], size: [0.5, 0.5, 0.5], rotation: [0.0; 3] };
        let s = sample_primitive(&g, 1000, 0).unwrap();
        assert!((s.positions.len() as f64 - 1000.0).abs() <= 20.0, "{}", s.positions.len());
        assert!((s.rest_volume * s.positions.len() as f64 - 0.125).abs() < 1e-12);
        assert!(s.positions.iter().all(|p| p.iter().all(|c| (0.25..=0.75).contains(c))));
        assert_eq!(sample_primitive(&g, 1000, 0).unwrap(), s);
        assert_ne!(sample_primitive(&g, 1000, 1).unwrap(), s);
    }

    #[test]
    fn other_primitives_hit_target_and_stay_inside() {
        let shapes = [
            Geometry::Sphere { center: [0.5, 0.5, 0.5], radius: 0.2 },
            Geometry::Cylinder { center: [0.5, 0.5, 0.5], radius: 0.15, height: 0.3, rotation: [0.3, 0.0, 0.2] },
            Geometry::Box { center: [0.5, 0.5, 0.5], size: [0.3, 0.2, 0.1], rotation: [0.0, 0.4, 0.0] },
        ];
        for g in &shapes {
            for target in [300, 2000] {
                let s = sample_primitive(g, target, 3).unwrap();
                let n = s.positions.len() as f64;
                assert!((n - target as f64).abs() <= COUNT_TOLERANCE * target as f64, "{g:?}: {n}");
                let (lo, hi) = g.bounds().unwrap();
                assert!(s.positions.iter().all(|p| (0..3).all(|a| p[a] >= lo[a] - 1e-12 && p[a] <= hi[a] + 1e-12)));
            }
        }
        let empty = sample_primitive(&Geometry::Sphere { center: [0.5; 3], radius: 0.0 }, 100, 0).unwrap();
        assert!(empty.positions.is_empty());
    }

    #[test]
    fn velocity_field_examples() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        let v = initial_velocity_field(&pts, Vec3::new(1.0, 2.0, 3.0), Vec3::zeros());
        assert!(v.iter().all(|u| *u == Vec3::new(1.0, 2.0, 3.0)));
        let v = initial_velocity_field(&pts, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(v[0], Vec3::new(0.0, 1.0, 0.0));

        // Angular momentum about the centroid equals I·ω computed directly.
        let g = Geometry::Box { center: [0.5, 0.5, 0.5], size: [0.3, 0.2, 0.4], rotation: [0.0; 3] };
        let s = sample_primitive(&g, 500, 5).unwrap();
        let omega = Vec3::new(0.3, -1.0, 2.0);
        let v = initial_velocity_field(&s.positions, Vec3::new(0.1, 0.0, 0.0), omega);
        let c = centroid(&s.positions);
        let m = 0.7;
        let l: Vec3 = s.positions.iter().zip(&v).map(|(x, u)| m * (x - c).cross(u)).sum();
        let inertia: Mat3 = s.positions.iter().map(|x| {
            let r = x - c;
            m * (Mat3::identity() * r.norm_squared() - r * r.transpose())
        }).sum();
        assert!((l - inertia * omega).norm() <= 1e-10 * l.norm());
    }

    #[test]
    fn toml_round_trip() {
        let mut s = Scenario::preset(Environment::Sand);
        s.sim.planes.push(Plane { point: [0.5, 0.5, 0.2], normal: [-0.5, 0.0, 0.8] });
        s.bodies.push(Body {
            geometry: Geometry::PointCloud { path: "duck.xyz".into(), center: [0.5, 0.5, 0.6], spacing: 0.01, scale: 1.5 },
            material: 0,
            particle_count: 0,
            linear_velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
        });
        let text = s.to_toml().unwrap();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
        assert_eq!(Scenario::from_toml(&Scenario::water_desk().to_toml().unwrap()).unwrap(), Scenario::water_desk());
    }

    #[test]
    fn minimal_toml_gets_defaults() {
        let s = Scenario::from_toml(
            r#"
            steps = 10
            [[materials]]
            environment = "water"
            [[bodies]]
            particle_count = 100
            geometry = { kind = "sphere", center = [0.5, 0.5, 0.5], radius = 0.1 }
            "#,
        )
        .unwrap();
        assert_eq!(s.sim, SimConfig::default());
        assert_eq!(s.materials[0].params, MaterialParams::default());
        assert!(Scenario::from_toml("steps = 1\nbogus = 2").is_err());
        let typo = r#"
            steps = 10
            [[materials]]
            environment = "jello"
            youngs_modulas = 1e4
            [[bodies]]
            geometry = { kind = "sphere", center = [0.5, 0.5, 0.5], radius = 0.1 }
        "#;
        assert!(Scenario::from_toml(typo).is_err());
    }

    #[test]
    fn shipped_configs_load_and_build() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["jello", "sand", "plasticine", "water", "water_desk", "duck_pool", "jello_incline"] {
            let s = Scenario::load(dir.join(format!("{name}.toml"))).unwrap();
            let p = s.build_particles().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(p.len() > 400, "{name}");
        }
        let preset = Scenario::load(dir.join("water_desk.toml")).unwrap();
        assert_eq!(preset, Scenario::water_desk());
        let jello = Scenario::load(dir.join("jello.toml")).unwrap();
        assert_eq!(jello, Scenario::preset(Environment::Jello));
    }

    #[test]
    fn presets_build_valid_particles() {
        for env in Environment::ALL {
            let p = Scenario::preset(env).build_particles().unwrap();
            assert!((p.len() as f64 - 1000.0).abs() <= 20.0);
            let expected_mass = 1e3 * 0.125;
            assert!((p.total_mass() - expected_mass).abs() < 1e-9);
        }
        let p = Scenario::water_desk().build_particles().unwrap();
        assert!((p.len() as f64 - 512.0).abs() <= 0.02 * 512.0);
    }

    #[test]
    fn body_outside_interior_is_rejected() {
        let mut s = Scenario::preset(Environment::Jello);
        s.bodies[0].geometry = Geometry::Box { center: [0.5, 0.5, 0.15], size: [0.2, 0.2, 0.2], rotation: [0.0; 3] };
        assert!(matches!(s.build_particles(), Err(Error::Config(_))));
    }

    #[test]
    fn task_variants() {
        let base = Scenario::preset(Environment::Jello);
        assert_eq!(build_task(&base, &Task::ExtendedTime).unwrap().steps, 2000);

        let nv = build_task(&base, &Task::NewVelocity { seed: 4 }).unwrap();
        assert_ne!(nv.bodies[0].linear_velocity, base.bodies[0].linear_velocity);
        assert_eq!(nv, build_task(&base, &Task::NewVelocity { seed: 4 }).unwrap());

        let inc = build_task(&base, &Task::InclinedBoundary { angle_deg: 30.0 }).unwrap();
        assert_eq!(inc.sim.planes.len(), base.sim.planes.len() + 1);
        let p = inc.build_particles().unwrap();
        let plane = inc.sim.planes[0];
        let n = plane.unit_normal();
        assert!(p.state.x.iter().all(|x| (x - Vec3::from(plane.point)).dot(&n) > 0.0));

        let sphere = Geometry::Sphere { center: [0.5, 0.5, 0.5], radius: 0.2 };
        let ng = build_task(&base, &Task::NewGeometry { geometry: sphere.clone(), particle_count: 3000 }).unwrap();
        assert_eq!(ng.bodies[0].geometry, sphere);

        let mut small = base.clone();
        small.bodies[0].geometry = Geometry::Box { center: [0.5, 0.5, 0.5], size: [0.2, 0.2, 0.2], rotation: [0.0; 3] };
        small.bodies[0].particle_count = 300;
        let mm = build_task(&small, &Task::MultiMaterial { pool_particles: 2000 }).unwrap();
        assert_eq!(mm.materials.len(), 2);
        let p = mm.build_particles().unwrap();
        let ids: Vec<usize> = (0..2).map(|m| p.material.iter().filter(|&&k| k == m).count()).collect();
        assert_eq!(ids[0] + ids[1], p.len());
        assert!(ids[0] > 0 && ids[1] > 0);
    }
}
