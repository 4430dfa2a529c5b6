//! Simulated or ground-truth particle trajectories and their binary file
//! format.
//!
//! Layout (little-endian): magic `NCTR`, version `u32 = 1`, flags `u32`
//! (bit 0: full state), particle count `u64`, step count `u64` (the file
//! holds `steps + 1` frames), `dt: f64`, then per frame the positions as
//! `f32` triples followed, with full state, by velocities, `F` and `C`
//! (row-major) as `f32`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::linalg3::{from_row_major, to_row_major, Mat3, Vec3};
use crate::mpm::ParticleState;

const MAGIC: &[u8; 4] = b"NCTR";
const VERSION: u32 = 1;
const FLAG_FULL_STATE: u32 = 1;
const HEADER_BYTES: u64 = 4 + 4 + 4 + 8 + 8 + 8;

/// Frames of particle state. Position-only frames leave `v`, `f`, `c` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub frames: Vec<ParticleState>,
}

impl Trajectory {
    pub fn new(dt: f64) -> Self {
        Trajectory { dt, frames: Vec::new() }
    }

    pub fn push_positions(&mut self, x: Vec<Vec3>) {
        self.frames.push(ParticleState { x, ..ParticleState::default() });
    }

    pub fn push_full(&mut self, state: ParticleState) {
        self.frames.push(state);
    }

    pub fn num_particles(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    /// Number of steps, one less than the frame count.
    pub fn num_steps(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn has_full_state(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.v.len() == f.len() && f.f.len() == f.len() && f.c.len() == f.len())
    }

    pub fn positions(&self, frame: usize) -> &[Vec3] {
        &self.frames[frame].x
    }

    /// Drops everything but positions.
    pub fn positions_only(&self) -> Trajectory {
        Trajectory { dt: self.dt, frames: self.frames.iter().map(|f| ParticleState { x: f.x.clone(), ..ParticleState::default() }).collect() }
    }

    /// Frames `start..=end`.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory { dt: self.dt, frames: self.frames[start..=end].to_vec() }
    }

    fn check_shape(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::ShapeMismatch("trajectory has no frames".into()));
        }
        let q = self.num_particles();
        if self.frames.iter().any(|f| f.len() != q) {
            return Err(Error::ShapeMismatch("frames have different particle counts".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.check_shape()?;
        let full = self.has_full_state();
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(if full { FLAG_FULL_STATE } else { 0 })?;
        w.write_u64::<LittleEndian>(self.num_particles() as u64)?;
        w.write_u64::<LittleEndian>(self.num_steps() as u64)?;
        w.write_f64::<LittleEndian>(self.dt)?;
        let mut put = |vals: &mut dyn Iterator<Item = f64>| -> Result<()> {
            for v in vals {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
            Ok(())
        };
        for frame in &self.frames {
            put(&mut frame.x.iter().flat_map(|p| p.iter().copied()))?;
            if full {
                put(&mut frame.v.iter().flat_map(|p| p.iter().copied()))?;
                put(&mut frame.f.iter().flat_map(to_row_major))?;
                put(&mut frame.c.iter().flat_map(to_row_major))?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a trajectory file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported trajectory version {version}")));
        }
        let flags = r.read_u32::<LittleEndian>()?;
        if flags & !FLAG_FULL_STATE != 0 {
            return Err(Error::Format(format!("unknown trajectory flags {flags:#x}")));
        }
        let full = flags & FLAG_FULL_STATE != 0;
        let q = r.read_u64::<LittleEndian>()? as usize;
        let steps = r.read_u64::<LittleEndian>()? as usize;
        let dt = r.read_f64::<LittleEndian>()?;

        let per_particle = if full { 24 } else { 3 };
        let mut buf = vec![0f32; q * per_particle];
        let mut traj = Trajectory::new(dt);
        for _ in 0..=steps {
            r.read_f32_into::<LittleEndian>(&mut buf).map_err(|e| truncated(e, "frame data"))?;
            let vals: Vec<f64> = buf.iter().map(|&v| v as f64).collect();
            let vec3s = |s: &[f64]| s.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
            let mats = |s: &[f64]| s.chunks_exact(9).map(from_row_major).collect::<Vec<Mat3>>();
            let x = vec3s(&vals[..3 * q]);
            if full {
                traj.push_full(ParticleState {
                    x,
                    v: vec3s(&vals[3 * q..6 * q]),
                    f: mats(&vals[6 * q..15 * q]),
                    c: mats(&vals[15 * q..24 * q]),
                });
            } else {
                traj.push_positions(x);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after trajectory data".into()));
        }
        Ok(traj)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let len = file.metadata()?.len();
        let traj = Self::read_from(&mut BufReader::new(file))?;
        let per_particle = if traj.has_full_state() { 24 } else { 3 };
        let expected = HEADER_BYTES + 4 * (per_particle * traj.num_particles() * traj.frames.len()) as u64;
        if len != expected {
            return Err(Error::Format(format!("file length {len} does not match header ({expected})")));
        }
        Ok(traj)
    }

    /// Single CSV file with header `frame,particle,x,y,z`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "frame,particle,x,y,z")?;
        for (n, frame) in self.frames.iter().enumerate() {
            for (i, p) in frame.x.iter().enumerate() {
                writeln!(w, "{n},{i},{},{},{}", p[0] as f32, p[1] as f32, p[2] as f32)?;
            }
        }
        Ok(())
    }

    /// Reads positions written by [`write_csv`](Self::write_csv).
    pub fn read_csv(r: impl BufRead, dt: f64) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "frame,particle,x,y,z" => {}
            _ => return Err(Error::Format("missing csv header".into())),
        }
        let mut traj = Trajectory::new(dt);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let bad = || Error::Format(format!("bad csv row {}: '{line}'", lineno + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad());
            }
            let frame: usize = cols[0].parse().map_err(|_| bad())?;
            let particle: usize = cols[1].parse().map_err(|_| bad())?;
            let mut p = Vec3::zeros();
            for a in 0..3 {
                p[a] = cols[2 + a].parse::<f32>().map_err(|_| bad())? as f64;
            }
            if frame == traj.frames.len() {
                traj.push_positions(Vec::new());
            }
            if frame + 1 != traj.frames.len() {
                return Err(bad());
            }
            let current = traj.frames.last_mut().expect("pushed above");
            if particle != current.x.len() {
                return Err(bad());
            }
            current.x.push(p);
        }
        traj.check_shape()?;
        Ok(traj)
    }

    /// ASCII PLY point cloud of one frame.
    pub fn write_ply_frame(&self, frame: usize, w: &mut impl Write) -> Result<()> {
        let x = &self.frames[frame].x;
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", x.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z\nend_header")?;
        for p in x {
            writeln!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
        }
        Ok(())
    }
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated trajectory file while reading {what}"))
    } else {
        Error::Io(e)
    }
}
