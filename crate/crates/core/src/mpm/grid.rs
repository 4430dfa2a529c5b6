use super::{SimConfig, MAX_PLANES};
use crate::linalg3::Vec3;

/// Halo nodes on each side of the domain.
pub(crate) const HALO: i32 = 2;

/// Dense background grid with nodes at `i·dx` for `i ∈ [−2, n + 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub resolution: usize,
    pub dx: f64,
    /// Nodes per axis, `resolution + 5`.
    pub dim: usize,
    pub mass: Vec<f64>,
    pub momentum: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
}

impl Grid {
    pub fn new(cfg: &SimConfig) -> Self {
        let dim = cfg.grid_resolution + 2 * HALO as usize + 1;
        let n = dim * dim * dim;
        Grid {
            resolution: cfg.grid_resolution,
            dx: cfg.dx(),
            dim,
            mass: vec![0.0; n],
            momentum: vec![Vec3::zeros(); n],
            velocity: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn clear(&mut self) {
        self.mass.fill(0.0);
        self.momentum.fill(Vec3::zeros());
        self.velocity.fill(Vec3::zeros());
    }

    /// Flat index of grid node `(i, j, k)`.
    #[inline]
    pub fn index(&self, node: [i32; 3]) -> usize {
        let d = self.dim;
        let [i, j, k] = node.map(|c| (c + HALO) as usize);
        (i * d + j) * d + k
    }

    /// Grid coordinates of a flat index.
    pub fn node(&self, idx: usize) -> [i32; 3] {
        let d = self.dim;
        [(idx / (d * d)) as i32 - HALO, ((idx / d) % d) as i32 - HALO, (idx % d) as i32 - HALO]
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.momentum.iter().sum()
    }
}

/// Free-slip projection: removes only the component moving into the wall.
pub fn apply_boundary(v: &Vec3, normal: &Vec3) -> Vec3 {
    v - normal * v.dot(normal).min(0.0)
}

/// Outward-free normals of the walls and planes constraining a node, in the
/// fixed order they are applied.
pub(crate) fn boundary_normals(cfg: &SimConfig, node: [i32; 3], dx: f64) -> ([Vec3; 6 + MAX_PLANES], usize) {
    let mut out = [Vec3::zeros(); 6 + MAX_PLANES];
    let mut count = 0;
    let margin = cfg.boundary_margin_cells as i32;
    let n = cfg.grid_resolution as i32;
    for a in 0..3 {
        if node[a] < margin {
            out[count][a] = 1.0;
            count += 1;
        }
        if node[a] > n - margin {
            out[count][a] = -1.0;
            count += 1;
        }
    }
    let pos = Vec3::new(node[0] as f64, node[1] as f64, node[2] as f64) * dx;
    for plane in &cfg.planes {
        let normal = plane.unit_normal();
        if (pos - Vec3::from(plane.point)).dot(&normal) <= 0.0 {
            out[count] = normal;
            count += 1;
        }
    }
    (out, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpm::Plane;

    #[test]
    fn free_slip_examples() {
        let floor = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(apply_boundary(&Vec3::new(1.0, 0.0, -1.0), &floor), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(apply_boundary(&Vec3::new(1.0, 0.0, 1.0), &floor), Vec3::new(1.0, 0.0, 1.0));

        // 45° incline, flow straight into it along x.
        let h = 0.5f64.sqrt();
        let n = Vec3::new(-h, 0.0, h);
        let v = Vec3::new(1.0, 0.0, 0.0);
        // Hand projection onto the plane: v − (v·n)n = (1,0,0) − (−h)(−h,0,h) = (0.5, 0, 0.5).
        let out = apply_boundary(&v, &n);
        assert!((out - Vec3::new(0.5, 0.0, 0.5)).norm() < 1e-15);
        assert!(out.dot(&n).abs() < 1e-15);
    }

    #[test]
    fn index_round_trip() {
        let g = Grid::new(&SimConfig::default());
        assert_eq!(g.dim, 25);
        for idx in [0, 1, 17, 600, g.len() - 1] {
            assert_eq!(g.index(g.node(idx)), idx);
        }
        assert_eq!(g.index([-2, -2, -2]), 0);
        assert_eq!(g.index([22, 22, 22]), g.len() - 1);
    }

    #[test]
    fn wall_and_plane_regions() {
        let mut cfg = SimConfig::default();
        let dx = cfg.dx();
        assert_eq!(boundary_normals(&cfg, [10, 10, 10], dx).1, 0);
        let (normals, count) = boundary_normals(&cfg, [2, 10, 18], dx);
        assert_eq!(count, 2);
        assert_eq!(normals[0], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(normals[1], Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(boundary_normals(&cfg, [3, 17, 10], dx).1, 0);

        cfg.planes.push(Plane { point: [0.5, 0.5, 0.5], normal: [0.0, 0.0, 2.0] });
        let (normals, count) = boundary_normals(&cfg, [10, 10, 10], dx);
        assert_eq!(count, 1);
        assert_eq!(normals[0], Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(boundary_normals(&cfg, [10, 10, 11], dx).1, 0);
    }
}
