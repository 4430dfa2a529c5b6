use crate::linalg3::Vec3;

/// Quadratic B-spline weights of one particle over its 3×3×3 node stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    /// Lowest node index per axis (grid coordinates, may be negative).
    pub base: [i32; 3],
    /// Particle position relative to `base`, in cells.
    pub fx: Vec3,
    pub w: [[f64; 3]; 3],
    /// `dw/dfx`.
    pub dw: [[f64; 3]; 3],
}

impl Stencil {
    pub fn new(x: &Vec3, inv_dx: f64) -> Self {
        let mut base = [0i32; 3];
        let mut fx = Vec3::zeros();
        let mut w = [[0.0; 3]; 3];
        let mut dw = [[0.0; 3]; 3];
        for a in 0..3 {
            let xi = x[a] * inv_dx;
            let b = (xi - 0.5).floor();
            let f = xi - b;
            base[a] = b as i32;
            fx[a] = f;
            w[a] = [0.5 * (1.5 - f).powi(2), 0.75 - (f - 1.0).powi(2), 0.5 * (f - 0.5).powi(2)];
            dw[a] = [f - 1.5, -2.0 * (f - 1.0), f - 0.5];
        }
        Stencil { base, fx, w, dw }
    }

    pub fn weight(&self, o: [usize; 3]) -> f64 {
        self.w[0][o[0]] * self.w[1][o[1]] * self.w[2][o[2]]
    }

    /// `∂N/∂x` for node offset `o`.
    pub fn weight_grad(&self, o: [usize; 3], inv_dx: f64) -> Vec3 {
        let (w, dw) = (&self.w, &self.dw);
        Vec3::new(
            dw[0][o[0]] * w[1][o[1]] * w[2][o[2]],
            w[0][o[0]] * dw[1][o[1]] * w[2][o[2]],
            w[0][o[0]] * w[1][o[1]] * dw[2][o[2]],
        ) * inv_dx
    }

    /// Node position minus particle position.
    pub fn dpos(&self, o: [usize; 3], dx: f64) -> Vec3 {
        (Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64) - self.fx) * dx
    }
}

/// The 27 stencil offsets in fixed order.
pub(crate) fn offsets() -> impl Iterator<Item = [usize; 3]> {
    (0..27).map(|k| [k / 9, (k / 3) % 3, k % 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg3::test_util::rng;
    use rand::Rng;

    #[test]
    fn partition_of_unity_and_zero_gradient_sum() {
        let mut g = rng(31);
        let dx = 0.05;
        for _ in 0..1000 {
            let x = Vec3::new(g.random_range(0.0..1.0), g.random_range(0.0..1.0), g.random_range(0.0..1.0));
            let s = Stencil::new(&x, 1.0 / dx);
            let sum: f64 = offsets().map(|o| s.weight(o)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            let grad: Vec3 = offsets().map(|o| s.weight_grad(o, 1.0 / dx)).sum();
            assert!(grad.norm() <= 1e-10);
            // Linear reproduction: Σ N·dpos = 0.
            let first: Vec3 = offsets().map(|o| s.weight(o) * s.dpos(o, dx)).sum();
            assert!(first.norm() <= 1e-14);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let dx = 0.05;
        let x = Vec3::new(0.4123, 0.2871, 0.6502);
        let s = Stencil::new(&x, 1.0 / dx);
        for o in offsets() {
            let node = Vec3::from_fn(|a, _| (s.base[a] + o[a] as i32) as f64 * dx);
            let weight_at = |p: Vec3| {
                let t = Stencil::new(&p, 1.0 / dx);
                let q: [usize; 3] = std::array::from_fn(|a| {
                    let idx = ((node[a] / dx).round() as i32) - t.base[a];
                    idx as usize
                });
                t.weight(q)
            };
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = 1e-7;
                let fd = (weight_at(x + e) - weight_at(x - e)) / 2e-7;
                assert!((fd - s.weight_grad(o, 1.0 / dx)[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn particle_on_a_node() {
        let dx = 0.1;
        let s = Stencil::new(&Vec3::new(0.5, 0.5, 0.5), 1.0 / dx);
        assert_eq!(s.base, [4, 4, 4]);
        assert!((s.weight([1, 1, 1]) - 0.75f64.powi(3)).abs() < 1e-15);
    }
}
