//! Dense 3×3 kernels: determinant, cofactor, a rotation-convention SVD, the
//! polar decomposition, and the reverse-mode adjoints every constitutive law
//! is built on.
//!
//! The SVD always returns proper rotations `U`, `V` (det = +1). A reflection
//! in the input is folded into the sign of the last singular value, so
//! `sigma[0] >= sigma[1] >= |sigma[2]|`.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Below this magnitude a deformation gradient counts as singular.
pub const DET_EPSILON: f64 = 1e-10;

/// Floor applied to `σᵢ² − σⱼ²` denominators in [`svd3_adjoint`].
pub const SVD_EPSILON: f64 = 1e-6;

const MAX_SWEEPS: usize = 40;

/// `F = U · diag(sigma) · Vᵀ` with `U`, `V` in SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::from_diagonal(&self.sigma) * self.v.transpose()
    }

    /// Rotation factor `U·Vᵀ` of the polar decomposition.
    pub fn rotation(&self) -> Mat3 {
        self.u * self.v.transpose()
    }
}

/// Determinant by cofactor expansion along the first row.
pub fn det3(f: &Mat3) -> f64 {
    f[(0, 0)] * (f[(1, 1)] * f[(2, 2)] - f[(1, 2)] * f[(2, 1)])
        - f[(0, 1)] * (f[(1, 0)] * f[(2, 2)] - f[(1, 2)] * f[(2, 0)])
        + f[(0, 2)] * (f[(1, 0)] * f[(2, 1)] - f[(1, 1)] * f[(2, 0)])
}

/// Cofactor matrix, `∂det(F)/∂F = det(F)·F⁻ᵀ`. Defined for singular `F` too.
pub fn cofactor3(f: &Mat3) -> Mat3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| f[(r0, c0)] * f[(r1, c1)] - f[(r0, c1)] * f[(r1, c0)];
    Mat3::new(
        c(1, 2, 1, 2),
        -c(1, 2, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 1, 2),
        c(0, 2, 0, 2),
        -c(0, 2, 0, 1),
        c(0, 1, 1, 2),
        -c(0, 1, 0, 2),
        c(0, 1, 0, 1),
    )
}

/// `F⁻ᵀ`, failing when `|det F| <= DET_EPSILON`.
pub fn inv_transpose3(f: &Mat3) -> Result<Mat3> {
    let det = det3(f);
    if det.abs() <= DET_EPSILON || !det.is_finite() {
        return Err(Error::SingularMatrix { det });
    }
    Ok(cofactor3(f) / det)
}

/// Rotation matrix for a rotation vector (axis scaled by angle in radians).
pub fn rotation_from_axis_angle(axis_angle: &Vec3) -> Mat3 {
    Rotation3::from_scaled_axis(*axis_angle).into_inner()
}

/// One-sided Jacobi SVD specialised for 3×3.
///
/// Rotations are applied to the columns of `F·V` until they are mutually
/// orthogonal, which diagonalises `FᵀF` implicitly without forming it; the
/// column norms are the singular values and the normalised columns give `U`.
pub fn svd3(f: &Mat3) -> Svd3 {
    let mut b = *f;
    let mut v = Mat3::identity();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let bp = b.column(p).into_owned();
            let bq = b.column(q).into_owned();
            let alpha = bp.norm_squared();
            let beta = bq.norm_squared();
            let gamma = bp.dot(&bq);
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut b, &mut v] {
                let mp = m.column(p).into_owned();
                let mq = m.column(q).into_owned();
                m.set_column(p, &(mp * c - mq * s));
                m.set_column(q, &(mp * s + mq * c));
            }
        }
        if !rotated {
            break;
        }
    }

    // Sort columns by decreasing norm; the sort is stable so ties keep order.
    let norms = [b.column(0).norm(), b.column(1).norm(), b.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let bs = Mat3::from_columns(&[b.column(order[0]), b.column(order[1]), b.column(order[2])]);
    let mut vs = Mat3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    let mut b3 = bs.column(2).into_owned();
    if det3(&vs) < 0.0 {
        let flipped = -vs.column(2).into_owned();
        vs.set_column(2, &flipped);
        b3 = -b3;
    }

    let b1 = bs.column(0).into_owned();
    let b2 = bs.column(1).into_owned();
    let sigma1 = b1.norm();
    let u1 = if sigma1 > 0.0 { b1 / sigma1 } else { Vec3::x() };
    let u2 = orthonormal_complement(&u1, &b2);
    let u3 = u1.cross(&u2);
    let u = Mat3::from_columns(&[u1, u2, u3]);
    let sigma = Vec3::new(sigma1, u2.dot(&b2), u3.dot(&b3));

    Svd3 { u, sigma, v: vs }
}

/// Unit vector along the part of `w` orthogonal to unit `u`; any orthogonal
/// unit vector when that part vanishes.
fn orthonormal_complement(u: &Vec3, w: &Vec3) -> Vec3 {
    let mut r = w - u * u.dot(w);
    r -= u * u.dot(&r);
    let n = r.norm();
    if n > f64::MIN_POSITIVE && n.is_finite() {
        return r / n;
    }
    // Pick the basis axis least aligned with u.
    let axis = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vec3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let r = axis - u * u.dot(&axis);
    r / r.norm()
}

/// Polar decomposition `F = R·S` with `R = U·Vᵀ ∈ SO(3)` and `S = V·Σ·Vᵀ`.
pub fn polar3(f: &Mat3) -> (Mat3, Mat3) {
    let svd = svd3(f);
    let s = svd.v * Mat3::from_diagonal(&svd.sigma) * svd.v.transpose();
    (svd.rotation(), 0.5 * (s + s.transpose()))
}

fn clamp_signed(d: f64, floor: f64, sign_if_zero: f64) -> f64 {
    let s = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        sign_if_zero
    };
    s * d.abs().max(floor)
}

/// Pull back cotangents of `(U, Σ, V)` to a cotangent of `F`.
///
/// The `1/(σⱼ² − σᵢ²)` coupling terms are clamped at [`SVD_EPSILON`] so the
/// result stays finite for repeated singular values.
pub fn svd3_adjoint(_f: &Mat3, svd: &Svd3, du: &Mat3, dsigma: &Vec3, dv: &Mat3) -> Mat3 {
    let s = svd.sigma;
    let mut coupling = Mat3::zeros();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let d = clamp_signed(s[j] * s[j] - s[i] * s[i], SVD_EPSILON, -1.0);
            coupling[(i, j)] = 1.0 / d;
            coupling[(j, i)] = -1.0 / d;
        }
    }
    let ut_du = svd.u.transpose() * du;
    let vt_dv = svd.v.transpose() * dv;
    let ku = ut_du - ut_du.transpose();
    let kv = vt_dv - vt_dv.transpose();
    let sig = Mat3::from_diagonal(&s);
    let inner = coupling.component_mul(&ku) * sig + Mat3::from_diagonal(dsigma) + sig * coupling.component_mul(&kv);
    svd.u * inner * svd.v.transpose()
}

/// Adjoint of an isotropic spectral map `G(F) = U·diag(g(σ))·Vᵀ`.
///
/// `jac[(i, j)] = ∂gᵢ/∂σⱼ`. Off-diagonal couplings use divided differences
/// `(gⱼ − gᵢ)/(σⱼ − σᵢ)` and `(gᵢ + gⱼ)/(σᵢ + σⱼ)`, which stay bounded at
/// repeated singular values where the raw SVD adjoint would not.
///
/// Returns `∂L/∂F` and `diag(Uᵀ·Ḡ·V)`, the weights for `∂g/∂(parameter)`.
pub fn spectral_vjp(svd: &Svd3, g: &Vec3, jac: &Mat3, g_bar: &Mat3) -> (Mat3, Vec3) {
    let s = svd.sigma;
    let m = svd.u.transpose() * g_bar * svd.v;
    let m_diag = Vec3::new(m[(0, 0)], m[(1, 1)], m[(2, 2)]);
    let sigma_bar = jac.transpose() * m_diag;
    let mut p_bar = Mat3::from_diagonal(&sigma_bar);
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let gap = s[j] - s[i];
            let scale = 1.0f64.max(s[i].abs()).max(s[j].abs());
            let a = if gap.abs() > 1e-6 * scale {
                (g[j] - g[i]) / gap
            } else {
                0.5 * (jac[(i, i)] - jac[(i, j)] + jac[(j, j)] - jac[(j, i)])
            };
            let b = (g[i] + g[j]) / clamp_signed(s[i] + s[j], SVD_EPSILON, 1.0);
            p_bar[(i, j)] = 0.5 * (a + b) * m[(i, j)] + 0.5 * (a - b) * m[(j, i)];
        }
    }
    (svd.u * p_bar * svd.v.transpose(), m_diag)
}

/// Adjoint of `R = U·Vᵀ` from [`polar3`].
pub fn polar3_adjoint(svd: &Svd3, r_bar: &Mat3) -> Mat3 {
    spectral_vjp(svd, &Vec3::repeat(1.0), &Mat3::zeros(), r_bar).0
}

/// Row-major flattening, the on-disk and feature-vector convention.
pub fn to_row_major(m: &Mat3) -> [f64; 9] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
}

pub fn from_row_major(a: &[f64]) -> Mat3 {
    Mat3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8])
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use rand::Rng;

    #[test]
    fn svd_identity_and_ordered_diagonal() {
        let s = svd3(&Mat3::identity());
        assert_eq!(s.u, Mat3::identity());
        assert_eq!(s.v, Mat3::identity());
        assert_eq!(s.sigma, Vec3::new(1.0, 1.0, 1.0));

        let s = svd3(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 0.5)));
        assert_eq!(s.u, Mat3::identity());
        assert_eq!(s.v, Mat3::identity());
        assert_eq!(s.sigma, Vec3::new(2.0, 1.0, 0.5));
    }

    #[test]
    fn svd_random_reconstruction_and_orthogonality() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let f = random_mat(&mut r, -2.0, 2.0);
            let s = svd3(&f);
            assert!((s.reconstruct() - f).norm() <= 1e-10 * f.norm());
            assert!((s.u.transpose() * s.u - Mat3::identity()).norm() <= 1e-10);
            assert!((s.v.transpose() * s.v - Mat3::identity()).norm() <= 1e-10);
            assert!((det3(&s.u) - 1.0).abs() < 1e-10 && (det3(&s.v) - 1.0).abs() < 1e-10);
            assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2].abs());
            assert!(s.sigma[2] * det3(&f) >= 0.0);
        }
    }

    #[test]
    fn svd_singular_values_match_library_oracle() {
        let mut r = rng(2);
        for _ in 0..200 {
            let f = random_mat(&mut r, -2.0, 2.0);
            let ours = svd3(&f).sigma.map(f64::abs);
            let mut theirs: Vec<f64> = nalgebra::SVD::new(f, false, false).singular_values.iter().copied().collect();
            theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for k in 0..3 {
                assert!((ours[k] - theirs[k]).abs() <= 1e-12 * theirs[0]);
            }
        }
    }

    #[test]
    fn svd_degenerate_inputs() {
        for f in [Mat3::zeros(), Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)), Mat3::repeat(1.0), -Mat3::identity()] {
            let s = svd3(&f);
            assert!((s.reconstruct() - f).norm() <= 1e-12 * f.norm().max(1.0));
            assert!((det3(&s.u) - 1.0).abs() < 1e-12 && (det3(&s.v) - 1.0).abs() < 1e-12);
        }
        let s = svd3(&-Mat3::identity());
        assert_eq!(s.sigma[2], -1.0);
    }

    #[test]
    fn svd_is_deterministic() {
        let f = Mat3::new(0.3, -1.2, 0.7, 1.1, 0.2, -0.4, 0.9, 0.5, 1.3);
        let a = svd3(&f);
        let b = svd3(&f);
        assert_eq!(a, b);
    }

    #[test]
    fn polar_identity_rotation_and_random() {
        let (r, s) = polar3(&Mat3::identity());
        assert_eq!(r, Mat3::identity());
        assert_eq!(s, Mat3::identity());

        let mut g = rng(3);
        for _ in 0..100 {
            let q = random_rotation(&mut g);
            let (r, s) = polar3(&q);
            assert!((r - q).norm() < 1e-12);
            assert!((s - Mat3::identity()).norm() < 1e-12);
        }
        for _ in 0..1000 {
            let f = random_mat(&mut g, -2.0, 2.0);
            let (r, s) = polar3(&f);
            assert!((s - s.transpose()).amax() <= 1e-12);
            assert!((det3(&r) - 1.0).abs() <= 1e-10);
            assert!((r * s - f).norm() <= 1e-10 * f.norm());
        }
    }

    /// Leibniz permutation sum, independent of the cofactor expansion.
    fn det_by_permutations(f: &Mat3) -> f64 {
        const PERMS: [([usize; 3], f64); 6] = [
            ([0, 1, 2], 1.0),
            ([1, 2, 0], 1.0),
            ([2, 0, 1], 1.0),
            ([0, 2, 1], -1.0),
            ([2, 1, 0], -1.0),
            ([1, 0, 2], -1.0),
        ];
        PERMS.iter().map(|(p, s)| s * f[(0, p[0])] * f[(1, p[1])] * f[(2, p[2])]).sum()
    }

    #[test]
    fn det_examples_and_oracle() {
        assert_eq!(det3(&Mat3::identity()), 1.0);
        assert_eq!(det3(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))), 2.0);
        let mut g = rng(4);
        for _ in 0..1000 {
            let f = random_mat(&mut g, -2.0, 2.0);
            let d = det_by_permutations(&f);
            assert!((det3(&f) - d).abs() <= 1e-12 * d.abs().max(1e-3));
        }
    }

    #[test]
    fn inv_transpose_examples() {
        assert_eq!(inv_transpose3(&Mat3::identity()).unwrap(), Mat3::identity());
        let out = inv_transpose3(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))).unwrap();
        assert_eq!(out, Mat3::from_diagonal(&Vec3::new(0.5, 1.0, 1.0)));
        let mut g = rng(5);
        for _ in 0..500 {
            let f = random_near_identity(&mut g, 0.5, 0.2);
            let out = inv_transpose3(&f).unwrap();
            assert!((f.transpose() * out - Mat3::identity()).norm() <= 1e-10);
        }
        let singular = Mat3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0);
        assert!(matches!(inv_transpose3(&singular), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn svd_adjoint_diagonal_example() {
        let f = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 0.5));
        let s = svd3(&f);
        let df = svd3_adjoint(&f, &s, &Mat3::zeros(), &Vec3::new(1.0, 0.0, 0.0), &Mat3::zeros());
        assert!((df - Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0))).norm() < 1e-14);
    }

    #[test]
    fn svd_adjoint_matches_finite_differences() {
        let mut g = rng(6);
        let mut checked = 0;
        while checked < 50 {
            let f = random_mat(&mut g, -2.0, 2.0);
            let s = svd3(&f);
            let gaps = [s.sigma[0] - s.sigma[1], s.sigma[1] - s.sigma[2].abs(), s.sigma[2].abs()];
            if gaps.iter().any(|&x| x < 0.1) {
                continue;
            }
            checked += 1;
            let du = random_mat(&mut g, -1.0, 1.0);
            let dv = random_mat(&mut g, -1.0, 1.0);
            let ds = Vec3::new(g.random_range(-1.0..1.0), g.random_range(-1.0..1.0), g.random_range(-1.0..1.0));
            let base_u = s.u;
            // Align column signs with the base decomposition so the scalar is smooth.
            let loss = |m: &Mat3| {
                let p = svd3(m);
                let mut u = p.u;
                let mut v = p.v;
                for k in 0..3 {
                    if u.column(k).dot(&base_u.column(k)) < 0.0 {
                        let cu = -u.column(k).into_owned();
                        let cv = -v.column(k).into_owned();
                        u.set_column(k, &cu);
                        v.set_column(k, &cv);
                    }
                }
                du.component_mul(&u).sum() + ds.dot(&p.sigma) + dv.component_mul(&v).sum()
            };
            let h = 1e-5 * f.norm();
            let fd = fd_grad(&f, h, loss);
            let an = svd3_adjoint(&f, &s, &du, &ds, &dv);
            assert!(rel_err(&an, &fd) <= 1e-4, "rel err {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn svd_adjoint_finite_for_repeated_values() {
        let f = Mat3::from_diagonal(&Vec3::new(1.5, 1.5, 0.7));
        let s = svd3(&f);
        let out = svd3_adjoint(&f, &s, &Mat3::repeat(0.3), &Vec3::new(1.0, 1.0, 1.0), &Mat3::repeat(-0.2));
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn polar_adjoint_matches_finite_differences_including_identity() {
        let mut g = rng(7);
        let mut samples = vec![Mat3::identity(), rotation_from_axis_angle(&Vec3::new(0.3, -0.2, 0.5))];
        for _ in 0..50 {
            samples.push(random_near_identity(&mut g, 0.5, 0.2));
        }
        for f in samples {
            let w = random_mat(&mut g, -1.0, 1.0);
            let an = polar3_adjoint(&svd3(&f), &w);
            let fd = fd_grad(&f, 1e-6, |m| w.component_mul(&polar3(m).0).sum());
            assert!(rel_err(&an, &fd) <= 1e-6, "rel err {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn spectral_vjp_matches_finite_differences_for_log_map() {
        // G = U·diag(log σ)·Vᵀ / σ-style map, with a repeated singular value.
        let map = |s: &Vec3| (s.map(f64::ln), Mat3::from_diagonal(&s.map(|x| 1.0 / x)));
        let mut g = rng(8);
        let mut samples = vec![Mat3::from_diagonal(&Vec3::new(1.2, 1.2, 0.9))];
        for _ in 0..30 {
            samples.push(random_near_identity(&mut g, 0.4, 0.3));
        }
        for f in samples {
            let w = random_mat(&mut g, -1.0, 1.0);
            let s = svd3(&f);
            let (gv, jac) = map(&s.sigma);
            let (an, _) = spectral_vjp(&s, &gv, &jac, &w);
            let fd = fd_grad(&f, 1e-6, |m| {
                let p = svd3(m);
                let (gv, _) = map(&p.sigma);
                w.component_mul(&(p.u * Mat3::from_diagonal(&gv) * p.v.transpose())).sum()
            });
            assert!(rel_err(&an, &fd) <= 1e-6, "rel err {}", rel_err(&an, &fd));
        }
    }

    #[test]
    fn cofactor_is_det_times_inverse_transpose() {
        let mut g = rng(9);
        for _ in 0..100 {
            let f = random_near_identity(&mut g, 0.5, 0.2);
            let expected = det3(&f) * inv_transpose3(&f).unwrap();
            assert!((cofactor3(&f) - expected).norm() < 1e-12);
        }
    }
}
