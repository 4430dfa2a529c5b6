//! Rotation-equivariant neural constitutive laws.
//!
//! Each network is a bias-free three-layer GELU MLP mapping 13 rotation
//! invariants of `F` to a 3×3 matrix `T1`. The wrapper symmetrizes it and
//! rotates by the polar rotation of `F`:
//!
//! ```text
//! Y(F) = R · ½(T1 + T1ᵀ),   R = U·Vᵀ
//! elastic:  P = stress_scale · Y_e(F)
//! plastic:  F_new = F + alpha · Y_p(F)
//! ```
//!
//! With no biases and invariants that vanish at `F = I`, the undeformed
//! state is an exact equilibrium.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::law::{ConstitutiveLaw, StressMeasure};
use crate::linalg3::{cofactor3, det3, from_row_major, polar3_adjoint, svd3, to_row_major, Mat3, Svd3, Vec3};

pub const INPUT_DIM: usize = 13;
pub const HIDDEN_DIM: usize = 64;
pub const OUTPUT_DIM: usize = 9;
pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_STRESS_SCALE: f64 = 1e5;

const LAYER_DIMS: [[usize; 2]; 3] = [[HIDDEN_DIM, INPUT_DIM], [HIDDEN_DIM, HIDDEN_DIM], [OUTPUT_DIM, HIDDEN_DIM]];
const CHECKPOINT_MAGIC: &[u8; 4] = b"NCLW";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights of one bias-free MLP, each stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

impl MlpParams {
    pub const NUM_PARAMS: usize = HIDDEN_DIM * INPUT_DIM + HIDDEN_DIM * HIDDEN_DIM + OUTPUT_DIM * HIDDEN_DIM;

    pub fn zeros() -> Self {
        MlpParams {
            w1: vec![0.0; HIDDEN_DIM * INPUT_DIM],
            w2: vec![0.0; HIDDEN_DIM * HIDDEN_DIM],
            w3: vec![0.0; OUTPUT_DIM * HIDDEN_DIM],
        }
    }

    /// Uniform in `±√(1/fan_in)` per layer.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut layer = |[rows, cols]: [usize; 2]| {
            let bound = (1.0 / cols as f64).sqrt();
            (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>()
        };
        MlpParams { w1: layer(LAYER_DIMS[0]), w2: layer(LAYER_DIMS[1]), w3: layer(LAYER_DIMS[2]) }
    }

    fn layers(&self) -> [&[f64]; 3] {
        [&self.w1, &self.w2, &self.w3]
    }

    fn layers_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.w1, &mut self.w2, &mut self.w3]
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        let mut off = 0;
        for w in self.layers() {
            out[off..off + w.len()].copy_from_slice(w);
            off += w.len();
        }
    }

    pub fn read_flat(&mut self, src: &[f64]) {
        let mut off = 0;
        for w in self.layers_mut() {
            let n = w.len();
            w.copy_from_slice(&src[off..off + n]);
            off += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralLawParams {
    pub elastic_net: MlpParams,
    pub plastic_net: MlpParams,
    pub alpha: f64,
    pub stress_scale: f64,
}

impl NeuralLawParams {
    pub const NUM_PARAMS: usize = 2 * MlpParams::NUM_PARAMS;

    pub fn zeros() -> Self {
        NeuralLawParams {
            elastic_net: MlpParams::zeros(),
            plastic_net: MlpParams::zeros(),
            alpha: DEFAULT_ALPHA,
            stress_scale: DEFAULT_STRESS_SCALE,
        }
    }

    /// Elastic weights then plastic weights, each `W1, W2, W3` row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; Self::NUM_PARAMS];
        let (e, p) = out.split_at_mut(MlpParams::NUM_PARAMS);
        self.elastic_net.write_flat(e);
        self.plastic_net.write_flat(p);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != Self::NUM_PARAMS {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", Self::NUM_PARAMS, flat.len())));
        }
        let (e, p) = flat.split_at(MlpParams::NUM_PARAMS);
        self.elastic_net.read_flat(e);
        self.plastic_net.read_flat(p);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        for _ in 0..2 {
            w.write_u32::<LittleEndian>(LAYER_DIMS.len() as u32)?;
            for [rows, cols] in LAYER_DIMS {
                w.write_u32::<LittleEndian>(rows as u32)?;
                w.write_u32::<LittleEndian>(cols as u32)?;
            }
        }
        for x in self.to_flat() {
            w.write_f64::<LittleEndian>(x)?;
        }
        w.write_f64::<LittleEndian>(self.alpha)?;
        w.write_f64::<LittleEndian>(self.stress_scale)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a neural law checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        for _ in 0..2 {
            let layers = r.read_u32::<LittleEndian>()? as usize;
            if layers != LAYER_DIMS.len() {
                return Err(Error::Format(format!("expected {} layers, found {layers}", LAYER_DIMS.len())));
            }
            for [rows, cols] in LAYER_DIMS {
                let (rr, cc) = (r.read_u32::<LittleEndian>()? as usize, r.read_u32::<LittleEndian>()? as usize);
                if (rr, cc) != (rows, cols) {
                    return Err(Error::Format(format!("layer shape {rr}x{cc}, expected {rows}x{cols}")));
                }
            }
        }
        let mut flat = vec![0.0; Self::NUM_PARAMS];
        r.read_f64_into::<LittleEndian>(&mut flat)?;
        let mut params = Self::zeros();
        params.set_flat(&flat)?;
        params.alpha = r.read_f64::<LittleEndian>()?;
        params.stress_scale = r.read_f64::<LittleEndian>()?;
        if !(params.stress_scale > 0.0) {
            return Err(Error::Format(format!("stress_scale must be positive, got {}", params.stress_scale)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(params)
    }
}

/// Deterministic random initialization of both networks.
pub fn init_params(seed: u64) -> NeuralLawParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elastic_net = MlpParams::random(&mut rng);
    let plastic_net = MlpParams::random(&mut rng);
    NeuralLawParams { elastic_net, plastic_net, ..NeuralLawParams::zeros() }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * pdf
}

fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out += Wᵀ·y`.
fn matvec_t(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += yi * a;
        }
    }
}

/// `G += y·xᵀ`.
fn outer_acc(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi += yi * xi;
        }
    }
}

/// Forward activations kept for the backward pass.
struct MlpCache {
    input: [f64; INPUT_DIM],
    a1: [f64; HIDDEN_DIM],
    h1: [f64; HIDDEN_DIM],
    a2: [f64; HIDDEN_DIM],
    h2: [f64; HIDDEN_DIM],
}

fn mlp_forward_cached(params: &MlpParams, input: &[f64; INPUT_DIM]) -> ([f64; OUTPUT_DIM], MlpCache) {
    let mut c = MlpCache {
        input: *input,
        a1: [0.0; HIDDEN_DIM],
        h1: [0.0; HIDDEN_DIM],
        a2: [0.0; HIDDEN_DIM],
        h2: [0.0; HIDDEN_DIM],
    };
    matvec(&params.w1, INPUT_DIM, input, &mut c.a1);
    for i in 0..HIDDEN_DIM {
        c.h1[i] = gelu(c.a1[i]);
    }
    matvec(&params.w2, HIDDEN_DIM, &c.h1, &mut c.a2);
    for i in 0..HIDDEN_DIM {
        c.h2[i] = gelu(c.a2[i]);
    }
    let mut out = [0.0; OUTPUT_DIM];
    matvec(&params.w3, HIDDEN_DIM, &c.h2, &mut out);
    (out, c)
}

pub fn mlp_forward(params: &MlpParams, input: &[f64; INPUT_DIM]) -> [f64; OUTPUT_DIM] {
    mlp_forward_cached(params, input).0
}

/// Accumulates weight gradients into `grad` (flat `W1, W2, W3`) and
/// returns the input gradient.
fn mlp_backward(params: &MlpParams, cache: &MlpCache, out_bar: &[f64; OUTPUT_DIM], grad: &mut [f64]) -> [f64; INPUT_DIM] {
    let (g1, rest) = grad.split_at_mut(HIDDEN_DIM * INPUT_DIM);
    let (g2, g3) = rest.split_at_mut(HIDDEN_DIM * HIDDEN_DIM);

    outer_acc(g3, HIDDEN_DIM, out_bar, &cache.h2);
    let mut a2_bar = [0.0; HIDDEN_DIM];
    matvec_t(&params.w3, HIDDEN_DIM, out_bar, &mut a2_bar);
    for i in 0..HIDDEN_DIM {
        a2_bar[i] *= gelu_derivative(cache.a2[i]);
    }
    outer_acc(g2, HIDDEN_DIM, &a2_bar, &cache.h1);
    let mut a1_bar = [0.0; HIDDEN_DIM];
    matvec_t(&params.w2, HIDDEN_DIM, &a2_bar, &mut a1_bar);
    for i in 0..HIDDEN_DIM {
        a1_bar[i] *= gelu_derivative(cache.a1[i]);
    }
    outer_acc(g1, INPUT_DIM, &a1_bar, &cache.input);
    let mut x_bar = [0.0; INPUT_DIM];
    matvec_t(&params.w1, INPUT_DIM, &a1_bar, &mut x_bar);
    x_bar
}

fn invariants_of(f: &Mat3, svd: &Svd3) -> [f64; INPUT_DIM] {
    let mut x = [0.0; INPUT_DIM];
    for i in 0..3 {
        x[i] = svd.sigma[i] - 1.0;
    }
    let c = to_row_major(&(f.transpose() * f - Mat3::identity()));
    x[3..12].copy_from_slice(&c);
    x[12] = det3(f) - 1.0;
    x
}

/// `[Σ − 1, vec(FᵀF − I), det F − 1]`; zero at `F = I`.
pub fn invariants(f: &Mat3) -> [f64; INPUT_DIM] {
    invariants_of(f, &svd3(f))
}

struct WrapCache {
    svd: Svd3,
    rotation: Mat3,
    t2: Mat3,
    mlp: MlpCache,
}

fn wrap_forward(params: &MlpParams, f: &Mat3) -> (Mat3, WrapCache) {
    let svd = svd3(f);
    let input = invariants_of(f, &svd);
    let (out, mlp) = mlp_forward_cached(params, &input);
    let t1 = from_row_major(&out);
    let t2 = 0.5 * (t1 + t1.transpose());
    let rotation = svd.rotation();
    (rotation * t2, WrapCache { svd, rotation, t2, mlp })
}

/// `Y = R·sym(NN(invariants(F)))`.
pub fn equivariant_wrap(params: &MlpParams, f: &Mat3) -> Mat3 {
    wrap_forward(params, f).0
}

/// Returns `∂L/∂F` given `∂L/∂Y`; weight gradients go into `grad`.
fn wrap_backward(params: &MlpParams, f: &Mat3, cache: &WrapCache, y_bar: &Mat3, grad: &mut [f64]) -> Mat3 {
    let r_bar = y_bar * cache.t2.transpose();
    let t2_bar = cache.rotation.transpose() * y_bar;
    let t1_bar = 0.5 * (t2_bar + t2_bar.transpose());
    let x_bar = mlp_backward(params, &cache.mlp, &to_row_major(&t1_bar), grad);

    let svd = &cache.svd;
    let sigma_bar = Vec3::new(x_bar[0], x_bar[1], x_bar[2]);
    let c_bar = from_row_major(&x_bar[3..12]);
    let mut f_bar = svd.u * Mat3::from_diagonal(&sigma_bar) * svd.v.transpose();
    f_bar += f * (c_bar + c_bar.transpose());
    f_bar += cofactor3(f) * x_bar[12];
    f_bar += polar3_adjoint(svd, &r_bar);
    f_bar
}

pub fn neural_elastic(params: &NeuralLawParams, f: &Mat3) -> Mat3 {
    params.stress_scale * equivariant_wrap(&params.elastic_net, f)
}

pub fn neural_plastic(params: &NeuralLawParams, f_trial: &Mat3) -> Mat3 {
    f_trial + params.alpha * equivariant_wrap(&params.plastic_net, f_trial)
}

/// Neural elastic and plastic maps sharing one flat parameter vector
/// (see [`NeuralLawParams::to_flat`]).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralLaw {
    pub params: NeuralLawParams,
}

impl NeuralLaw {
    pub fn new(params: NeuralLawParams) -> Self {
        NeuralLaw { params }
    }

    /// Given `∂L/∂P` of the elastic map, adds the weight gradient into the
    /// elastic half of `param_grad` and returns `∂L/∂F`.
    pub fn piola_vjp(&self, f: &Mat3, p_bar: &Mat3, param_grad: &mut [f64]) -> Mat3 {
        let (_, cache) = wrap_forward(&self.params.elastic_net, f);
        let y_bar = self.params.stress_scale * p_bar;
        wrap_backward(&self.params.elastic_net, f, &cache, &y_bar, &mut param_grad[..MlpParams::NUM_PARAMS])
    }
}

impl ConstitutiveLaw for NeuralLaw {
    fn stress_measure(&self) -> StressMeasure {
        StressMeasure::FirstPiola
    }

    fn elastic(&self, f: &Mat3) -> Result<Mat3> {
        Ok(neural_elastic(&self.params, f))
    }

    fn plastic(&self, f_trial: &Mat3) -> Result<Mat3> {
        Ok(neural_plastic(&self.params, f_trial))
    }

    fn param_shapes(&self) -> Vec<[usize; 2]> {
        LAYER_DIMS.iter().chain(LAYER_DIMS.iter()).copied().collect()
    }

    fn kirchhoff_vjp(&self, f: &Mat3, tau_bar: &Mat3, param_grad: &mut [f64]) -> Result<Mat3> {
        // τ = P·Fᵀ
        let (y, cache) = wrap_forward(&self.params.elastic_net, f);
        let s = self.params.stress_scale;
        let p = s * y;
        let y_bar = s * tau_bar * f;
        let grad = &mut param_grad[..MlpParams::NUM_PARAMS];
        Ok(tau_bar.transpose() * p + wrap_backward(&self.params.elastic_net, f, &cache, &y_bar, grad))
    }

    fn plastic_vjp(&self, f_trial: &Mat3, out_bar: &Mat3, param_grad: &mut [f64]) -> Result<Mat3> {
        let (_, cache) = wrap_forward(&self.params.plastic_net, f_trial);
        let y_bar = self.params.alpha * out_bar;
        let grad = &mut param_grad[MlpParams::NUM_PARAMS..];
        Ok(out_bar + wrap_backward(&self.params.plastic_net, f_trial, &cache, &y_bar, grad))
    }
}
