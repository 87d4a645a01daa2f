//! Fully input-convex networks.
//!
//! `u(x) = N(x) + λ‖x‖² + ½‖Sx‖²` where `N` is a FICNN with layers
//! `z_{l+1} = g_l(W_l^z z_l + W_l^y x + b_l)`, `W^z ≥ δ` entrywise, and every
//! `g_l` convex and nondecreasing. `λ` is fixed; `S` is trained with the rest.

mod jet;
mod serial;

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngStream;

pub use jet::{JetAdjoint, JetOutput, JetSpec, Tape};
pub use serial::IcnnFile;

/// Default lower bound on `W^z` entries.
pub const DEFAULT_DELTA: f64 = 1e-18;
/// Default coefficient of the fixed `λ‖x‖²` term.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Relu,
    Linear,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    /// `(g, g', g'', g''')` at `a`.
    #[inline]
    pub(crate) fn derivs(self, a: f64) -> (f64, f64, f64, f64) {
        match self {
            Activation::Softplus => {
                let e = (-a.abs()).exp();
                let g = a.max(0.0) + e.ln_1p();
                let s = if a >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                let g2 = s * (1.0 - s);
                (g, s, g2, g2 * (1.0 - 2.0 * s))
            }
            Activation::Relu => {
                if a > 0.0 {
                    (a, 1.0, 0.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0, 0.0)
                }
            }
            Activation::Linear => (a, 1.0, 0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityMode {
    /// Clipping only; `λ = 0`.
    WeightClip,
    /// Clipping plus the fixed `λ‖x‖²` term with `λ > 0`.
    QuadraticSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcnnArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// One tag per layer including the scalar output layer.
    pub activations: Vec<Activation>,
    pub mode: ConvexityMode,
}

impl IcnnArch {
    /// Softplus hidden layers, linear output, quadratic skip.
    pub fn new(input_dim: usize, hidden: &[usize]) -> Self {
        let mut activations = vec![Activation::Softplus; hidden.len()];
        activations.push(Activation::Linear);
        Self { input_dim, hidden: hidden.to_vec(), activations, mode: ConvexityMode::QuadraticSkip }
    }

    pub fn with_mode(mut self, mode: ConvexityMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        let n = self.hidden.len();
        for a in &mut self.activations[..n] {
            *a = act;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::ConfigInvalid("network.input_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::ConfigInvalid("network.hidden widths must be >= 1".into()));
        }
        if self.activations.len() != self.hidden.len() + 1 {
            return Err(Error::ConfigInvalid(format!(
                "network.activations needs {} entries, got {}",
                self.hidden.len() + 1,
                self.activations.len()
            )));
        }
        Ok(())
    }

    /// Output widths of every layer, ending with 1.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.hidden.clone();
        w.push(1);
        w
    }

    pub fn is_smooth(&self) -> bool {
        self.activations.iter().all(|a| a.is_smooth())
    }

    pub fn n_params(&self) -> usize {
        let d = self.input_dim;
        let mut prev = None;
        let mut n = 0;
        for w in self.widths() {
            if let Some(p) = prev {
                n += w * p;
            }
            n += w * d + w;
            prev = Some(w);
        }
        n + d * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Absent on the first layer.
    pub wz: Option<Array2<f64>>,
    pub wy: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnParams {
    pub layers: Vec<Layer>,
    /// Trainable `S` of the `½‖Sx‖²` term.
    pub skip: Array2<f64>,
    pub lambda: f64,
    pub delta: f64,
}

impl IcnnParams {
    pub fn zeros(arch: &IcnnArch) -> Self {
        let d = arch.input_dim;
        let mut prev = None;
        let layers = arch
            .widths()
            .into_iter()
            .map(|w| {
                let wz = prev.map(|p| Array2::<f64>::zeros((w, p)));
                prev = Some(w);
                Layer { wz, wy: Array2::zeros((w, d)), b: Array1::zeros(w) }
            })
            .collect();
        let lambda = match arch.mode {
            ConvexityMode::QuadraticSkip => DEFAULT_LAMBDA,
            ConvexityMode::WeightClip => 0.0,
        };
        Self { layers, skip: Array2::zeros((d, d)), lambda, delta: DEFAULT_DELTA }
    }

    pub fn input_dim(&self) -> usize {
        self.skip.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.wz.as_ref().map_or(0, |w| w.len()) + l.wy.len() + l.b.len()).sum::<usize>()
            + self.skip.len()
    }

    /// Flattened parameters: per layer `W^z`, `W^y`, `b` (row-major), then `S`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            if let Some(wz) = &l.wz {
                out.extend(wz.iter());
            }
            out.extend(l.wy.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.skip.iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            if let Some(wz) = &mut l.wz {
                wz.iter_mut().for_each(|v| *v = it.next().unwrap());
            }
            l.wy.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.skip.iter_mut().for_each(|v| *v = it.next().unwrap());
        Ok(())
    }

    /// Same shapes, with the given flat values.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// Mask over the flat layout marking `W^z` entries.
    pub fn wz_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            if let Some(wz) = &l.wz {
                out.extend(std::iter::repeat_n(true, wz.len()));
            }
            out.extend(std::iter::repeat_n(false, l.wy.len() + l.b.len()));
        }
        out.extend(std::iter::repeat_n(false, self.skip.len()));
        out
    }

    /// Raise every `W^z` entry to at least `δ`.
    pub fn clip_convexity(&mut self) {
        let delta = self.delta;
        for l in &mut self.layers {
            if let Some(wz) = &mut l.wz {
                wz.mapv_inplace(|v| if v < delta || v.is_nan() { delta } else { v });
            }
        }
    }

    pub fn min_wz(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.wz.as_ref()).flat_map(|w| w.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Clip a copy of `params` into the convex cone.
pub fn clip_convexity(params: &IcnnParams) -> IcnnParams {
    let mut p = params.clone();
    p.clip_convexity();
    p
}

/// Network plus its architecture; the unit the solver trains and stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Icnn {
    pub arch: IcnnArch,
    pub params: IcnnParams,
}

/// Default weight scale used by [`init_identity_like`].
pub const INIT_NOISE: f64 = 0.1;

/// Near-identity initialization: `∇u(x) ≈ x`.
///
/// `S = sqrt(1 − 2λ)·I` makes the quadratic part exactly `½‖x‖²`. Hidden
/// layers get unit-scale input weights and spread biases, so their features
/// bend on the scale of the data; only the output layer is scaled by `noise`,
/// which keeps `∇u − x` small. `noise = 0` gives `∇u = id` up to `δ`-sized terms.
pub fn init_identity_like(arch: &IcnnArch, stream: RngStream, noise: f64) -> Icnn {
    let mut params = IcnnParams::zeros(arch);
    let d = arch.input_dim;
    let s = (1.0 - 2.0 * params.lambda).max(0.0).sqrt();
    params.skip = Array2::eye(d) * s;
    let mut rng = stream.rng();
    let n_layers = params.layers.len();
    for (i, l) in params.layers.iter_mut().enumerate() {
        let last = i + 1 == n_layers;
        if !last {
            let scale = 1.0 / (d as f64).sqrt();
            l.wy.mapv_inplace(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            });
            l.b.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        }
        if let Some(wz) = &mut l.wz {
            let scale = if last { INIT_OUTPUT_SCALE * noise } else { 1.0 } / wz.ncols() as f64;
            wz.mapv_inplace(|_| scale * rand::Rng::random::<f64>(&mut rng));
        }
    }
    params.clip_convexity();
    Icnn { arch: arch.clone(), params }
}

/// Output-layer weight scale per unit of `noise`.
const INIT_OUTPUT_SCALE: f64 = 0.1;

/// Generic random convex network with O(1) weights, for gradient checks.
pub fn init_random(arch: &IcnnArch, stream: RngStream) -> Icnn {
    let mut params = IcnnParams::zeros(arch);
    let d = arch.input_dim;
    let mut rng = stream.rng();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    for l in &mut params.layers {
        l.wy.mapv_inplace(|_| normal() / (d as f64).sqrt());
        l.b.mapv_inplace(|_| 0.5 * normal());
        if let Some(wz) = &mut l.wz {
            let scale = 1.0 / (wz.ncols() as f64).sqrt();
            wz.mapv_inplace(|_| scale * normal().abs());
        }
    }
    params.skip = Array2::from_shape_fn((d, d), |(i, j)| if i == j { 0.8 } else { 0.0 } + 0.2 * normal());
    params.clip_convexity();
    Icnn { arch: arch.clone(), params }
}

impl Icnn {
    pub fn new(arch: IcnnArch, params: IcnnParams) -> Result<Self> {
        arch.validate()?;
        let expect = IcnnParams::zeros(&arch);
        let shapes_match = expect.layers.len() == params.layers.len()
            && expect.layers.iter().zip(&params.layers).all(|(a, b)| {
                a.wy.dim() == b.wy.dim()
                    && a.b.len() == b.b.len()
                    && a.wz.as_ref().map(|w| w.dim()) == b.wz.as_ref().map(|w| w.dim())
            })
            && expect.skip.dim() == params.skip.dim();
        if !shapes_match {
            return Err(Error::ShapeMismatch("parameters do not match architecture".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn check_point(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// `u(x)`.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_point(x)?;
        let pts = x.to_owned().insert_axis(ndarray::Axis(0));
        let (out, _) = self.jets(pts.view(), &JetSpec::value(), None, false)?;
        Ok(out.value[0])
    }

    /// `∇ₓu(x)`.
    pub fn grad_x(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_point(x)?;
        let pts = x.to_owned().insert_axis(ndarray::Axis(0));
        let (out, _) = self.jets(pts.view(), &JetSpec::gradient(self.dim()), None, false)?;
        Ok(out.first.row(0).to_owned())
    }

    /// `∇ₓ²u(x)`.
    pub fn hessian_x(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_point(x)?;
        let pts = x.to_owned().insert_axis(ndarray::Axis(0));
        let spec = JetSpec::hessian(self.dim());
        let (out, _) = self.jets(pts.view(), &spec, None, false)?;
        Ok(spec.hessian_of(&out, 0))
    }

    /// Gradients at every row of `points`.
    pub fn grad_batch(&self, points: ndarray::ArrayView2<f64>) -> Result<Array2<f64>> {
        let (out, _) = self.jets(points, &JetSpec::gradient(self.dim()), None, false)?;
        Ok(out.first)
    }

    /// Gradients and Hessians at every row of `points`.
    pub fn grad_hess_batch(&self, points: ndarray::ArrayView2<f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let spec = JetSpec::hessian(self.dim());
        let (out, _) = self.jets(points, &spec, None, false)?;
        let hs = (0..points.nrows()).map(|i| spec.hessian_of(&out, i)).collect();
        let grads = out.first.slice(ndarray::s![.., ..self.dim()]).to_owned();
        Ok((grads, hs))
    }
}

/// `u(x)` for the network described by `params` and `arch`.
pub fn forward(params: &IcnnParams, arch: &IcnnArch, x: ArrayView1<f64>) -> Result<f64> {
    Icnn::new(arch.clone(), params.clone())?.forward(x)
}

/// `∇ₓu(x)`.
pub fn grad_x(params: &IcnnParams, arch: &IcnnArch, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    Icnn::new(arch.clone(), params.clone())?.grad_x(x)
}

/// `∇ₓ²u(x)`.
pub fn hessian_x(params: &IcnnParams, arch: &IcnnArch, x: ArrayView1<f64>) -> Result<Array2<f64>> {
    Icnn::new(arch.clone(), params.clone())?.hessian_x(x)
}

/// A scalar loss expressed through per-point jets of `u`: the points, the jet
/// layout the loss reads, and the loss adjoint with respect to those jets.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub points: Array2<f64>,
    pub spec: JetSpec,
    pub extra_dirs: Option<ndarray::Array3<f64>>,
    pub adjoint: JetAdjoint,
}

/// A scalar loss value together with its graph.
#[derive(Debug, Clone)]
pub struct LossNode {
    pub value: f64,
    pub graph: LossGraph,
}

impl LossNode {
    pub fn param_grad(&self, net: &Icnn) -> Result<Vec<f64>> {
        param_grad(&self.graph, net)
    }
}

/// Gradient of the loss described by `graph` with respect to the flattened
/// parameters of `net`.
pub fn param_grad(graph: &LossGraph, net: &Icnn) -> Result<Vec<f64>> {
    let (_, tape) = net.jets(graph.points.view(), &graph.spec, graph.extra_dirs.as_ref().map(|e| e.view()), true)?;
    net.backward(&tape.expect("tape requested"), &graph.adjoint)
}

/// `u(x) = ½ Σ aₖxₖ² + bᵀx` exactly, for tests.
#[cfg(test)]
pub(crate) fn quadratic_net(a: &[f64], b: &[f64]) -> Icnn {
    let arch = IcnnArch::new(a.len(), &[3]);
    let mut params = IcnnParams::zeros(&arch);
    params.lambda = 0.0;
    params.skip = Array2::from_diag(&Array1::from_iter(a.iter().map(|v| v.sqrt())));
    params.layers[1].wy.row_mut(0).assign(&Array1::from(b.to_vec()));
    Icnn::new(arch, params).unwrap()
}
