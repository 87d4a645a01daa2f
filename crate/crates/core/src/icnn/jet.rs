//! Batched second-order jets through the network.
//!
//! Every sample carries `J = 1 + K + P` rows: the value, `K` first-order
//! directional derivatives and `P` second-order entries `∂²/∂e_p∂e_q`. Rows are
//! stacked sample-major into one matrix per layer so affine maps are single
//! GEMMs; activations act row-group-wise. The reverse sweep over the same
//! tape gives exact parameter gradients of any loss that is a function of
//! values, gradients and Hessian entries.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3};

use super::{Activation, Icnn};
use crate::error::{Error, Result};
use crate::par;

/// Which jets to propagate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JetSpec {
    /// Leading unit directions `e_0..e_{unit_dirs-1}`.
    pub unit_dirs: usize,
    /// Per-sample directions supplied by the caller, after the unit ones.
    pub extra: usize,
    /// Second-order entries as pairs of direction indices.
    pub pairs: Vec<(usize, usize)>,
}

impl JetSpec {
    pub fn value() -> Self {
        Self { unit_dirs: 0, extra: 0, pairs: Vec::new() }
    }

    pub fn gradient(d: usize) -> Self {
        Self { unit_dirs: d, extra: 0, pairs: Vec::new() }
    }

    /// Gradient plus the upper triangle of the Hessian, row by row.
    pub fn hessian(d: usize) -> Self {
        let pairs = (0..d).flat_map(|j| (j..d).map(move |k| (j, k))).collect();
        Self { unit_dirs: d, extra: 0, pairs }
    }

    /// Gradient plus `zₛᵀ H vₛ` for `probes` caller-supplied `(zₛ, vₛ)` pairs,
    /// laid out as extra directions `[z₀, v₀, z₁, v₁, ...]`.
    pub fn probes(d: usize, probes: usize) -> Self {
        let pairs = (0..probes).map(|s| (d + 2 * s, d + 2 * s + 1)).collect();
        Self { unit_dirs: d, extra: 2 * probes, pairs }
    }

    pub fn n_dirs(&self) -> usize {
        self.unit_dirs + self.extra
    }

    pub fn rows(&self) -> usize {
        1 + self.n_dirs() + self.pairs.len()
    }

    fn is_hessian_layout(&self) -> bool {
        *self == JetSpec::hessian(self.unit_dirs)
    }

    /// Full Hessian of sample `i` from a [`JetSpec::hessian`] output.
    pub fn hessian_of(&self, out: &JetOutput, i: usize) -> Array2<f64> {
        debug_assert!(self.is_hessian_layout());
        let d = self.unit_dirs;
        let mut h = Array2::<f64>::zeros((d, d));
        for (pi, &(j, k)) in self.pairs.iter().enumerate() {
            let v = out.second[[i, pi]];
            h[[j, k]] = v;
            h[[k, j]] = v;
        }
        h
    }

    /// Accumulate `∂L/∂H` (a full, not necessarily symmetric, `d×d` matrix)
    /// for sample `i` into a [`JetSpec::hessian`] adjoint.
    pub fn add_hessian_adjoint(&self, adj: &mut JetAdjoint, i: usize, hbar: ArrayView2<f64>) {
        debug_assert!(self.is_hessian_layout());
        for (pi, &(j, k)) in self.pairs.iter().enumerate() {
            let v = if j == k { hbar[[j, j]] } else { hbar[[j, k]] + hbar[[k, j]] };
            adj.second[[i, pi]] += v;
        }
    }
}

/// Jets of `u` at a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct JetOutput {
    pub value: Array1<f64>,
    /// `B × K` directional derivatives; the first `unit_dirs` columns are `∇u`.
    pub first: Array2<f64>,
    /// `B × P` second-order entries.
    pub second: Array2<f64>,
}

/// Loss adjoint with respect to a [`JetOutput`].
pub type JetAdjoint = JetOutput;

impl JetOutput {
    pub fn zeros(batch: usize, spec: &JetSpec) -> Self {
        Self {
            value: Array1::zeros(batch),
            first: Array2::zeros((batch, spec.n_dirs())),
            second: Array2::zeros((batch, spec.pairs.len())),
        }
    }

    pub fn batch(&self) -> usize {
        self.value.len()
    }

    pub fn add_assign(&mut self, other: &JetOutput) {
        self.value += &other.value;
        self.first += &other.first;
        self.second += &other.second;
    }
}

struct ChunkTape {
    start: usize,
    len: usize,
    xaug: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    derivs: Vec<Option<ActDerivs>>,
}

/// Forward intermediates kept for the reverse sweep.
pub struct Tape {
    spec: JetSpec,
    batch: usize,
    chunks: Vec<ChunkTape>,
}

impl Tape {
    pub fn spec(&self) -> &JetSpec {
        &self.spec
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// `g'`, `g''`, `g'''` at the value rows of one layer, shape `(nb, width)`.
struct ActDerivs {
    g1: Vec<f64>,
    g2: Vec<f64>,
    g3: Vec<f64>,
}

fn act_forward(act: Activation, p: &Array2<f64>, nb: usize, spec: &JetSpec) -> (Array2<f64>, Option<ActDerivs>) {
    if act == Activation::Linear {
        return (p.clone(), None);
    }
    let n = p.ncols();
    let j = spec.rows();
    let k = spec.n_dirs();
    let ps = p.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros(p.dim());
    let os = out.as_slice_mut().unwrap();
    let mut dv = ActDerivs { g1: vec![0.0; nb * n], g2: vec![0.0; nb * n], g3: vec![0.0; nb * n] };
    for s in 0..nb {
        let base = s * j * n;
        let g1 = &mut dv.g1[s * n..(s + 1) * n];
        let g2 = &mut dv.g2[s * n..(s + 1) * n];
        let g3 = &mut dv.g3[s * n..(s + 1) * n];
        for c in 0..n {
            let (g, d1, d2, d3) = act.derivs(ps[base + c]);
            os[base + c] = g;
            g1[c] = d1;
            g2[c] = d2;
            g3[c] = d3;
        }
        for r in 0..k {
            let off = base + (1 + r) * n;
            for c in 0..n {
                os[off + c] = g1[c] * ps[off + c];
            }
        }
        for (pi, &(pp, qq)) in spec.pairs.iter().enumerate() {
            let off = base + (1 + k + pi) * n;
            let oa = base + (1 + pp) * n;
            let ob = base + (1 + qq) * n;
            for c in 0..n {
                os[off + c] = g2[c] * ps[oa + c] * ps[ob + c] + g1[c] * ps[off + c];
            }
        }
    }
    (out, Some(dv))
}

fn act_backward(p: &Array2<f64>, dv: Option<&ActDerivs>, zbar: &Array2<f64>, nb: usize, spec: &JetSpec) -> Array2<f64> {
    let Some(dv) = dv else {
        return zbar.clone();
    };
    let n = p.ncols();
    let j = spec.rows();
    let k = spec.n_dirs();
    let ps = p.as_slice().expect("standard layout");
    let zs = zbar.as_slice().expect("standard layout");
    let mut pbar = Array2::<f64>::zeros(p.dim());
    let bs = pbar.as_slice_mut().unwrap();
    for s in 0..nb {
        let base = s * j * n;
        let g1 = &dv.g1[s * n..(s + 1) * n];
        let g2 = &dv.g2[s * n..(s + 1) * n];
        let g3 = &dv.g3[s * n..(s + 1) * n];
        for c in 0..n {
            bs[base + c] = zs[base + c] * g1[c];
        }
        for r in 0..k {
            let off = base + (1 + r) * n;
            for c in 0..n {
                bs[base + c] += zs[off + c] * g2[c] * ps[off + c];
                bs[off + c] = zs[off + c] * g1[c];
            }
        }
        for (pi, &(pp, qq)) in spec.pairs.iter().enumerate() {
            let off = base + (1 + k + pi) * n;
            let oa = base + (1 + pp) * n;
            let ob = base + (1 + qq) * n;
            for c in 0..n {
                let zb = zs[off + c];
                if zb == 0.0 {
                    continue;
                }
                let (ap, aq) = (ps[oa + c], ps[ob + c]);
                bs[base + c] += zb * (g3[c] * ap * aq + g2[c] * ps[off + c]);
                bs[oa + c] += zb * g2[c] * aq;
                bs[ob + c] += zb * g2[c] * ap;
                bs[off + c] = zb * g1[c];
            }
        }
    }
    pbar
}

impl Icnn {
    fn validate_jets(&self, points: ArrayView2<f64>, spec: &JetSpec, extra: Option<ArrayView3<f64>>) -> Result<()> {
        let d = self.dim();
        if points.ncols() != d {
            return Err(Error::DimMismatch { expected: d, got: points.ncols() });
        }
        if spec.unit_dirs > d {
            return Err(Error::ShapeMismatch(format!("{} unit directions in dimension {d}", spec.unit_dirs)));
        }
        match (spec.extra, extra) {
            (0, None) => {}
            (e, Some(dirs)) if dirs.dim() == (points.nrows(), e, d) => {}
            (e, got) => {
                return Err(Error::ShapeMismatch(format!(
                    "expected {e} extra directions per point, got {:?}",
                    got.map(|g| g.dim())
                )))
            }
        }
        let k = spec.n_dirs();
        if spec.pairs.iter().any(|&(p, q)| p >= k || q >= k) {
            return Err(Error::ShapeMismatch("second-order pair refers to a missing direction".into()));
        }
        if !spec.pairs.is_empty() && !self.arch.is_smooth() {
            return Err(Error::UnsupportedComposition(
                "second-order jets need twice-differentiable activations".into(),
            ));
        }
        Ok(())
    }

    fn forward_chunk(
        &self,
        points: ArrayView2<f64>,
        spec: &JetSpec,
        extra: Option<ArrayView3<f64>>,
        start: usize,
        end: usize,
    ) -> (ChunkTape, JetOutput) {
        let d = self.dim();
        let nb = end - start;
        let j = spec.rows();
        let k = spec.n_dirs();
        let mut xaug = Array2::<f64>::zeros((nb * j, d));
        for s in 0..nb {
            let base = s * j;
            xaug.row_mut(base).assign(&points.row(start + s));
            for r in 0..spec.unit_dirs {
                xaug[[base + 1 + r, r]] = 1.0;
            }
            if let Some(dirs) = extra {
                for r in 0..spec.extra {
                    xaug.row_mut(base + 1 + spec.unit_dirs + r).assign(&dirs.slice(s![start + s, r, ..]));
                }
            }
        }

        let mut pre = Vec::with_capacity(self.params.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.params.layers.len());
        let mut derivs = Vec::with_capacity(self.params.layers.len());
        for (l, layer) in self.params.layers.iter().enumerate() {
            let mut p = standard(xaug.dot(&layer.wy.t()));
            if let Some(wz) = &layer.wz {
                general_mat_mul(1.0, post.last().unwrap(), &wz.t(), 1.0, &mut p);
            }
            for s in 0..nb {
                let mut row = p.row_mut(s * j);
                row += &layer.b;
            }
            let (z, dv) = act_forward(self.arch.activations[l], &p, nb, spec);
            pre.push(p);
            post.push(z);
            derivs.push(dv);
        }

        let net = post.last().unwrap();
        let sx = xaug.dot(&self.params.skip.t());
        let lam2 = 2.0 * self.params.lambda;
        let mut out = JetOutput::zeros(nb, spec);
        for s in 0..nb {
            let base = s * j;
            let x = xaug.row(base);
            let sxv = sx.row(base);
            out.value[s] = net[[base, 0]] + 0.5 * lam2 * x.dot(&x) + 0.5 * sxv.dot(&sxv);
            for r in 0..k {
                let e = xaug.row(base + 1 + r);
                out.first[[s, r]] = net[[base + 1 + r, 0]] + lam2 * x.dot(&e) + sxv.dot(&sx.row(base + 1 + r));
            }
            for (pi, &(pp, qq)) in spec.pairs.iter().enumerate() {
                let (ea, eb) = (xaug.row(base + 1 + pp), xaug.row(base + 1 + qq));
                out.second[[s, pi]] = net[[base + 1 + k + pi, 0]]
                    + lam2 * ea.dot(&eb)
                    + sx.row(base + 1 + pp).dot(&sx.row(base + 1 + qq));
            }
        }
        (ChunkTape { start, len: nb, xaug, pre, post, derivs }, out)
    }

    /// Propagate the jets in `spec` for every row of `points`.
    ///
    /// `extra` holds caller directions with shape `(B, spec.extra, d)`. With
    /// `keep_tape` the intermediates needed by [`Icnn::backward`] are returned.
    pub fn jets(
        &self,
        points: ArrayView2<f64>,
        spec: &JetSpec,
        extra: Option<ArrayView3<f64>>,
        keep_tape: bool,
    ) -> Result<(JetOutput, Option<Tape>)> {
        self.validate_jets(points, spec, extra)?;
        let batch = points.nrows();
        let parts = par::map_chunks(batch, par::CHUNK, |a, b| {
            let (tape, out) = self.forward_chunk(points, spec, extra, a, b);
            (keep_tape.then_some(tape), out)
        });
        let mut out = JetOutput::zeros(batch, spec);
        let mut chunks = Vec::with_capacity(parts.len());
        let mut at = 0;
        for (tape, part) in parts {
            let n = part.batch();
            out.value.slice_mut(s![at..at + n]).assign(&part.value);
            out.first.slice_mut(s![at..at + n, ..]).assign(&part.first);
            out.second.slice_mut(s![at..at + n, ..]).assign(&part.second);
            at += n;
            if let Some(t) = tape {
                chunks.push(t);
            }
        }
        let tape = keep_tape.then(|| Tape { spec: spec.clone(), batch, chunks });
        Ok((out, tape))
    }

    fn backward_chunk(&self, spec: &JetSpec, tape: &ChunkTape, adj: &JetAdjoint) -> Vec<f64> {
        let nb = tape.len;
        let j = spec.rows();
        let k = spec.n_dirs();
        let d = self.dim();
        let xaug = &tape.xaug;

        let mut zbar = Array2::<f64>::zeros((nb * j, 1));
        let mut q = Array2::<f64>::zeros((nb * j, d));
        for s in 0..nb {
            let i = tape.start + s;
            let base = s * j;
            let ub = adj.value[i];
            zbar[[base, 0]] = ub;
            let x = xaug.row(base);
            q.row_mut(base).scaled_add(ub, &x);
            for r in 0..k {
                let gb = adj.first[[i, r]];
                zbar[[base + 1 + r, 0]] = gb;
                if gb != 0.0 {
                    q.row_mut(base).scaled_add(gb, &xaug.row(base + 1 + r));
                    q.row_mut(base + 1 + r).scaled_add(gb, &x);
                }
            }
            for (pi, &(pp, qq)) in spec.pairs.iter().enumerate() {
                let hb = adj.second[[i, pi]];
                zbar[[base + 1 + k + pi, 0]] = hb;
                if hb != 0.0 {
                    q.row_mut(base + 1 + pp).scaled_add(hb, &xaug.row(base + 1 + qq));
                    q.row_mut(base + 1 + qq).scaled_add(hb, &xaug.row(base + 1 + pp));
                }
            }
        }
        let skip_grad = self.params.skip.dot(&xaug.t().dot(&q));

        let n_layers = self.params.layers.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        for l in (0..n_layers).rev() {
            let layer = &self.params.layers[l];
            let pbar = act_backward(&tape.pre[l], tape.derivs[l].as_ref(), &zbar, nb, spec);
            let wy_grad = pbar.t().dot(xaug);
            let mut b_grad = Array1::<f64>::zeros(layer.b.len());
            for s in 0..nb {
                b_grad += &pbar.row(s * j);
            }
            let g = &mut grads[l];
            if let Some(wz) = &layer.wz {
                let wz_grad = pbar.t().dot(&tape.post[l - 1]);
                g.extend(wz_grad.iter());
                zbar = standard(pbar.dot(wz));
            }
            g.extend(wy_grad.iter());
            g.extend(b_grad.iter());
        }
        let mut flat: Vec<f64> = grads.into_iter().flatten().collect();
        flat.extend(skip_grad.iter());
        flat
    }

    /// Parameter gradient of `Σᵢ ⟨adjᵢ, jetsᵢ⟩` over the taped batch, in the
    /// flat layout of [`IcnnParams::to_flat`](super::IcnnParams::to_flat).
    pub fn backward(&self, tape: &Tape, adj: &JetAdjoint) -> Result<Vec<f64>> {
        let spec = &tape.spec;
        if adj.batch() != tape.batch || adj.first.ncols() != spec.n_dirs() || adj.second.ncols() != spec.pairs.len() {
            return Err(Error::ShapeMismatch("adjoint does not match taped jets".into()));
        }
        let parts = par::map_indices(tape.chunks.len(), |c| self.backward_chunk(spec, &tape.chunks[c], adj));
        if parts.is_empty() {
            return Ok(vec![0.0; self.params.n_params()]);
        }
        Ok(par::tree_reduce_vecs(parts))
    }
}
