use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

use super::{numel_of, strides_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vid(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// One recorded operation, with whatever the backward pass needs saved.
enum Op {
    Matmul { a: Vid, b: Vid, out: Vid, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Vid, out: Vid, axis: usize },
    LayerNorm { x: Vid, gain: Vid, bias: Vid, out: Vid, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: Vid, out: Vid },
    Permute { x: Vid, out: Vid, axes: Vec<usize> },
    Concat { a: Vid, b: Vid, out: Vid, axis: usize },
    Slice { x: Vid, out: Vid, axis: usize, start: usize, len: usize },
    PadZero { x: Vid, out: Vid, axis: usize, before: usize },
    Relu { x: Vid, out: Vid },
    Add { a: Vid, b: Vid, out: Vid },
    Sub { a: Vid, b: Vid, out: Vid },
    Mul { a: Vid, b: Vid, out: Vid },
    Scale { x: Vid, out: Vid, c: f64 },
    Mean { x: Vid, out: Vid },
    Abs { x: Vid, out: Vid },
    Square { x: Vid, out: Vid },
    AddBcast { x: Vid, b: Vid, out: Vid },
}

/// Reverse-mode gradient tape.
///
/// Values live in an arena indexed by [`Vid`]; every op appends one record.
/// [`Tape::backward`] replays the records exactly once, in reverse execution
/// order, accumulating vector-Jacobian products into per-value buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    param_cache: Vec<Option<Vid>>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Vid {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value recorded on tape"
        );
        let id = self.nodes.len();
        self.nodes.push(Node { shape, data, requires_grad });
        Vid(id)
    }

    /// Registers a leaf value, inheriting `requires_grad` from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Vid {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Registers a constant (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Vid> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Vid {
        self.push(vec![1], vec![v], false)
    }

    /// Registers a parameter from a store, deduplicating within this tape so
    /// a parameter used several times maps to one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Vid {
        if self.param_cache.len() < store.len() {
            self.param_cache.resize(store.len(), None);
        }
        if let Some(v) = self.param_cache[id.index()] {
            return v;
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), true);
        self.param_cache[id.index()] = Some(v);
        v
    }

    pub fn shape(&self, v: Vid) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Vid) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Vid) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// How many ops consume `v` as an input. Used by instrumentation tests
    /// (e.g. asserting the qkv projection runs exactly once per forward).
    pub fn consumers_of(&self, v: Vid) -> usize {
        self.ops
            .iter()
            .flat_map(op_inputs)
            .filter(|&i| i == v)
            .count()
    }

    /// Gradient of the last backward target with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Vid) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient for `v` into `tensor.grad`.
    pub fn write_grad(&self, v: Vid, tensor: &mut Tensor) {
        tensor.grad = self.grad(v).map(|g| g.to_vec());
    }

    /// Gradients for every store parameter bound on this tape, keyed by
    /// parameter index; zeros where no gradient flowed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        (0..store.len())
            .map(|i| {
                let id = ParamId::from_index(i);
                match self.param_cache.get(i).copied().flatten() {
                    Some(v) => self
                        .grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; store.tensor(id).numel()]),
                    None => vec![0.0; store.tensor(id).numel()],
                }
            })
            .collect()
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Batched matrix product `[..., m, k] x [..., k, n]`; leading extents
    /// must agree exactly.
    pub fn matmul(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let batch = numel_of(&sa[..sa.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for bi in 0..batch {
                let a_s = &da[bi * m * k..][..m * k];
                let b_s = &db[bi * k * n..][..k * n];
                let o_s = &mut out[bi * m * n..][..m * n];
                matmul_kernel(a_s, b_s, o_s, m, k, n);
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let rg = self.rg2(a, b);
        let vid = self.push(shape, out, rg);
        self.ops.push(Op::Matmul { a, b, out: vid, batch, m, k, n });
        Ok(vid)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Vid, axis: usize) -> Result<Vid> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * d * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..d {
                    mx = mx.max(xd[base + i * inner]);
                }
                let mut sum = 0.0;
                for i in 0..d {
                    let e = (xd[base + i * inner] - mx).exp();
                    out[base + i * inner] = e;
                    sum += e;
                }
                for i in 0..d {
                    out[base + i * inner] /= sum;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(shape, out, rg);
        self.ops.push(Op::Softmax { x, out: vid, axis });
        Ok(vid)
    }

    /// Per-row layer normalization over the last axis, with affine gain/bias.
    pub fn layer_norm(&mut self, x: Vid, gain: Vid, bias: Vid) -> Result<Vid> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input".to_string()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs last extent {d} of {shape:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = numel_of(&shape) / d;
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        {
            let xd = self.data(x);
            let g = self.data(gain);
            let b = self.data(bias);
            for r in 0..rows {
                let row = &xd[r * d..][..d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = istd;
                for i in 0..d {
                    let xh = (row[i] - mu) * istd;
                    xhat[r * d + i] = xh;
                    out[r * d + i] = xh * g[i] + b[i];
                }
            }
        }
        let rg = self.rg2(x, gain) || self.nodes[bias.0].requires_grad;
        let vid = self.push(shape, out, rg);
        self.ops.push(Op::LayerNorm { x, gain, bias, out: vid, xhat, inv_std });
        Ok(vid)
    }

    pub fn reshape(&mut self, x: Vid, shape: &[usize]) -> Result<Vid> {
        if numel_of(shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(shape.to_vec(), data, rg);
        self.ops.push(Op::Reshape { x, out: vid });
        Ok(vid)
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Vid, axes: &[usize]) -> Result<Vid> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} invalid for {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(&self.nodes[x.0].data, &shape, axes);
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(out_shape, data, rg);
        self.ops.push(Op::Permute { x, out: vid, axes: axes.to_vec() });
        Ok(vid)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Vid) -> Result<Vid> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(&mut self, a: Vid, b: Vid, axis: usize) -> Result<Vid> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?} on axis {axis}")));
        }
        let (outer, da, inner) = axis_split(&sa, axis);
        let db_axis = sb[axis];
        let block_a = da * inner;
        let block_b = db_axis * inner;
        let mut out = vec![0.0; outer * (block_a + block_b)];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for o in 0..outer {
                let dst = &mut out[o * (block_a + block_b)..][..block_a + block_b];
                dst[..block_a].copy_from_slice(&ad[o * block_a..][..block_a]);
                dst[block_a..].copy_from_slice(&bd[o * block_b..][..block_b]);
            }
        }
        let mut shape = sa.clone();
        shape[axis] = da + db_axis;
        let rg = self.rg2(a, b);
        let vid = self.push(shape, out, rg);
        self.ops.push(Op::Concat { a, b, out: vid, axis });
        Ok(vid)
    }

    pub fn concat_last_axis(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.concat(a, b, axis)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Vid, axis: usize, start: usize, len: usize) -> Result<Vid> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * len * inner];
        {
            let xd = self.data(x);
            for o in 0..outer {
                let src = &xd[(o * d + start) * inner..][..len * inner];
                out[o * len * inner..][..len * inner].copy_from_slice(src);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(out_shape, out, rg);
        self.ops.push(Op::Slice { x, out: vid, axis, start, len });
        Ok(vid)
    }

    /// Pads with zeros along `axis`.
    pub fn pad_zero(&mut self, x: Vid, axis: usize, before: usize, after: usize) -> Result<Vid> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "pad_zero",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, d, inner) = axis_split(&shape, axis);
        let d_out = d + before + after;
        let mut out = vec![0.0; outer * d_out * inner];
        {
            let xd = self.data(x);
            for o in 0..outer {
                let dst = &mut out[(o * d_out + before) * inner..][..d * inner];
                dst.copy_from_slice(&xd[o * d * inner..][..d * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = d_out;
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(out_shape, out, rg);
        self.ops.push(Op::PadZero { x, out: vid, axis, before });
        Ok(vid)
    }

    /// Elementwise max(0, x); the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Vid) -> Vid {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.unary(x, data, |x, out| Op::Relu { x, out })
    }

    pub fn add(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    pub fn scale(&mut self, x: Vid, c: f64) -> Vid {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        self.unary(x, data, |x, out| Op::Scale { x, out, c })
    }

    /// Mean over all elements, as a `[1]`-shaped scalar.
    pub fn mean(&mut self, x: Vid) -> Vid {
        let n = self.nodes[x.0].data.len();
        let m = self.data(x).iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(vec![1], vec![m], rg);
        self.ops.push(Op::Mean { x, out: vid });
        vid
    }

    /// Elementwise |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Vid) -> Vid {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.abs()).collect();
        self.unary(x, data, |x, out| Op::Abs { x, out })
    }

    pub fn square(&mut self, x: Vid) -> Vid {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * v).collect();
        self.unary(x, data, |x, out| Op::Square { x, out })
    }

    /// Adds `b` to `x` where `b`'s shape is a trailing suffix of `x`'s
    /// (bias rows, positional tables, scalar shifts).
    pub fn add_bcast(&mut self, x: Vid, b: Vid) -> Result<Vid> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("add_bcast", format!("{sb:?} is not a suffix of {sx:?}")));
        }
        let bn = numel_of(&sb);
        let data: Vec<f64> = {
            let xd = self.data(x);
            let bd = self.data(b);
            xd.iter().enumerate().map(|(i, &v)| v + bd[i % bn]).collect()
        };
        let rg = self.rg2(x, b);
        let vid = self.push(sx, data, rg);
        self.ops.push(Op::AddBcast { x, b, out: vid });
        Ok(vid)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss, accumulating
    /// gradients for every `requires_grad` value reachable from it.
    pub fn backward(&mut self, loss: Vid) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for op in self.ops.iter().rev() {
            backward_op(op, nodes, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    // ── helpers ──────────────────────────────────────────────────────

    fn rg2(&self, a: Vid, b: Vid) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn unary(&mut self, x: Vid, data: Vec<f64>, make: impl FnOnce(Vid, Vid) -> Op) -> Vid {
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let vid = self.push(shape, data, rg);
        self.ops.push(make(x, vid));
        vid
    }

    fn binary_same_shape(
        &mut self,
        a: Vid,
        b: Vid,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Vid, Vid, Vid) -> Op,
    ) -> Result<Vid> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg2(a, b);
        let vid = self.push(shape, data, rg);
        self.ops.push(make(a, b, vid));
        Ok(vid)
    }
}

fn op_inputs(op: &Op) -> Vec<Vid> {
    match op {
        Op::Matmul { a, b, .. } | Op::Concat { a, b, .. } | Op::Add { a, b, .. }
        | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
        Op::AddBcast { x, b, .. } => vec![*x, *b],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Softmax { x, .. } | Op::Reshape { x, .. } | Op::Permute { x, .. }
        | Op::Slice { x, .. } | Op::PadZero { x, .. } | Op::Relu { x, .. }
        | Op::Scale { x, .. } | Op::Mean { x, .. } | Op::Abs { x, .. }
        | Op::Square { x, .. } => vec![*x],
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let d = shape[axis];
    let inner = numel_of(&shape[axis + 1..]);
    (outer, d, inner)
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let orow = &mut out[i * n..][..n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // Stride in the input per unit step of each output axis.
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for slot in out.iter_mut() {
        *slot = data[in_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Vid, numel: usize, add: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
    add(slot);
}

fn backward_op(op: &Op, nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Matmul { a, b, out, batch, m, k, n } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            let (m, k, n) = (*m, *k, *n);
            if nodes[a.0].requires_grad {
                let bd = &nodes[b.0].data;
                accumulate(grads, *a, nodes[a.0].data.len(), |da| {
                    for bi in 0..*batch {
                        let g = &d_out[bi * m * n..][..m * n];
                        let b_s = &bd[bi * k * n..][..k * n];
                        let da_s = &mut da[bi * m * k..][..m * k];
                        // dA = dC @ B^T
                        for i in 0..m {
                            let grow = &g[i * n..][..n];
                            let darow = &mut da_s[i * k..][..k];
                            for kk in 0..k {
                                let brow = &b_s[kk * n..][..n];
                                let mut s = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    s += gv * bv;
                                }
                                darow[kk] += s;
                            }
                        }
                    }
                });
            }
            if nodes[b.0].requires_grad {
                let ad = &nodes[a.0].data;
                accumulate(grads, *b, nodes[b.0].data.len(), |db| {
                    for bi in 0..*batch {
                        let g = &d_out[bi * m * n..][..m * n];
                        let a_s = &ad[bi * m * k..][..m * k];
                        let db_s = &mut db[bi * k * n..][..k * n];
                        // dB = A^T @ dC
                        for i in 0..m {
                            let grow = &g[i * n..][..n];
                            let arow = &a_s[i * k..][..k];
                            for (kk, &av) in arow.iter().enumerate() {
                                let dbrow = &mut db_s[kk * n..][..n];
                                for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::Softmax { x, out, axis } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let y = &nodes[out.0].data;
            let (outer, d, inner) = axis_split(&nodes[out.0].shape, *axis);
            accumulate(grads, *x, y.len(), |dx| {
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * d * inner + j;
                        let mut dot = 0.0;
                        for i in 0..d {
                            dot += d_out[base + i * inner] * y[base + i * inner];
                        }
                        for i in 0..d {
                            let yi = y[base + i * inner];
                            dx[base + i * inner] += yi * (d_out[base + i * inner] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, out, xhat, inv_std } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            let d = *nodes[x.0].shape.last().unwrap();
            let rows = nodes[x.0].data.len() / d;
            let g = &nodes[gain.0].data;
            if nodes[gain.0].requires_grad {
                accumulate(grads, *gain, d, |dg| {
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += d_out[r * d + i] * xhat[r * d + i];
                        }
                    }
                });
            }
            if nodes[bias.0].requires_grad {
                accumulate(grads, *bias, d, |db| {
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += d_out[r * d + i];
                        }
                    }
                });
            }
            if nodes[x.0].requires_grad {
                accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xh = 0.0;
                        for i in 0..d {
                            let dh = d_out[r * d + i] * g[i];
                            mean_dh += dh;
                            mean_dh_xh += dh * xhat[r * d + i];
                        }
                        mean_dh /= d as f64;
                        mean_dh_xh /= d as f64;
                        for i in 0..d {
                            let dh = d_out[r * d + i] * g[i];
                            dx[r * d + i] +=
                                inv_std[r] * (dh - mean_dh - xhat[r * d + i] * mean_dh_xh);
                        }
                    }
                });
            }
        }
        Op::Reshape { x, out } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                for (d, g) in dx.iter_mut().zip(&d_out) {
                    *d += g;
                }
            });
        }
        Op::Permute { x, out, axes } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            // Gradient flows through the inverse permutation.
            let mut inverse = vec![0usize; axes.len()];
            for (d, &a) in axes.iter().enumerate() {
                inverse[a] = d;
            }
            let back = permute_data(&d_out, &nodes[out.0].shape, &inverse);
            accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                for (d, g) in dx.iter_mut().zip(&back) {
                    *d += g;
                }
            });
        }
        Op::Concat { a, b, out, axis } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            let (outer, da, inner) = axis_split(&nodes[a.0].shape, *axis);
            let db_axis = nodes[b.0].shape[*axis];
            let block_a = da * inner;
            let block_b = db_axis * inner;
            if nodes[a.0].requires_grad {
                accumulate(grads, *a, nodes[a.0].data.len(), |dx| {
                    for o in 0..outer {
                        let src = &d_out[o * (block_a + block_b)..][..block_a];
                        for (d, g) in dx[o * block_a..][..block_a].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                });
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, *b, nodes[b.0].data.len(), |dx| {
                    for o in 0..outer {
                        let src = &d_out[o * (block_a + block_b) + block_a..][..block_b];
                        for (d, g) in dx[o * block_b..][..block_b].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                });
            }
        }
        Op::Slice { x, out, axis, start, len } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let (outer, d, inner) = axis_split(&nodes[x.0].shape, *axis);
            accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                for o in 0..outer {
                    let dst = &mut dx[(o * d + start) * inner..][..len * inner];
                    let src = &d_out[o * len * inner..][..len * inner];
                    for (dv, g) in dst.iter_mut().zip(src) {
                        *dv += g;
                    }
                }
            });
        }
        Op::PadZero { x, out, axis, before } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let (outer, d, inner) = axis_split(&nodes[x.0].shape, *axis);
            let d_out_axis = nodes[out.0].shape[*axis];
            accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                for o in 0..outer {
                    let src = &d_out[(o * d_out_axis + before) * inner..][..d * inner];
                    for (dv, g) in dx[o * d * inner..][..d * inner].iter_mut().zip(src) {
                        *dv += g;
                    }
                }
            });
        }
        Op::Relu { x, out } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let xd = &nodes[x.0].data;
            accumulate(grads, *x, xd.len(), |dx| {
                for i in 0..dx.len() {
                    if xd[i] > 0.0 {
                        dx[i] += d_out[i];
                    }
                }
            });
        }
        Op::Add { a, b, out } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            for v in [a, b] {
                if nodes[v.0].requires_grad {
                    accumulate(grads, *v, nodes[v.0].data.len(), |dx| {
                        for (d, g) in dx.iter_mut().zip(&d_out) {
                            *d += g;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b, out } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            if nodes[a.0].requires_grad {
                accumulate(grads, *a, nodes[a.0].data.len(), |dx| {
                    for (d, g) in dx.iter_mut().zip(&d_out) {
                        *d += g;
                    }
                });
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, *b, nodes[b.0].data.len(), |dx| {
                    for (d, g) in dx.iter_mut().zip(&d_out) {
                        *d -= g;
                    }
                });
            }
        }
        Op::Mul { a, b, out } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            if nodes[a.0].requires_grad {
                let bd = &nodes[b.0].data;
                accumulate(grads, *a, nodes[a.0].data.len(), |dx| {
                    for i in 0..dx.len() {
                        dx[i] += d_out[i] * bd[i];
                    }
                });
            }
            if nodes[b.0].requires_grad {
                let ad = &nodes[a.0].data;
                accumulate(grads, *b, nodes[b.0].data.len(), |dx| {
                    for i in 0..dx.len() {
                        dx[i] += d_out[i] * ad[i];
                    }
                });
            }
        }
        Op::Scale { x, out, c } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                for (d, g) in dx.iter_mut().zip(&d_out) {
                    *d += c * g;
                }
            });
        }
        Op::Mean { x, out } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let n = nodes[x.0].data.len();
            let g = d_out[0] / n as f64;
            accumulate(grads, *x, n, |dx| {
                for d in dx.iter_mut() {
                    *d += g;
                }
            });
        }
        Op::Abs { x, out } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let xd = &nodes[x.0].data;
            accumulate(grads, *x, xd.len(), |dx| {
                for i in 0..dx.len() {
                    // abs'(0) := 0
                    if xd[i] > 0.0 {
                        dx[i] += d_out[i];
                    } else if xd[i] < 0.0 {
                        dx[i] -= d_out[i];
                    }
                }
            });
        }
        Op::Square { x, out } => {
            if !nodes[x.0].requires_grad {
                return;
            }
            let Some(d_out) = grads[out.0].clone() else { return };
            let xd = &nodes[x.0].data;
            accumulate(grads, *x, xd.len(), |dx| {
                for i in 0..dx.len() {
                    dx[i] += 2.0 * xd[i] * d_out[i];
                }
            });
        }
        Op::AddBcast { x, b, out } => {
            let Some(d_out) = grads[out.0].clone() else { return };
            if nodes[x.0].requires_grad {
                accumulate(grads, *x, nodes[x.0].data.len(), |dx| {
                    for (d, g) in dx.iter_mut().zip(&d_out) {
                        *d += g;
                    }
                });
            }
            if nodes[b.0].requires_grad {
                let bn = nodes[b.0].data.len();
                accumulate(grads, *b, bn, |db| {
                    for (i, g) in d_out.iter().enumerate() {
                        db[i % bn] += g;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn var(tape: &mut Tape, data: Vec<f64>, shape: &[usize]) -> Vid {
        tape.leaf(&Tensor::new(data, shape).unwrap().with_grad())
    }

    /// sum(x) composed from mean, for loss-style scalar reductions.
    fn sum_of(tape: &mut Tape, x: Vid) -> Vid {
        let n = tape.data(x).len() as f64;
        let m = tape.mean(x);
        tape.scale(m, n)
    }

    fn central_diff(eval: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        (eval(&xp) - eval(&xm)) / (2.0 * h)
    }

    fn assert_grad_close(analytic: f64, numeric: f64, rel_tol: f64) {
        let diff = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        assert!(
            diff <= 1e-7 || diff <= rel_tol * denom,
            "grad mismatch: analytic={analytic} numeric={numeric} rel={}",
            diff / denom
        );
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut tape = Tape::new();
        let i2 = var(&mut tape, vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = var(&mut tape, vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 7.0, 8.0]);

        let a = var(&mut tape, vec![1.0, 2.0], &[1, 2]);
        let b = var(&mut tape, vec![3.0, 4.0], &[2, 1]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]); // 1*3 + 2*4
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = var(&mut tape, vec![0.0; 6], &[2, 3]);
        let b = var(&mut tape, vec![0.0; 4], &[2, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let a = var(&mut tape, a_data.clone(), &[3, 4]);
        let b = var(&mut tape, b_data.clone(), &[4, 2]);
        let c = tape.matmul(a, b).unwrap();
        let loss = sum_of(&mut tape, c);
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap().to_vec();

        let eval = |av: &[f64]| {
            let mut t = Tape::new();
            let a = var(&mut t, av.to_vec(), &[3, 4]);
            let b = var(&mut t, b_data.clone(), &[4, 2]);
            let c = t.matmul(a, b).unwrap();
            let l = sum_of(&mut t, c);
            t.scalar_value(l)
        };
        for i in 0..12 {
            let fd = central_diff(eval, &a_data, i, 1e-5);
            assert_grad_close(ga[i], fd, 1e-6);
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = var(&mut tape, vec![0.0, 0.0, 0.0], &[3]);
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = var(&mut tape, vec![1000.0, 1000.0], &[2]);
        let y = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]); // stabilized, no overflow

        let x = var(&mut tape, vec![0.0, 3.0f64.ln()], &[2]);
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.data(y)[0] - 0.25).abs() < 1e-12);
        assert!((tape.data(y)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for scale in [1.0, 1e3] {
            let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let mut tape = Tape::new();
            let x = var(&mut tape, data, &[4, 5, 3]);
            let y = tape.softmax(x, 2).unwrap();
            let yd = tape.data(y);
            for r in 0..20 {
                let s: f64 = yd[r * 3..r * 3 + 3].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn layer_norm_zero_variance_and_two_point_row() {
        let mut tape = Tape::new();
        let gain = var(&mut tape, vec![1.0, 1.0], &[2]);
        let bias = var(&mut tape, vec![0.0, 0.0], &[2]);

        let constant = var(&mut tape, vec![3.5, 3.5], &[1, 2]);
        let y = tape.layer_norm(constant, gain, bias).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0]); // epsilon handles zero variance

        let x = var(&mut tape, vec![1.0, 3.0], &[1, 2]);
        let y = tape.layer_norm(x, gain, bias).unwrap();
        assert!((tape.data(y)[0] - (-1.0)).abs() < 1e-4);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2 * 4 * 8;
        let x_data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g_data: Vec<f64> = (0..8).map(|_| rng.gen_range(0.5..1.5)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect();

        // Weight the output so the gradient is not row-constant.
        let w_data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |x: &[f64], g: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let xv = var(&mut t, x.to_vec(), &[2, 4, 8]);
            let gv = var(&mut t, g.to_vec(), &[8]);
            let bv = var(&mut t, b.to_vec(), &[8]);
            let w = t.constant(w_data.clone(), &[2, 4, 8]).unwrap();
            let y = t.layer_norm(xv, gv, bv).unwrap();
            let y = t.mul(y, w).unwrap();
            let l = sum_of(&mut t, y);
            (t.scalar_value(l), xv, gv, bv, l, t)
        };
        let (_, xv, gv, bv, l, mut tape) = eval(&x_data, &g_data, &b_data);
        tape.backward(l).unwrap();
        let gx = tape.grad(xv).unwrap().to_vec();
        let gg = tape.grad(gv).unwrap().to_vec();
        let gb = tape.grad(bv).unwrap().to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..16 {
            let i = rng.gen_range(0..n);
            let fd = central_diff(|x| eval(x, &g_data, &b_data).0, &x_data, i, 1e-5);
            assert_grad_close(gx[i], fd, 1e-5);
        }
        for i in 0..8 {
            let fd = central_diff(|g| eval(&x_data, g, &b_data).0, &g_data, i, 1e-5);
            assert_grad_close(gg[i], fd, 1e-5);
            let fd = central_diff(|b| eval(&x_data, &g_data, b).0, &b_data, i, 1e-5);
            assert_grad_close(gb[i], fd, 1e-5);
        }
    }

    #[test]
    fn pad_slice_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = var(&mut tape, vec![1.0, 2.0, 3.0], &[3]);
        let padded = tape.pad_zero(x, 0, 0, 1).unwrap();
        assert_eq!(tape.data(padded), &[1.0, 2.0, 3.0, 0.0]);

        let m = var(&mut tape, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = tape.slice(m, 1, 0, 1).unwrap();
        let right = tape.slice(m, 1, 1, 2).unwrap();
        let back = tape.concat_last_axis(left, right).unwrap();
        assert_eq!(tape.data(back), tape.data(m));
    }

    #[test]
    fn composite_chain_grad_matches_finite_differences() {
        // relu(pad(x) @ w) summed, checked against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let xv = var(&mut t, x.to_vec(), &[2, 3]);
            let w = t.constant(w_data.clone(), &[3, 4]).unwrap();
            let xp = t.pad_zero(xv, 0, 1, 1).unwrap(); // [4,3]
            let y = t.matmul(xp, w).unwrap(); // [4,4]
            let r = t.relu(y);
            let l = sum_of(&mut t, r);
            (t.scalar_value(l), xv, l, t)
        };
        let (_, xv, l, mut tape) = run(&x_data);
        tape.backward(l).unwrap();
        let gx = tape.grad(xv).unwrap().to_vec();
        for i in 0..6 {
            let fd = central_diff(|x| run(x).0, &x_data, i, 1e-5);
            assert_grad_close(gx[i], fd, 1e-5);
        }
    }

    #[test]
    fn abs_and_relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = var(&mut tape, vec![0.0, -2.0, 2.0], &[3]);
        let a = tape.abs(x);
        let l = sum_of(&mut tape, a);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, -1.0, 1.0]);

        let mut tape = Tape::new();
        let x = var(&mut tape, vec![0.0, -2.0, 2.0], &[3]);
        let r = tape.relu(x);
        let l = sum_of(&mut tape, r);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // y = x*x + x -> dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = var(&mut tape, vec![3.0], &[1]);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn permute_roundtrip_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = var(&mut tape, data.clone(), &[2, 3, 4]);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(back), data.as_slice());

        let w: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc = tape.constant(w.clone(), &[4, 2, 3]).unwrap();
        let y = tape.mul(p, wc).unwrap();
        let l = sum_of(&mut tape, y);
        tape.backward(l).unwrap();
        // d/dx of sum(permute(x) * w) is w permuted back.
        let gx = tape.grad(x).unwrap();
        let w_back = permute_data(&w, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(gx, w_back.as_slice());
    }

    #[test]
    fn replay_determinism_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x_data: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w_data: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::new();
            let x = var(&mut t, x_data, &[4, 8]);
            let w = var(&mut t, w_data, &[8, 4]);
            let y = t.matmul(x, w).unwrap();
            let s = t.softmax(y, 1).unwrap();
            let l = t.mean(s);
            t.backward(l).unwrap();
            (
                t.grad(x).unwrap().to_vec(),
                t.grad(w).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn add_bcast_suffix_shapes() {
        let mut tape = Tape::new();
        let x = var(&mut tape, (0..12).map(|v| v as f64).collect(), &[2, 2, 3]);
        let b = var(&mut tape, vec![10.0, 20.0, 30.0], &[3]);
        let y = tape.add_bcast(x, b).unwrap();
        assert_eq!(tape.data(y)[0..3], [10.0, 21.0, 32.0]);
        let l = sum_of(&mut tape, y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 4.0]);

        let bad = var(&mut tape, vec![1.0, 2.0], &[2]);
        assert!(tape.add_bcast(x, bad).is_err());
    }
    #[test]
    fn grads_populate_reachable_leaves_only() {
        let mut tape = Tape::new();
        let reachable = var(&mut tape, vec![1.0, 2.0], &[2]);
        let orphan = var(&mut tape, vec![3.0, 4.0], &[2]);
        let frozen = tape.constant(vec![5.0, 6.0], &[2]).unwrap();
        let y = tape.mul(reachable, frozen).unwrap();
        let loss = tape.mean(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(reachable).unwrap(), &[2.5, 3.0]);
        assert!(tape.grad(orphan).is_none());
        assert!(tape.grad(frozen).is_none());

        let mut t = Tensor::zeros(&[2]).with_grad();
        tape.write_grad(reachable, &mut t);
        assert_eq!(t.grad.as_deref().unwrap(), &[2.5, 3.0]);
    }
}
