//! Vector-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward evaluation as an append-only list of
//! primitive operations on flat `f64` vectors. Trainable parameters are not
//! tape nodes: affine operations read weights straight out of a parameter
//! slice and [`Tape::backward`] accumulates their gradients into a parallel
//! slice. The tape is rebuilt for every forward pass.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    /// `W x + b`, `W` row-major `out x in` at `params[w..]`, `b` at `params[b..]`.
    Affine { x: NodeId, w: usize, b: usize },
    LipSwish(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// vector times a length-1 node
    Scale { x: NodeId, s: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    /// concatenation of `links[start..start+count]`
    Concat { start: usize, count: usize },
    /// `sum_k w_k v_k` over `pairs[start..start+count]`, each `w_k` a scalar node
    WeightedSum { start: usize, count: usize },
    /// `x` read as a row-major `len / cols x cols` matrix times `consts[v..v+cols]`
    MatVec { x: NodeId, v: usize, cols: usize },
    SumSq(NodeId),
    Sqrt(NodeId),
    /// `c_0 + sum_k c_{k+1} basis_k`
    BiasedDot { coeffs: NodeId, basis: NodeId },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

/// LipSwish activation `0.909 z sigmoid(z)`.
pub const LIPSWISH_SCALE: f64 = 0.909;

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn lipswish(z: f64) -> f64 {
    LIPSWISH_SCALE * z * sigmoid(z)
}

#[inline]
pub fn lipswish_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    LIPSWISH_SCALE * (s + z * s * (1.0 - s))
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    links: Vec<NodeId>,
    pairs: Vec<(NodeId, NodeId)>,
    consts: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.links.clear();
        self.pairs.clear();
        self.consts.clear();
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = self.nodes[id.idx()];
        &self.vals[n.off..n.off + n.len]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.idx()].len
    }

    /// Number of affine operations that read weights at `params[w_offset..]`.
    pub fn count_affine(&self, w_offset: usize) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Affine { w, .. } if w == w_offset))
            .count()
    }

    fn push(&mut self, op: Op, len: usize) -> (NodeId, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, off, len });
        (id, off)
    }

    fn range(&self, id: NodeId) -> (usize, usize) {
        let n = self.nodes[id.idx()];
        (n.off, n.len)
    }

    pub fn input(&mut self, values: &[f64]) -> NodeId {
        let (id, off) = self.push(Op::Input, values.len());
        self.vals[off..off + values.len()].copy_from_slice(values);
        id
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.input(&[value])
    }

    pub fn affine(
        &mut self,
        params: &[f64],
        x: NodeId,
        w: usize,
        b: usize,
        out_len: usize,
    ) -> NodeId {
        let (xo, xl) = self.range(x);
        let (id, off) = self.push(Op::Affine { x, w, b }, out_len);
        let (src, dst) = self.vals.split_at_mut(off);
        let xv = &src[xo..xo + xl];
        for (r, o) in dst[..out_len].iter_mut().enumerate() {
            let row = &params[w + r * xl..w + (r + 1) * xl];
            let mut acc = params[b + r];
            for (a, c) in row.iter().zip(xv) {
                acc += a * c;
            }
            *o = acc;
        }
        id
    }

    pub fn lipswish(&mut self, x: NodeId) -> NodeId {
        let (xo, xl) = self.range(x);
        let (id, off) = self.push(Op::LipSwish(x), xl);
        for k in 0..xl {
            self.vals[off + k] = lipswish(self.vals[xo + k]);
        }
        id
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (ao, al) = self.range(a);
        let (bo, bl) = self.range(b);
        if al != bl {
            return Err(Error::ShapeMismatch(format!("operands of length {al} and {bl}")));
        }
        let (id, off) = self.push(op, al);
        for k in 0..al {
            self.vals[off + k] = f(self.vals[ao + k], self.vals[bo + k]);
        }
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.node_len(s) != 1 {
            return Err(Error::ShapeMismatch("scale factor must be a scalar".into()));
        }
        let (xo, xl) = self.range(x);
        let sv = self.scalar(s);
        let (id, off) = self.push(Op::Scale { x, s }, xl);
        for k in 0..xl {
            self.vals[off + k] = sv * self.vals[xo + k];
        }
        Ok(id)
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let (xo, xl) = self.range(x);
        let (id, off) = self.push(Op::ScaleConst { x, c }, xl);
        for k in 0..xl {
            self.vals[off + k] = c * self.vals[xo + k];
        }
        id
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let start = self.links.len();
        self.links.extend_from_slice(parts);
        let total: usize = parts.iter().map(|&p| self.node_len(p)).sum();
        let (id, mut off) = self.push(
            Op::Concat {
                start,
                count: parts.len(),
            },
            total,
        );
        for &p in parts {
            let (po, pl) = self.range(p);
            self.vals.copy_within(po..po + pl, off);
            off += pl;
        }
        id
    }

    /// `sum_k w_k v_k` with scalar weights `w_k`. The terms are added in the
    /// order given.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, NodeId)]) -> Result<NodeId> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::ShapeMismatch("empty weighted sum".into()));
        };
        let len = self.node_len(first);
        for &(w, v) in terms {
            if self.node_len(w) != 1 || self.node_len(v) != len {
                return Err(Error::ShapeMismatch("weighted sum term shapes".into()));
            }
        }
        let start = self.pairs.len();
        self.pairs.extend_from_slice(terms);
        let (id, off) = self.push(
            Op::WeightedSum {
                start,
                count: terms.len(),
            },
            len,
        );
        let (src, dst) = self.vals.split_at_mut(off);
        let dst = &mut dst[..len];
        for &(w, v) in terms {
            let wv = src[self.nodes[w.idx()].off];
            let vo = self.nodes[v.idx()].off;
            for (o, x) in dst.iter_mut().zip(&src[vo..vo + len]) {
                *o += wv * x;
            }
        }
        Ok(id)
    }

    /// Matrix (stored row-major in node `x`, `cols` columns) times a
    /// constant vector.
    pub fn mat_vec(&mut self, x: NodeId, v: &[f64]) -> Result<NodeId> {
        let cols = v.len();
        let (xo, xl) = self.range(x);
        if cols == 0 || xl % cols != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot view length {xl} as a matrix with {cols} columns"
            )));
        }
        let vo = self.consts.len();
        self.consts.extend_from_slice(v);
        let rows = xl / cols;
        let (id, off) = self.push(Op::MatVec { x, v: vo, cols }, rows);
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += self.vals[xo + r * cols + c] * v[c];
            }
            self.vals[off + r] = acc;
        }
        Ok(id)
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let (xo, xl) = self.range(x);
        let s = self.vals[xo..xo + xl].iter().map(|v| v * v).sum();
        let (id, off) = self.push(Op::SumSq(x), 1);
        self.vals[off] = s;
        id
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let (xo, xl) = self.range(x);
        let (id, off) = self.push(Op::Sqrt(x), xl);
        for k in 0..xl {
            self.vals[off + k] = self.vals[xo + k].sqrt();
        }
        id
    }

    pub fn biased_dot(&mut self, coeffs: NodeId, basis: NodeId) -> Result<NodeId> {
        let (co, cl) = self.range(coeffs);
        let (bo, bl) = self.range(basis);
        if cl != bl + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{cl} coefficients for {bl} basis values"
            )));
        }
        let mut acc = self.vals[co];
        for k in 0..bl {
            acc += self.vals[co + 1 + k] * self.vals[bo + k];
        }
        let (id, off) = self.push(Op::BiasedDot { coeffs, basis }, 1);
        self.vals[off] = acc;
        Ok(id)
    }

    /// Reverse sweep from a scalar `loss`, adding `seed * d loss / d theta`
    /// into `grad` (same layout as `params`).
    pub fn backward(&self, loss: NodeId, params: &[f64], grad: &mut [f64], seed: f64) -> Result<()> {
        self.sweep(loss, params, grad, seed).map(|_| ())
    }

    fn sweep(&self, loss: NodeId, params: &[f64], grad: &mut [f64], seed: f64) -> Result<Vec<f64>> {
        let ln = self.nodes[loss.idx()];
        if ln.len != 1 {
            return Err(Error::NonScalarLoss(ln.len));
        }
        if grad.len() != params.len() {
            return Err(Error::ShapeMismatch(
                "gradient and parameter arrays differ in length".into(),
            ));
        }
        let mut adj = vec![0.0; self.vals.len()];
        adj[ln.off] = seed;
        for i in (0..=loss.idx()).rev() {
            let node = self.nodes[i];
            let (off, len) = (node.off, node.len);
            if adj[off..off + len].iter().all(|&a| a == 0.0) {
                continue;
            }
            match node.op {
                Op::Input => {}
                Op::Affine { x, w, b } => {
                    let (xo, xl) = self.range(x);
                    for r in 0..len {
                        let g = adj[off + r];
                        if g == 0.0 {
                            continue;
                        }
                        grad[b + r] += g;
                        let wrow = w + r * xl;
                        for c in 0..xl {
                            grad[wrow + c] += g * self.vals[xo + c];
                            adj[xo + c] += g * params[wrow + c];
                        }
                    }
                }
                Op::LipSwish(x) => {
                    let xo = self.nodes[x.idx()].off;
                    for k in 0..len {
                        adj[xo + k] += adj[off + k] * lipswish_grad(self.vals[xo + k]);
                    }
                }
                Op::Add(a, b) => {
                    let (ao, bo) = (self.nodes[a.idx()].off, self.nodes[b.idx()].off);
                    for k in 0..len {
                        let g = adj[off + k];
                        adj[ao + k] += g;
                        adj[bo + k] += g;
                    }
                }
                Op::Sub(a, b) => {
                    let (ao, bo) = (self.nodes[a.idx()].off, self.nodes[b.idx()].off);
                    for k in 0..len {
                        let g = adj[off + k];
                        adj[ao + k] += g;
                        adj[bo + k] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, bo) = (self.nodes[a.idx()].off, self.nodes[b.idx()].off);
                    for k in 0..len {
                        let g = adj[off + k];
                        adj[ao + k] += g * self.vals[bo + k];
                        adj[bo + k] += g * self.vals[ao + k];
                    }
                }
                Op::Scale { x, s } => {
                    let xo = self.nodes[x.idx()].off;
                    let so = self.nodes[s.idx()].off;
                    let sv = self.vals[so];
                    let mut gs = 0.0;
                    for k in 0..len {
                        let g = adj[off + k];
                        gs += g * self.vals[xo + k];
                        adj[xo + k] += g * sv;
                    }
                    adj[so] += gs;
                }
                Op::ScaleConst { x, c } => {
                    let xo = self.nodes[x.idx()].off;
                    for k in 0..len {
                        adj[xo + k] += c * adj[off + k];
                    }
                }
                Op::Concat { start, count } => {
                    let mut o = off;
                    for &p in &self.links[start..start + count] {
                        let (po, pl) = self.range(p);
                        for k in 0..pl {
                            adj[po + k] += adj[o + k];
                        }
                        o += pl;
                    }
                }
                Op::WeightedSum { start, count } => {
                    for &(w, v) in &self.pairs[start..start + count] {
                        let wo = self.nodes[w.idx()].off;
                        let vo = self.nodes[v.idx()].off;
                        let wv = self.vals[wo];
                        let mut gw = 0.0;
                        for k in 0..len {
                            let g = adj[off + k];
                            gw += g * self.vals[vo + k];
                            adj[vo + k] += g * wv;
                        }
                        adj[wo] += gw;
                    }
                }
                Op::MatVec { x, v, cols } => {
                    let xo = self.nodes[x.idx()].off;
                    for r in 0..len {
                        let g = adj[off + r];
                        for c in 0..cols {
                            adj[xo + r * cols + c] += g * self.consts[v + c];
                        }
                    }
                }
                Op::SumSq(x) => {
                    let (xo, xl) = self.range(x);
                    let g = adj[off];
                    for k in 0..xl {
                        adj[xo + k] += 2.0 * g * self.vals[xo + k];
                    }
                }
                Op::Sqrt(x) => {
                    let xo = self.nodes[x.idx()].off;
                    for k in 0..len {
                        let y = self.vals[off + k];
                        // sqrt is not differentiable at 0; use the zero subgradient
                        if y > 0.0 {
                            adj[xo + k] += adj[off + k] * 0.5 / y;
                        }
                    }
                }
                Op::BiasedDot { coeffs, basis } => {
                    let co = self.nodes[coeffs.idx()].off;
                    let (bo, bl) = self.range(basis);
                    let g = adj[off];
                    adj[co] += g;
                    for k in 0..bl {
                        adj[co + 1 + k] += g * self.vals[bo + k];
                        adj[bo + k] += g * self.vals[co + 1 + k];
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Adjoint of a tape input after a reverse sweep from `loss`.
    pub fn input_gradient(&self, loss: NodeId, input: NodeId, params: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = vec![0.0; params.len()];
        let adj = self.sweep(loss, params, &mut scratch, 1.0)?;
        let (io, il) = self.range(input);
        Ok(adj[io..io + il].to_vec())
    }
}
