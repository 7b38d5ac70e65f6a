use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

const LOG_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ClampMin(NodeId, f64),
    Softmax(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<u32>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumLast(NodeId),
    MeanLast(NodeId),
    Concat(NodeId, NodeId),
    Slice {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    SwapAxes(NodeId, usize, usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Wengert tape: records primitive operations during the forward pass and
/// replays them in reverse to accumulate gradients. Topological order holds
/// by construction (an op can only reference already-recorded nodes).
///
/// A tape is confined to one thread for its lifetime.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        s[i] = acc;
        acc *= d;
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Visits every element of the broadcast output, yielding
/// (out_offset, a_offset, b_offset). Fast paths cover the shapes the model
/// actually produces; the generic path handles the rest.
fn for_each_pair(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let an = numel(a_shape);
    let bn = numel(b_shape);

    // Identical shapes.
    if a_shape == b_shape {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    // b is a trailing-dims broadcast of out (e.g. bias add [B,S,E] + [E]).
    if an == n && b_shape.len() < out_shape.len() && b_shape == &out_shape[out_shape.len() - b_shape.len()..] {
        let mut i = 0;
        while i < n {
            for j in 0..bn {
                f(i + j, i + j, j);
            }
            i += bn;
        }
        return;
    }
    // Same for a.
    if bn == n && a_shape.len() < out_shape.len() && a_shape == &out_shape[out_shape.len() - a_shape.len()..] {
        let mut i = 0;
        while i < n {
            for j in 0..an {
                f(i + j, j, i + j);
            }
            i += an;
        }
        return;
    }
    // b matches out except its last dim is 1 (e.g. row divisor [B,S,1]).
    if an == n
        && a_shape.len() == b_shape.len()
        && b_shape[..b_shape.len() - 1] == a_shape[..a_shape.len() - 1]
        && *b_shape.last().unwrap() == 1
    {
        let last = *out_shape.last().unwrap();
        for i in 0..n {
            f(i, i, i / last);
        }
        return;
    }

    // Generic strided walk.
    let rank = out_shape.len();
    let pad = |s: &[usize]| {
        let mut p = vec![1; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let ap = pad(a_shape);
    let bp = pad(b_shape);
    let astr: Vec<usize> = strides(&ap)
        .iter()
        .zip(&ap)
        .map(|(&s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let bstr: Vec<usize> = strides(&bp)
        .iter()
        .zip(&bp)
        .map(|(&s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let mut coords = vec![0usize; rank];
    let mut aoff = 0usize;
    let mut boff = 0usize;
    for i in 0..n {
        f(i, aoff, boff);
        for d in (0..rank).rev() {
            coords[d] += 1;
            aoff += astr[d];
            boff += bstr[d];
            if coords[d] < out_shape[d] {
                break;
            }
            aoff -= astr[d] * out_shape[d];
            boff -= bstr[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Gradient of the last `backward` root with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id];
        Tensor {
            shape: n.shape.clone(),
            values: n.data.iter().map(|&v| v as f32).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::NotOnTape(id));
        }
        Ok(())
    }

    /// Records a tensor as a leaf, promoting values to f64.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        t.assert_finite("leaf input")?;
        Ok(self.push(
            t.shape.clone(),
            t.values.iter().map(|&v| v as f64).collect(),
            t.requires_grad,
            Op::Leaf,
        ))
    }

    pub fn leaf_f64(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("leaf input".into()));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf_f64(shape, data, false)
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        self.check(a)?;
        self.check(b)?;
        broadcast_shape(&self.nodes[a].shape, &self.nodes[b].shape).ok_or_else(|| {
            Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            }
        })
    }

    fn elementwise_binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out_shape = self.binary_shapes(name, a, b)?;
        let mut out = vec![0.0; numel(&out_shape)];
        {
            let (da, db) = (&self.nodes[a].data, &self.nodes[b].data);
            for_each_pair(&out_shape, &self.nodes[a].shape, &self.nodes[b].shape, |o, ao, bo| {
                out[o] = f(da[ao], db[bo]);
            });
        }
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(out_shape, out, ng, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(
        &mut self,
        input: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check(input)?;
        let data: Vec<f64> = self.nodes[input].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[input].shape.clone();
        let ng = self.nodes[input].needs_grad;
        Ok(self.push(shape, data, ng, op))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// log(max(x, 1e-9)); the clamp keeps cross-entropies finite.
    pub fn log_clamped(&mut self, x: NodeId) -> Result<NodeId> {
        let c = self.clamp_min(x, LOG_CLAMP)?;
        self.log(c)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    /// Batched matrix product. `a` is [.., m, k]; `b` is either [k, n]
    /// (shared across the batch) or [.., k, n] with identical leading dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ash, bsh) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != bk {
            return Err(mismatch());
        }
        let batch = numel(&ash[..ash.len() - 2]);
        let shared_b = bsh.len() == 2;
        if !shared_b && bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let da = &self.nodes[a].data;
            let db = &self.nodes[b].data;
            for t in 0..batch {
                let ab = &da[t * m * k..(t + 1) * m * k];
                let bb = if shared_b { &db[..] } else { &db[t * k * n..(t + 1) * k * n] };
                let ob = &mut out[t * m * n..(t + 1) * m * n];
                matmul_2d(ab, bb, ob, m, k, n);
            }
        }
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(out_shape, out, ng, Op::Matmul(a, b)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.nodes[x].shape.clone();
        let last = *shape.last().ok_or(Error::ShapeMismatch {
            op: "softmax",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let data = &self.nodes[x].data;
        let mut out = vec![0.0; data.len()];
        for (row_in, row_out) in data.chunks(last).zip(out.chunks_mut(last)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(shape, out, ng, Op::Softmax(x)))
    }

    /// Row lookup: `table` is [V, E]; output is prefix + [E] with one table
    /// row per id. Backward scatter-adds into the table.
    pub fn gather(&mut self, table: NodeId, ids: &[u32], prefix: Vec<usize>) -> Result<NodeId> {
        self.check(table)?;
        let tsh = &self.nodes[table].shape;
        if tsh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: tsh.clone(),
                rhs: prefix,
            });
        }
        let (v, e) = (tsh[0], tsh[1]);
        if numel(&prefix) != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: prefix,
                rhs: vec![ids.len()],
            });
        }
        let mut out = vec![0.0; ids.len() * e];
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            let row = &self.nodes[table].data[id as usize * e..(id as usize + 1) * e];
            out[i * e..(i + 1) * e].copy_from_slice(row);
        }
        let mut out_shape = prefix.clone();
        out_shape.push(e);
        let ng = self.nodes[table].needs_grad;
        Ok(self.push(
            out_shape,
            out,
            ng,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s: f64 = self.nodes[x].data.iter().sum();
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(vec![1], vec![s], ng, Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let n = self.nodes[x].data.len() as f64;
        let s: f64 = self.nodes[x].data.iter().sum();
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(vec![1], vec![s / n], ng, Op::MeanAll(x)))
    }

    fn last_reduce(&mut self, x: NodeId, mean: bool) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.nodes[x].shape.clone();
        let last = *shape.last().ok_or(Error::ShapeMismatch {
            op: "reduce-last",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let rows = numel(&shape) / last;
        let mut out = vec![0.0; rows];
        for (r, chunk) in self.nodes[x].data.chunks(last).enumerate() {
            let s: f64 = chunk.iter().sum();
            out[r] = if mean { s / last as f64 } else { s };
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let ng = self.nodes[x].needs_grad;
        let op = if mean { Op::MeanLast(x) } else { Op::SumLast(x) };
        Ok(self.push(out_shape, out, ng, op))
    }

    /// Sum over the last axis, keeping it as extent 1.
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.last_reduce(x, false)
    }

    /// Mean over the last axis, keeping it as extent 1.
    pub fn mean_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.last_reduce(x, true)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ash, bsh) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if ash.len() != bsh.len()
            || ash.is_empty()
            || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let (la, lb) = (ash[ash.len() - 1], bsh[bsh.len() - 1]);
        let rows = numel(ash) / la;
        let mut out = vec![0.0; rows * (la + lb)];
        for r in 0..rows {
            out[r * (la + lb)..r * (la + lb) + la]
                .copy_from_slice(&self.nodes[a].data[r * la..(r + 1) * la]);
            out[r * (la + lb) + la..(r + 1) * (la + lb)]
                .copy_from_slice(&self.nodes[b].data[r * lb..(r + 1) * lb]);
        }
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = la + lb;
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(out_shape, out, ng, Op::Concat(a, b)))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.nodes[x].shape.clone();
        let last = *shape.last().ok_or(Error::ShapeMismatch {
            op: "slice",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if start + len > last {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                what: "slice",
                size: last,
            });
        }
        let rows = numel(&shape) / last;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[x].data[r * last + start..r * last + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(out_shape, out, ng, Op::Slice { input: x, start, len }))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        if numel(&new_shape) != self.nodes[x].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = self.nodes[x].data.clone();
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(new_shape, data, ng, Op::Reshape(x)))
    }

    /// Swaps two axes, materializing the permuted layout.
    pub fn swap_axes(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        self.check(x)?;
        let in_shape = self.nodes[x].shape.clone();
        if a >= in_shape.len() || b >= in_shape.len() {
            return Err(Error::IndexOutOfRange {
                index: a.max(b),
                what: "axis",
                size: in_shape.len(),
            });
        }
        let mut out_shape = in_shape.clone();
        out_shape.swap(a, b);
        let data = permute_swap(&self.nodes[x].data, &in_shape, a, b);
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(out_shape, data, ng, Op::SwapAxes(x, a, b)))
    }

    /// Reverse pass from a scalar `root`. Every `needs_grad` node reachable
    /// from the root gets its grad populated; fan-out accumulates additively.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        if numel(&self.nodes[root].shape) != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root].shape.clone()));
        }
        if !self.nodes[root].data[0].is_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        for node in &mut self.nodes[..=root] {
            node.grad = if node.needs_grad {
                vec![0.0; node.data.len()]
            } else {
                Vec::new()
            };
        }
        if !self.nodes[root].needs_grad {
            return Ok(());
        }
        self.nodes[root].grad[0] = 1.0;

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let grad = std::mem::take(&mut self.nodes[id].grad);
            self.backward_step(id, &op, &grad);
            self.nodes[id].grad = grad;
        }
        Ok(())
    }

    fn backward_step(&mut self, id: NodeId, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let out_shape = self.nodes[id].shape.clone();
                self.bcast_accumulate(a, &out_shape, g, |go, _, _| go);
                self.bcast_accumulate(b, &out_shape, g, |go, _, _| go);
            }
            Op::Sub(a, b) => {
                let out_shape = self.nodes[id].shape.clone();
                self.bcast_accumulate(a, &out_shape, g, |go, _, _| go);
                self.bcast_accumulate_rhs(b, a, &out_shape, g, |go, _, _| -go);
            }
            Op::Mul(a, b) => {
                let out_shape = self.nodes[id].shape.clone();
                let bd = self.nodes[b].data.clone();
                let ad = self.nodes[a].data.clone();
                self.bcast_accumulate_with(a, b, &bd, &out_shape, g, |go, other| go * other);
                self.bcast_accumulate_with(b, a, &ad, &out_shape, g, |go, other| go * other);
            }
            Op::Div(a, b) => {
                let out_shape = self.nodes[id].shape.clone();
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                if self.nodes[a].needs_grad {
                    let a_shape = self.nodes[a].shape.clone();
                    let b_shape = self.nodes[b].shape.clone();
                    let mut acc = vec![0.0; self.nodes[a].data.len()];
                    for_each_pair(&out_shape, &a_shape, &b_shape, |o, ao, bo| {
                        acc[ao] += g[o] / bd[bo];
                    });
                    add_into(&mut self.nodes[a].grad, &acc);
                }
                if self.nodes[b].needs_grad {
                    let a_shape = self.nodes[a].shape.clone();
                    let b_shape = self.nodes[b].shape.clone();
                    let mut acc = vec![0.0; self.nodes[b].data.len()];
                    for_each_pair(&out_shape, &a_shape, &b_shape, |o, ao, bo| {
                        acc[bo] += -g[o] * ad[ao] / (bd[bo] * bd[bo]);
                    });
                    add_into(&mut self.nodes[b].grad, &acc);
                }
            }
            Op::Exp(x) => {
                let out = self.nodes[id].data.clone();
                self.unary_accumulate(x, g, |i, go| go * out[i]);
            }
            Op::Log(x) => {
                let xin = self.nodes[x].data.clone();
                self.unary_accumulate(x, g, |i, go| go / xin[i]);
            }
            Op::Tanh(x) => {
                let out = self.nodes[id].data.clone();
                self.unary_accumulate(x, g, |i, go| go * (1.0 - out[i] * out[i]));
            }
            Op::Sqrt(x) => {
                let out = self.nodes[id].data.clone();
                self.unary_accumulate(x, g, |i, go| go / (2.0 * out[i]));
            }
            Op::Scale(x, c) => {
                self.unary_accumulate(x, g, |_, go| go * c);
            }
            Op::AddScalar(x) => {
                self.unary_accumulate(x, g, |_, go| go);
            }
            Op::ClampMin(x, c) => {
                let xin = self.nodes[x].data.clone();
                self.unary_accumulate(x, g, |i, go| if xin[i] > c { go } else { 0.0 });
            }
            Op::Matmul(a, b) => self.backward_matmul(id, a, b, g),
            Op::Softmax(x) => {
                if !self.nodes[x].needs_grad {
                    return;
                }
                let out = &self.nodes[id].data;
                let last = *self.nodes[id].shape.last().unwrap();
                let mut acc = vec![0.0; out.len()];
                for ((row_p, row_g), row_acc) in out
                    .chunks(last)
                    .zip(g.chunks(last))
                    .zip(acc.chunks_mut(last))
                {
                    let s: f64 = row_p.iter().zip(row_g).map(|(&p, &gg)| p * gg).sum();
                    for ((&p, &gg), a) in row_p.iter().zip(row_g).zip(row_acc.iter_mut()) {
                        *a = p * (gg - s);
                    }
                }
                add_into(&mut self.nodes[x].grad, &acc);
            }
            Op::Gather { table, ref ids, .. } => {
                if !self.nodes[table].needs_grad {
                    return;
                }
                let e = self.nodes[table].shape[1];
                let mut acc = vec![0.0; self.nodes[table].data.len()];
                for (i, &tid) in ids.iter().enumerate() {
                    let dst = &mut acc[tid as usize * e..(tid as usize + 1) * e];
                    for (d, &gg) in dst.iter_mut().zip(&g[i * e..(i + 1) * e]) {
                        *d += gg;
                    }
                }
                add_into(&mut self.nodes[table].grad, &acc);
            }
            Op::SumAll(x) => {
                self.unary_accumulate_broadcast(x, g[0]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x].data.len() as f64;
                self.unary_accumulate_broadcast(x, g[0] / n);
            }
            Op::SumLast(x) => {
                if !self.nodes[x].needs_grad {
                    return;
                }
                let last = *self.nodes[x].shape.last().unwrap();
                let mut acc = vec![0.0; self.nodes[x].data.len()];
                for (r, chunk) in acc.chunks_mut(last).enumerate() {
                    for c in chunk.iter_mut() {
                        *c = g[r];
                    }
                }
                add_into(&mut self.nodes[x].grad, &acc);
            }
            Op::MeanLast(x) => {
                if !self.nodes[x].needs_grad {
                    return;
                }
                let last = *self.nodes[x].shape.last().unwrap();
                let inv = 1.0 / last as f64;
                let mut acc = vec![0.0; self.nodes[x].data.len()];
                for (r, chunk) in acc.chunks_mut(last).enumerate() {
                    for c in chunk.iter_mut() {
                        *c = g[r] * inv;
                    }
                }
                add_into(&mut self.nodes[x].grad, &acc);
            }
            Op::Concat(a, b) => {
                let la = *self.nodes[a].shape.last().unwrap();
                let lb = *self.nodes[b].shape.last().unwrap();
                let rows = self.nodes[a].data.len() / la;
                if self.nodes[a].needs_grad {
                    let mut acc = vec![0.0; self.nodes[a].data.len()];
                    for r in 0..rows {
                        acc[r * la..(r + 1) * la]
                            .copy_from_slice(&g[r * (la + lb)..r * (la + lb) + la]);
                    }
                    add_into(&mut self.nodes[a].grad, &acc);
                }
                if self.nodes[b].needs_grad {
                    let mut acc = vec![0.0; self.nodes[b].data.len()];
                    for r in 0..rows {
                        acc[r * lb..(r + 1) * lb]
                            .copy_from_slice(&g[r * (la + lb) + la..(r + 1) * (la + lb)]);
                    }
                    add_into(&mut self.nodes[b].grad, &acc);
                }
            }
            Op::Slice { input, start, len } => {
                if !self.nodes[input].needs_grad {
                    return;
                }
                let last = *self.nodes[input].shape.last().unwrap();
                let rows = self.nodes[input].data.len() / last;
                let mut acc = vec![0.0; self.nodes[input].data.len()];
                for r in 0..rows {
                    acc[r * last + start..r * last + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(&mut self.nodes[input].grad, &acc);
            }
            Op::Reshape(x) => {
                if self.nodes[x].needs_grad {
                    add_into(&mut self.nodes[x].grad, g);
                }
            }
            Op::SwapAxes(x, a, b) => {
                if !self.nodes[x].needs_grad {
                    return;
                }
                let out_shape = self.nodes[id].shape.clone();
                let acc = permute_swap(g, &out_shape, a, b);
                add_into(&mut self.nodes[x].grad, &acc);
            }
        }
    }

    fn unary_accumulate(&mut self, x: NodeId, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.nodes[x].needs_grad {
            return;
        }
        let grad = &mut self.nodes[x].grad;
        for (i, &go) in g.iter().enumerate() {
            grad[i] += f(i, go);
        }
    }

    fn unary_accumulate_broadcast(&mut self, x: NodeId, v: f64) {
        if !self.nodes[x].needs_grad {
            return;
        }
        for gx in self.nodes[x].grad.iter_mut() {
            *gx += v;
        }
    }

    /// Accumulates grad into broadcast input `a` of a binary op whose output
    /// shape is `out_shape`; `f` maps (out grad, a_off, b_off placeholder).
    fn bcast_accumulate(
        &mut self,
        a: NodeId,
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(f64, usize, usize) -> f64,
    ) {
        if !self.nodes[a].needs_grad {
            return;
        }
        let a_shape = self.nodes[a].shape.clone();
        if a_shape == out_shape {
            let grad = &mut self.nodes[a].grad;
            for (i, &go) in g.iter().enumerate() {
                grad[i] += f(go, i, i);
            }
            return;
        }
        let mut acc = vec![0.0; self.nodes[a].data.len()];
        for_each_pair(out_shape, &a_shape, out_shape, |o, ao, _| {
            acc[ao] += f(g[o], ao, 0);
        });
        add_into(&mut self.nodes[a].grad, &acc);
    }

    fn bcast_accumulate_rhs(
        &mut self,
        b: NodeId,
        a: NodeId,
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(f64, usize, usize) -> f64,
    ) {
        if !self.nodes[b].needs_grad {
            return;
        }
        let a_shape = self.nodes[a].shape.clone();
        let b_shape = self.nodes[b].shape.clone();
        let mut acc = vec![0.0; self.nodes[b].data.len()];
        for_each_pair(out_shape, &a_shape, &b_shape, |o, _, bo| {
            acc[bo] += f(g[o], 0, bo);
        });
        add_into(&mut self.nodes[b].grad, &acc);
    }

    /// Grad of `target` in a Mul: d(target) += g * other, reduced over
    /// broadcast axes.
    fn bcast_accumulate_with(
        &mut self,
        target: NodeId,
        other: NodeId,
        other_data: &[f64],
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let t_shape = self.nodes[target].shape.clone();
        let o_shape = self.nodes[other].shape.clone();
        let mut acc = vec![0.0; self.nodes[target].data.len()];
        for_each_pair(out_shape, &t_shape, &o_shape, |o, to, oo| {
            acc[to] += f(g[o], other_data[oo]);
        });
        add_into(&mut self.nodes[target].grad, &acc);
    }

    fn backward_matmul(&mut self, id: NodeId, a: NodeId, b: NodeId, g: &[f64]) {
        let ash = self.nodes[a].shape.clone();
        let bsh = self.nodes[b].shape.clone();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let batch = self.nodes[id].data.len() / (m * n);
        let shared_b = bsh.len() == 2;

        if self.nodes[a].needs_grad {
            let bd = self.nodes[b].data.clone();
            let mut acc = vec![0.0; self.nodes[a].data.len()];
            for t in 0..batch {
                let gb = &g[t * m * n..(t + 1) * m * n];
                let bb = if shared_b { &bd[..] } else { &bd[t * k * n..(t + 1) * k * n] };
                let ab = &mut acc[t * m * k..(t + 1) * m * k];
                // dA = dC @ B^T (dot products along n)
                for i in 0..m {
                    let grow = &gb[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bb[kk * n..(kk + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ab[i * k + kk] += s;
                    }
                }
            }
            add_into(&mut self.nodes[a].grad, &acc);
        }
        if self.nodes[b].needs_grad {
            let ad = self.nodes[a].data.clone();
            let mut acc = vec![0.0; self.nodes[b].data.len()];
            for t in 0..batch {
                let gb = &g[t * m * n..(t + 1) * m * n];
                let ab = &ad[t * m * k..(t + 1) * m * k];
                let off = if shared_b { 0 } else { t * k * n };
                // dB += A^T @ dC (axpy rows, unit stride)
                for i in 0..m {
                    let grow = &gb[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = ab[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &mut acc[off + kk * n..off + (kk + 1) * n];
                        for j in 0..n {
                            brow[j] += aik * grow[j];
                        }
                    }
                }
            }
            add_into(&mut self.nodes[b].grad, &acc);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_2d(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn permute_swap(data: &[f64], in_shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    if a == b {
        return data.to_vec();
    }
    let mut out_shape = in_shape.to_vec();
    out_shape.swap(a, b);
    let out_str = strides(&out_shape);
    let rank = in_shape.len();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for &v in data.iter() {
        let mut off = 0;
        for d in 0..rank {
            let od = if d == a { b } else if d == b { a } else { d };
            off += coords[d] * out_str[od];
        }
        out[off] = v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < in_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}
