//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse once and
//! returns gradients for every parameter node (scattered into a flat vector
//! by offset) and for every input node that asked for one.

use crate::error::{Error, Result};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

pub type NodeId = usize;

/// Sentinel for an empty max-pool group.
const NO_ARG: u32 = u32::MAX;

/// Precomputed bilinear read: four `(flat cell, weight)` taps.
pub type BilinearTaps = [(u32, f64); 4];

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SegmentMax(NodeId, Vec<u32>),
    Transpose(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize },
    Bilinear(NodeId, Vec<BilinearTaps>),
    SliceCols { x: NodeId, start: usize },
    Reshape(NodeId),
    Bce { p: NodeId, labels: Vec<f64> },
    SmoothL1 { x: NodeId, target: Vec<f64>, mask: Option<Vec<bool>>, count: usize },
    WeightedSum(Vec<(NodeId, f64)>),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    /// d loss / d parameters, indexed by the offsets given to [`Tape::param`].
    pub params: Vec<f64>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a node created by [`Tape::input_tracked`].
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.nodes.get(node).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!("2-D {what}"), format!("{:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    if k == 1 {
        return x.to_vec();
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x[c * hw + sy as usize * w..c * hw + sy as usize * w + w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let (x0, x1) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                    for xx in x0..x1 {
                        drow[(xx as isize - dx) as usize] = src[xx];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    if k == 1 {
        for (o, c) in out.iter_mut().zip(cols) {
            *o += c;
        }
        return;
    }
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = c * hw + sy as usize * w;
                    let srow = &src[y * w..(y + 1) * w];
                    let (x0, x1) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                    for xx in x0..x1 {
                        out[base + xx] += srow[(xx as isize - dx) as usize];
                    }
                }
            }
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_tracked(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// A parameter block; its gradient lands at `offset..offset + len`.
    pub fn param(&mut self, shape: &[usize], values: &[f64], offset: usize) -> NodeId {
        let t = Tensor { shape: shape.to_vec(), data: values.to_vec() };
        self.push(t, Op::Param { offset }, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = check_2d(self.value(a), "matmul lhs")?;
        let (k2, m) = check_2d(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("[_, {k}] x [{k}, _]"), format!("[{k2}, {m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(&self.value(a).data, &self.value(b).data, n, k, m, &mut out);
        let g = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMul(a, b), g))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = check_2d(self.value(x), "bias input")?;
        if self.value(b).len() != m {
            return Err(Error::shape(format!("bias of {m}"), self.value(b).len().to_string()));
        }
        let mut out = self.value(x).data.clone();
        let bias = &self.value(b).data;
        for r in 0..n {
            for (o, bv) in out[r * m..(r + 1) * m].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let g = self.ng(&[x, b]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::AddBias(x, b), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape(format!("{:?}", self.value(a).shape), format!("{:?}", self.value(b).shape)));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        let g = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), g))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| a.max(0.0)).collect() };
        let g = self.ng(&[x]);
        self.push(t, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| sigmoid(a)).collect() };
        let g = self.ng(&[x]);
        self.push(t, Op::Sigmoid(x), g)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x);
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| a * k).collect() };
        let g = self.ng(&[x]);
        self.push(t, Op::Scale(x, k), g)
    }

    /// Concatenates `[n, c_i]` blocks into `[n, Σc_i]`.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = check_2d(self.value(p), "concat block")?;
            if r != n {
                return Err(Error::shape(format!("{n} rows"), format!("{r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        for r in 0..n {
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[r * total + col..r * total + col + w].copy_from_slice(self.value(p).row(r));
                col += w;
            }
        }
        let g = self.ng(parts);
        Ok(self.push(Tensor { shape: vec![n, total], data: out }, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Stacks blocks along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tail = self.value(parts[0]).shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape[1..] != tail[..] {
                return Err(Error::shape(format!("[_, {tail:?}]"), format!("{:?}", v.shape)));
            }
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let g = self.ng(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let (n, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidArgument(format!("row {i} of {n}")));
            }
            out.extend_from_slice(v.row(i));
        }
        let g = self.ng(&[x]);
        Ok(self.push(
            Tensor { shape: vec![idx.len().max(1), c], data: if idx.is_empty() { vec![0.0; c] } else { out } },
            Op::GatherRows(x, idx.to_vec()),
            g,
        ))
    }

    /// Per-group, per-channel max of `[n, c]` rows into `[groups, c]`. Empty
    /// groups yield 0. Ties keep the lowest row index.
    pub fn segment_max(&mut self, x: NodeId, group_of: &[usize], groups: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (n, c) = check_2d(v, "segment_max input")?;
        if group_of.len() != n {
            return Err(Error::LengthMismatch(group_of.len(), n));
        }
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut arg = vec![NO_ARG; groups * c];
        for (r, &gid) in group_of.iter().enumerate() {
            if gid >= groups {
                return Err(Error::InvalidArgument(format!("group {gid} of {groups}")));
            }
            let row = v.row(r);
            let o = &mut out[gid * c..(gid + 1) * c];
            let a = &mut arg[gid * c..(gid + 1) * c];
            for ch in 0..c {
                if row[ch] > o[ch] {
                    o[ch] = row[ch];
                    a[ch] = r as u32;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&arg) {
            if *a == NO_ARG {
                *o = 0.0;
            }
        }
        let g = self.ng(&[x]);
        Ok(self.push(Tensor { shape: vec![groups, c], data: out }, Op::SegmentMax(x, arg), g))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = check_2d(self.value(x), "transpose input")?;
        let src = &self.value(x).data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let g = self.ng(&[x]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::Transpose(x), g))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?}", v.shape)));
        }
        let t = Tensor { shape: shape.to_vec(), data: v.data.clone() };
        let g = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    /// Stride-1, zero-padded `k x k` convolution of `[cin, h, w]` with weights
    /// `[cout, cin·k·k]` and bias `[cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> Result<NodeId> {
        let xs = &self.value(x).shape;
        if xs.len() != 3 {
            return Err(Error::shape("[C, H, W]", format!("{xs:?}")));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kk) = check_2d(self.value(w), "conv weight")?;
        if kk != cin * k * k {
            return Err(Error::shape(format!("[_, {}]", cin * k * k), format!("[{cout}, {kk}]")));
        }
        if self.value(b).len() != cout {
            return Err(Error::shape(format!("bias of {cout}"), self.value(b).len().to_string()));
        }
        let hw = h * wd;
        let cols = im2col(&self.value(x).data, cin, h, wd, k);
        let mut out = vec![0.0; cout * hw];
        for (co, bv) in self.value(b).data.iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(*bv);
        }
        gemm_nn(&self.value(w).data, &cols, cout, kk, hw, &mut out);
        let g = self.ng(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![cout, h, wd], data: out }, Op::Conv2d { x, w, b, k }, g))
    }

    /// Reads `[C, H, W]` at precomputed taps, producing `[M, C]`.
    pub fn bilinear(&mut self, plane: NodeId, taps: Vec<BilinearTaps>) -> Result<NodeId> {
        let ps = &self.value(plane).shape;
        if ps.len() != 3 {
            return Err(Error::shape("[C, H, W]", format!("{ps:?}")));
        }
        let c = ps[0];
        let hw = ps[1] * ps[2];
        let src = &self.value(plane).data;
        let m = taps.len();
        let mut out = vec![0.0; m.max(1) * c];
        for (q, t) in taps.iter().enumerate() {
            let o = &mut out[q * c..(q + 1) * c];
            for &(cell, wgt) in t {
                if wgt == 0.0 {
                    continue;
                }
                let cell = cell as usize;
                for (ch, ov) in o.iter_mut().enumerate() {
                    *ov += wgt * src[ch * hw + cell];
                }
            }
        }
        let g = self.ng(&[plane]);
        Ok(self.push(Tensor { shape: vec![m.max(1), c], data: out }, Op::Bilinear(plane, taps), g))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = check_2d(self.value(x), "slice input")?;
        if start + len > m || len == 0 {
            return Err(Error::shape(format!("cols {start}..{}", start + len), format!("{m} cols")));
        }
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + start + len]);
        }
        let g = self.ng(&[x]);
        Ok(self.push(Tensor { shape: vec![n, len], data: out }, Op::SliceCols { x, start }, g))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, p: NodeId, labels: &[f64]) -> Result<NodeId> {
        let v = &self.value(p).data;
        if v.len() != labels.len() {
            return Err(Error::LengthMismatch(v.len(), labels.len()));
        }
        let loss = bce_mean(v, labels);
        let g = self.ng(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, labels: labels.to_vec() }, g))
    }

    /// Mean smooth-L1 (kink at 1) over the unmasked entries; 0 when none.
    pub fn smooth_l1(&mut self, x: NodeId, target: &[f64], mask: Option<&[bool]>) -> Result<NodeId> {
        let v = &self.value(x).data;
        if v.len() != target.len() {
            return Err(Error::LengthMismatch(v.len(), target.len()));
        }
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(Error::LengthMismatch(m.len(), v.len()));
            }
        }
        let (loss, count) = smooth_l1_mean(v, target, mask);
        let g = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 { x, target: target.to_vec(), mask: mask.map(|m| m.to_vec()), count },
            g,
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            if self.value(id).len() != 1 {
                return Err(Error::shape("scalar", format!("{:?}", self.value(id).shape)));
            }
            total += w * self.value(id).item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let g = self.ng(&ids);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), g))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let g = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), g)
    }

    /// Reverse pass from the scalar `loss`. The tape can be consumed once.
    pub fn backward(&mut self, loss: NodeId, param_count: usize) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::shape("scalar loss", format!("{:?}", self.value(loss).shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = vec![0.0; param_count];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads, &mut params)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut [f64]) -> Result<()> {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($p:expr) => {
                slot(nodes, grads, $p)
            };
        }
        let node = &nodes[id];
        match &node.op {
            Op::Input => {}
            Op::Param { offset } => {
                let end = offset + g.len();
                if end > params.len() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter block {offset}..{end} beyond {}",
                        params.len()
                    )));
                }
                for (p, v) in params[*offset..end].iter_mut().zip(g) {
                    *p += v;
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
                let m = nodes[*b].value.shape[1];
                if let Some(ga) = acc!(*a) {
                    gemm_nt(g, &nodes[*b].value.data, n, m, k, ga);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(&nodes[*a].value.data, g, n, k, m, gb);
                }
            }
            Op::AddBias(x, b) => {
                let m = nodes[*b].value.len();
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(*b) {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(&node.value.data) {
                        if y > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(&node.value.data) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = acc!(*x) {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o += k * gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape[0];
                let total = node.value.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p].value.shape[1];
                    if let Some(gp) = acc!(p) {
                        for r in 0..n {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(gp) = acc!(p) {
                        add_into(gp, &g[start..start + len]);
                    }
                    start += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let c = nodes[*x].value.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SegmentMax(x, arg) => {
                let c = nodes[*x].value.shape[1];
                if let Some(gx) = acc!(*x) {
                    for (e, &a) in arg.iter().enumerate() {
                        if a != NO_ARG {
                            gx[a as usize * c + e % c] += g[e];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (nodes[*x].value.shape[0], nodes[*x].value.shape[1]);
                if let Some(gx) = acc!(*x) {
                    for i in 0..n {
                        for j in 0..m {
                            gx[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let xs = &nodes[*x].value.shape;
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let hw = h * wd;
                let cout = nodes[*w].value.shape[0];
                let kk = cin * k * k;
                if let Some(gb) = acc!(*b) {
                    for (co, gbv) in gb.iter_mut().enumerate() {
                        *gbv += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
                if nodes[*w].needs_grad {
                    let cols = im2col(&nodes[*x].value.data, cin, h, wd, *k);
                    if let Some(gw) = acc!(*w) {
                        gemm_nt(g, &cols, cout, hw, kk, gw);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm_tn(&nodes[*w].value.data, g, cout, kk, hw, &mut dcols);
                    col2im(&dcols, cin, h, wd, *k, gx);
                }
            }
            Op::Bilinear(plane, taps) => {
                let ps = &nodes[*plane].value.shape;
                let (c, hw) = (ps[0], ps[1] * ps[2]);
                if let Some(gp) = acc!(*plane) {
                    for (q, t) in taps.iter().enumerate() {
                        let gq = &g[q * c..(q + 1) * c];
                        for &(cell, wgt) in t {
                            if wgt == 0.0 {
                                continue;
                            }
                            for (ch, &gv) in gq.iter().enumerate() {
                                gp[ch * hw + cell as usize] += wgt * gv;
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let m = nodes[*x].value.shape[1];
                let (n, len) = (node.value.shape[0], node.value.shape[1]);
                if let Some(gx) = acc!(*x) {
                    for r in 0..n {
                        add_into(&mut gx[r * m + start..r * m + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Bce { p, labels } => {
                let n = labels.len() as f64;
                if let Some(gp) = acc!(*p) {
                    for ((o, &pv), &y) in gp.iter_mut().zip(&nodes[*p].value.data).zip(labels) {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                            *o += g[0] * (-y / pv + (1.0 - y) / (1.0 - pv)) / n;
                        }
                    }
                }
            }
            Op::SmoothL1 { x, target, mask, count } => {
                if *count == 0 {
                    return Ok(());
                }
                let scale = g[0] / *count as f64;
                if let Some(gx) = acc!(*x) {
                    for (i, (o, (&v, &t))) in gx.iter_mut().zip(nodes[*x].value.data.iter().zip(target)).enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i]) {
                            let r = v - t;
                            *o += scale * if r.abs() < 1.0 { r } else { r.signum() };
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(t, wgt) in terms {
                    if let Some(gt) = acc!(t) {
                        gt[0] += wgt * g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                if let Some(gx) = acc!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], p: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[p].needs_grad {
        return None;
    }
    Some(grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub const BCE_EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn bce_mean(p: &[f64], labels: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&pv, &y) in p.iter().zip(labels) {
        let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        s -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
    }
    s / p.len().max(1) as f64
}

pub fn smooth_l1(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

pub fn smooth_l1_mean(x: &[f64], target: &[f64], mask: Option<&[bool]>) -> (f64, usize) {
    let mut s = 0.0;
    let mut count = 0;
    for (i, (&v, &t)) in x.iter().zip(target).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            s += smooth_l1(v - t);
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (s / count as f64, count)
    }
}
