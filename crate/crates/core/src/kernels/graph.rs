//! Eager reverse-mode graph. Every op computes its value when it is added;
//! `backward` walks the node list in reverse insertion order, which is a
//! valid reverse topological order because inputs always precede outputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::params::ParamStore;
use crate::kernels::tensor::Tensor;
use crate::targets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Sparse linear read-out from the spatial plane of a `[C, H, W]` map.
/// Row `r` reads `sum_k w_k * fmap[c, idx_k]` over its taps.
#[derive(Debug, Clone, Default)]
pub struct Taps {
    offsets: Vec<usize>,
    idx: Vec<usize>,
    w: Vec<f64>,
}

impl Taps {
    pub fn new() -> Self {
        Taps {
            offsets: vec![0],
            idx: Vec::new(),
            w: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn push_row(&mut self, taps: &[(usize, f64)]) {
        for &(i, w) in taps {
            self.idx.push(i);
            self.w.push(w);
        }
        self.offsets.push(self.idx.len());
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.idx[a..b].iter().copied().zip(self.w[a..b].iter().copied())
    }

    /// Bilinear taps of a continuous (row, col) location on an `h` x `w`
    /// grid. Coordinates are clamped to `[0, h-1] x [0, w-1]` first.
    pub fn bilinear(row: f64, col: f64, h: usize, w: usize) -> [(usize, f64); 4] {
        let r = row.clamp(0.0, (h - 1) as f64);
        let c = col.clamp(0.0, (w - 1) as f64);
        let r0 = (r.floor() as usize).min(h.saturating_sub(2));
        let c0 = (c.floor() as usize).min(w.saturating_sub(2));
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        [
            (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
            (r0 * w + c1, (1.0 - fr) * fc),
            (r1 * w + c0, fr * (1.0 - fc)),
            (r1 * w + c1, fr * fc),
        ]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
        inner: usize,
        n: usize,
    },
    SampleTaps {
        fmap: Var,
        taps: Taps,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
        groups: Vec<Vec<usize>>,
    },
    Scatter {
        x: Var,
        cells: Vec<usize>,
    },
    Transpose(Var),
    Upsample2(Var),
    Concat0(Vec<Var>),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    FocalSum {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    SmoothL1Sum {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        wrap_col: Option<usize>,
    },
    SoftmaxCeSum {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } | Op::Conv2d { x, k: w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Relu(x) | Op::Sigmoid(x) | Op::Transpose(x) | Op::Upsample2(x) | Op::Reshape(x) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::MaxAxis { x, .. }
            | Op::MulConst { x, .. }
            | Op::GroupMax { x, .. }
            | Op::Scatter { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
            Op::SampleTaps { fmap, .. } => vec![*fmap],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::Concat0(parts) => parts.clone(),
            Op::FocalSum { logits, .. } | Op::SoftmaxCeSum { logits, .. } => vec![*logits],
            Op::SmoothL1Sum { pred, .. } => vec![*pred],
            Op::WeightedSum(parts) => parts.iter().map(|p| p.0).collect(),
            Op::Sum(x) => vec![*x],
        }
    }
}

/// `c = alpha * a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Wrap a difference into [-pi/2, pi/2).
pub(crate) fn wrap_half_turn(d: f64) -> f64 {
    use std::f64::consts::PI;
    d - PI * ((d + 0.5 * PI) / PI).floor()
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        value.grad = None;
        let needs = op.inputs().iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.grads.push(None);
        self.needs_grad.push(needs);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let v = self.push(t, Op::Leaf);
        self.needs_grad[v.0] = requires_grad;
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_index.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(t, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Make later `param(_, name)` lookups return `v` instead of reading
    /// the store. Used to differentiate through model code with respect to
    /// externally created leaves.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every store entry, zero for parameters this graph
    /// never touched.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .iter()
            .map(|(name, t)| match self.param_index.get(name) {
                Some(v) => self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; t.len()]),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    /// Smallest distance of any non-smooth point in the graph from its
    /// kink: relu inputs from 0, max runner-up gaps (exact ties count as
    /// smooth), weighted smooth-L1 differences from +-1 and wrapped heading
    /// differences from the wrap point. Finite
    /// differences with a step below this margin see a smooth function.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        let mut gap = |vals: &mut dyn Iterator<Item = f64>, best: f64| {
            for v in vals {
                let d = best - v;
                if d > 0.0 {
                    m = m.min(d);
                }
            }
        };
        let mut relu_m = f64::INFINITY;
        let mut l1_m = f64::INFINITY;
        for op in &self.ops {
            match op {
                Op::Relu(x) => {
                    for v in &self.values[x.0].data {
                        relu_m = relu_m.min(v.abs());
                    }
                }
                Op::MaxAxis { x, argmax, inner, n } => {
                    let t = &self.values[x.0].data;
                    for (o, &a) in argmax.iter().enumerate() {
                        let (outer, i) = (o / inner, o % inner);
                        let base = outer * n * inner + i;
                        let best = t[base + a * inner];
                        gap(&mut (0..*n).map(|k| t[base + k * inner]), best);
                    }
                }
                Op::GroupMax { x, argmax, groups } => {
                    let t = &self.values[x.0];
                    let c = t.last_dim();
                    for (o, &a) in argmax.iter().enumerate() {
                        if a == usize::MAX {
                            continue;
                        }
                        let ch = o % c;
                        let best = t.data[a * c + ch];
                        gap(&mut groups[o / c].iter().map(|&r| t.data[r * c + ch]), best);
                    }
                }
                Op::SmoothL1Sum {
                    pred,
                    target,
                    weights,
                    wrap_col,
                } => {
                    let t = &self.values[pred.0];
                    let k = t.last_dim();
                    for (i, (p, g)) in t.data.iter().zip(target).enumerate() {
                        if weights[i / k] == 0.0 {
                            continue;
                        }
                        let mut d = p - g;
                        if *wrap_col == Some(i % k) {
                            d = wrap_half_turn(d);
                            // the wrap itself jumps at +-pi/2
                            l1_m = l1_m.min(std::f64::consts::FRAC_PI_2 - d.abs());
                        }
                        l1_m = l1_m.min((d.abs() - 1.0).abs());
                    }
                }
                _ => {}
            }
        }
        m.min(relu_m).min(l1_m)
    }

    /// Indices of the maximum picked by a `max_over_axis` node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.ops[v.0] {
            Op::MaxAxis { argmax, .. } | Op::GroupMax { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// `y = x W^T + b` applied along the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (&self.values[x.0], &self.values[w.0]);
        if ws.rank() != 2 || xs.last_dim() != ws.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs.shape.clone(),
                right: ws.shape.clone(),
            });
        }
        let (out, inp) = (ws.shape[0], ws.shape[1]);
        if let Some(b) = b {
            if self.values[b.0].shape != [out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: ws.shape.clone(),
                    right: self.values[b.0].shape.clone(),
                });
            }
        }
        let m = xs.len().checked_div(inp).unwrap_or(0);
        let mut y = vec![0.0; m * out];
        gemm(
            m,
            inp,
            out,
            &xs.data,
            (inp, 1),
            &ws.data,
            (1, inp),
            0.0,
            &mut y,
            (out, 1),
        );
        if let Some(b) = b {
            let bd = &self.values[b.0].data;
            for row in y.chunks_mut(out.max(1)) {
                for (v, bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let mut shape = xs.shape.clone();
        if shape.is_empty() {
            shape.push(out);
        } else {
            *shape.last_mut().unwrap() = out;
        }
        Ok(self.push(
            Tensor {
                shape,
                data: y,
                grad: None,
            },
            Op::Linear { x, w, b },
        ))
    }

    /// Cross-correlation of `x[C_in, H, W]` with `k[C_out, C_in, kh, kw]`,
    /// zero padding `pad`, optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (xs, ks) = (&self.values[x.0], &self.values[k.0]);
        if xs.rank() != 3 || ks.rank() != 4 || xs.shape[0] != ks.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.shape.clone(),
                right: ks.shape.clone(),
            });
        }
        let (cin, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let (cout, kh, kw) = (ks.shape[0], ks.shape[2], ks.shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidArgument(format!(
                "conv2d input {h}x{w} smaller than kernel {kh}x{kw} with pad {pad}"
            )));
        }
        if let Some(b) = b {
            if self.values[b.0].shape != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: ks.shape.clone(),
                    right: self.values[b.0].shape.clone(),
                });
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let hwo = ho * wo;
        let kk = cin * kh * kw;
        let cols = im2col(&xs.data, cin, h, w, kh, kw, stride, pad, ho, wo);
        let mut y = vec![0.0; cout * hwo];
        gemm(cout, kk, hwo, &ks.data, (kk, 1), &cols, (hwo, 1), 0.0, &mut y, (hwo, 1));
        if let Some(b) = b {
            let bd = &self.values[b.0].data;
            for (o, row) in y.chunks_mut(hwo).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[o]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![cout, ho, wo],
                data: y,
                grad: None,
            },
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.values[x.0].clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.values[x.0].clone();
        t.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(
            Tensor {
                shape,
                data,
                grad: None,
            },
            Op::Add(a, b),
        ))
    }

    /// Maximum along `axis`; the axis is removed from the output shape.
    /// Ties resolve to the first index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if axis >= t.rank() || t.shape[axis] == 0 {
            return Err(Error::InvalidArgument(format!(
                "max_over_axis: axis {axis} invalid for shape {:?}",
                t.shape
            )));
        }
        let outer: usize = t.shape[..axis].iter().product();
        let n = t.shape[axis];
        let inner: usize = t.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = t.data[base];
                let mut arg = 0;
                for k in 1..n {
                    let v = t.data[base + k * inner];
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = arg;
            }
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(
            Tensor {
                shape,
                data: out,
                grad: None,
            },
            Op::MaxAxis { x, argmax, inner, n },
        ))
    }

    /// Read rows from a `[C, H, W]` map through fixed tap weights;
    /// output is `[rows, C]`.
    pub fn sample_taps(&mut self, fmap: Var, taps: Taps) -> Result<Var> {
        let t = &self.values[fmap.0];
        if t.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "sample_taps",
                left: t.shape.clone(),
                right: vec![3],
            });
        }
        let (c, hw) = (t.shape[0], t.shape[1] * t.shape[2]);
        if let Some(&bad) = taps.idx.iter().find(|&&i| i >= hw) {
            return Err(Error::InvalidArgument(format!("tap index {bad} outside plane of {hw}")));
        }
        let m = taps.rows();
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let row = &mut out[r * c..(r + 1) * c];
            for (i, w) in taps.row(r) {
                if w == 0.0 {
                    continue;
                }
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += w * t.data[ch * hw + i];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, c],
                data: out,
                grad: None,
            },
            Op::SampleTaps { fmap, taps },
        ))
    }

    /// Bilinear sampling at continuous (row, col) positions, clamped to
    /// the map. Output `[len(pts), C]`.
    pub fn bilinear_sample(&mut self, fmap: Var, pts: &[(f64, f64)]) -> Result<Var> {
        let t = &self.values[fmap.0];
        if t.rank() != 3 || t.shape[1] == 0 || t.shape[2] == 0 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                left: t.shape.clone(),
                right: vec![3],
            });
        }
        let (h, w) = (t.shape[1], t.shape[2]);
        let mut taps = Taps::new();
        for &(r, c) in pts {
            taps.push_row(&Taps::bilinear(r, c, h, w));
        }
        self.sample_taps(fmap, taps)
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let t = &self.values[x.0];
        if c.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: t.shape.clone(),
                right: vec![c.len()],
            });
        }
        let data = t.data.iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = t.shape.clone();
        Ok(self.push(
            Tensor {
                shape,
                data,
                grad: None,
            },
            Op::MulConst { x, c },
        ))
    }

    /// Multiply each row of `x[N, C]` by a constant factor.
    pub fn scale_rows_const(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let t = &self.values[x.0];
        let c = t.last_dim();
        if c == 0 || factors.len() * c != t.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows_const",
                left: t.shape.clone(),
                right: vec![factors.len()],
            });
        }
        let full = factors.iter().flat_map(|f| std::iter::repeat_n(*f, c)).collect();
        self.mul_const(x, full)
    }

    /// Multiply each row of `x[N, C]` by the matching entry of `s`
    /// (`N` values, any shape).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (&self.values[x.0], &self.values[s.0]);
        let c = tx.last_dim();
        if c == 0 || ts.len() * c != tx.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: tx.shape.clone(),
                right: ts.shape.clone(),
            });
        }
        let data = tx
            .data
            .chunks(c)
            .zip(&ts.data)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        let shape = tx.shape.clone();
        Ok(self.push(
            Tensor {
                shape,
                data,
                grad: None,
            },
            Op::ScaleRows { x, s },
        ))
    }

    /// Channel-wise max of `x[N, C]` over each group of row indices.
    /// Empty groups yield zero rows. Output `[G, C]`.
    pub fn group_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = &self.values[x.0];
        let c = t.last_dim();
        let n = t.len().checked_div(c).unwrap_or(0);
        let mut out = vec![0.0; groups.len() * c];
        let mut argmax = vec![usize::MAX; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(Error::InvalidArgument(format!("group_max row {bad} >= {n}")));
            }
            if rows.is_empty() {
                continue;
            }
            for ch in 0..c {
                let mut best = t.data[rows[0] * c + ch];
                let mut arg = rows[0];
                for &r in &rows[1..] {
                    let v = t.data[r * c + ch];
                    if v > best {
                        best = v;
                        arg = r;
                    }
                }
                out[g * c + ch] = best;
                argmax[g * c + ch] = arg;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![groups.len(), c],
                data: out,
                grad: None,
            },
            Op::GroupMax {
                x,
                argmax,
                groups: groups.to_vec(),
            },
        ))
    }

    /// Place the columns of `x[C, P]` into a zero `[C, h, w]` image at
    /// flat cells `row * w + col`.
    pub fn scatter(&mut self, x: Var, cells: &[usize], h: usize, w: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if t.rank() != 2 || t.shape[1] != cells.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter",
                left: t.shape.clone(),
                right: vec![cells.len()],
            });
        }
        let c = t.shape[0];
        let p = cells.len();
        let mut seen = vec![false; h * w];
        for &cell in cells {
            if cell >= h * w {
                return Err(Error::InvalidArgument(format!("scatter cell {cell} outside {h}x{w}")));
            }
            if seen[cell] {
                return Err(Error::DuplicateCoord(cell / w, cell % w));
            }
            seen[cell] = true;
        }
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for (j, &cell) in cells.iter().enumerate() {
                out[ch * h * w + cell] = t.data[ch * p + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, h, w],
                data: out,
                grad: None,
            },
            Op::Scatter {
                x,
                cells: cells.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: t.shape.clone(),
                right: vec![2],
            });
        }
        let (a, b) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; a * b];
        for i in 0..a {
            for j in 0..b {
                out[j * a + i] = t.data[i * b + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b, a],
                data: out,
                grad: None,
            },
            Op::Transpose(x),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample2",
                left: t.shape.clone(),
                right: vec![3],
            });
        }
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = t.data[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, 2 * h, 2 * w],
                data: out,
                grad: None,
            },
            Op::Upsample2(x),
        ))
    }

    /// Stack along the first axis; trailing shapes must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat0 of nothing".into()))?;
        let tail = self.values[first.0].shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.values[p.0];
            if t.shape[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    left: self.values[first.0].shape.clone(),
                    right: t.shape.clone(),
                });
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(
            Tensor {
                shape,
                data,
                grad: None,
            },
            Op::Concat0(parts.to_vec()),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Select rows (first-axis slices) of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.values[x.0];
        if t.rank() == 0 || t.shape[0] == 0 && !idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows on empty tensor".into()));
        }
        let row: usize = t.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= t.shape[0] {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows index {i} >= {}",
                    t.shape[0]
                )));
            }
            data.extend_from_slice(&t.data[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape.clone();
        shape[0] = idx.len();
        Ok(self.push(
            Tensor {
                shape,
                data,
                grad: None,
            },
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    /// Weighted sum of sigmoid focal losses over every logit.
    pub fn focal_loss_sum(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let t = &self.values[logits.0];
        if targets.len() != t.len() || weights.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "focal_loss_sum",
                left: t.shape.clone(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut acc = 0.0;
        for ((z, y), w) in t.data.iter().zip(&targets).zip(&weights) {
            if *w != 0.0 {
                acc += w * targets::focal_loss(sigmoid(*z), *y, alpha, gamma);
            }
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::FocalSum {
                logits,
                targets,
                weights,
                alpha,
                gamma,
            },
        ))
    }

    /// Row-weighted smooth-L1 between `pred[N, K]` and a constant target.
    /// With `wrap_col`, that column's difference is wrapped into
    /// [-pi/2, pi/2) first.
    pub fn smooth_l1_sum(
        &mut self,
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        wrap_col: Option<usize>,
    ) -> Result<Var> {
        let t = &self.values[pred.0];
        let k = t.last_dim();
        if target.len() != t.len() || weights.len() * k != t.len() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1_sum",
                left: t.shape.clone(),
                right: vec![target.len(), weights.len()],
            });
        }
        let mut acc = 0.0;
        for (i, (p, g)) in t.data.iter().zip(&target).enumerate() {
            let w = weights[i / k];
            if w == 0.0 {
                continue;
            }
            let mut d = p - g;
            if wrap_col == Some(i % k) {
                d = wrap_half_turn(d);
            }
            acc += w * targets::smooth_l1(d);
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SmoothL1Sum {
                pred,
                target,
                weights,
                wrap_col,
            },
        ))
    }

    /// Row-weighted softmax cross-entropy of `logits[N, K]`.
    pub fn softmax_ce_sum(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let t = &self.values[logits.0];
        let k = t.last_dim();
        if k == 0 || labels.len() * k != t.len() || weights.len() != labels.len() || labels.iter().any(|&l| l >= k) {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce_sum",
                left: t.shape.clone(),
                right: vec![labels.len(), weights.len()],
            });
        }
        let mut acc = 0.0;
        for ((row, &y), &w) in t.data.chunks(k).zip(&labels).zip(&weights) {
            if w != 0.0 {
                acc += w * targets::softmax_cross_entropy(row, y);
            }
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::SoftmaxCeSum {
                logits,
                labels,
                weights,
            },
        ))
    }

    pub fn weighted_sum(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for (v, c) in parts {
            let t = &self.values[v.0];
            if t.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    left: t.shape.clone(),
                    right: vec![1],
                });
            }
            acc += c * t.data[0];
        }
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar node. Gradients accumulate, so calling
    /// this twice on the same graph doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: self.values[root.0].shape.clone(),
                right: vec![1],
            });
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backprop(i, &op, &gout);
            self.ops[i] = op;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.needs_grad[v.0] {
            return None;
        }
        let n: usize = self.values[v.0].shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&mut self, node: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (out, inp) = (self.values[w.0].shape[0], self.values[w.0].shape[1]);
                let m = self.values[x.0].len().checked_div(inp).unwrap_or(0);
                if self.needs_grad[x.0] {
                    let wd = std::mem::take(&mut self.values[w.0].data);
                    let gx = self.acc(*x).unwrap();
                    gemm(m, out, inp, g, (out, 1), &wd, (inp, 1), 1.0, gx, (inp, 1));
                    self.values[w.0].data = wd;
                }
                if self.needs_grad[w.0] {
                    let xd = std::mem::take(&mut self.values[x.0].data);
                    let gw = self.acc(*w).unwrap();
                    gemm(out, m, inp, g, (1, out), &xd, (inp, 1), 1.0, gw, (inp, 1));
                    self.values[x.0].data = xd;
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(*b) {
                        for row in g.chunks(out.max(1)) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
                cols,
            } => {
                let (cin, h, w) = {
                    let s = &self.values[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let (cout, kh, kw) = {
                    let s = &self.values[k.0].shape;
                    (s[0], s[2], s[3])
                };
                let (ho, wo) = (self.values[node].shape[1], self.values[node].shape[2]);
                let hwo = ho * wo;
                let kk = cin * kh * kw;
                if self.needs_grad[k.0] {
                    let gk = self.acc(*k).unwrap();
                    gemm(cout, hwo, kk, g, (hwo, 1), cols, (1, hwo), 1.0, gk, (kk, 1));
                }
                if self.needs_grad[x.0] {
                    let mut dcols = vec![0.0; kk * hwo];
                    gemm(
                        kk,
                        cout,
                        hwo,
                        &self.values[k.0].data,
                        (1, kk),
                        g,
                        (hwo, 1),
                        0.0,
                        &mut dcols,
                        (hwo, 1),
                    );
                    let gx = self.acc(*x).unwrap();
                    col2im_add(&dcols, gx, cin, h, w, kh, kw, *stride, *pad, ho, wo);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(*b) {
                        for (o, row) in g.chunks(hwo).enumerate() {
                            gb[o] += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = std::mem::take(&mut self.values[x.0].data);
                if let Some(gx) = self.acc(*x) {
                    for ((a, v), gi) in gx.iter_mut().zip(&xd).zip(g) {
                        if *v > 0.0 {
                            *a += gi;
                        }
                    }
                }
                self.values[x.0].data = xd;
            }
            Op::Sigmoid(x) => {
                let y = std::mem::take(&mut self.values[node].data);
                if let Some(gx) = self.acc(*x) {
                    for ((a, s), gi) in gx.iter_mut().zip(&y).zip(g) {
                        *a += gi * s * (1.0 - s);
                    }
                }
                self.values[node].data = y;
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(*v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MaxAxis { x, argmax, inner, n } => {
                if let Some(gx) = self.acc(*x) {
                    for (j, (&arg, gi)) in argmax.iter().zip(g).enumerate() {
                        let (o, i) = (j / inner, j % inner);
                        gx[o * n * inner + arg * inner + i] += gi;
                    }
                }
            }
            Op::SampleTaps { fmap, taps } => {
                let (c, hw) = {
                    let s = &self.values[fmap.0].shape;
                    (s[0], s[1] * s[2])
                };
                if let Some(gf) = self.acc(*fmap) {
                    for r in 0..taps.rows() {
                        let grow = &g[r * c..(r + 1) * c];
                        for (i, w) in taps.row(r) {
                            if w == 0.0 {
                                continue;
                            }
                            for (ch, gv) in grow.iter().enumerate() {
                                gf[ch * hw + i] += w * gv;
                            }
                        }
                    }
                }
            }
            Op::MulConst { x, c } => {
                if let Some(gx) = self.acc(*x) {
                    for ((a, cv), gi) in gx.iter_mut().zip(c).zip(g) {
                        *a += cv * gi;
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let c = self.values[x.0].last_dim();
                if self.needs_grad[x.0] {
                    let sd = std::mem::take(&mut self.values[s.0].data);
                    let gx = self.acc(*x).unwrap();
                    for (i, (a, gi)) in gx.iter_mut().zip(g).enumerate() {
                        *a += gi * sd[i / c];
                    }
                    self.values[s.0].data = sd;
                }
                if self.needs_grad[s.0] {
                    let xd = std::mem::take(&mut self.values[x.0].data);
                    let gs = self.acc(*s).unwrap();
                    for (r, (xr, gr)) in xd.chunks(c).zip(g.chunks(c)).enumerate() {
                        gs[r] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    self.values[x.0].data = xd;
                }
            }
            Op::GroupMax { x, argmax, .. } => {
                let c = self.values[x.0].last_dim();
                if let Some(gx) = self.acc(*x) {
                    for (j, (&arg, gi)) in argmax.iter().zip(g).enumerate() {
                        if arg != usize::MAX {
                            gx[arg * c + j % c] += gi;
                        }
                    }
                }
            }
            Op::Scatter { x, cells } => {
                let p = cells.len();
                let hw = {
                    let s = &self.values[node].shape;
                    s[1] * s[2]
                };
                if let Some(gx) = self.acc(*x) {
                    let c = gx.len().checked_div(p).unwrap_or(0);
                    for ch in 0..c {
                        for (j, &cell) in cells.iter().enumerate() {
                            gx[ch * p + j] += g[ch * hw + cell];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (a, b) = (self.values[x.0].shape[0], self.values[x.0].shape[1]);
                if let Some(gx) = self.acc(*x) {
                    for i in 0..a {
                        for j in 0..b {
                            gx[i * b + j] += g[j * a + i];
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = {
                    let s = &self.values[x.0].shape;
                    (s[0], s[1], s[2])
                };
                if let Some(gx) = self.acc(*x) {
                    for ch in 0..c {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                gx[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                }
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.values[p.0].len();
                    if let Some(gp) = self.acc(*p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::GatherRows { x, idx } => {
                let row: usize = self.values[x.0].shape[1..].iter().product();
                if let Some(gx) = self.acc(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..row {
                            gx[i * row + j] += g[k * row + j];
                        }
                    }
                }
            }
            Op::FocalSum {
                logits,
                targets: ys,
                weights,
                alpha,
                gamma,
            } => {
                let zd = std::mem::take(&mut self.values[logits.0].data);
                if let Some(gz) = self.acc(*logits) {
                    for (i, z) in zd.iter().enumerate() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let p = sigmoid(*z);
                        let d = targets::focal_loss_grad_logit(p, ys[i], *alpha, *gamma);
                        gz[i] += g[0] * weights[i] * d;
                    }
                }
                self.values[logits.0].data = zd;
            }
            Op::SmoothL1Sum {
                pred,
                target,
                weights,
                wrap_col,
            } => {
                let k = self.values[pred.0].last_dim();
                let pd = std::mem::take(&mut self.values[pred.0].data);
                if let Some(gp) = self.acc(*pred) {
                    for (i, p) in pd.iter().enumerate() {
                        let w = weights[i / k];
                        if w == 0.0 {
                            continue;
                        }
                        let mut d = p - target[i];
                        if *wrap_col == Some(i % k) {
                            d = wrap_half_turn(d);
                        }
                        gp[i] += g[0] * w * targets::smooth_l1_grad(d);
                    }
                }
                self.values[pred.0].data = pd;
            }
            Op::SoftmaxCeSum {
                logits,
                labels,
                weights,
            } => {
                let k = self.values[logits.0].last_dim();
                let zd = std::mem::take(&mut self.values[logits.0].data);
                if let Some(gz) = self.acc(*logits) {
                    for (r, row) in zd.chunks(k).enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|z| (z - mx).exp()).sum();
                        for (j, z) in row.iter().enumerate() {
                            let pj = (z - mx).exp() / denom;
                            let y = if j == labels[r] { 1.0 } else { 0.0 };
                            gz[r * k + j] += g[0] * weights[r] * (pj - y);
                        }
                    }
                }
                self.values[logits.0].data = zd;
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::WeightedSum(parts) => {
                for (v, c) in parts {
                    if let Some(gv) = self.acc(*v) {
                        gv[0] += c * g[0];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let hwo = ho * wo;
    let mut cols = vec![0.0; cin * kh * kw * hwo];
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * hwo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = (c * h + ii as usize) * w;
                    let dst = row + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            cols[dst + oj] = x[src + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    gx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let hwo = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * hwo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = (c * h + ii as usize) * w;
                    let src = row + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            gx[dst + jj as usize] += cols[src + oj];
                        }
                    }
                }
            }
        }
    }
}
