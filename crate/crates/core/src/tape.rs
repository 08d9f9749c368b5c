//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] records operations in creation order; node `i` only reads
//! nodes `< i`, so one reverse sweep computes every gradient. Values are
//! `Cow`s so parameters can enter the graph without being copied.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 3x3, pad-1 convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_dims(&self) -> (usize, usize) {
        (
            (self.height - 1) / self.stride + 1,
            (self.width - 1) / self.stride + 1,
        )
    }
}

/// Two source taps per output coordinate: `(lo, hi, weight_of_hi)`.
pub type Taps = Vec<(usize, usize, f64)>;

/// Bilinear sampling positions for resizing `input` samples to `output`
/// with half-pixel centers and edge clamping.
pub fn bilinear_taps(input: usize, output: usize) -> Taps {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resize a `(gh*gw) x c` row-major grid to `(h*w) x c`.
pub fn upsample_rows(x: &Mat, rows: &Taps, cols: &Taps, gw: usize) -> Mat {
    let (h, w, c) = (rows.len(), cols.len(), x.ncols());
    let mut out = Array2::zeros((h * w, c));
    for (r, &(r0, r1, wr)) in rows.iter().enumerate() {
        for (cc, &(c0, c1, wc)) in cols.iter().enumerate() {
            let taps = [
                (r0 * gw + c0, (1.0 - wr) * (1.0 - wc)),
                (r0 * gw + c1, (1.0 - wr) * wc),
                (r1 * gw + c0, wr * (1.0 - wc)),
                (r1 * gw + c1, wr * wc),
            ];
            let mut dst = out.row_mut(r * w + cc);
            for (src, wt) in taps {
                dst.scaled_add(wt, &x.row(src));
            }
        }
    }
    out
}

fn upsample_rows_backward(g: &Mat, rows: &Taps, cols: &Taps, gh: usize, gw: usize) -> Mat {
    let w = cols.len();
    let mut out = Array2::zeros((gh * gw, g.ncols()));
    for (r, &(r0, r1, wr)) in rows.iter().enumerate() {
        for (cc, &(c0, c1, wc)) in cols.iter().enumerate() {
            let src = g.row(r * w + cc);
            out.row_mut(r0 * gw + c0).scaled_add((1.0 - wr) * (1.0 - wc), &src);
            out.row_mut(r0 * gw + c1).scaled_add((1.0 - wr) * wc, &src);
            out.row_mut(r1 * gw + c0).scaled_add(wr * (1.0 - wc), &src);
            out.row_mut(r1 * gw + c1).scaled_add(wr * wc, &src);
        }
    }
    out
}

fn im2col(x: &Mat, g: ConvGeom) -> Mat {
    let (oh, ow) = g.out_dims();
    let c = g.channels;
    let mut out = Array2::zeros((oh * ow, 9 * c));
    for orow in 0..oh {
        for ocol in 0..ow {
            let mut dst = out.row_mut(orow * ow + ocol);
            for ky in 0..3 {
                let r = (orow * g.stride + ky) as isize - 1;
                if r < 0 || r as usize >= g.height {
                    continue;
                }
                for kx in 0..3 {
                    let cc = (ocol * g.stride + kx) as isize - 1;
                    if cc < 0 || cc as usize >= g.width {
                        continue;
                    }
                    let src = x.row(r as usize * g.width + cc as usize);
                    let base = (ky * 3 + kx) * c;
                    dst.slice_mut(s![base..base + c]).assign(&src);
                }
            }
        }
    }
    out
}

fn im2col_backward(gcol: &Mat, g: ConvGeom) -> Mat {
    let (oh, ow) = g.out_dims();
    let c = g.channels;
    let mut out = Array2::zeros((g.height * g.width, c));
    for orow in 0..oh {
        for ocol in 0..ow {
            let src = gcol.row(orow * ow + ocol);
            for ky in 0..3 {
                let r = (orow * g.stride + ky) as isize - 1;
                if r < 0 || r as usize >= g.height {
                    continue;
                }
                for kx in 0..3 {
                    let cc = (ocol * g.stride + kx) as isize - 1;
                    if cc < 0 || cc as usize >= g.width {
                        continue;
                    }
                    let base = (ky * 3 + kx) * c;
                    out.row_mut(r as usize * g.width + cc as usize)
                        .scaled_add(1.0, &src.slice(s![base..base + c]));
                }
            }
        }
    }
    out
}

/// Multi-head scaled dot-product attention on pre-projected inputs.
/// Returns the output and each head's row-stochastic attention matrix.
pub fn attention_forward(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        for mut row in p.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = ((*x - max) * scale).exp();
                sum += *x;
            }
            row /= sum;
        }
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, probs)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        rows: Taps,
        cols: Taps,
        grid: (usize, usize),
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of every node that requires one, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Cow<'a, Mat>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Broadcast a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row *= r;
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        assert_eq!(self.value(q).ncols() % heads, 0, "heads must divide width");
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Rows of `table` selected by `index`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((index.len(), t.ncols()));
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).assign(&t.row(j));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, index }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat widths agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(out, Op::Slice { x, start }, rg)
    }

    /// 3x3 patches (zero padding 1) of an `(h*w) x c` feature map.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.value(x).dim(), (geom.height * geom.width, geom.channels), "im2col input");
        let out = im2col(self.value(x), geom);
        let rg = self.rg(x);
        self.push(out, Op::Im2Col { x, geom }, rg)
    }

    /// Bilinear resize of an `(gh*gw) x c` grid to `(h*w) x c`.
    pub fn upsample(&mut self, x: Var, grid: (usize, usize), size: (usize, usize)) -> Var {
        assert_eq!(self.value(x).nrows(), grid.0 * grid.1, "upsample input");
        let rows = bilinear_taps(grid.0, size.0);
        let cols = bilinear_taps(grid.1, size.1);
        let out = upsample_rows(self.value(x), &rows, &cols, grid.1);
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, rows, cols, grid }, rg)
    }

    /// Reverse sweep seeded with `∂L/∂v` for each `(v, seed)`.
    pub fn backward(&self, seeds: Vec<(Var, Mat)>) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(v).dim(), g.dim(), "seed shape");
            accumulate(&mut grads, &self.nodes, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let n = &self.nodes;
            let mut acc = |v: Var, gv: Mat| accumulate(&mut grads, n, v, gv);
            let wants = |v: Var| n[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if wants(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if wants(*a) {
                        acc(*a, g.dot(self.value(*b)));
                    }
                    if wants(*b) {
                        acc(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        acc(*b, g.clone());
                    }
                    if wants(*a) {
                        acc(*a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*a) {
                        acc(*a, g);
                    }
                }
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(&*node.value).for_each(|gi, &y| {
                        if y <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    acc(*a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if wants(*gamma) {
                        acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*beta) {
                        acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*x) {
                        let mut dxhat = &g * self.value(*gamma);
                        let d = dxhat.ncols() as f64;
                        for ((mut row, xh), &r) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
                            let m1 = row.sum() / d;
                            let m2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
                            Zip::from(&mut row).and(&xh).for_each(|dv, &xv| {
                                *dv = r * (*dv - m1 - xv * m2);
                            });
                        }
                        acc(*x, dxhat);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let mut ds = go.dot(&vv.slice(cols).t());
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.iter().zip(prow).map(|(a, b)| a * b).sum::<f64>();
                            Zip::from(&mut row).and(&prow).for_each(|x, &pp| {
                                *x = pp * (*x - dot) * scale;
                            });
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if wants(*q) {
                        acc(*q, dq);
                    }
                    if wants(*k) {
                        acc(*k, dk);
                    }
                    if wants(*v) {
                        acc(*v, dv);
                    }
                }
                Op::Gather { table, index } => {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (i, &j) in index.iter().enumerate() {
                        dt.row_mut(j).scaled_add(1.0, &g.row(i));
                    }
                    acc(*table, dt);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).nrows();
                        if wants(p) {
                            acc(p, g.slice(s![start..start + len, ..]).to_owned());
                        }
                        start += len;
                    }
                }
                Op::Slice { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*x, dx);
                }
                Op::Im2Col { x, geom } => acc(*x, im2col_backward(&g, *geom)),
                Op::Upsample { x, rows, cols, grid } => {
                    acc(*x, upsample_rows_backward(&g, rows, cols, grid.0, grid.1));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node<'_>], v: Var, g: Mat) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
