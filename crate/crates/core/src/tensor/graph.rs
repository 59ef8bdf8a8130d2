//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep simply walks the tape from the
//! end. A tape supports exactly one backward pass; intermediate values are
//! released afterwards and only the gradients are kept.

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    /// Addition of a constant; the gradient passes through unchanged.
    Offset(usize),
    MulConst(usize, Vec<f64>),
    Ln(usize),
    Exp(usize),
    Softplus(usize),
    Relu(usize),
    Square(usize),
    LinComb(Vec<(usize, f64)>),
    Sum(usize),
    SumSquares(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        n: usize,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<f64>,
    },
    MaxPool {
        x: usize,
        arg: Vec<usize>,
    },
    Upsample {
        x: usize,
        dims: [usize; 4],
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
        n: usize,
        f: usize,
        u: usize,
    },
    Translate {
        x: usize,
        dims: [usize; 4],
        di: isize,
        dj: isize,
        wrap: bool,
    },
    Channel {
        x: usize,
        c: usize,
        channels: usize,
    },
    Stack(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one sample graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4], TensorError> {
    match t.shape[..] {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(shape_err(op, format!("expected NHWC, got {:?}", t.shape))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Trainable input; gradients are reported for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(a, b, op)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, mk(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|x| f(*x)).collect());
        let rg = self.rg(a.0);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a.0))
    }

    /// `a + c` for a constant tensor `c` of the same size.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.len(), c.len(), "add_const size");
        let data = va.data.iter().zip(c).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let rg = self.rg(a.0);
        self.push(t, Op::Offset(a.0), rg)
    }

    /// `a * c` for a constant tensor `c` of the same size (no gradient to `c`).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.len(), c.len(), "mul_const size");
        let data = va.data.iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let rg = self.rg(a.0);
        self.push(t, Op::MulConst(a.0, c), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, super::softplus, Op::Softplus(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    /// `sum_k c_k v_k` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let first = terms
            .first()
            .ok_or_else(|| shape_err("lin_comb", "no terms".into()))?;
        let shape = self.shape(first.0).to_vec();
        let mut data = vec![0.0; self.value(first.0).len()];
        for &(v, c) in terms {
            if self.shape(v) != &shape[..] {
                return Err(shape_err("lin_comb", format!("{:?} vs {shape:?}", self.shape(v))));
            }
            if c == 0.0 {
                continue;
            }
            for (d, x) in data.iter_mut().zip(&self.nodes[v.0].value.data) {
                *d += c * x;
            }
        }
        let rg = terms.iter().any(|(v, c)| *c != 0.0 && self.rg(v.0));
        let terms = terms.iter().map(|(v, c)| (v.0, *c)).collect();
        Ok(self.push(Tensor::new(shape, data), Op::LinComb(terms), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|x| x * x).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::SumSquares(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", va.shape),
            ));
        }
        let t = Tensor::new(shape, va.data.clone());
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Collapse all but the batch dimension.
    pub fn flatten(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(a, vec![n, rest])
    }

    /// Same-padded cross-correlation. `x: N x H x W x Cin`,
    /// `w: kh x kw x Cin x Cout`, optional `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let [n, h, wd, cin] = dims4(self.value(x), "conv2d")?;
        let (kh, kw, wcin, cout) = match self.shape(w)[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err("conv2d", format!("kernel {:?}", self.shape(w)))),
        };
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", format!("same padding needs odd kernel, got {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
        };
        let k = geom.k();
        let hw = h * wd;
        let mut cols = vec![0.0; n * hw * k];
        let mut out = vec![0.0; n * hw * cout];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            for s in 0..n {
                let c = &mut cols[s * hw * k..(s + 1) * hw * k];
                kernels::im2col(&xv[s * hw * cin..(s + 1) * hw * cin], geom, c);
                kernels::gemm(hw, k, cout, c, false, wv, false, 0.0, &mut out[s * hw * cout..(s + 1) * hw * cout]);
            }
            if let Some(b) = b {
                let bv = &self.value(b).data;
                for row in out.chunks_mut(cout) {
                    for (o, bb) in row.iter_mut().zip(bv) {
                        *o += bb;
                    }
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            n,
            geom,
            cout,
            cols,
        };
        Ok(self.push(Tensor::new(vec![n, h, wd, cout], out), op, rg))
    }

    /// Affine map `x w + b` with `x: N x F`, `w: F x U`, `b: U`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (n, f) = match self.shape(x)[..] {
            [n, f] => (n, f),
            _ => return Err(shape_err("dense", format!("input {:?}", self.shape(x)))),
        };
        let (wf, u) = match self.shape(w)[..] {
            [a, b] => (a, b),
            _ => return Err(shape_err("dense", format!("weight {:?}", self.shape(w)))),
        };
        if wf != f {
            return Err(shape_err("dense", format!("input width {f}, weight rows {wf}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [u] {
                return Err(shape_err("dense", format!("bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * u];
        kernels::gemm(n, f, u, &self.value(x).data, false, &self.value(w).data, false, 0.0, &mut out);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(u) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let op = Op::Dense {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            n,
            f,
            u,
        };
        Ok(self.push(Tensor::new(vec![n, u], out), op, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, h, w, c] = dims4(self.value(x), "maxpool2")?;
        let (out, arg) = kernels::maxpool2(&self.value(x).data, n, h, w, c);
        let rg = self.rg(x.0);
        let t = Tensor::new(vec![n, h.div_ceil(2), w.div_ceil(2), c], out);
        Ok(self.push(t, Op::MaxPool { x: x.0, arg }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var, TensorError> {
        let dims = dims4(self.value(x), "upsample2")?;
        let [n, h, w, c] = dims;
        let out = kernels::upsample2(&self.value(x).data, n, h, w, c);
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(vec![n, 2 * h, 2 * w, c], out),
            Op::Upsample { x: x.0, dims },
            rg,
        ))
    }

    /// `out[i, j] = x[i + di, j + dj]` with zeros beyond the grid.
    pub fn shift(&mut self, x: Var, di: isize, dj: isize) -> Result<Var, TensorError> {
        self.translate(x, di, dj, false)
    }

    /// Periodic shift: `out[i, j] = x[(i - di) mod H, (j - dj) mod W]`,
    /// i.e. entries move forward by `(di, dj)`.
    pub fn roll(&mut self, x: Var, di: isize, dj: isize) -> Result<Var, TensorError> {
        self.translate(x, -di, -dj, true)
    }

    fn translate(&mut self, x: Var, di: isize, dj: isize, wrap: bool) -> Result<Var, TensorError> {
        let dims = dims4(self.value(x), "translate")?;
        let [n, h, w, c] = dims;
        let out = kernels::translate(&self.value(x).data, n, h, w, c, di, dj, wrap);
        let rg = self.rg(x.0);
        let t = Tensor::new(dims.to_vec(), out);
        Ok(self.push(
            t,
            Op::Translate {
                x: x.0,
                dims,
                di,
                dj,
                wrap,
            },
            rg,
        ))
    }

    /// Channel `c` of an NHWC tensor as `N x H x W x 1`.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var, TensorError> {
        let [n, h, w, channels] = dims4(self.value(x), "channel")?;
        if c >= channels {
            return Err(shape_err("channel", format!("channel {c} of {channels}")));
        }
        let data = self.value(x).data.iter().skip(c).step_by(channels).copied().collect();
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::new(vec![n, h, w, 1], data),
            Op::Channel { x: x.0, c, channels },
            rg,
        ))
    }

    /// Concatenate single-channel NHWC tensors along the channel axis.
    pub fn stack_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or_else(|| shape_err("stack", "empty".into()))?;
        let [n, h, w, _] = dims4(self.value(first), "stack")?;
        let m = n * h * w;
        let k = xs.len();
        let mut data = vec![0.0; m * k];
        for (c, &x) in xs.iter().enumerate() {
            if self.shape(x) != [n, h, w, 1] {
                return Err(shape_err("stack", format!("{:?}", self.shape(x))));
            }
            for (p, v) in self.value(x).data.iter().enumerate() {
                data[p * k + c] = *v;
            }
        }
        let rg = xs.iter().any(|x| self.rg(x.0));
        Ok(self.push(
            Tensor::new(vec![n, h, w, k], data),
            Op::Stack(xs.iter().map(|x| x.0).collect()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for k in (0..=loss.0).rev() {
            if !self.nodes[k].requires_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            self.propagate(k, &g, &mut grads);
            grads[k] = Some(g);
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn propagate(&self, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value.data;
        // accumulate into parent `p` if it needs a gradient
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[p].requires_grad {
                let buf = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]);
                f(buf);
            }
        };
        match &nodes[k].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::Offset(a) | Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            Op::MulConst(a, c) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * c[i];
                }
            }),
            Op::Ln(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / va[i];
                    }
                })
            }
            Op::Exp(a) => {
                let out = val(k);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i];
                    }
                })
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * super::sigmoid(va[i]);
                    }
                })
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[i] * va[i];
                    }
                })
            }
            Op::LinComb(terms) => {
                for &(a, c) in terms {
                    if c != 0.0 {
                        acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
                    }
                }
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumSquares(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[0] * va[i];
                    }
                })
            }
            Op::Conv2d {
                x,
                w,
                b,
                n,
                geom,
                cout,
                cols,
            } => {
                let (n, cout) = (*n, *cout);
                let kk = geom.k();
                let hw = geom.h * geom.w;
                acc(*w, &mut |d| {
                    for s in 0..n {
                        kernels::gemm(
                            kk,
                            hw,
                            cout,
                            &cols[s * hw * kk..(s + 1) * hw * kk],
                            true,
                            &g[s * hw * cout..(s + 1) * hw * cout],
                            false,
                            1.0,
                            d,
                        );
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(cout) {
                            for (dd, gg) in d.iter_mut().zip(row) {
                                *dd += gg;
                            }
                        }
                    });
                }
                let wv = val(*w);
                acc(*x, &mut |d| {
                    let mut dcols = vec![0.0; hw * kk];
                    for s in 0..n {
                        kernels::gemm(
                            hw,
                            cout,
                            kk,
                            &g[s * hw * cout..(s + 1) * hw * cout],
                            false,
                            wv,
                            true,
                            0.0,
                            &mut dcols,
                        );
                        kernels::col2im_add(
                            &dcols,
                            *geom,
                            &mut d[s * hw * geom.cin..(s + 1) * hw * geom.cin],
                        );
                    }
                });
            }
            Op::Dense { x, w, b, n, f, u } => {
                let (n, f, u) = (*n, *f, *u);
                let (xv, wv) = (val(*x), val(*w));
                acc(*w, &mut |d| kernels::gemm(f, n, u, xv, true, g, false, 1.0, d));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(u) {
                            for (dd, gg) in d.iter_mut().zip(row) {
                                *dd += gg;
                            }
                        }
                    });
                }
                acc(*x, &mut |d| kernels::gemm(n, u, f, g, false, wv, true, 1.0, d));
            }
            Op::MaxPool { x, arg } => acc(*x, &mut |d| {
                for (o, &i) in arg.iter().enumerate() {
                    d[i] += g[o];
                }
            }),
            Op::Upsample { x, dims } => {
                let [n, h, w, c] = *dims;
                acc(*x, &mut |d| kernels::upsample2_backward(g, n, h, w, c, d));
            }
            Op::Translate {
                x,
                dims,
                di,
                dj,
                wrap,
            } => {
                let [n, h, w, c] = *dims;
                let back = kernels::translate(g, n, h, w, c, -di, -dj, *wrap);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(d, g)| *d += g));
            }
            Op::Channel { x, c, channels } => acc(*x, &mut |d| {
                for (p, gg) in g.iter().enumerate() {
                    d[p * channels + c] += gg;
                }
            }),
            Op::Stack(xs) => {
                let kk = xs.len();
                for (c, &x) in xs.iter().enumerate() {
                    acc(x, &mut |d| {
                        for (p, dd) in d.iter_mut().enumerate() {
                            *dd += g[p * kk + c];
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn tape_is_single_use() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data, vec![0.0, 0.0, 2.0]);
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(vec![2], 2.0));
        let x = g.leaf(Tensor::filled(vec![2], 3.0));
        let y = g.mul(c, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 4, 2]));
        let w = g.leaf(Tensor::zeros(vec![3, 3, 3, 1]));
        assert!(matches!(g.conv2d(x, w, None), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn roll_moves_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]));
        let r = g.roll(x, 1, 0).unwrap();
        assert_eq!(g.value(r).data, vec![3.0, 1.0, 2.0]);
        let s = g.shift(x, 1, 0).unwrap();
        assert_eq!(g.value(s).data, vec![2.0, 3.0, 0.0]);
    }
}
