//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends one node to the tape. Nodes only reference
//! earlier nodes, so a reverse sweep over the node list visits each node
//! after all of its consumers and gradients can be summed over every use.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Mean(usize),
    Sum(usize),
    Square(usize),
    Reshape(usize),
    StopGradient,
    StraightThrough {
        z: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected 2-D, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that gradients are tracked for.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale(a.0, c), &[a.0])
    }

    /// Adds a constant.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a.0), &[a.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = check_2d("matmul", va)?;
        let (k2, n) = check_2d("matmul", vb)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// 1-D convolution over frames.
    ///
    /// `x` is `[frames, c_in]`, `w` is `[kernel, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (t_in, c_in) = check_2d("conv1d", vx)?;
        let (k, ci, co) = conv_weight_dims("conv1d", vw, c_in)?;
        debug_assert_eq!(ci, c_in);
        if stride == 0 || t_in + 2 * padding < k {
            return Err(Error::shape(
                "conv1d",
                format!("input length {t_in} too short for kernel {k} with padding {padding}"),
            ));
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let mut out = vec![T::zero(); t_out * co];
        if let Some(bv) = b {
            let vb = self.value(bv);
            if vb.len() != co {
                return Err(Error::shape("conv1d", "bias length mismatch"));
            }
            for row in out.chunks_mut(co) {
                row.copy_from_slice(vb.data());
            }
        }
        let (xd, wd) = (vx.data(), vw.data());
        for t in 0..t_out {
            let orow = &mut out[t * co..(t + 1) * co];
            for kk in 0..k {
                let src = (t * stride + kk) as isize - padding as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(kk * c_in + i) * co..(kk * c_in + i + 1) * co];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_out, co], out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|v| v.0));
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                padding,
            },
            &parents,
        )
    }

    /// Transposed 1-D convolution (upsampling by `stride`).
    ///
    /// Output length is `(frames - 1) * stride - 2 * padding + kernel`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (t_in, c_in) = check_2d("conv_transpose1d", vx)?;
        let (k, _, co) = conv_weight_dims("conv_transpose1d", vw, c_in)?;
        let full = (t_in.max(1) - 1) * stride + k;
        if stride == 0 || t_in == 0 || full < 2 * padding + 1 {
            return Err(Error::shape("conv_transpose1d", "invalid geometry"));
        }
        let t_out = full - 2 * padding;
        let mut out = vec![T::zero(); t_out * co];
        if let Some(bv) = b {
            let vb = self.value(bv);
            if vb.len() != co {
                return Err(Error::shape("conv_transpose1d", "bias length mismatch"));
            }
            for row in out.chunks_mut(co) {
                row.copy_from_slice(vb.data());
            }
        }
        let (xd, wd) = (vx.data(), vw.data());
        for t in 0..t_in {
            let xrow = &xd[t * c_in..(t + 1) * c_in];
            for kk in 0..k {
                let dst = (t * stride + kk) as isize - padding as isize;
                if dst < 0 || dst as usize >= t_out {
                    continue;
                }
                let orow = &mut out[dst as usize * co..(dst as usize + 1) * co];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(kk * c_in + i) * co..(kk * c_in + i + 1) * co];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_out, co], out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|v| v.0));
        self.push(
            "conv_transpose1d",
            value,
            Op::ConvTranspose1d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                padding,
            },
            &parents,
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push("leaky_relu", value, Op::LeakyRelu(a.0, slope), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push("tanh", value, Op::Tanh(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", value, Op::Sigmoid(a.0), &[a.0])
    }

    /// Gathers rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, dim) = check_2d("embedding", vt)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding", format!("index {bad} out of {rows}")));
        }
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![indices.len(), dim], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            &[table.0],
        )
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| check_2d("concat", self.value(p)))
            .collect::<Result<_>>()?;
        let value = if axis == 1 {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::shape("concat", format!("row counts {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, cols], out)?
        } else {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::shape("concat", format!("column counts {dims:?}")));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, cols], out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", value, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let n = T::lit(va.len() as f64);
        let s: T = va.data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / n), Op::Mean(a.0), &[a.0])
    }

    /// Sum over all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a.0), &[a.0])
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `z + sg(q - z)` evaluated so the forward value is `q` bit for bit.
    ///
    /// The gradient reaching the output is passed unchanged to `z`; `q`
    /// receives nothing.
    pub fn straight_through(&mut self, z: Var, q: Var) -> Result<Var> {
        same_shape("straight_through", self.value(z), self.value(q))?;
        let value = self.value(q).clone();
        self.push("straight_through", value, Op::StraightThrough { z: z.0 }, &[z.0])
    }

    /// Mean squared difference, a composite of `sub`, `square`, `mean`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d)?;
        self.mean(s)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_scaled(loss, T::one())
    }

    /// Reverse sweep seeded with `seed` instead of one.
    pub fn backward_scaled(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), seed));

        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = g.data();
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Add(a, b) => {
                    self.acc(lo, *a, |d| add_into(d, g));
                    self.acc(lo, *b, |d| add_into(d, g));
                }
                Op::Sub(a, b) => {
                    self.acc(lo, *a, |d| add_into(d, g));
                    self.acc(lo, *b, |d| {
                        for (d, &g) in d.iter_mut().zip(g) {
                            *d -= g;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.acc(lo, *a, |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    self.acc(lo, *b, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(a, c) => self.acc(lo, *a, |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g * *c;
                    }
                }),
                Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough { z: a } => {
                    self.acc(lo, *a, |d| add_into(d, g))
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    self.acc(lo, *a, |d| {
                        // dA = G · Bᵀ
                        for r in 0..m {
                            for c in 0..k {
                                let brow = &vb.data()[c * n..(c + 1) * n];
                                let grow = &g[r * n..(r + 1) * n];
                                let mut s = T::zero();
                                for (&x, &y) in grow.iter().zip(brow) {
                                    s += x * y;
                                }
                                d[r * k + c] += s;
                            }
                        }
                    });
                    self.acc(lo, *b, |d| {
                        // dB = Aᵀ · G
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                let av = va.data()[r * k + c];
                                let drow = &mut d[c * n..(c + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    });
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (t_in, c_in) = (vx.shape()[0], vx.shape()[1]);
                    let (k, co) = (vw.shape()[0], vw.shape()[2]);
                    let t_out = node.value.shape()[0];
                    let (s, p) = (*stride, *padding);
                    let taps = |t: usize, kk: usize| -> Option<usize> {
                        let src = (t * s + kk) as isize - p as isize;
                        (src >= 0 && (src as usize) < t_in).then_some(src as usize)
                    };
                    self.acc(lo, *x, |d| {
                        for t in 0..t_out {
                            let grow = &g[t * co..(t + 1) * co];
                            for kk in 0..k {
                                let Some(src) = taps(t, kk) else { continue };
                                for i in 0..c_in {
                                    let wrow = &vw.data()[(kk * c_in + i) * co..(kk * c_in + i + 1) * co];
                                    d[src * c_in + i] += dot(grow, wrow);
                                }
                            }
                        }
                    });
                    self.acc(lo, *w, |d| {
                        for t in 0..t_out {
                            let grow = &g[t * co..(t + 1) * co];
                            for kk in 0..k {
                                let Some(src) = taps(t, kk) else { continue };
                                for i in 0..c_in {
                                    let xv = vx.data()[src * c_in + i];
                                    let drow = &mut d[(kk * c_in + i) * co..(kk * c_in + i + 1) * co];
                                    axpy(drow, xv, grow);
                                }
                            }
                        }
                    });
                    if let Some(b) = b {
                        self.acc(lo, *b, |d| {
                            for grow in g.chunks(co) {
                                add_into(d, grow);
                            }
                        });
                    }
                }
                Op::ConvTranspose1d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (t_in, c_in) = (vx.shape()[0], vx.shape()[1]);
                    let (k, co) = (vw.shape()[0], vw.shape()[2]);
                    let t_out = node.value.shape()[0];
                    let (s, p) = (*stride, *padding);
                    let dst_of = |t: usize, kk: usize| -> Option<usize> {
                        let dst = (t * s + kk) as isize - p as isize;
                        (dst >= 0 && (dst as usize) < t_out).then_some(dst as usize)
                    };
                    self.acc(lo, *x, |d| {
                        for t in 0..t_in {
                            for kk in 0..k {
                                let Some(dst) = dst_of(t, kk) else { continue };
                                let grow = &g[dst * co..(dst + 1) * co];
                                for i in 0..c_in {
                                    let wrow = &vw.data()[(kk * c_in + i) * co..(kk * c_in + i + 1) * co];
                                    d[t * c_in + i] += dot(grow, wrow);
                                }
                            }
                        }
                    });
                    self.acc(lo, *w, |d| {
                        for t in 0..t_in {
                            for kk in 0..k {
                                let Some(dst) = dst_of(t, kk) else { continue };
                                let grow = &g[dst * co..(dst + 1) * co];
                                for i in 0..c_in {
                                    let xv = vx.data()[t * c_in + i];
                                    let drow = &mut d[(kk * c_in + i) * co..(kk * c_in + i + 1) * co];
                                    axpy(drow, xv, grow);
                                }
                            }
                        }
                    });
                    if let Some(b) = b {
                        self.acc(lo, *b, |d| {
                            for grow in g.chunks(co) {
                                add_into(d, grow);
                            }
                        });
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let va = self.nodes[*a].value.data();
                    self.acc(lo, *a, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                            *d += if x > T::zero() { g } else { g * *slope };
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    self.acc(lo, *a, |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += g * (T::one() - y * y);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.acc(lo, *a, |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += g * y * (T::one() - y);
                        }
                    });
                }
                Op::Embedding { table, indices } => {
                    let dim = self.nodes[*table].value.shape()[1];
                    self.acc(lo, *table, |d| {
                        for (r, &idx) in indices.iter().enumerate() {
                            add_into(&mut d[idx * dim..(idx + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    if *axis == 1 {
                        let total = node.value.shape()[1];
                        let mut offset = 0;
                        for &p in parts {
                            let (rows, cols) = {
                                let s = self.nodes[p].value.shape();
                                (s[0], s[1])
                            };
                            self.acc(lo, p, |d| {
                                for r in 0..rows {
                                    add_into(
                                        &mut d[r * cols..(r + 1) * cols],
                                        &g[r * total + offset..r * total + offset + cols],
                                    );
                                }
                            });
                            offset += cols;
                        }
                    } else {
                        let mut offset = 0;
                        for &p in parts {
                            let n = self.nodes[p].value.len();
                            self.acc(lo, p, |d| add_into(d, &g[offset..offset + n]));
                            offset += n;
                        }
                    }
                }
                Op::Mean(a) => {
                    let n = T::lit(self.nodes[*a].value.len() as f64);
                    let gv = g[0] / n;
                    self.acc(lo, *a, |d| d.iter_mut().for_each(|d| *d += gv));
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    self.acc(lo, *a, |d| d.iter_mut().for_each(|d| *d += gv));
                }
                Op::Square(a) => {
                    let va = self.nodes[*a].value.data();
                    let two = T::lit(2.0);
                    self.acc(lo, *a, |d| {
                        for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                            *d += two * x * g;
                        }
                    });
                }
            }
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, lo: &mut [Option<Tensor<T>>], parent: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[parent].requires_grad {
            return;
        }
        let slot = &mut lo[parent];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[parent].value.shape()));
        f(t.data_mut());
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when nothing reached it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn conv_weight_dims<T: Scalar>(op: &'static str, w: &Tensor<T>, c_in: usize) -> Result<(usize, usize, usize)> {
    if w.shape().len() != 3 || w.shape()[1] != c_in {
        return Err(Error::shape(
            op,
            format!("weight {:?} incompatible with {c_in} input channels", w.shape()),
        ));
    }
    Ok((w.shape()[0], w.shape()[1], w.shape()[2]))
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            axpy(orow, av, &b[c * n..(c + 1) * n]);
        }
    }
}

#[inline]
fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

#[inline]
fn axpy<T: Scalar>(d: &mut [T], a: T, x: &[T]) {
    for (d, &x) in d.iter_mut().zip(x) {
        *d += a * x;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
