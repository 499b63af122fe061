//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every operation as it is evaluated. Handles ([`Var`])
//! are plain indices into the tape, so they are `Copy` and an operation's
//! inputs always precede it. [`Graph::backward`] consumes the tape, walks it
//! once in reverse and returns the gradients of every leaf that was created
//! with `requires_grad`.
//!
//! Shapes are explicit: there is no broadcasting except scalar scaling and
//! the two row-wise ops [`Graph::add_row`] / [`Graph::mul_row`], which apply a
//! per-column vector to every row of a matrix.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (time) dimension; 1 for a scalar.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.row_len() + c]
    }

    /// Copies rows `start..start + len` into a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() || self.shape.is_empty() {
            return Err(Error::Shape(format!(
                "row slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * w..(start + len) * w].to_vec(),
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    LogSoftmax(Var),
    Relu(Var),
    Silu(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    ColumnAffine {
        x: Var,
        scale: Vec<T>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    External {
        x: Var,
        grad: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Confined to one thread; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar root with respect to the graph's trainable leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op} expects a matrix, got shape {s:?}"))),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape != y.shape {
            return Err(Error::Dimension {
                op,
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), self.needs(&[a]))
    }

    fn row_op(&self, x: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
        let (_, c) = dims2(xv, op)?;
        if bv.shape != [c] {
            return Err(Error::Dimension {
                op,
                lhs: xv.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let data = xv
            .data
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv.data).map(|(&p, &q)| f(p, q)))
            .collect();
        Ok(Tensor {
            shape: xv.shape.clone(),
            data,
        })
    }

    /// `x[t, c] + b[c]` for a `T×C` matrix and a length-`C` vector.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_op(x, b, "add_row", |p, q| p + q)?;
        Ok(self.push(out, Op::AddRow(x, b), self.needs(&[x, b])))
    }

    /// `x[t, c] * g[c]` for a `T×C` matrix and a length-`C` vector.
    pub fn mul_row(&self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_op(x, g, "mul_row", |p, q| p * q)?;
        Ok(self.push(out, Op::MulRow(x, g), self.needs(&[x, g])))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = dims2(av, "matmul")?;
            let (k2, n) = dims2(bv, "matmul")?;
            if k != k2 {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: av.shape.clone(),
                    rhs: bv.shape.clone(),
                });
            }
            let mut out = vec![T::zero(); m * n];
            matmul_into(&av.data, &bv.data, &mut out, m, k, n);
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    /// Per-channel 1-D convolution over time with zero padding `floor(K/2)`.
    ///
    /// `x` is `T×C`, `kernel` is `K×C`; the output has
    /// `floor((T + 2·pad − K) / stride) + 1` frames.
    pub fn conv1d_depthwise(&self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Usage("convolution stride must be positive".into()));
        }
        let (out, pad) = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (t, c) = dims2(xv, "conv1d_depthwise")?;
            let (k, c2) = dims2(kv, "conv1d_depthwise")?;
            let pad = k / 2;
            if c != c2 || k == 0 || t == 0 || k > t + 2 * pad {
                return Err(Error::Dimension {
                    op: "conv1d_depthwise",
                    lhs: xv.shape.clone(),
                    rhs: kv.shape.clone(),
                });
            }
            let t_out = (t + 2 * pad - k) / stride + 1;
            let mut out = vec![T::zero(); t_out * c];
            for o in 0..t_out {
                let dst = &mut out[o * c..(o + 1) * c];
                for j in 0..k {
                    let src = (o * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let xs = xv.row(src as usize);
                    let ks = kv.row(j);
                    for ch in 0..c {
                        dst[ch] += ks[ch] * xs[ch];
                    }
                }
            }
            (
                Tensor {
                    shape: vec![t_out, c],
                    data: out,
                },
                pad,
            )
        };
        Ok(self.push(
            out,
            Op::DepthwiseConv { x, kernel, stride, pad },
            self.needs(&[x, kernel]),
        ))
    }

    /// Log-softmax over the last dimension, stabilised by max subtraction.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let w = *xv
                .shape
                .last()
                .ok_or_else(|| Error::Shape("log_softmax of a scalar".into()))?;
            if w == 0 {
                return Err(Error::Shape("log_softmax over an empty axis".into()));
            }
            if xv.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite input to log_softmax".into()));
            }
            let mut data = xv.data.clone();
            for row in data.chunks_mut(w) {
                log_softmax_in_place(row);
            }
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        Ok(self.push(out, Op::LogSoftmax(x), self.needs(&[x])))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), self.needs(&[x]))
    }

    /// SiLU (`x·σ(x)`), the activation used throughout the acoustic model.
    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), self.needs(&[x]))
    }

    /// Rows `start..start + len` along the time axis.
    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }, self.needs(&[x])))
    }

    /// Concatenation along the time axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
            let tail = nodes[first.0].value.shape[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.0].value;
                if v.shape.is_empty() || v.shape[1..] != tail[..] {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[first.0].value.shape.clone(),
                        rhs: v.shape.clone(),
                    });
                }
                rows += v.shape[0];
                data.extend_from_slice(&v.data);
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor { shape, data }
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.needs(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            let n = T::of(v.len().max(1) as f64);
            v.data.iter().copied().sum::<T>() / n
        };
        self.push(Tensor::scalar(out), Op::Mean(x), self.needs(&[x]))
    }

    /// `x[t, c]·scale[c] + shift[c]` with constant (non-differentiated) coefficients.
    pub fn column_affine(&self, x: Var, scale: Vec<T>, shift: &[T]) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (_, c) = dims2(&xv, "column_affine")?;
            if scale.len() != c || shift.len() != c {
                return Err(Error::Dimension {
                    op: "column_affine",
                    lhs: xv.shape.clone(),
                    rhs: vec![scale.len(), shift.len()],
                });
            }
            let data = xv
                .data
                .chunks(c)
                .flat_map(|row| row.iter().zip(scale.iter().zip(shift)).map(|(&v, (&s, &b))| v * s + b))
                .collect();
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        Ok(self.push(out, Op::ColumnAffine { x, scale }, self.needs(&[x])))
    }

    /// Normalises every column by its own mean and (biased) variance over the
    /// rows. Returns the normalised output together with the batch mean and
    /// variance, which callers use for running statistics.
    pub fn batch_norm_columns(&self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (out, mean, var, inv_std) = {
            let xv = self.value(x);
            let (n, c) = dims2(&xv, "batch_norm_columns")?;
            if n == 0 {
                return Err(Error::Shape("batch norm over zero rows".into()));
            }
            let nf = T::of(n as f64);
            let mut mean = vec![T::zero(); c];
            for row in xv.data.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![T::zero(); c];
            for row in xv.data.chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= nf);
            let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
            let data = xv
                .data
                .chunks(c)
                .flat_map(|row| {
                    row.iter()
                        .zip(mean.iter().zip(&inv_std))
                        .map(|(&v, (&m, &is))| (v - m) * is)
                })
                .collect();
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                },
                mean,
                var,
                inv_std,
            )
        };
        let v = self.push(out, Op::BatchNorm { x, inv_std }, self.needs(&[x]));
        Ok((v, mean, var))
    }

    /// A scalar whose value and gradient with respect to `x` were computed
    /// outside the tape (e.g. a CTC loss evaluated by forward-backward).
    pub fn external_scalar(&self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        let n = self.value(x).len();
        if grad.len() != n {
            return Err(Error::Dimension {
                op: "external_scalar",
                lhs: self.shape(x),
                rhs: vec![grad.len()],
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, self.needs(&[x])))
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.0].value.shape
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);
        let mut grads = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    grads.insert(
                        Var(i),
                        Tensor {
                            shape: node.value.shape.clone(),
                            data: dy,
                        },
                    );
                }
                Op::Add(a, b) => {
                    acc(*a, &|g| add_assign(g, &dy));
                    acc(*b, &|g| add_assign(g, &dy));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|g| add_assign(g, &dy));
                    acc(*b, &|g| g.iter_mut().zip(&dy).for_each(|(g, &d)| *g -= d));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &|g| {
                        for ((g, &d), &q) in g.iter_mut().zip(&dy).zip(&bv.data) {
                            *g += d * q;
                        }
                    });
                    acc(*b, &|g| {
                        for ((g, &d), &p) in g.iter_mut().zip(&dy).zip(&av.data) {
                            *g += d * p;
                        }
                    });
                }
                Op::Scale(a, k) => acc(*a, &|g| g.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d * *k)),
                Op::AddRow(x, b) => {
                    let c = val(*b).len();
                    acc(*x, &|g| add_assign(g, &dy));
                    acc(*b, &|g| {
                        for row in dy.chunks(c) {
                            add_assign(g, row);
                        }
                    });
                }
                Op::MulRow(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let c = wv.len();
                    acc(*x, &|g| {
                        for (grow, drow) in g.chunks_mut(c).zip(dy.chunks(c)) {
                            for ((g, &d), &q) in grow.iter_mut().zip(drow).zip(&wv.data) {
                                *g += d * q;
                            }
                        }
                    });
                    acc(*w, &|g| {
                        for (drow, xrow) in dy.chunks(c).zip(xv.data.chunks(c)) {
                            for ((g, &d), &p) in g.iter_mut().zip(drow).zip(xrow) {
                                *g += d * p;
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape[0], av.shape[1]);
                    let n = bv.shape[1];
                    // dA = dC·Bᵀ
                    acc(*a, &|g| {
                        for r in 0..m {
                            let drow = &dy[r * n..(r + 1) * n];
                            let grow = &mut g[r * k..(r + 1) * k];
                            for (j, gv) in grow.iter_mut().enumerate() {
                                let brow = &bv.data[j * n..(j + 1) * n];
                                *gv += drow.iter().zip(brow).map(|(&d, &q)| d * q).sum::<T>();
                            }
                        }
                    });
                    // dB = Aᵀ·dC
                    acc(*b, &|g| {
                        for r in 0..m {
                            let drow = &dy[r * n..(r + 1) * n];
                            for j in 0..k {
                                let p = av.data[r * k + j];
                                if p == T::zero() {
                                    continue;
                                }
                                for (gv, &d) in g[j * n..(j + 1) * n].iter_mut().zip(drow) {
                                    *gv += p * d;
                                }
                            }
                        }
                    });
                }
                Op::DepthwiseConv { x, kernel, stride, pad } => {
                    let (xv, kv) = (val(*x), val(*kernel));
                    let (t, c) = (xv.shape[0], xv.shape[1]);
                    let k = kv.shape[0];
                    let t_out = node.value.shape[0];
                    let taps = |o: usize, j: usize| {
                        let src = (o * stride + j) as isize - *pad as isize;
                        (src >= 0 && (src as usize) < t).then_some(src as usize)
                    };
                    acc(*x, &|g| {
                        for o in 0..t_out {
                            for j in 0..k {
                                if let Some(s) = taps(o, j) {
                                    for ch in 0..c {
                                        g[s * c + ch] += dy[o * c + ch] * kv.data[j * c + ch];
                                    }
                                }
                            }
                        }
                    });
                    acc(*kernel, &|g| {
                        for o in 0..t_out {
                            for j in 0..k {
                                if let Some(s) = taps(o, j) {
                                    for ch in 0..c {
                                        g[j * c + ch] += dy[o * c + ch] * xv.data[s * c + ch];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let w = *node.value.shape.last().unwrap();
                    let y = &node.value.data;
                    acc(*x, &|g| {
                        for ((grow, drow), yrow) in g.chunks_mut(w).zip(dy.chunks(w)).zip(y.chunks(w)) {
                            let total: T = drow.iter().copied().sum();
                            for ((g, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                                *g += d - yv.exp() * total;
                            }
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    acc(*x, &|g| {
                        for ((g, &d), &p) in g.iter_mut().zip(&dy).zip(&xv.data) {
                            if p > T::zero() {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Silu(x) => {
                    let xv = val(*x);
                    acc(*x, &|g| {
                        for ((g, &d), &p) in g.iter_mut().zip(&dy).zip(&xv.data) {
                            let s = sigmoid(p);
                            *g += d * s * (T::one() + p * (T::one() - s));
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let w = node.value.row_len();
                    acc(*x, &|g| add_assign(&mut g[start * w..start * w + dy.len()], &dy));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = val(*p).len();
                        let piece = &dy[offset..offset + n];
                        acc(*p, &|g| add_assign(g, piece));
                        offset += n;
                    }
                }
                Op::Sum(x) => {
                    let d = dy[0];
                    acc(*x, &|g| g.iter_mut().for_each(|g| *g += d));
                }
                Op::Mean(x) => {
                    let n = val(*x).len().max(1);
                    let d = dy[0] / T::of(n as f64);
                    acc(*x, &|g| g.iter_mut().for_each(|g| *g += d));
                }
                Op::ColumnAffine { x, scale } => {
                    let c = scale.len();
                    acc(*x, &|g| {
                        for (grow, drow) in g.chunks_mut(c).zip(dy.chunks(c)) {
                            for ((g, &d), &s) in grow.iter_mut().zip(drow).zip(scale) {
                                *g += d * s;
                            }
                        }
                    });
                }
                Op::BatchNorm { x, inv_std } => {
                    let c = inv_std.len();
                    let xhat = &node.value.data;
                    let n = xhat.len() / c;
                    let nf = T::of(n as f64);
                    let mut sum_d = vec![T::zero(); c];
                    let mut sum_dx = vec![T::zero(); c];
                    for (drow, hrow) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            sum_d[ch] += drow[ch];
                            sum_dx[ch] += drow[ch] * hrow[ch];
                        }
                    }
                    acc(*x, &|g| {
                        for ((grow, drow), hrow) in g.chunks_mut(c).zip(dy.chunks(c)).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                grow[ch] += inv_std[ch] / nf * (nf * drow[ch] - sum_d[ch] - hrow[ch] * sum_dx[ch]);
                            }
                        }
                    });
                }
                Op::External { x, grad } => {
                    let d = dy[0];
                    acc(*x, &|g| {
                        for (g, &q) in g.iter_mut().zip(grad) {
                            *g += d * q;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..k {
            let p = a[r * k + j];
            if p == T::zero() {
                continue;
            }
            for (o, &q) in orow.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                *o += p * q;
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|v| *v -= lse);
}
