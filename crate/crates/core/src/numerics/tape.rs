//! Append-only reverse-mode differentiation tape.
//!
//! Nodes are tensor-level operations with eagerly computed forward values.
//! `backward` seeds the scalar output with 1 and sweeps the tape in reverse,
//! accumulating gradients in a fixed order. Constants participate in the
//! forward pass but receive no gradient, which is how detached quantities
//! (targets, importance weights, behavior densities) enter losses.

use super::tensor::Tensor;
use super::{dot, NumericsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Param,
    Const,
    /// x · wᵀ + b with x: [n×p], w: [q×p], b: [q].
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Neg {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddScalar {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise product with a constant tensor (dropout masks, fixed weights).
    MulConst {
        x: NodeId,
        k: Tensor,
    },
    SliceCols {
        x: NodeId,
        from: usize,
    },
    /// [n×m] → [n], summing each row.
    RowSum {
        x: NodeId,
    },
    /// Weighted sum of a vector with constant weights → scalar.
    DotConst {
        x: NodeId,
        w: Vec<f64>,
    },
    MeanAll {
        x: NodeId,
    },
    /// Row gather: out[r, :] = x[rows[r], :].
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// out[i] = x[i, cols[i]] − logsumexp(x[i, :]).
    RowLogSoftmaxGather {
        x: NodeId,
        cols: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFiniteValue {
                op: op_name(&op),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<(), NumericsError> {
        if id.0 >= self.nodes.len() {
            return Err(NumericsError::UnknownNode {
                node: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    pub fn param(&mut self, value: &Tensor) -> Result<NodeId, NumericsError> {
        self.push(Op::Param, value.clone())
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, NumericsError> {
        self.push(Op::Const, value)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if !xv.is_matrix() || !wv.is_matrix() || bv.shape().len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                context: format!(
                    "x {:?}, w {:?}, b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            });
        }
        if xv.cols() != wv.cols() || wv.rows() != bv.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                context: format!(
                    "x {:?}, w {:?}, b {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            });
        }
        let value = linear_forward(xv, wv, bv);
        self.push(Op::Linear { x, w, b }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), |v| v.max(0.0));
        self.push(Op::Relu { x }, value)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), f64::tanh);
        self.push(Op::Tanh { x }, value)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), f64::exp);
        self.push(Op::Exp { x }, value)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), |v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, value)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), |v| -v);
        self.push(Op::Neg { x }, value)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), |v| v * v);
        self.push(Op::Square { x }, value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), |v| v * c);
        self.push(Op::Scale { x, c }, value)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let value = map_tensor(self.value(x), |v| v + c);
        self.push(Op::AddScalar { x }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.push(Op::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub { a, b }, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul { a, b }, value)
    }

    pub fn mul_const(&mut self, x: NodeId, k: &Tensor) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        if self.value(x).shape() != k.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_const",
                context: format!("x {:?}, k {:?}", self.value(x).shape(), k.shape()),
            });
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(k.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(Op::MulConst { x, k: k.clone() }, value)
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        from: usize,
        to: usize,
    ) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.is_matrix() || from >= to || to > xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                context: format!("x {:?}, cols {from}..{to}", xv.shape()),
            });
        }
        let (n, w) = (xv.rows(), to - from);
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[from..to]);
        }
        let value = Tensor::new(vec![n, w], data).expect("sized above");
        self.push(Op::SliceCols { x, from }, value)
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(NumericsError::NotMatrix {
                op: "row_sum",
                shape: xv.shape().to_vec(),
            });
        }
        let data: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let value = Tensor::new(vec![xv.rows()], data).expect("sized above");
        self.push(Op::RowSum { x }, value)
    }

    pub fn dot_const(&mut self, x: NodeId, w: &[f64]) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.numel() != w.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "dot_const",
                context: format!("x {:?}, w len {}", xv.shape(), w.len()),
            });
        }
        let value = Tensor::scalar(dot(xv.data(), w));
        self.push(
            Op::DotConst {
                x,
                w: w.to_vec(),
            },
            value,
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "mean_all",
                context: "empty tensor".to_string(),
            });
        }
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        self.push(Op::MeanAll { x }, value)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.is_matrix() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                context: format!("x {:?}, max row {:?}", xv.shape(), rows.iter().max()),
            });
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], data).expect("sized above");
        self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    pub fn row_log_softmax_gather(
        &mut self,
        x: NodeId,
        cols: &[usize],
    ) -> Result<NodeId, NumericsError> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.is_matrix() || cols.len() != xv.rows() || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(NumericsError::ShapeMismatch {
                op: "row_log_softmax_gather",
                context: format!("x {:?}, cols len {}", xv.shape(), cols.len()),
            });
        }
        let data: Vec<f64> = (0..xv.rows())
            .map(|r| {
                let row = xv.row(r);
                row[cols[r]] - log_sum_exp(row)
            })
            .collect();
        let value = Tensor::new(vec![xv.rows()], data).expect("sized above");
        self.push(
            Op::RowLogSoftmaxGather {
                x,
                cols: cols.to_vec(),
            },
            value,
        )
    }

    fn zip(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                context: format!("lhs {:?}, rhs {:?}", av.shape(), bv.shape()),
            });
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::new(av.shape().to_vec(), data).expect("same shape"))
    }

    /// Reverse sweep from a scalar output; returns per-node gradients.
    pub fn backward(&self, out: NodeId) -> Result<Gradients, NumericsError> {
        self.check(out)?;
        let out_value = self.value(out);
        if out_value.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: out_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(out_value.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(NumericsError::NonFiniteGradient {
                    op: op_name(&self.nodes[i].op),
                    node: i,
                });
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Param | Op::Const => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, p, q) = (xv.rows(), xv.cols(), wv.rows());
                // dX[i,:] += Σ_j G[i,j]·w[j,:]
                let gx = ensure(grads, *x, &[n, p]);
                for r in 0..n {
                    let grow = g.row(r);
                    let dst = &mut gx.data_mut()[r * p..(r + 1) * p];
                    for j in 0..q {
                        let gj = grow[j];
                        if gj != 0.0 {
                            let wrow = &wv.row(j)[..p];
                            for (d, wv_) in dst.iter_mut().zip(wrow) {
                                *d += gj * wv_;
                            }
                        }
                    }
                }
                // dW[j,:] += Σ_i G[i,j]·x[i,:]
                let gw = ensure(grads, *w, &[q, p]);
                for r in 0..n {
                    let grow = g.row(r);
                    let xrow = xv.row(r);
                    for j in 0..q {
                        let gj = grow[j];
                        if gj != 0.0 {
                            let dst = &mut gw.data_mut()[j * p..(j + 1) * p];
                            for (d, xv_) in dst.iter_mut().zip(xrow) {
                                *d += gj * xv_;
                            }
                        }
                    }
                }
                // dB[j] += Σ_i G[i,j]
                let gb = ensure(grads, *b, &[q]);
                for r in 0..n {
                    let grow = g.row(r);
                    for (d, gv) in gb.data_mut().iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
            Op::Relu { x } => {
                self.accumulate_zip(grads, *x, g, |xv, _yv, gv| if xv > 0.0 { gv } else { 0.0}, i)
            }
            Op::Tanh { x } => self.accumulate_zip(grads, *x, g, |_xv, yv, gv| gv * (1.0 - yv * yv), i),
            Op::Exp { x } => self.accumulate_zip(grads, *x, g, |_xv, yv, gv| gv * yv, i),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate_zip(
                    grads,
                    *x,
                    g,
                    move |xv, _yv, gv| if xv > lo && xv < hi { gv } else { 0.0 },
                    i,
                )
            }
            Op::Neg { x } => self.accumulate_zip(grads, *x, g, |_x, _y, gv| -gv, i),
            Op::Square { x } => self.accumulate_zip(grads, *x, g, |xv, _y, gv| 2.0 * xv * gv, i),
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate_zip(grads, *x, g, move |_x, _y, gv| c * gv, i)
            }
            Op::AddScalar { x, .. } => self.accumulate_zip(grads, *x, g, |_x, _y, gv| gv, i),
            Op::Add { a, b } => {
                add_into(ensure_like(grads, *a, self.value(*a)), g.data());
                add_into(ensure_like(grads, *b, self.value(*b)), g.data());
            }
            Op::Sub { a, b } => {
                add_into(ensure_like(grads, *a, self.value(*a)), g.data());
                sub_into(ensure_like(grads, *b, self.value(*b)), g.data());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let ga = ensure_like(grads, *a, &av);
                for ((d, gv), bv_) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += gv * bv_;
                }
                let gb = ensure_like(grads, *b, &bv);
                for ((d, gv), av_) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gv * av_;
                }
            }
            Op::MulConst { x, k } => {
                let gx = ensure_like(grads, *x, self.value(*x));
                for ((d, gv), kv) in gx.data_mut().iter_mut().zip(g.data()).zip(k.data()) {
                    *d += gv * kv;
                }
            }
            Op::SliceCols { x, from, .. } => {
                let xv_shape = self.value(*x).shape().to_vec();
                let (cols, width) = (xv_shape[1], g.cols());
                let gx = ensure(grads, *x, &xv_shape);
                for r in 0..g.rows() {
                    let src = g.row(r);
                    let dst = &mut gx.data_mut()[r * cols + from..r * cols + from + width];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::RowSum { x } => {
                let xv_shape = self.value(*x).shape().to_vec();
                let cols = xv_shape[1];
                let gx = ensure(grads, *x, &xv_shape);
                for r in 0..g.numel() {
                    let gv = g.data()[r];
                    for d in &mut gx.data_mut()[r * cols..(r + 1) * cols] {
                        *d += gv;
                    }
                }
            }
            Op::DotConst { x, w } => {
                let gv = g.data()[0];
                let gx = ensure_like(grads, *x, self.value(*x));
                for (d, wv) in gx.data_mut().iter_mut().zip(w) {
                    *d += gv * wv;
                }
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let gv = g.data()[0] / xv.numel() as f64;
                let gx = ensure_like(grads, *x, xv);
                for d in gx.data_mut() {
                    *d += gv;
                }
            }
            Op::GatherRows { x, rows } => {
                let xv_shape = self.value(*x).shape().to_vec();
                let cols = xv_shape[1];
                let gx = ensure(grads, *x, &xv_shape);
                for (r, &src_row) in rows.iter().enumerate() {
                    let src = g.row(r);
                    let dst = &mut gx.data_mut()[src_row * cols..(src_row + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::RowLogSoftmaxGather { x, cols } => {
                let xv = self.value(*x).clone();
                let gx = ensure(grads, *x, &[xv.rows(), xv.cols()]);
                for r in 0..xv.rows() {
                    let gv = g.data()[r];
                    if gv == 0.0 {
                        continue;
                    }
                    let row = xv.row(r);
                    let lse = log_sum_exp(row);
                    let dst = &mut gx.data_mut()[r * xv.cols()..(r + 1) * xv.cols()];
                    for (a, d) in dst.iter_mut().enumerate() {
                        let soft = (row[a] - lse).exp();
                        let indicator = if a == cols[r] { 1.0 } else { 0.0 };
                        *d += gv * (indicator - soft);
                    }
                }
            }
        }
    }

    /// Elementwise chain rule using the parent's input value and this node's
    /// output value.
    fn accumulate_zip(
        &self,
        grads: &mut [Option<Tensor>],
        x: NodeId,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
        node: usize,
    ) {
        let xv = self.value(x).clone();
        let yv = self.nodes[node].value.clone();
        let gx = ensure_like(grads, x, &xv);
        for (((d, xv_), yv_), gv) in gx
            .data_mut()
            .iter_mut()
            .zip(xv.data())
            .zip(yv.data())
            .zip(g.data())
        {
            *d += f(*xv_, *yv_, *gv);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Param => "param",
        Op::Const => "const",
        Op::Linear { .. } => "linear",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Exp { .. } => "exp",
        Op::Clamp { .. } => "clamp",
        Op::Neg { .. } => "neg",
        Op::Square { .. } => "square",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::MulConst { .. } => "mul_const",
        Op::SliceCols { .. } => "slice_cols",
        Op::RowSum { .. } => "row_sum",
        Op::DotConst { .. } => "dot_const",
        Op::MeanAll { .. } => "mean_all",
        Op::GatherRows { .. } => "gather_rows",
        Op::RowLogSoftmaxGather { .. } => "row_log_softmax_gather",
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn ensure<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn ensure_like<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d -= s;
    }
}

/// x · wᵀ + b. Shared by the tape op and the pure MLP forward so both paths
/// produce bit-identical values.
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, q) = (x.rows(), w.rows());
    let mut data = Vec::with_capacity(n * q);
    for r in 0..n {
        let xrow = x.row(r);
        for j in 0..q {
            data.push(dot(xrow, w.row(j)) + b.data()[j]);
        }
    }
    Tensor::new(vec![n, q], data).expect("sized above")
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_gradient_is_zero_on_negative_input() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(-1.0)).unwrap();
        let y = tape.relu(x).unwrap();
        let out = tape.mean_all(y).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn linear_with_zero_weights_returns_bias_rows() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let w = tape.param(&Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape
            .param(&Tensor::new(vec![2], vec![0.5, -1.5]).unwrap())
            .unwrap();
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn backward_is_linear_over_summed_terms() {
        let x0 = Tensor::new(vec![3], vec![0.3, -0.8, 1.1]).unwrap();
        let w1 = [0.2, 0.5, -0.7];
        let w2 = [-1.0, 0.25, 0.9];

        let mut tape = Tape::new();
        let x = tape.param(&x0).unwrap();
        let sq = tape.square(x).unwrap();
        let t1 = tape.dot_const(sq, &w1).unwrap();
        let t2 = tape.dot_const(sq, &w2).unwrap();
        let sum = tape.add(t1, t2).unwrap();
        let joint = tape.backward(sum).unwrap();

        let grad_of = |w: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.param(&x0).unwrap();
            let sq = tape.square(x).unwrap();
            let t = tape.dot_const(sq, w).unwrap();
            let g = tape.backward(t).unwrap();
            g.get(x).unwrap().data().to_vec()
        };
        let (g1, g2) = (grad_of(&w1), grad_of(&w2));
        for k in 0..3 {
            assert_abs_diff_eq!(
                joint.get(x).unwrap().data()[k],
                g1[k] + g2[k],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn gather_and_log_softmax_gradients_match_finite_differences() {
        let logits = Tensor::new(vec![3, 4], vec![
            0.2, -0.1, 0.7, 0.05, //
            1.0, 0.3, -0.6, 0.0, //
            -0.4, 0.8, 0.1, 0.25,
        ])
        .unwrap();
        let rows = [2usize, 0, 1, 2];
        let cols = [1usize, 3, 0, 2];
        let weights = [0.4, -0.3, 0.9, 0.2];

        let eval = |theta: &[f64]| -> (f64, Vec<f64>) {
            let t = Tensor::new(vec![3, 4], theta.to_vec()).unwrap();
            let mut tape = Tape::new();
            let table = tape.param(&t).unwrap();
            let picked = tape.gather_rows(table, &rows).unwrap();
            let lp = tape.row_log_softmax_gather(picked, &cols).unwrap();
            let loss = tape.dot_const(lp, &weights).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).as_scalar().unwrap(),
                grads.get(table).unwrap().data().to_vec(),
            )
        };

        let theta: Vec<f64> = logits.data().to_vec();
        let (_, analytic) = eval(&theta);
        for k in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            assert_abs_diff_eq!(analytic[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn clamp_passes_gradient_only_inside_the_interval() {
        let mut tape = Tape::new();
        let x = tape
            .param(&Tensor::new(vec![3], vec![-7.0, 0.5, 4.0]).unwrap())
            .unwrap();
        let y = tape.clamp(x, -5.0, 2.0).unwrap();
        let s = tape.mean_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.get(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert_abs_diff_eq!(g[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(g[2], 0.0);
    }
}
