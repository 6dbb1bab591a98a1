use super::kernels::{self, Window};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, n: usize, p: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize, fan_in: usize, fan_out: usize },
    Conv2d { x: Var, k: Var, b: Var, batch: usize, c_out: usize, window: Window },
    ConvTranspose { x: Var, k: Var, b: Var, batch: usize, c_in: usize, window: Window },
    Relu(Var),
    Sigmoid(Var),
    Gap { x: Var, spatial: usize },
    Reshape(Var),
    Concat { a: Var, b: Var, rows: usize, left: usize, right: usize },
    RepeatRows { x: Var, rows: usize, cols: usize, times: usize },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, cols: usize },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize>, cols: usize },
    Kl { student: Var, teacher: Vec<f64>, rows: usize },
    SquaredDistance { x: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records differentiable operations in execution order so that a single
/// reverse sweep can produce gradients for every `requires_grad` leaf.
///
/// A tape is consumed by [`Tape::backward`]; a second call is an error rather
/// than a silent accumulation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            self.precision.apply(value.data_mut());
        }
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a trainable copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect()).expect("same shape");
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x + c).collect()).expect("same shape");
        let g = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), g)
    }

    /// `[m×n] · [n×p] → [m×p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, n, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * p];
        kernels::gemm(ta.data(), tb.data(), &mut out, m, n, p);
        let out = Tensor::new(&[m, p], out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, m, n, p }, g))
    }

    /// Fully-connected layer `x · w + b` with `w: [in×out]`, `b: [out]` and
    /// `x` either `[in]` or a batch `[rows×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.rank() != 2 || tb.shape() != [tw.shape()[1]] {
            return Err(Error::shape("linear", tw.shape(), tb.shape()));
        }
        let (fan_in, fan_out) = (tw.shape()[0], tw.shape()[1]);
        let (rows, out_shape) = match tx.shape() {
            [n] if *n == fan_in => (1, vec![fan_out]),
            [r, n] if *n == fan_in => (*r, vec![*r, fan_out]),
            other => return Err(Error::shape("linear", other, tw.shape())),
        };
        let mut out = vec![0.0; rows * fan_out];
        for row in out.chunks_mut(fan_out) {
            row.copy_from_slice(tb.data());
        }
        kernels::gemm(tx.data(), tw.data(), &mut out, rows, fan_in, fan_out);
        let out = Tensor::new(&out_shape, out)?;
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            g,
        ))
    }

    fn image_batch(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
        match *shape {
            [c, h, w] => Ok((1, c, h, w, false)),
            [n, c, h, w] => Ok((n, c, h, w, true)),
            _ => Err(Error::geometry(op, format!("expected [c, h, w] or [n, c, h, w], got {shape:?}"))),
        }
    }

    /// Cross-correlation (no kernel flip) with `kernels: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernels), self.value(bias));
        let (batch, c_in, h, w, batched) = Self::image_batch(tx.shape(), "conv2d")?;
        let [c_out, kc, kh, kw] = *tk.shape() else {
            return Err(Error::geometry("conv2d", format!("kernels must be rank 4, got {:?}", tk.shape())));
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", tx.shape(), tk.shape()));
        }
        if tb.shape() != [c_out] {
            return Err(Error::shape("conv2d", tk.shape(), tb.shape()));
        }
        let window = Window {
            channels: c_in,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            oh: kernels::conv_out_dim(h, kh, stride, padding)?,
            ow: kernels::conv_out_dim(w, kw, stride, padding)?,
        };
        let out = kernels::conv2d_forward(tx.data(), tk.data(), tb.data(), batch, c_out, &window);
        let mut shape = vec![c_out, window.oh, window.ow];
        if batched {
            shape.insert(0, batch);
        }
        let out = Tensor::new(&shape, out)?;
        let g = self.any_grad(&[x, kernels, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                k: kernels,
                b: bias,
                batch,
                c_out,
                window,
            },
            g,
        ))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] without padding)
    /// with `kernels: [c_in, c_out, kh, kw]`.
    pub fn conv2d_transpose(&mut self, x: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernels), self.value(bias));
        let (batch, c_in, h, w, batched) = Self::image_batch(tx.shape(), "conv2d_transpose")?;
        let [kc, c_out, kh, kw] = *tk.shape() else {
            return Err(Error::geometry(
                "conv2d_transpose",
                format!("kernels must be rank 4, got {:?}", tk.shape()),
            ));
        };
        if kc != c_in {
            return Err(Error::shape("conv2d_transpose", tx.shape(), tk.shape()));
        }
        if tb.shape() != [c_out] {
            return Err(Error::shape("conv2d_transpose", tk.shape(), tb.shape()));
        }
        let oh = kernels::conv_transpose_out_dim(h, kh, stride)?;
        let ow = kernels::conv_transpose_out_dim(w, kw, stride)?;
        let window = Window {
            channels: c_out,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            padding: 0,
            oh: h,
            ow: w,
        };
        let out = kernels::conv_transpose_forward(tx.data(), tk.data(), tb.data(), batch, c_in, &window);
        let mut shape = vec![c_out, oh, ow];
        if batched {
            shape.insert(0, batch);
        }
        let out = Tensor::new(&shape, out)?;
        let g = self.any_grad(&[x, kernels, bias]);
        Ok(self.push(
            out,
            Op::ConvTranspose {
                x,
                k: kernels,
                b: bias,
                batch,
                c_in,
                window,
            },
            g,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| sigmoid(v)).collect()).expect("same shape");
        let g = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), g)
    }

    /// Spatial mean: `[d, h, w] → [d]` or `[n, d, h, w] → [n, d]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (batch, d, h, w, batched) = Self::image_batch(t.shape(), "global_average_pool")?;
        let spatial = h * w;
        let data = t
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let shape = if batched { vec![batch, d] } else { vec![d] };
        let out = Tensor::new(&shape, data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gap { x, spatial }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    /// Joins `[rows×left]` and `[rows×right]` into `[rows×(left+right)]`
    /// (rank-1 operands are single rows).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.rank() == tb.rank() && (ta.rank() == 1 || (ta.rank() == 2 && ta.shape()[0] == tb.shape()[0]));
        if !ok {
            return Err(Error::shape("concat", ta.shape(), tb.shape()));
        }
        let (rows, left) = row_split(ta.shape());
        let (_, right) = row_split(tb.shape());
        let mut data = Vec::with_capacity(rows * (left + right));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * left..(r + 1) * left]);
            data.extend_from_slice(&tb.data()[r * right..(r + 1) * right]);
        }
        let shape = if ta.rank() == 1 {
            vec![left + right]
        } else {
            vec![rows, left + right]
        };
        let out = Tensor::new(&shape, data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(
            out,
            Op::Concat {
                a,
                b,
                rows,
                left,
                right,
            },
            g,
        ))
    }

    /// Repeats every row `times` times consecutively:
    /// `[rows×cols] → [rows·times×cols]`; a rank-1 input is one row.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::geometry("repeat_rows", format!("expected rank 1 or 2, got {:?}", t.shape())));
        }
        let (rows, cols) = row_split(t.shape());
        let mut data = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[rows * times, cols], data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::RepeatRows { x, rows, cols, times }, g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::geometry("softmax", format!("expected rank 1 or 2, got {:?}", t.shape())));
        }
        let (_, cols) = row_split(t.shape());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, cols }, g))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilised by
    /// max-subtraction. `logits` is `[classes]` or `[rows×classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::geometry(
                "softmax_cross_entropy",
                format!("expected rank 1 or 2, got {:?}", t.shape()),
            ));
        }
        let (rows, cols) = row_split(t.shape());
        if labels.len() != rows {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            total += lse - row[label];
            for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let out = Tensor::scalar(total / rows as f64);
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                cols,
            },
            g,
        ))
    }

    /// Mean over rows of `Σ teacher·(ln teacher − ln student)` with
    /// `0·ln 0 := 0`. The teacher is a fixed target: no gradient reaches it.
    pub fn kl_divergence(&mut self, student_probs: Var, teacher_probs: &Tensor) -> Result<Var> {
        let s = self.value(student_probs);
        if s.shape() != teacher_probs.shape() {
            return Err(Error::shape("kl_divergence", s.shape(), teacher_probs.shape()));
        }
        if s.rank() == 0 || s.rank() > 2 {
            return Err(Error::geometry(
                "kl_divergence",
                format!("expected rank 1 or 2, got {:?}", s.shape()),
            ));
        }
        let (rows, cols) = row_split(s.shape());
        check_distributions(s.data(), cols, "student")?;
        check_distributions(teacher_probs.data(), cols, "teacher")?;
        let total: f64 = s
            .data()
            .iter()
            .zip(teacher_probs.data())
            .map(|(&q, &p)| if p > 0.0 { p * (p.ln() - q.ln()) } else { 0.0 })
            .sum();
        let out = Tensor::scalar(total / rows as f64);
        let g = self.any_grad(&[student_probs]);
        Ok(self.push(
            out,
            Op::Kl {
                student: student_probs,
                teacher: teacher_probs.data().to_vec(),
                rows,
            },
            g,
        ))
    }

    /// Squared Frobenius norm `‖x − target‖²` (element sum, not mean).
    pub fn mse_to_target(&mut self, x: Var, target: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(target));
        if tx.shape() != tt.shape() {
            return Err(Error::shape("mse_to_target", tx.shape(), tt.shape()));
        }
        let s = tx
            .data()
            .iter()
            .zip(tt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let g = self.any_grad(&[x, target]);
        Ok(self.push(Tensor::scalar(s), Op::SquaredDistance { x, target }, g))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every reachable
    /// `requires_grad` leaf holds `∂loss/∂leaf` (see [`Tape::grad`]); leaves
    /// the loss does not depend on keep `grad == None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            let node = &self.nodes[i];
            let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            let val = |v: Var| self.nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if wants(*b) {
                        out.push((*b, g.clone()));
                    }
                    out.push((*a, g));
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        out.push((*b, g.iter().map(|v| -v).collect()));
                    }
                    out.push((*a, g));
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                    }
                    if wants(*b) {
                        out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                    }
                }
                Op::Scale(a, c) => out.push((*a, g.iter().map(|v| v * c).collect())),
                Op::AddScalar(a) => out.push((*a, g)),
                Op::MatMul { a, b, m, n, p } => {
                    if wants(*a) {
                        let mut da = vec![0.0; m * n];
                        kernels::gemm_a_bt(&g, val(*b), &mut da, *m, *p, *n);
                        out.push((*a, da));
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; n * p];
                        kernels::gemm_at_b(val(*a), &g, &mut db, *n, *m, *p);
                        out.push((*b, db));
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    fan_in,
                    fan_out,
                } => {
                    if wants(*x) {
                        let mut dx = vec![0.0; rows * fan_in];
                        kernels::gemm_a_bt(&g, val(*w), &mut dx, *rows, *fan_out, *fan_in);
                        out.push((*x, dx));
                    }
                    if wants(*w) {
                        let mut dw = vec![0.0; fan_in * fan_out];
                        kernels::gemm_at_b(val(*x), &g, &mut dw, *fan_in, *rows, *fan_out);
                        out.push((*w, dw));
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; *fan_out];
                        for row in g.chunks(*fan_out) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        out.push((*b, db));
                    }
                }
                Op::Conv2d {
                    x,
                    k,
                    b,
                    batch,
                    c_out,
                    window,
                } => {
                    let r = kernels::conv2d_backward(
                        val(*x),
                        val(*k),
                        &g,
                        *batch,
                        *c_out,
                        window,
                        [wants(*x), wants(*k), wants(*b)],
                    );
                    push_some(&mut out, *x, r.input);
                    push_some(&mut out, *k, r.kernels);
                    push_some(&mut out, *b, r.bias);
                }
                Op::ConvTranspose {
                    x,
                    k,
                    b,
                    batch,
                    c_in,
                    window,
                } => {
                    let r = kernels::conv_transpose_backward(
                        val(*x),
                        val(*k),
                        &g,
                        *batch,
                        *c_in,
                        window,
                        [wants(*x), wants(*k), wants(*b)],
                    );
                    push_some(&mut out, *x, r.input);
                    push_some(&mut out, *k, r.kernels);
                    push_some(&mut out, *b, r.bias);
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
                Op::Sigmoid(x) => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    out.push((*x, dx));
                }
                Op::Gap { x, spatial } => {
                    let inv = 1.0 / *spatial as f64;
                    let dx = g.iter().flat_map(|v| std::iter::repeat_n(v * inv, *spatial)).collect();
                    out.push((*x, dx));
                }
                Op::Reshape(x) => out.push((*x, g)),
                Op::Concat {
                    a,
                    b,
                    rows,
                    left,
                    right,
                } => {
                    let width = left + right;
                    if wants(*a) {
                        let da = (0..*rows)
                            .flat_map(|r| g[r * width..r * width + left].iter().copied())
                            .collect();
                        out.push((*a, da));
                    }
                    if wants(*b) {
                        let db = (0..*rows)
                            .flat_map(|r| g[r * width + left..(r + 1) * width].iter().copied())
                            .collect();
                        out.push((*b, db));
                    }
                }
                Op::RepeatRows { x, rows, cols, times } => {
                    let mut dx = vec![0.0; rows * cols];
                    for (r, block) in g.chunks(cols * times).enumerate() {
                        let dst = &mut dx[r * cols..(r + 1) * cols];
                        for rep in block.chunks(*cols) {
                            dst.iter_mut().zip(rep).for_each(|(d, v)| *d += v);
                        }
                    }
                    out.push((*x, dx));
                }
                Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    out.push((*x, vec![g[0] / n as f64; n]));
                }
                Op::Softmax { x, cols } => {
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(*cols).zip(y.chunks(*cols)).zip(g.chunks(*cols)) {
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            dr[j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    out.push((*x, dx));
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    cols,
                } => {
                    let scale = g[0] / labels.len() as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * cols + l] -= scale;
                    }
                    out.push((*logits, dx));
                }
                Op::Kl { student, teacher, rows } => {
                    let scale = g[0] / *rows as f64;
                    let dx = teacher
                        .iter()
                        .zip(val(*student))
                        .map(|(&p, &q)| if p > 0.0 { -scale * p / q } else { 0.0 })
                        .collect();
                    out.push((*student, dx));
                }
                Op::SquaredDistance { x, target } => {
                    let diff: Vec<f64> = val(*x)
                        .iter()
                        .zip(val(*target))
                        .map(|(a, b)| 2.0 * g[0] * (a - b))
                        .collect();
                    if wants(*target) {
                        out.push((*target, diff.iter().map(|v| -v).collect()));
                    }
                    out.push((*x, diff));
                }
            }
            for (v, gv) in out {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }
}

fn push_some(out: &mut Vec<(Var, Vec<f64>)>, v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn check_distributions(data: &[f64], cols: usize, which: &'static str) -> Result<()> {
    for row in data.chunks(cols) {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(which));
        }
    }
    Ok(())
}
