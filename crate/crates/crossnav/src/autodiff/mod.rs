//! Minimal differentiable-computation substrate: dense f64 tensors, a
//! reverse-mode tape of forward ops, and a first-order optimizer. Sized for
//! networks of a few hundred thousand parameters on a single core.

mod store;
pub mod gradcheck;

pub use store::{
    load_checkpoint, save_checkpoint, Init, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {got:?}")]
    NotScalarLoss { got: Vec<usize> },
    #[error("backward: variable {var} is not on this tape (detached graph)")]
    DetachedGraph { var: usize },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("parameter {name:?}: checkpoint shape {got:?} does not match {expected:?}")]
    ParamShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// A dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "value count must equal the product of the shape"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a scalar (shape `[1]`) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(DiffError::BadShape { op, expected: "a 2-D tensor", got: self.shape.clone() }),
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Exp(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var },
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    ConcatCols(Vec<Var>),
    Concat1(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    Row { x: Var, i: usize },
    BroadcastRows { x: Var },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Transpose(Var),
    Reshape(Var),
    SmoothL1(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward operations eagerly; [`Tape::backward`] replays them in
/// reverse to accumulate parameter gradients.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op });
        }
        self.nodes.push(Node { value, op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Input)
    }

    /// Records a parameter leaf; gradients flow back into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.index_of(name)?;
        let t = store.value_at(idx).clone();
        self.push("param", t, Op::Param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (m, ka) = ta.rows_cols("matmul")?;
        let (kb, n) = tb.rows_cols("matmul")?;
        if ka != kb {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&ta.data, &tb.data, &mut out, m, ka, n);
        self.push("matmul", Tensor::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push("add", Tensor { shape, data }, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op: "sub",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push("sub", Tensor { shape, data }, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push("mul", Tensor { shape, data }, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push("scale", Tensor { shape, data }, Op::Scale(a, c))
    }

    /// Adds a 1-D bias over the last axis of a 2-D tensor.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, n) = ta.rows_cols("add_bias")?;
        if tb.shape != [n] {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(ta.data[i * n + j] + tb.data[j]);
            }
        }
        self.push("add_bias", Tensor::from_vec(&[m, n], data), Op::AddBias(a, b))
    }

    /// Adds a constant tensor (no gradient into the constant). Used for
    /// additive attention masks and action masks.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape != c.shape {
            return Err(DiffError::ShapeMismatch {
                op: "add_const",
                lhs: ta.shape.clone(),
                rhs: c.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        // Mask biases of -1e9 are deliberate; only reject NaN here so that
        // masked logits keep flowing (softmax restores finiteness).
        let t = Tensor { shape, data };
        if t.data.iter().any(|v| v.is_nan()) {
            return Err(DiffError::NonFinite { op: "add_const" });
        }
        self.nodes.push(Node { value: t, op: Op::AddConst(a) });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Multiplies by a constant tensor elementwise (no gradient into the
    /// constant). Used to zero features of invalid vehicle slots.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape != c.shape {
            return Err(DiffError::ShapeMismatch {
                op: "mul_const",
                lhs: ta.shape.clone(),
                rhs: c.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&c.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push("mul_const", Tensor { shape, data }, Op::MulConst(a, c.clone()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        self.push("relu", Tensor { shape, data }, Op::Relu(a))
    }

    /// Elementwise natural exponential.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x.exp()).collect();
        let shape = ta.shape.clone();
        self.push("exp", Tensor { shape, data }, Op::Exp(a))
    }

    /// Elementwise minimum of two equal-shape tensors. Gradient follows the
    /// smaller operand; ties route to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op: "minimum",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x.min(*y)).collect();
        let shape = ta.shape.clone();
        self.push("minimum", Tensor { shape, data }, Op::Minimum(a, b))
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is blocked outside
    /// the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        assert!(lo <= hi, "clamp bounds out of order");
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = tx.shape.clone();
        self.push("clamp", Tensor { shape, data }, Op::Clamp { x, lo, hi })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.rows_cols("layer_norm")?;
        let tg = &self.nodes[gain.0].value;
        let tb = &self.nodes[bias.0].value;
        if tg.shape != [n] || tb.shape != [n] {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                data.push((row[j] - mean) * inv * tg.data[j] + tb.data[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_vec(&[m, n], data),
            Op::LayerNorm { x, gain, bias },
        )
    }

    /// Softmax over the last axis (rows of a 2-D tensor, or a whole 1-D
    /// tensor). Numerically stabilized by max subtraction, so additive
    /// masks of -1e9/-1e8 yield exactly-zero probabilities.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, n) = match ta.shape.as_slice() {
            [n] => (1usize, *n),
            [m, n] => (*m, *n),
            _ => {
                return Err(DiffError::BadShape {
                    op: "softmax",
                    expected: "a 1-D or 2-D tensor",
                    got: ta.shape.clone(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let row = &ta.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let start = data.len();
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= sum;
            }
        }
        let shape = ta.shape.clone();
        self.push("softmax", Tensor { shape, data }, Op::SoftmaxLast(a))
    }

    /// Log-softmax over the last axis, computed as `x - max - ln(sum exp)`
    /// so heavily masked logits stay finite (-1e8 in, about -1e8 out).
    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, n) = match ta.shape.as_slice() {
            [n] => (1usize, *n),
            [m, n] => (*m, *n),
            _ => {
                return Err(DiffError::BadShape {
                    op: "log_softmax",
                    expected: "a 1-D or 2-D tensor",
                    got: ta.shape.clone(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let row = &ta.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            data.extend(row.iter().map(|v| v - lse));
        }
        let shape = ta.shape.clone();
        self.push("log_softmax", Tensor { shape, data }, Op::LogSoftmaxLast(a))
    }

    /// 3x3 2-D convolution with padding 1 over `[C_in, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let tb = &self.nodes[b.0].value;
        let (cin, h, wd) = match tx.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => {
                return Err(DiffError::BadShape {
                    op: "conv2d",
                    expected: "input of shape [C,H,W]",
                    got: tx.shape.clone(),
                })
            }
        };
        let (cout, wcin) = match tw.shape.as_slice() {
            [co, ci, 3, 3] => (*co, *ci),
            _ => {
                return Err(DiffError::BadShape {
                    op: "conv2d",
                    expected: "weights of shape [C_out,C_in,3,3]",
                    got: tw.shape.clone(),
                })
            }
        };
        if wcin != cin || tb.shape != [cout] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape.clone(),
                rhs: tw.shape.clone(),
            });
        }
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (wd + 2 - 3) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = tb.data[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += tx.data[(ci * h + iy as usize) * wd + ix as usize]
                                    * tw.data[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        self.push(
            "conv2d",
            Tensor::from_vec(&[cout, oh, ow], out),
            Op::Conv2d { x, w, b, stride },
        )
    }

    /// 2x2 max-pooling with stride 2 over `[C, H, W]` (H, W even).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (c, h, w) = match tx.shape.as_slice() {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => (*c, *h, *w),
            _ => {
                return Err(DiffError::BadShape {
                    op: "max_pool2",
                    expected: "input of shape [C,H,W] with even H and W",
                    got: tx.shape.clone(),
                })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let idx = (ci * h + oy * 2 + ky) * w + ox * 2 + kx;
                            if tx.data[idx] > best {
                                best = tx.data[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = best;
                    argmax[(ci * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
        self.push(
            "max_pool2",
            Tensor::from_vec(&[c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
        )
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows_cols("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.nodes[p.0].value.rows_cols("concat_cols")?;
            if pm != m {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape.clone(),
                    rhs: self.nodes[p.0].value.shape.clone(),
                });
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let n = t.shape[1];
                data.extend_from_slice(&t.data[i * n..(i + 1) * n]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_vec(&[m, total], data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Concatenates 1-D tensors.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 1 {
                return Err(DiffError::BadShape {
                    op: "concat1",
                    expected: "1-D tensors",
                    got: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len();
        self.push("concat1", Tensor::from_vec(&[n], data), Op::Concat1(parts.to_vec()))
    }

    /// Stacks equal-length 1-D tensors as the rows of a 2-D tensor.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.len();
        let mut data = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 1 || t.len() != n {
                return Err(DiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.nodes[parts[0].0].value.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        self.push(
            "stack_rows",
            Tensor::from_vec(&[parts.len(), n], data),
            Op::StackRows(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.rows_cols("slice_cols")?;
        if start + len > n {
            return Err(DiffError::BadShape {
                op: "slice_cols",
                expected: "column range within bounds",
                got: tx.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data[i * n + start..i * n + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::from_vec(&[m, len], data),
            Op::SliceCols { x, start, len },
        )
    }

    /// Extracts row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.rows_cols("row")?;
        if i >= m {
            return Err(DiffError::BadShape {
                op: "row",
                expected: "row index within bounds",
                got: tx.shape.clone(),
            });
        }
        let data = tx.data[i * n..(i + 1) * n].to_vec();
        self.push("row", Tensor::from_vec(&[n], data), Op::Row { x, i })
    }

    /// Repeats a 1-D tensor as `rows` identical rows.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 1 {
            return Err(DiffError::BadShape {
                op: "broadcast_rows",
                expected: "a 1-D tensor",
                got: tx.shape.clone(),
            });
        }
        let n = tx.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&tx.data);
        }
        self.push(
            "broadcast_rows",
            Tensor::from_vec(&[rows, n], data),
            Op::BroadcastRows { x },
        )
    }

    /// Mean across rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.rows_cols("mean_rows")?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += tx.data[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        self.push("mean_rows", Tensor::from_vec(&[n], data), Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.rows_cols("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_vec(&[n, m], data), Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != tx.len() {
            return Err(DiffError::BadShape {
                op: "reshape",
                expected: "a shape with matching element count",
                got: shape.to_vec(),
            });
        }
        let t = Tensor::from_vec(shape, tx.data.clone());
        self.push("reshape", t, Op::Reshape(x))
    }

    /// Elementwise smooth-L1: `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`,
    /// with `d = a - b`.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(DiffError::ShapeMismatch {
                op: "smooth_l1",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| {
                let d = x - y;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .collect();
        let shape = ta.shape.clone();
        self.push("smooth_l1", Tensor { shape, data }, Op::SmoothL1(a, b))
    }

    /// Fully-connected layer: accepts a 1-D `[in]` or 2-D `[m, in]` input
    /// against weights `[in, out]` and bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let one_d = self.nodes[x.0].value.shape.len() == 1;
        let x2 = if one_d {
            let n = self.nodes[x.0].value.len();
            self.reshape(x, &[1, n])?
        } else {
            x
        };
        let y = self.matmul(x2, w)?;
        let y = self.add_bias(y, b)?;
        if one_d {
            let n = self.nodes[y.0].value.shape[1];
            self.reshape(y, &[n])
        } else {
            Ok(y)
        }
    }

    /// Scaled-dot-product attention. `q`: `[T_q, d]`, `k`/`v`: `[T_k, d]`,
    /// split into `heads` equal slices of the feature axis. `key_mask`, if
    /// given, adds a large negative bias to masked key columns before the
    /// softmax (true = keep, false = mask).
    pub fn sdpa(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, d) = self.nodes[q.0].value.rows_cols("sdpa")?;
        let (tk, dk) = self.nodes[k.0].value.rows_cols("sdpa")?;
        if d != dk || d % heads != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "sdpa",
                lhs: self.nodes[q.0].value.shape.clone(),
                rhs: self.nodes[k.0].value.shape.clone(),
            });
        }
        let mask_bias = key_mask.map(|mask| {
            assert_eq!(mask.len(), tk, "key mask length must match key count");
            let mut m = Tensor::zeros(&[tq, tk]);
            for i in 0..tq {
                for (j, &keep) in mask.iter().enumerate() {
                    if !keep {
                        m.data[i * tk + j] = crate::consts::ATTN_MASK;
                    }
                }
            }
            m
        });
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale)?;
            let scores = match &mask_bias {
                Some(m) => self.add_const(scores, m)?,
                None => scores,
            };
            let attn = self.softmax_last(scores)?;
            outs.push(self.matmul(attn, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Reverse-mode sweep from a scalar loss. Parameter gradients accumulate
    /// into `store`; input/intermediate gradients stay queryable via
    /// [`Tape::grad`]. `seed` scales the whole sweep (1.0 for plain losses).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore, seed: f64) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::DetachedGraph { var: loss.0 });
        }
        if self.nodes[loss.0].value.shape != [1] {
            return Err(DiffError::NotScalarLoss {
                got: self.nodes[loss.0].value.shape.clone(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(seed));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g, store)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor, store: &mut ParamStore) -> Result<()> {
        // Split borrows: values read from nodes, grads written via accum.
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(idx) => store.accumulate_grad(*idx, &g.data),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                let mut da = vec![0.0; m * k];
                matmul_nt(&g.data, &tb.data, &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn(&ta.data, &g.data, &mut db, m, k, n);
                self.accum(a, Tensor::from_vec(&[m, k], da));
                self.accum(b, Tensor::from_vec(&[k, n], db));
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                };
                self.accum(b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(gv, bv)| gv * bv)
                        .collect(),
                };
                let db = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gv, av)| gv * av)
                        .collect(),
                };
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| v * c).collect(),
                };
                self.accum(a, da);
            }
            Op::AddBias(a, b) => {
                let (a, b) = (*a, *b);
                let (m, n) = (g.shape[0], g.shape[1]);
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.data[i * n + j];
                    }
                }
                self.accum(a, g.clone());
                self.accum(b, Tensor::from_vec(&[n], db));
            }
            Op::AddConst(a) => {
                let a = *a;
                self.accum(a, g.clone());
            }
            Op::MulConst(a, c) => {
                let a = *a;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&c.data).map(|(gv, cv)| gv * cv).collect(),
                };
                self.accum(a, da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                };
                self.accum(a, da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&self.nodes[i].value.data).map(|(gv, yv)| gv * yv).collect(),
                };
                self.accum(a, da);
            }
            Op::Minimum(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for (j, gv) in g.data.iter().enumerate() {
                    if ta.data[j] <= tb.data[j] {
                        da[j] = *gv;
                    } else {
                        db[j] = *gv;
                    }
                }
                let shape = g.shape.clone();
                self.accum(a, Tensor { shape: shape.clone(), data: da });
                self.accum(b, Tensor { shape, data: db });
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.nodes[x.0].value.data)
                        .map(|(gv, xv)| if *xv > lo && *xv < hi { *gv } else { 0.0 })
                        .collect(),
                };
                self.accum(x, da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gain.0].value;
                let (m, n) = (tx.shape[0], tx.shape[1]);
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &tx.data[i * n..(i + 1) * n];
                    let grow = &g.data[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // dy/dxhat = gain; standard layer-norm backward.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * tg.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * tg.data[j];
                        dx[i * n + j] = inv / n as f64
                            * (n as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                self.accum(x, Tensor::from_vec(&[m, n], dx));
                self.accum(gain, Tensor::from_vec(&[n], dgain));
                self.accum(bias, Tensor::from_vec(&[n], dbias));
            }
            Op::SoftmaxLast(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let n = *y.shape.last().unwrap();
                let rows = y.len() / n;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y.data[r * n..(r + 1) * n];
                    let gr = &g.data[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(a, Tensor { shape: y.shape.clone(), data: dx });
            }
            Op::LogSoftmaxLast(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let n = *y.shape.last().unwrap();
                let rows = y.len() / n;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y.data[r * n..(r + 1) * n];
                    let gr = &g.data[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accum(a, Tensor { shape: y.shape.clone(), data: dx });
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (cin, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (cout, oh, ow) = (g.shape[0], g.shape[1], g.shape[2]);
                let mut dx = vec![0.0; tx.len()];
                let mut dw = vec![0.0; tw.len()];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data[(co * oh + oy) * ow + ox];
                            db[co] += gv;
                            for ci in 0..cin {
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * wd + ix as usize;
                                        let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                        dx[xi] += gv * tw.data[wi];
                                        dw[wi] += gv * tx.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let (sx, sw) = (tx.shape.clone(), tw.shape.clone());
                self.accum(x, Tensor::from_vec(&sx, dx));
                self.accum(w, Tensor::from_vec(&sw, dw));
                self.accum(b, Tensor::from_vec(&[cout], db));
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let tx_len = self.nodes[x.0].value.len();
                let shape = self.nodes[x.0].value.shape.clone();
                let mut dx = vec![0.0; tx_len];
                for (gv, &src) in g.data.iter().zip(&argmax) {
                    dx[src as usize] += gv;
                }
                self.accum(x, Tensor::from_vec(&shape, dx));
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let m = g.shape[0];
                let mut col = 0;
                for p in parts {
                    let (pm, pn) = {
                        let t = &self.nodes[p.0].value;
                        (t.shape[0], t.shape[1])
                    };
                    debug_assert_eq!(pm, m);
                    let total = g.shape[1];
                    let mut dp = Vec::with_capacity(pm * pn);
                    for i in 0..m {
                        dp.extend_from_slice(&g.data[i * total + col..i * total + col + pn]);
                    }
                    self.accum(p, Tensor::from_vec(&[pm, pn], dp));
                    col += pn;
                }
            }
            Op::Concat1(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let dp = g.data[off..off + n].to_vec();
                    self.accum(p, Tensor::from_vec(&[n], dp));
                    off += n;
                }
            }
            Op::StackRows(parts) => {
                let parts = parts.clone();
                let n = g.shape[1];
                for (r, p) in parts.into_iter().enumerate() {
                    let dp = g.data[r * n..(r + 1) * n].to_vec();
                    self.accum(p, Tensor::from_vec(&[n], dp));
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (m, n) = {
                    let t = &self.nodes[x.0].value;
                    (t.shape[0], t.shape[1])
                };
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..len {
                        dx[i * n + start + j] = g.data[i * len + j];
                    }
                }
                self.accum(x, Tensor::from_vec(&[m, n], dx));
            }
            Op::Row { x, i: ri } => {
                let (x, ri) = (*x, *ri);
                let (m, n) = {
                    let t = &self.nodes[x.0].value;
                    (t.shape[0], t.shape[1])
                };
                let mut dx = vec![0.0; m * n];
                dx[ri * n..(ri + 1) * n].copy_from_slice(&g.data);
                self.accum(x, Tensor::from_vec(&[m, n], dx));
            }
            Op::BroadcastRows { x } => {
                let x = *x;
                let (m, n) = (g.shape[0], g.shape[1]);
                let mut dx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j] += g.data[i * n + j];
                    }
                }
                self.accum(x, Tensor::from_vec(&[n], dx));
            }
            Op::MeanRows(x) => {
                let x = *x;
                let (m, n) = {
                    let t = &self.nodes[x.0].value;
                    (t.shape[0], t.shape[1])
                };
                let inv = 1.0 / m as f64;
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(g.data.iter().map(|v| v * inv));
                }
                self.accum(x, Tensor::from_vec(&[m, n], dx));
            }
            Op::SumAll(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape.clone();
                let len = self.nodes[x.0].value.len();
                let dx = vec![g.data[0]; len];
                self.accum(x, Tensor::from_vec(&shape, dx));
            }
            Op::MeanAll(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape.clone();
                let len = self.nodes[x.0].value.len();
                let dx = vec![g.data[0] / len as f64; len];
                self.accum(x, Tensor::from_vec(&shape, dx));
            }
            Op::Transpose(x) => {
                let x = *x;
                let (n, m) = (g.shape[0], g.shape[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = g.data[i * m + j];
                    }
                }
                self.accum(x, Tensor::from_vec(&[m, n], dx));
            }
            Op::Reshape(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape.clone();
                self.accum(x, Tensor::from_vec(&shape, g.data.clone()));
            }
            Op::SmoothL1(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].value.data)
                    .zip(&g.data)
                    .map(|((x, y), gv)| gv * (x - y).clamp(-1.0, 1.0))
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                let shape = g.shape.clone();
                self.accum(a, Tensor { shape: shape.clone(), data: da });
                self.accum(b, Tensor { shape, data: db });
            }
        }
        Ok(())
    }
}

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] * B^T where B is [k,n]
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * k + j] += acc;
        }
    }
}

/// C[k,n] += A^T * B where A is [m,k], B is [m,n]
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for row in 0..m {
        let brow = &b[row * n..(row + 1) * n];
        for i in 0..k {
            let av = a[row * k + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
