//! Dense 64-bit tensors with a reverse-mode gradient tape.
//!
//! [`Tensor`] is plain storage (shape + row-major data). All differentiable
//! math runs on a [`Tape`]: every operation appends a node recording its
//! parents, and [`Value::backward`] walks the tape in reverse to accumulate
//! gradients. Tapes are built fresh for each forward/backward pass and are
//! single-threaded by construction.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("attention row {row} has every key hard-blocked")]
    AllKeysBlocked { row: usize },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("values belong to different tapes")]
    TapeMismatch,
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Accumulate `g` into the tracked gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Row-broadcast: `[r,c] + [1,c]`.
    AddRow(usize, usize),
    Scale(usize, f64),
    /// Elementwise multiply by a `[1,1]` node.
    MulScalar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        idx: Rc<Vec<usize>>,
    },
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// Softmax over unblocked keys, multiplied by `mult` and renormalized.
    MaskedSoftmax {
        scores: usize,
        allowed: Rc<Vec<bool>>,
        mult: usize,
    },
    L2NormRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<usize>>,
    },
    Mse(usize, usize),
    /// Ones-filled constant with a gradient-carrying block pasted at (r0, c0).
    PasteBlock {
        block: usize,
        r0: usize,
        c0: usize,
    },
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape for one forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, data: Vec<f64>, rows: usize, cols: usize, op: Op) -> Value {
        debug_assert_eq!(data.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let grad = vec![0.0; data.len()];
        inner.nodes.push(Node {
            data,
            rows,
            cols,
            grad,
            op,
        });
        Value {
            tape: self.clone(),
            id,
        }
    }

    /// Leaf from tensor contents. Gradients accumulate on the tape node and
    /// can be read back with [`Value::grad`].
    pub fn leaf(&self, t: &Tensor) -> Result<Value> {
        let (rows, cols) = as_2d(&t.shape)?;
        Ok(self.push(t.data.clone(), rows, cols, Op::Leaf))
    }

    pub fn leaf_from(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Value> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: vec![rows, cols],
            });
        }
        Ok(self.push(data, rows, cols, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Value {
        self.push(vec![v], 1, 1, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn as_2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(TensorError::Invalid {
            what: "tape shape",
            why: format!("tape values are 2-d, got {shape:?}"),
        }),
    }
}

impl Value {
    pub fn rows(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].rows
    }

    pub fn cols(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        (n.rows, n.cols)
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        debug_assert_eq!(n.data.len(), 1);
        n.data[0]
    }

    fn same_tape(&self, other: &Value) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn binary_elementwise(
        &self,
        other: &Value,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Value> {
        self.same_tape(other)?;
        let (r, c) = self.shape();
        let (r2, c2) = other.shape();
        if (r, c) != (r2, c2) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: vec![r, c],
                rhs: vec![r2, c2],
            });
        }
        let inner = self.tape.inner.borrow();
        let data: Vec<f64> = inner.nodes[self.id]
            .data
            .iter()
            .zip(&inner.nodes[other.id].data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        drop(inner);
        Ok(self.tape.push(data, r, c, op(self.id, other.id)))
    }

    pub fn add(&self, other: &Value) -> Result<Value> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Value) -> Result<Value> {
        self.binary_elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Value) -> Result<Value> {
        self.binary_elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// `[r,c] + [1,c]` broadcast over rows.
    pub fn add_row(&self, bias: &Value) -> Result<Value> {
        self.same_tape(bias)?;
        let (r, c) = self.shape();
        let (br, bc) = bias.shape();
        if br != 1 || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![br, bc],
            });
        }
        let inner = self.tape.inner.borrow();
        let b = &inner.nodes[bias.id].data;
        let mut data = inner.nodes[self.id].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        drop(inner);
        Ok(self.tape.push(data, r, c, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(&self, k: f64) -> Value {
        let (r, c) = self.shape();
        let data: Vec<f64> = self.tape.inner.borrow().nodes[self.id]
            .data
            .iter()
            .map(|&v| v * k)
            .collect();
        self.tape.push(data, r, c, Op::Scale(self.id, k))
    }

    /// Elementwise multiply by a scalar node (e.g. a learnable coefficient).
    pub fn mul_scalar(&self, s: &Value) -> Result<Value> {
        self.same_tape(s)?;
        let (sr, sc) = s.shape();
        if (sr, sc) != (1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar",
                lhs: vec![self.rows(), self.cols()],
                rhs: vec![sr, sc],
            });
        }
        let (r, c) = self.shape();
        let inner = self.tape.inner.borrow();
        let k = inner.nodes[s.id].data[0];
        let data: Vec<f64> = inner.nodes[self.id].data.iter().map(|&v| v * k).collect();
        drop(inner);
        Ok(self.tape.push(data, r, c, Op::MulScalar(self.id, s.id)))
    }

    pub fn matmul(&self, other: &Value) -> Result<Value> {
        self.same_tape(other)?;
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let inner = self.tape.inner.borrow();
        let data = matmul_2d(
            &inner.nodes[self.id].data,
            &inner.nodes[other.id].data,
            m,
            k,
            n,
        );
        drop(inner);
        Ok(self.tape.push(data, m, n, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Value {
        let (r, c) = self.shape();
        let inner = self.tape.inner.borrow();
        let src = &inner.nodes[self.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(inner);
        self.tape.push(data, c, r, Op::Transpose(self.id))
    }

    /// Same row-major data under a new `[rows, cols]` shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Value> {
        let (r, c) = self.shape();
        if rows * cols != r * c {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: vec![r, c],
                rhs: vec![rows, cols],
            });
        }
        let data = self.tape.inner.borrow().nodes[self.id].data.clone();
        Ok(self.tape.push(data, rows, cols, Op::Reshape(self.id)))
    }

    pub fn concat_rows(parts: &[Value]) -> Result<Value> {
        let first = parts.first().ok_or(TensorError::Invalid {
            what: "concat_rows",
            why: "no inputs".into(),
        })?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_tape(p)?;
            let (pr, pc) = p.shape();
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            data.extend_from_slice(&first.tape.inner.borrow().nodes[p.id].data);
            rows += pr;
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(data, rows, c, Op::ConcatRows(ids)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Value> {
        let (r, c) = self.shape();
        if start + len > r {
            return Err(TensorError::Invalid {
                what: "slice_rows",
                why: format!("{start}..{} out of {r} rows", start + len),
            });
        }
        let data =
            self.tape.inner.borrow().nodes[self.id].data[start * c..(start + len) * c].to_vec();
        Ok(self
            .tape
            .push(data, len, c, Op::SliceRows { src: self.id, start }))
    }

    pub fn concat_cols(parts: &[Value]) -> Result<Value> {
        let first = parts.first().ok_or(TensorError::Invalid {
            what: "concat_cols",
            why: "no inputs".into(),
        })?;
        let r = first.rows();
        let mut cols = 0;
        for p in parts {
            first.same_tape(p)?;
            let (pr, pc) = p.shape();
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r, cols],
                    rhs: vec![pr, pc],
                });
            }
            cols += pc;
        }
        let mut data = vec![0.0; r * cols];
        {
            let inner = first.tape.inner.borrow();
            let mut at = 0;
            for p in parts {
                let n = &inner.nodes[p.id];
                for i in 0..r {
                    data[i * cols + at..i * cols + at + n.cols]
                        .copy_from_slice(&n.data[i * n.cols..(i + 1) * n.cols]);
                }
                at += n.cols;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(data, r, cols, Op::ConcatCols(ids)))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Value> {
        let (r, c) = self.shape();
        if start + len > c {
            return Err(TensorError::Invalid {
                what: "slice_cols",
                why: format!("{start}..{} out of {c} cols", start + len),
            });
        }
        let inner = self.tape.inner.borrow();
        let src = &inner.nodes[self.id].data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        drop(inner);
        Ok(self
            .tape
            .push(data, r, len, Op::SliceCols { src: self.id, start }))
    }

    /// Embedding lookup: row `i` of the output is `table[idx[i]]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Value> {
        let (r, c) = self.shape();
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid {
                    what: "gather_rows",
                    why: format!("index {i} out of {r} rows"),
                });
            }
        }
        let inner = self.tape.inner.borrow();
        let src = &inner.nodes[self.id].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        drop(inner);
        Ok(self.tape.push(
            data,
            idx.len(),
            c,
            Op::GatherRows {
                table: self.id,
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    /// Mean over rows, producing `[1, c]`.
    pub fn mean_rows(&self) -> Value {
        let (r, c) = self.shape();
        let inner = self.tape.inner.borrow();
        let src = &inner.nodes[self.id].data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        drop(inner);
        self.tape.push(data, 1, c, Op::MeanRows(self.id))
    }

    pub fn sum_all(&self) -> Value {
        let s: f64 = self.tape.inner.borrow().nodes[self.id].data.iter().sum();
        self.tape.push(vec![s], 1, 1, Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Value {
        let inner = self.tape.inner.borrow();
        let d = &inner.nodes[self.id].data;
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        drop(inner);
        self.tape.push(vec![s], 1, 1, Op::MeanAll(self.id))
    }

    pub fn gelu(&self) -> Value {
        let (r, c) = self.shape();
        let data: Vec<f64> = self.tape.inner.borrow().nodes[self.id]
            .data
            .iter()
            .map(|&x| gelu_fwd(x))
            .collect();
        self.tape.push(data, r, c, Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Value {
        let (r, c) = self.shape();
        let data: Vec<f64> = self.tape.inner.borrow().nodes[self.id]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.tape.push(data, r, c, Op::Sigmoid(self.id))
    }

    /// Row-wise layer normalization with affine parameters `[1, c]`.
    pub fn layer_norm(&self, gamma: &Value, beta: &Value, eps: f64) -> Result<Value> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (r, c) = self.shape();
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            let (pr, pc) = p.shape();
            if pr != 1 || pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: vec![r, c],
                    rhs: vec![pr, pc],
                });
            }
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let g = &inner.nodes[gamma.id].data;
        let b = &inner.nodes[beta.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        drop(inner);
        Ok(self.tape.push(
            data,
            r,
            c,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    /// Row softmax over keys where `allowed` is true; the result is then
    /// multiplied elementwise by `mult` and renormalized per row.
    ///
    /// Hard-blocked keys get exactly zero weight. A row with every key
    /// blocked is a contract violation.
    pub fn masked_softmax(&self, allowed: &Rc<Vec<bool>>, mult: &Value) -> Result<Value> {
        self.same_tape(mult)?;
        let (r, c) = self.shape();
        if allowed.len() != r * c {
            return Err(TensorError::LengthMismatch {
                len: allowed.len(),
                shape: vec![r, c],
            });
        }
        let (mr, mc) = mult.shape();
        if (mr, mc) != (r, c) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: vec![r, c],
                rhs: vec![mr, mc],
            });
        }
        let inner = self.tape.inner.borrow();
        let s = &inner.nodes[self.id].data;
        let m = &inner.nodes[mult.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &s[i * c..(i + 1) * c];
            let open = &allowed[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if open[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::AllKeysBlocked { row: i });
            }
            let mut z = 0.0;
            for j in 0..c {
                if open[j] {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    z += e;
                }
            }
            // p = softmax over open keys; u = p * mult; q = u / sum(u).
            let mut u_sum = 0.0;
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / z * m[i * c + j];
                u_sum += data[i * c + j];
            }
            for j in 0..c {
                data[i * c + j] /= u_sum;
            }
        }
        drop(inner);
        Ok(self.tape.push(
            data,
            r,
            c,
            Op::MaskedSoftmax {
                scores: self.id,
                allowed: Rc::clone(allowed),
                mult: mult.id,
            },
        ))
    }

    /// Normalize each row to unit Euclidean length.
    pub fn l2_normalize_rows(&self) -> Result<Value> {
        let (r, c) = self.shape();
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(TensorError::ZeroNorm { row: i });
            }
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        drop(inner);
        Ok(self.tape.push(data, r, c, Op::L2NormRows(self.id)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Value> {
        let (r, c) = self.shape();
        if targets.len() != r {
            return Err(TensorError::LengthMismatch {
                len: targets.len(),
                shape: vec![r],
            });
        }
        for &t in targets {
            if t >= c {
                return Err(TensorError::ClassOutOfRange { index: t, classes: c });
            }
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].data;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
        }
        loss /= r as f64;
        drop(inner);
        Ok(self.tape.push(
            vec![loss],
            1,
            1,
            Op::CrossEntropy {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
            },
        ))
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&self, target: &Value) -> Result<Value> {
        self.same_tape(target)?;
        let (r, c) = self.shape();
        let (tr, tc) = target.shape();
        if (r, c) != (tr, tc) {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: vec![r, c],
                rhs: vec![tr, tc],
            });
        }
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].data;
        let b = &inner.nodes[target.id].data;
        let n = a.len() as f64;
        let loss = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        drop(inner);
        Ok(self
            .tape
            .push(vec![loss], 1, 1, Op::Mse(self.id, target.id)))
    }

    /// Ones matrix of `[rows, cols]` with this value pasted at `(r0, c0)`.
    /// Gradients flow only into the pasted block.
    pub fn paste_into_ones(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> Result<Value> {
        let (br, bc) = self.shape();
        if r0 + br > rows || c0 + bc > cols {
            return Err(TensorError::Invalid {
                what: "paste_into_ones",
                why: format!("block {br}x{bc} at ({r0},{c0}) exceeds {rows}x{cols}"),
            });
        }
        let inner = self.tape.inner.borrow();
        let b = &inner.nodes[self.id].data;
        let mut data = vec![1.0; rows * cols];
        for i in 0..br {
            for j in 0..bc {
                data[(r0 + i) * cols + c0 + j] = b[i * bc + j];
            }
        }
        drop(inner);
        Ok(self.tape.push(
            data,
            rows,
            cols,
            Op::PasteBlock {
                block: self.id,
                r0,
                c0,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// reachable node; repeated calls without a fresh tape keep accumulating.
    pub fn backward(&self) -> Result<()> {
        let (r, c) = self.shape();
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss(vec![r, c]));
        }
        let mut inner = self.tape.inner.borrow_mut();
        // Propagate through a per-call buffer so each call contributes
        // exactly one unit of d(loss)/d(node) to the stored grads.
        let mut deltas: Vec<Vec<f64>> = inner
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        deltas[self.id][0] = 1.0;
        for i in (0..=self.id).rev() {
            backward_node(&inner.nodes, &mut deltas, i);
        }
        for (node, delta) in inner.nodes.iter_mut().zip(&deltas) {
            axpy(&mut node.grad, delta, 1.0);
        }
        Ok(())
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797884560802865; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797884560802865;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Push node `i`'s delta onto its parents' deltas.
fn backward_node(nodes: &[Node], deltas: &mut [Vec<f64>], i: usize) {
    let node = &nodes[i];
    let grad = std::mem::take(&mut deltas[i]);
    let (rows, cols) = (node.rows, node.cols);
    let out_data = &node.data;

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            axpy(&mut deltas[*a], &grad, 1.0);
            axpy(&mut deltas[*b], &grad, 1.0);
        }
        Op::Sub(a, b) => {
            axpy(&mut deltas[*a], &grad, 1.0);
            axpy(&mut deltas[*b], &grad, -1.0);
        }
        Op::Mul(a, b) => {
            for idx in 0..grad.len() {
                deltas[*a][idx] += grad[idx] * nodes[*b].data[idx];
            }
            for idx in 0..grad.len() {
                deltas[*b][idx] += grad[idx] * nodes[*a].data[idx];
            }
        }
        Op::AddRow(a, b) => {
            axpy(&mut deltas[*a], &grad, 1.0);
            let bg = &mut deltas[*b];
            for i in 0..rows {
                for j in 0..cols {
                    bg[j] += grad[i * cols + j];
                }
            }
        }
        Op::Scale(a, k) => {
            axpy(&mut deltas[*a], &grad, *k);
        }
        Op::MulScalar(a, s) => {
            let k = nodes[*s].data[0];
            let mut ds = 0.0;
            for idx in 0..grad.len() {
                ds += grad[idx] * nodes[*a].data[idx];
                deltas[*a][idx] += grad[idx] * k;
            }
            deltas[*s][0] += ds;
        }
        Op::MatMul(a, b) => {
            let m = nodes[*a].rows;
            let k = nodes[*a].cols;
            let n = nodes[*b].cols;
            // dA = dC @ B^T
            let bt = transpose_2d(&nodes[*b].data, k, n);
            let da = matmul_2d(&grad, &bt, m, n, k);
            axpy(&mut deltas[*a], &da, 1.0);
            // dB = A^T @ dC
            let at = transpose_2d(&nodes[*a].data, m, k);
            let db = matmul_2d(&at, &grad, k, m, n);
            axpy(&mut deltas[*b], &db, 1.0);
        }
        Op::Transpose(a) => {
            let dg = transpose_2d(&grad, rows, cols);
            axpy(&mut deltas[*a], &dg, 1.0);
        }
        Op::Reshape(a) => {
            axpy(&mut deltas[*a], &grad, 1.0);
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for &p in parts {
                let len = nodes[p].rows * nodes[p].cols;
                axpy(&mut deltas[p], &grad[at..at + len], 1.0);
                at += len;
            }
        }
        Op::SliceRows { src, start } => {
            let c = nodes[*src].cols;
            let sg = &mut deltas[*src];
            for (idx, &g) in grad.iter().enumerate() {
                sg[start * c + idx] += g;
            }
        }
        Op::ConcatCols(parts) => {
            let mut at = 0;
            for &p in parts {
                let pc = nodes[p].cols;
                let pg = &mut deltas[p];
                for i in 0..rows {
                    for j in 0..pc {
                        pg[i * pc + j] += grad[i * cols + at + j];
                    }
                }
                at += pc;
            }
        }
        Op::SliceCols { src, start } => {
            let sc = nodes[*src].cols;
            let sg = &mut deltas[*src];
            for i in 0..rows {
                for j in 0..cols {
                    sg[i * sc + start + j] += grad[i * cols + j];
                }
            }
        }
        Op::GatherRows { table, idx } => {
            let tg = &mut deltas[*table];
            for (out_row, &src_row) in idx.iter().enumerate() {
                for j in 0..cols {
                    tg[src_row * cols + j] += grad[out_row * cols + j];
                }
            }
        }
        Op::MeanRows(a) => {
            let r = nodes[*a].rows;
            let ag = &mut deltas[*a];
            for i in 0..r {
                for j in 0..cols {
                    ag[i * cols + j] += grad[j] / r as f64;
                }
            }
        }
        Op::SumAll(a) => {
            let g = grad[0];
            for v in deltas[*a].iter_mut() {
                *v += g;
            }
        }
        Op::MeanAll(a) => {
            let g = grad[0] / nodes[*a].data.len() as f64;
            for v in deltas[*a].iter_mut() {
                *v += g;
            }
        }
        Op::Gelu(a) => {
            let x = &nodes[*a].data;
            let ag = &mut deltas[*a];
            for idx in 0..grad.len() {
                ag[idx] += grad[idx] * gelu_bwd(x[idx]);
            }
        }
        Op::Sigmoid(a) => {
            let ag = &mut deltas[*a];
            for idx in 0..grad.len() {
                let s = out_data[idx];
                ag[idx] += grad[idx] * s * (1.0 - s);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let c = cols;
            let xs = &nodes[*x].data;
            let gs = &nodes[*gamma].data;
            for i in 0..rows {
                let row = &xs[i * c..(i + 1) * c];
                let g_out = &grad[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                let dxhat: Vec<f64> = g_out.iter().zip(gs).map(|(&g, &w)| g * w).collect();
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                let cf = c as f64;
                for j in 0..c {
                    deltas[*x][i * c + j] +=
                        inv / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    deltas[*gamma][j] += g_out[j] * xhat[j];
                    deltas[*beta][j] += g_out[j];
                }
            }
        }
        Op::MaskedSoftmax {
            scores,
            allowed,
            mult,
        } => {
            // q = u / Z with u = p * m, p = softmax(s) over open keys.
            let c = cols;
            let s_data = &nodes[*scores].data;
            let m_data = &nodes[*mult].data;
            for i in 0..rows {
                let open = &allowed[i * c..(i + 1) * c];
                let row = &s_data[i * c..(i + 1) * c];
                let mut max = f64::NEG_INFINITY;
                for j in 0..c {
                    if open[j] && row[j] > max {
                        max = row[j];
                    }
                }
                let mut p = vec![0.0; c];
                let mut z = 0.0;
                for j in 0..c {
                    if open[j] {
                        p[j] = (row[j] - max).exp();
                        z += p[j];
                    }
                }
                for v in &mut p {
                    *v /= z;
                }
                let u_sum: f64 = (0..c).map(|j| p[j] * m_data[i * c + j]).sum();
                let q = &out_data[i * c..(i + 1) * c];
                let g_out = &grad[i * c..(i + 1) * c];
                let dot_gq: f64 = g_out.iter().zip(q).map(|(&a, &b)| a * b).sum();
                // dL/du_j = (g_j - dot(g, q)) / u_sum
                let du: Vec<f64> = g_out.iter().map(|&g| (g - dot_gq) / u_sum).collect();
                // dL/dm_j = du_j * p_j ; dL/dp_j = du_j * m_j
                let dp: Vec<f64> = (0..c).map(|j| du[j] * m_data[i * c + j]).collect();
                let dot_dpp: f64 = dp.iter().zip(&p).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    deltas[*mult][i * c + j] += du[j] * p[j];
                    if open[j] {
                        deltas[*scores][i * c + j] += p[j] * (dp[j] - dot_dpp);
                    }
                }
            }
        }
        Op::L2NormRows(a) => {
            let c = cols;
            let xs = &nodes[*a].data;
            for i in 0..rows {
                let row = &xs[i * c..(i + 1) * c];
                let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                let y = &out_data[i * c..(i + 1) * c];
                let g_out = &grad[i * c..(i + 1) * c];
                let dot: f64 = g_out.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    deltas[*a][i * c + j] += (g_out[j] - dot * y[j]) / norm;
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let c = nodes[*logits].cols;
            let r = nodes[*logits].rows;
            let g = grad[0] / r as f64;
            let xs = &nodes[*logits].data;
            for (i, &t) in targets.iter().enumerate() {
                let row = &xs[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                for j in 0..c {
                    let p = (row[j] - max).exp() / z;
                    let ind = if j == t { 1.0 } else { 0.0 };
                    deltas[*logits][i * c + j] += g * (p - ind);
                }
            }
        }
        Op::Mse(a, b) => {
            let n = nodes[*a].data.len() as f64;
            let g = grad[0];
            for idx in 0..nodes[*a].data.len() {
                let d = 2.0 * g * (nodes[*a].data[idx] - nodes[*b].data[idx]) / n;
                deltas[*a][idx] += d;
                deltas[*b][idx] -= d;
            }
        }
        Op::PasteBlock { block, r0, c0 } => {
            let bc = nodes[*block].cols;
            let br = nodes[*block].rows;
            let bg = &mut deltas[*block];
            for i in 0..br {
                for j in 0..bc {
                    bg[i * bc + j] += grad[(r0 + i) * cols + c0 + j];
                }
            }
        }
    }

    deltas[i] = grad;
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn transpose_2d(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
