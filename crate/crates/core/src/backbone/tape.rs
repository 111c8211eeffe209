//! Reverse-mode gradients over a recorded graph of matrix operations.
//!
//! Every value is a 2-D `f64` matrix; scalars are `1 × 1`. Operations are
//! appended to a [`Tape`] in evaluation order, so a single backwards sweep
//! over the node list visits every node after all of its consumers.
//!
//! ```
//! use tempo::backbone::tape::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let p = tape.leaf(array![[1.0, -2.0, 3.0]]);
//! let sq = tape.mul(p, p);
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap(), &array![[1.0, -2.0, 3.0]]);
//! ```
//!
//! Shape mismatches inside the tape are programming errors and panic; callers
//! validate user-facing shapes before building a graph.

use ndarray::{s, Array2, Axis};

use crate::error::{Result, TempoError};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (r×c) + b (1×c)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (r×c) ⊙ b (1×c)` broadcast over rows.
    MulRow(Var, Var),
    /// `a + s` with `s` a `1×1` node.
    AddScalar(Var, Var),
    /// `a · s` with `s` a `1×1` node.
    MulScalar(Var, Var),
    /// `a / s` with `s` a `1×1` node.
    DivScalar(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    Sqrt(Var),
    Log(Var),
    Transpose(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    /// Row standardization; stores `1/√(var + eps)` per row.
    NormalizeRows(Var, Vec<f64>),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Unfold {
        x: Var,
        patch_len: usize,
        stride: usize,
    },
    Flatten(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Mat, causal: bool) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (i, (row, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let width = if causal { (i + 1).min(row.len()) } else { row.len() };
        let max = row.iter().take(width).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            dst[j] = e;
            total += e;
        }
        for j in 0..width {
            dst[j] /= total;
        }
    }
    out
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a {:?} node", m.dim());
        m[[0, 0]]
    }

    /// Inputs and constants are both leaves; gradients are available for all.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul {:?} x {:?}", va.dim(), vb.dim());
        let v = va.dot(vb);
        self.push(v, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "add_row {:?} + {:?}", va.dim(), vr.dim());
        let v = va + vr;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "mul_row {:?} * {:?}", va.dim(), vr.dim());
        let v = va * vr;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a) + sv;
        self.push(v, Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a) * sv;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a) / sv;
        self.push(v, Op::DivScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), false);
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise softmax where row `i` only attends to columns `j ≤ i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), true);
        self.push(v, Op::CausalSoftmax(a))
    }

    /// `(x − mean)/√(var + eps)` per row, population variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let s = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * s);
            inv_std.push(s);
        }
        self.push(out, Op::NormalizeRows(a, inv_std))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Patches of a `1 × L` row: `N × patch_len` with the row end-padded by
    /// replicating its last value.
    pub fn unfold(&mut self, a: Var, patch_len: usize, stride: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1, "unfold expects a row vector");
        let len = x.ncols();
        let n = crate::embed::patch_count(len, patch_len, stride).expect("unfold parameters");
        let v = Mat::from_shape_fn((n, patch_len), |(i, j)| {
            x[[0, crate::embed::padded_source(i * stride + j, len)]]
        });
        self.push(
            v,
            Op::Unfold {
                x: a,
                patch_len,
                stride,
            },
        )
    }

    /// Row-major flatten to `1 × (r·c)`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len();
        let v = Mat::from_shape_vec((1, n), x.iter().copied().collect()).expect("flatten");
        self.push(v, Op::Flatten(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Mean squared difference, `1 × 1`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mse");
        let (va, vb) = (self.value(a), self.value(b));
        let v = va
            .iter()
            .zip(vb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        self.push(Mat::from_elem((1, 1), v), Op::Mse(a, b))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(TempoError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {dim:?}"
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*r);
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddScalar(a, s) => {
                    accumulate(&mut grads, *s, Mat::from_elem((1, 1), g.sum()));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulScalar(a, s) => {
                    let gs = (&g * self.value(*a)).sum();
                    let ga = &g * self.scalar(*s);
                    accumulate(&mut grads, *s, Mat::from_elem((1, 1), gs));
                    accumulate(&mut grads, *a, ga);
                }
                Op::DivScalar(a, s) => {
                    let sv = self.scalar(*s);
                    let gs = -(&g * &node.value).sum() / sv;
                    let ga = &g / sv;
                    accumulate(&mut grads, *s, Mat::from_elem((1, 1), gs));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Recip(a) => {
                    let ga = &g * &node.value.mapv(|y| -y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = &g * &node.value.mapv(|y| 0.5 / y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = &g / self.value(*a);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let p = &node.value;
                    let mut ga = &g * p;
                    for (mut row, prow) in ga.rows_mut().into_iter().zip(p.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, inv_std) => {
                    let y = &node.value;
                    let cols = y.ncols() as f64;
                    let mut ga = g.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let mean_g = row.sum() / cols;
                        let mean_gy = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let s = inv_std[r];
                        row.zip_mut_with(&yrow, |d, &yv| *d = s * (*d - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        accumulate(&mut grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Unfold {
                    x,
                    patch_len,
                    stride,
                } => {
                    let len = self.value(*x).ncols();
                    let mut gx = Mat::zeros((1, len));
                    for ((i, j), &gv) in g.indexed_iter() {
                        debug_assert!(j < *patch_len);
                        gx[[0, crate::embed::padded_source(i * stride + j, len)]] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Flatten(a) => {
                    let dim = self.value(*a).dim();
                    let ga = Mat::from_shape_vec(dim, g.iter().copied().collect()).expect("unflatten");
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let dim = self.value(*a).dim();
                    accumulate(&mut grads, *a, Mat::from_elem(dim, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let c = g[[0, 0]] / x.len() as f64;
                    accumulate(&mut grads, *a, Mat::from_elem(x.dim(), c));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let c = 2.0 * g[[0, 0]] / va.len() as f64;
                    let diff = (va - vb) * c;
                    accumulate(&mut grads, *b, -&diff);
                    accumulate(&mut grads, *a, diff);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    debug_assert!(g.is_standard_layout());
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
