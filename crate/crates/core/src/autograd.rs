//! A small reverse-mode tape over row-major matrices.
//!
//! Every value is an `Array2`. Set-valued inputs (regions of several images,
//! tokens of several captions) are packed row-wise and described by
//! [`Segments`], so per-set reductions are ordinary ops on the tape.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::ModelError;
use crate::real::Real;

/// Row partition of a packed matrix: segment `b` covers rows
/// `offsets[b]..offsets[b + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn uniform(count: usize, len: usize) -> Self {
        Self {
            offsets: (0..=count).map(|b| b * len).collect(),
        }
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Self { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.count()).map(|b| self.len_of(b)).collect()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    /// Batch statistics over rows; caches the normalized input and 1/std.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    RepeatRows(Var, Segments),
    SegmentMean(Var, Segments),
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum(Var, Var, Segments),
    RowSum(Var),
    L2NormalizeRows(Var, Vec<F>),
    /// `perm[b][k * cols + j]` is the row holding the k-th largest value of
    /// column `j` within segment `b`.
    SortedPool {
        x: Var,
        theta: Var,
        segments: Segments,
        perm: Vec<Vec<usize>>,
    },
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    Slice {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of matrix values; gradients are obtained with [`Graph::backward`].
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` refuses to run on it.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array2<F>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `a + bias` with `bias` of shape `[1 × cols]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        self.push(value, Op::AddBias(a, bias), &[a, bias])
    }

    /// Scale row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col), &[a, col])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_bias(y, bias)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Per-column normalization over rows. With `stats = None` the batch
    /// mean and biased variance are used and returned; otherwise the given
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[F], &[F])>,
        eps: F,
    ) -> (Var, Vec<F>, Vec<F>) {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let n = F::c(rows as f64);
                let mean: Vec<F> = (0..cols)
                    .map(|j| xv.column(j).iter().copied().sum::<F>() / n)
                    .collect();
                let var: Vec<F> = (0..cols)
                    .map(|j| {
                        xv.column(j)
                            .iter()
                            .map(|&x| (x - mean[j]) * (x - mean[j]))
                            .sum::<F>()
                            / n
                    })
                    .collect();
                (mean, var, true)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for mut row in xhat.rows_mut() {
            for j in 0..cols {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (var_out, mean, var)
    }

    /// Per-row normalization over columns with learnable affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let n = F::c(cols as f64);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row `b` of `a` repeated `segments.len_of(b)` times.
    pub fn repeat_rows(&mut self, a: Var, segments: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), segments.count(), "repeat_rows: row/segment mismatch");
        let mut value = Array2::zeros((segments.total(), av.ncols()));
        for b in 0..segments.count() {
            for r in segments.range(b) {
                value.row_mut(r).assign(&av.row(b));
            }
        }
        self.push(value, Op::RepeatRows(a, segments.clone()), &[a])
    }

    pub fn segment_mean(&mut self, a: Var, segments: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), segments.total(), "segment_mean: row mismatch");
        let mut value = Array2::zeros((segments.count(), av.ncols()));
        for b in 0..segments.count() {
            let n = F::c(segments.len_of(b) as f64);
            let r = segments.range(b);
            let sum = av.slice(s![r, ..]).sum_axis(Axis(0));
            value.row_mut(b).assign(&(sum / n));
        }
        self.push(value, Op::SegmentMean(a, segments.clone()), &[a])
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: &Segments) -> Var {
        let av = self.value(a);
        assert_eq!(av.dim(), (segments.total(), 1), "segment_softmax expects [N x 1]");
        let mut value = Array2::zeros(av.dim());
        for b in 0..segments.count() {
            let r = segments.range(b);
            let max = r
                .clone()
                .map(|i| av[[i, 0]])
                .fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for i in r.clone() {
                let e = (av[[i, 0]] - max).exp();
                value[[i, 0]] = e;
                z += e;
            }
            for i in r {
                value[[i, 0]] /= z;
            }
        }
        self.push(value, Op::SegmentSoftmax(a, segments.clone()), &[a])
    }

    /// `out[b] = Σ_{i ∈ b} w[i] · x[i]` with `w` of shape `[N × 1]`.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var, segments: &Segments) -> Var {
        let wv = self.value(w);
        let xv = self.value(x);
        assert_eq!(wv.dim(), (segments.total(), 1));
        assert_eq!(xv.nrows(), segments.total());
        let mut value = Array2::zeros((segments.count(), xv.ncols()));
        for b in 0..segments.count() {
            let mut out = value.row_mut(b);
            for i in segments.range(b) {
                out.scaled_add(wv[[i, 0]], &xv.row(i));
            }
        }
        self.push(value, Op::SegmentWeightedSum(w, x, segments.clone()), &[w, x])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Normalize every row to unit L2 norm; a zero row is a degenerate input.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, ModelError> {
        let av = self.value(a);
        let mut norms = Vec::with_capacity(av.nrows());
        let mut value = av.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            if !(n > F::zero()) || !n.is_finite() {
                return Err(ModelError::Degenerate(format!(
                    "row {i} has zero or non-finite norm before L2 normalization"
                )));
            }
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        Ok(self.push(value, Op::L2NormalizeRows(a, norms), &[a]))
    }

    /// Learned order-statistic pooling: within each segment, every column is
    /// sorted in descending order (ties keep original row order) and combined
    /// with the segment's coefficients `theta` (shape `[N × 1]`).
    pub fn sorted_pool(&mut self, x: Var, theta: Var, segments: &Segments) -> Var {
        let xv = self.value(x);
        let tv = self.value(theta);
        assert_eq!(xv.nrows(), segments.total());
        assert_eq!(tv.dim(), (segments.total(), 1));
        let cols = xv.ncols();
        let mut value = Array2::zeros((segments.count(), cols));
        let mut perm = Vec::with_capacity(segments.count());
        for b in 0..segments.count() {
            let r = segments.range(b);
            let n = r.len();
            let mut p = vec![0usize; n * cols];
            let mut idx: Vec<usize> = Vec::with_capacity(n);
            for j in 0..cols {
                idx.clear();
                idx.extend(r.clone());
                idx.sort_by(|&a, &c| {
                    xv[[c, j]]
                        .partial_cmp(&xv[[a, j]])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                let mut acc = F::zero();
                for (k, &row) in idx.iter().enumerate() {
                    p[k * cols + j] = row;
                    acc += tv[[r.start + k, 0]] * xv[[row, j]];
                }
                value[[b, j]] = acc;
            }
            perm.push(p);
        }
        self.push(
            value,
            Op::SortedPool {
                x,
                theta,
                segments: segments.clone(),
                perm,
            },
            &[x, theta],
        )
    }

    /// Vertical concatenation; inputs must share a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("stack_rows: column mismatch");
        self.push(value, Op::StackRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Var {
        let value = self
            .value(x)
            .slice(s![rows.0..rows.1, cols.0..cols.1])
            .to_owned();
        self.push(value, Op::Slice { x, rows, cols }, &[x])
    }

    /// Reverse pass seeded with `∂L/∂v` for each `(v, seed)`.
    pub fn backward(&self, seeds: &[(Var, Array2<F>)]) -> Result<Gradients<F>, ModelError> {
        if !self.grad_enabled {
            return Err(ModelError::Graph(
                "backward called on a no-grad graph".into(),
            ));
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, seed) in seeds {
            if seed.dim() != self.value(*v).dim() {
                return Err(ModelError::Shape(format!(
                    "seed shape {:?} does not match value shape {:?}",
                    seed.dim(),
                    self.value(*v).dim()
                )));
            }
            accumulate(&mut grads, *v, seed.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if rg(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if rg(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddBias(a, bias) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*bias) {
                    accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if rg(*a) {
                    accumulate(grads, *a, g * self.value(*col));
                }
                if rg(*col) {
                    let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(grads, *col, d);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= F::one() - y * y);
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (F::one() - y));
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x <= F::zero() {
                        *d = F::zero()
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                Zip::from(&mut d).and(x).for_each(|d, &x| *d *= gelu_grad(x));
                accumulate(grads, *a, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gam = self.value(*gamma);
                if rg(*gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*x) {
                    let dxhat = g * gam;
                    let cols = dxhat.ncols();
                    let mut dx = Array2::zeros(dxhat.dim());
                    if *batch_stats {
                        let n = F::c(dxhat.nrows() as f64);
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            for j in 0..cols {
                                row[j] = inv_std[j] / n
                                    * (n * dxhat[[r, j]] - sum_d[j] - xhat[[r, j]] * sum_dx[j]);
                            }
                        }
                    } else {
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            for j in 0..cols {
                                row[j] = dxhat[[r, j]] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if rg(*gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = F::c(dxhat.ncols() as f64);
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d: F = dr.iter().copied().sum();
                        let sum_dx: F = dr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..dxhat.ncols() {
                            dx[[r, j]] = inv_std[r] / n * (n * dr[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::RepeatRows(a, segs) => {
                let mut d = Array2::zeros((segs.count(), g.ncols()));
                for b in 0..segs.count() {
                    let r = segs.range(b);
                    d.row_mut(b).assign(&g.slice(s![r, ..]).sum_axis(Axis(0)));
                }
                accumulate(grads, *a, d);
            }
            Op::SegmentMean(a, segs) => {
                let mut d = Array2::zeros((segs.total(), g.ncols()));
                for b in 0..segs.count() {
                    let n = F::c(segs.len_of(b) as f64);
                    let gb = g.row(b).mapv(|x| x / n);
                    for r in segs.range(b) {
                        d.row_mut(r).assign(&gb);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SegmentSoftmax(a, segs) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for b in 0..segs.count() {
                    let r = segs.range(b);
                    let dot: F = r.clone().map(|i| g[[i, 0]] * y[[i, 0]]).sum();
                    for i in r {
                        d[[i, 0]] = y[[i, 0]] * (g[[i, 0]] - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SegmentWeightedSum(w, x, segs) => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                if rg(*w) {
                    let mut d = Array2::zeros(wv.dim());
                    for b in 0..segs.count() {
                        for i in segs.range(b) {
                            d[[i, 0]] = g.row(b).dot(&xv.row(i));
                        }
                    }
                    accumulate(grads, *w, d);
                }
                if rg(*x) {
                    let mut d = Array2::zeros(xv.dim());
                    for b in 0..segs.count() {
                        for i in segs.range(b) {
                            d.row_mut(i).scaled_add(wv[[i, 0]], &g.row(b));
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::RowSum(a) => {
                let cols = self.value(*a).ncols();
                let d = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot = y.row(r).dot(&g.row(r));
                    for j in 0..y.ncols() {
                        d[[r, j]] = (g[[r, j]] - y[[r, j]] * dot) / norms[r];
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SortedPool {
                x,
                theta,
                segments,
                perm,
            } => {
                let xv = self.value(*x);
                let tv = self.value(*theta);
                let cols = xv.ncols();
                let mut dx = Array2::zeros(xv.dim());
                let mut dt = Array2::zeros(tv.dim());
                for b in 0..segments.count() {
                    let r = segments.range(b);
                    let p = &perm[b];
                    for k in 0..r.len() {
                        let th = tv[[r.start + k, 0]];
                        let mut acc = F::zero();
                        for j in 0..cols {
                            let row = p[k * cols + j];
                            let gj = g[[b, j]];
                            dx[[row, j]] += th * gj;
                            acc += gj * xv[[row, j]];
                        }
                        dt[[r.start + k, 0]] = acc;
                    }
                }
                if rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if rg(*theta) {
                    accumulate(grads, *theta, dt);
                }
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if rg(p) {
                        accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                if rg(*a) {
                    accumulate(grads, *a, g.slice(s![.., ..ca]).to_owned());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.slice(s![.., ca..]).to_owned());
                }
            }
            Op::Slice { x, rows, cols } => {
                let mut d = Array2::zeros(self.value(*x).dim());
                d.slice_mut(s![rows.0..rows.1, cols.0..cols.1]).assign(g);
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, d: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let half = F::c(0.5);
    half * x * (F::one() + (x / F::c(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let cdf = F::c(0.5) * (F::one() + (x / F::c(std::f64::consts::SQRT_2)).erf());
    let pdf = (-(x * x) * F::c(0.5)).exp() / F::c((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d/dx of `sum(R ⊙ f(x))` for every entry of each input.
    fn check<Fun>(inputs: Vec<Array2<f64>>, f: Fun)
    where
        Fun: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        let probe = rand_mat(&mut rng, g.value(out).nrows(), g.value(out).ncols());
        let grads = g.backward(&[(out, probe.clone())]).unwrap();
        let eval = |xs: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = f(&mut g, &vars);
            (g.value(out) * &probe).sum()
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "input {k} entry ({r},{c}): analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let bias = rand_mat(&mut rng, 1, 2);
        check(vec![a.clone(), b, bias], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let t = g.tanh(y);
            let s = g.sigmoid(t);
            g.gelu(s)
        });
        let c = rand_mat(&mut rng, 3, 4);
        check(vec![a.clone(), c], |g, v| {
            let m = g.mul(v[0], v[1]);
            let d = g.sub(m, v[1]);
            g.add(d, v[0])
        });
    }

    #[test]
    fn normalization_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 5, 3);
        let gamma = rand_mat(&mut rng, 1, 3);
        let beta = rand_mat(&mut rng, 1, 3);
        check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], None, 1e-5).0
        });
        check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let m = [0.1, -0.2, 0.3];
            let s = [0.5, 1.5, 0.9];
            g.batch_norm(v[0], v[1], v[2], Some((&m, &s)), 1e-5).0
        });
        check(vec![x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        check(vec![x], |g, v| g.l2_normalize_rows(v[0]).unwrap());
    }

    #[test]
    fn segment_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let segs = Segments::from_lengths(&[2, 3, 1]);
        let x = rand_mat(&mut rng, 6, 4);
        let logits = rand_mat(&mut rng, 6, 1);
        let per = rand_mat(&mut rng, 3, 4);
        let s1 = segs.clone();
        check(vec![logits.clone(), x.clone()], move |g, v| {
            let w = g.segment_softmax(v[0], &s1);
            g.segment_weighted_sum(w, v[1], &s1)
        });
        let s2 = segs.clone();
        check(vec![x.clone(), per], move |g, v| {
            let m = g.segment_mean(v[0], &s2);
            let r = g.repeat_rows(m, &s2);
            let rr = g.repeat_rows(v[1], &s2);
            let p = g.mul(r, rr);
            let rs = g.row_sum(p);
            g.mul_col(v[0], rs)
        });
        let s3 = segs.clone();
        check(vec![x.clone(), logits], move |g, v| g.sorted_pool(v[0], v[1], &s3));
        check(vec![x], |g, v| {
            let a = g.slice(v[0], (1, 3), (0, 2));
            let b = g.slice(v[0], (0, 2), (2, 4));
            let c = g.concat_cols(a, b);
            let d = g.stack_rows(&[a, b, a]);
            let d = g.slice(d, (0, 2), (0, 2));
            let e = g.concat_cols(d, a);
            g.stack_rows(&[c, e])
        });
    }

    #[test]
    fn sorted_pool_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0, 4.0], [3.0, 2.0], [2.0, 6.0]]);
        let t = g.constant(array![[0.5], [0.3], [0.2]]);
        let out = g.sorted_pool(x, t, &Segments::uniform(1, 3));
        let v = g.value(out);
        assert!((v[[0, 0]] - 2.3).abs() < 1e-12);
        assert!((v[[0, 1]] - 4.6).abs() < 1e-12);
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let mut g = Graph::<f64>::no_grad();
        let p = g.param(array![[1.0]]);
        assert!(!g.requires_grad(p));
        assert!(g.backward(&[(p, array![[1.0]])]).is_err());
    }

    #[test]
    fn zero_row_normalization_is_degenerate() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[0.0, 0.0]]);
        assert!(matches!(g.l2_normalize_rows(x), Err(ModelError::Degenerate(_))));
    }
}
