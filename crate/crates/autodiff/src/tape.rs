//! Tape-based reverse-mode differentiation.
//!
//! Every value on the tape is a dense row-major `Array2<f64>`. Scalars are
//! `1×1` matrices. Nodes are appended in evaluation order, so a single
//! reverse sweep over the tape visits every node after all of its consumers.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Im2Col(Var, ConvGeometry),
    Sum(Var),
    RowSums(Var),
    Bce { p: Var, target: Array2<f64> },
    Focal { p: Var, target: Array2<f64>, alpha: f64, gamma: f64 },
}

/// Geometry of a square-kernel 2-D convolution over a `(h·w) × c` feature map
/// stored row-major by pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Visits every `(output row, patch column, input row, channel)` tap that
    /// lands inside the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ho, wo, k, c) = (self.out_height(), self.out_width(), self.kernel, self.channels);
        for oy in 0..ho {
            for ox in 0..wo {
                let out_row = oy * wo + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let in_row = iy as usize * self.width + ix as usize;
                        let col0 = (ky * k + kx) * c;
                        for ch in 0..c {
                            f(out_row, col0 + ch, in_row, ch);
                        }
                    }
                }
            }
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Probability clamp used by the cross-entropy style losses.
pub const PROB_EPS: f64 = 1e-12;

/// Recording tape. A tape built with [`Tape::inference`] stores values only:
/// no operation keeps its parents and [`Tape::backward`] is unavailable.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    grad_buffers: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true, grad_buffers: 0 }
    }

    /// A tape that evaluates without recording the graph.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false, grad_buffers: 0 }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of gradient buffers allocated by backward sweeps on this tape.
    pub fn grad_buffers_allocated(&self) -> usize {
        self.grad_buffers
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: needs_grad && self.recording });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.v(a).dot(self.v(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.v(a).dot(&self.v(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.v(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = self.v(a) + self.v(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = self.v(a) - self.v(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = self.v(a) * self.v(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = self.v(a) / self.v(b);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "minimum");
        let value = Zip::from(self.v(a)).and(self.v(b)).map_collect(|&x, &y| x.min(y));
        self.push(value, Op::Minimum(a, b), &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "maximum");
        let value = Zip::from(self.v(a)).and(self.v(b)).map_collect(|&x, &y| x.max(y));
        self.push(value, Op::Maximum(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: row must be 1×n");
        assert_eq!(self.shape(row).1, self.shape(a).1, "add_row: width mismatch");
        let value = self.v(a) + self.v(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: row must be 1×n");
        assert_eq!(self.shape(row).1, self.shape(a).1, "mul_row: width mismatch");
        let value = self.v(a) * self.v(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.v(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.v(a) + c;
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies `a` by a `1×1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: expected 1×1");
        let k = self.v(s)[[0, 0]];
        let value = self.v(a) * k;
        self.push(value, Op::MulScalar(a, s), &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.v(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.v(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.v(a).mapv(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.v(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise standardization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.v(a).clone();
        let mut inv_std = Vec::with_capacity(value.nrows());
        let n = value.ncols() as f64;
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|x| x - mean);
            let var = row.fold(0.0, |acc, &x| acc + x * x) / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| x * r);
            inv_std.push(r);
        }
        self.push(value, Op::LayerNormRows { x: a, inv_std }, &[a])
    }

    /// Scales each row to unit L2 norm. Rows with norm ≤ `eps` map to zero.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.v(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let norm = row.fold(0.0, |acc, &x| acc + x * x).sqrt();
            if norm > eps {
                row.mapv_inplace(|x| x / norm);
            } else {
                row.fill(0.0);
            }
            norms.push(norm);
        }
        self.push(value, Op::NormalizeRows { x: a, norms, eps }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.v(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: nothing to concatenate");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.v(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.v(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.v(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), &[a])
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.v(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Unfolds a `(h·w) × c` feature map into `(ho·wo) × (k·k·c)` patches.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Var {
        assert_eq!(
            self.shape(a),
            (geom.height * geom.width, geom.channels),
            "im2col: input does not match geometry"
        );
        let input = self.v(a);
        let mut value = Array2::zeros((geom.out_height() * geom.out_width(), geom.patch_len()));
        geom.for_each_tap(|out_row, col, in_row, ch| {
            value[[out_row, col]] = input[[in_row, ch]];
        });
        self.push(value, Op::Im2Col(a, geom), &[a])
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.v(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.v(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `n×1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.v(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSums(a), &[a])
    }

    /// Elementwise binary cross-entropy of probabilities `p` against `target`.
    pub fn bce(&mut self, p: Var, target: Array2<f64>) -> Var {
        assert_eq!(self.shape(p), target.dim(), "bce: shape mismatch");
        let value = Zip::from(self.v(p)).and(&target).map_collect(|&p, &t| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
        });
        self.push(value, Op::Bce { p, target }, &[p])
    }

    /// Elementwise sigmoid focal loss on probabilities.
    pub fn focal(&mut self, p: Var, target: Array2<f64>, alpha: f64, gamma: f64) -> Var {
        assert_eq!(self.shape(p), target.dim(), "focal: shape mismatch");
        let value = Zip::from(self.v(p))
            .and(&target)
            .map_collect(|&p, &t| focal_value(p, t, alpha, gamma));
        self.push(value, Op::Focal { p, target, alpha, gamma }, &[p])
    }

    /// Reverse sweep from a `1×1` output.
    ///
    /// Panics on an inference tape.
    pub fn backward(&mut self, output: Var) -> Gradients {
        assert!(self.recording, "backward on an inference tape");
        assert_eq!(self.shape(output), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grad_buffers += grads.iter().filter(|g| g.is_some()).count();
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |var: Var, delta: Array2<f64>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.v(*b).t()));
                acc(*b, self.v(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(self.v(*b)));
                acc(*b, g.t().dot(self.v(*a)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.v(*b));
                acc(*b, g * self.v(*a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                acc(*a, g / bv);
                acc(*b, Zip::from(g).and(av).and(bv).map_collect(|&g, &x, &y| -g * x / (y * y)));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.v(*a), self.v(*b));
                // ties route the gradient to the first operand
                let pick_a = Zip::from(av).and(bv).map_collect(|&x, &y| {
                    if take_min {
                        x <= y
                    } else {
                        x >= y
                    }
                });
                acc(*a, Zip::from(g).and(&pick_a).map_collect(|&g, &p| if p { g } else { 0.0 }));
                acc(*b, Zip::from(g).and(&pick_a).map_collect(|&g, &p| if p { 0.0 } else { g }));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(*a, g * self.v(*row));
                acc(*row, (g * self.v(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, s) => {
                let k = self.v(*s)[[0, 0]];
                acc(*a, g * k);
                acc(*s, Array2::from_elem((1, 1), (g * self.v(*a)).sum()));
            }
            Op::Relu(a) => {
                let d = Zip::from(g).and(self.v(*a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = Zip::from(g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                acc(*a, d);
            }
            Op::Abs(a) => {
                let d = Zip::from(g).and(self.v(*a)).map_collect(|&g, &x| g * sign(x));
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let dot = yr.dot(&gr);
                    Zip::from(&mut dr).and(&yr).and(&gr).for_each(|d, &y, &g| *d = y * (g - dot));
                }
                acc(*a, d);
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = &node.value;
                let n = y.ncols() as f64;
                let mut d = Array2::zeros(y.dim());
                for (i, ((mut dr, yr), gr)) in
                    d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()).enumerate()
                {
                    let mean_g = gr.sum() / n;
                    let mean_gy = gr.dot(&yr) / n;
                    let r = inv_std[i];
                    Zip::from(&mut dr)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|d, &y, &g| *d = r * (g - mean_g - y * mean_gy));
                }
                acc(*x, d);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let y = &node.value;
                let mut d = Array2::zeros(y.dim());
                for (i, ((mut dr, yr), gr)) in
                    d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()).enumerate()
                {
                    if norms[i] <= *eps {
                        continue;
                    }
                    let dot = yr.dot(&gr);
                    let r = 1.0 / norms[i];
                    Zip::from(&mut dr).and(&yr).and(&gr).for_each(|d, &y, &g| *d = r * (g - y * dot));
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    acc(*p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    acc(*p, g.slice(s![.., start..start + cols]).to_owned());
                    start += cols;
                }
            }
            Op::SliceRows(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*start..*end, ..]).assign(g);
                acc(*a, d);
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (src, &dst) in rows.iter().enumerate() {
                    let mut target = d.row_mut(dst);
                    target += &g.row(src);
                }
                acc(*a, d);
            }
            Op::Im2Col(a, geom) => {
                let mut d = Array2::zeros(self.shape(*a));
                geom.for_each_tap(|out_row, col, in_row, ch| {
                    d[[in_row, ch]] += g[[out_row, col]];
                });
                acc(*a, d);
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                acc(*a, Array2::from_elem(self.shape(*a), k));
            }
            Op::RowSums(a) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Array2::zeros((rows, cols));
                for (mut dr, gv) in d.rows_mut().into_iter().zip(g.column(0)) {
                    dr.fill(*gv);
                }
                acc(*a, d);
            }
            Op::Bce { p, target } => {
                let d = Zip::from(g).and(self.v(*p)).and(target).map_collect(|&g, &p, &t| {
                    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                        0.0
                    } else {
                        g * (-t / p + (1.0 - t) / (1.0 - p))
                    }
                });
                acc(*p, d);
            }
            Op::Focal { p, target, alpha, gamma } => {
                let d = Zip::from(g).and(self.v(*p)).and(target).map_collect(|&g, &p, &t| {
                    g * focal_grad(p, t, *alpha, *gamma)
                });
                acc(*p, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn focal_value(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -alpha * t * (1.0 - pc).powf(gamma) * pc.ln()
        - (1.0 - alpha) * (1.0 - t) * pc.powf(gamma) * (1.0 - pc).ln()
}

fn focal_grad(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        return 0.0;
    }
    let q = 1.0 - p;
    let pos = if t != 0.0 {
        alpha * t * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p)
    } else {
        0.0
    };
    let neg = if t != 1.0 {
        -(1.0 - alpha) * (1.0 - t) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
    } else {
        0.0
    };
    pos + neg
}
