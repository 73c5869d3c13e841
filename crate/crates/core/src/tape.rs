//! A small reverse-mode autodiff tape over dense row-major matrices.
//!
//! Every model quantity (graph attention, recurrent encoder, losses) is
//! recorded as a sequence of [`Op`]s on a [`Tape`]. Calling
//! [`Tape::backward`] on a scalar output walks the tape in reverse and
//! accumulates the adjoint of every node.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self { rows: 1, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n×k) · b (k×m)`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ (k×n)ᵀ · b (n×m)` without materializing the transpose.
fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n×m) · bᵀ (k×m)ᵀ`
fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) fn var_index(v: Var) -> usize {
    v.0
}

/// Segmented edge list: edges of source node `i` are
/// `offsets[i]..offsets[i + 1]`, with targets in `targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Segments {
    pub fn from_adjacency(adj: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for nbrs in adj {
            targets.extend_from_slice(nbrs);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn num_sources(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn source_of_each_edge(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_edges());
        for i in 0..self.num_sources() {
            for _ in self.offsets[i]..self.offsets[i + 1] {
                out.push(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    SumAll(Var),
    RowNorm(Var),
    NormalizeRows(Var),
    Softmax(Var),
    SegmentSoftmax(Var, std::rc::Rc<Segments>),
    SegmentAggregate(Var, Var, std::rc::Rc<Segments>),
    Bce(Var, Vec<f64>, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradient tape. Nodes are appended in evaluation order.
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), bv.shape());
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x -= y;
        }
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), bv.shape());
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x *= y;
        }
        self.push(v, Op::Mul(a, b))
    }

    /// Broadcast-add a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).clone();
        assert_eq!(r.rows, 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, r.cols);
        for i in 0..v.rows {
            for (x, y) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x += k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = sigmoid(*x));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = leaky_relu(*x, slope));
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows);
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for i in 0..av.rows {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let v = Mat::from_vec(av.rows, cols, data);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols);
        let mut data = Vec::with_capacity(av.rows * len);
        for i in 0..av.rows {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let v = Mat::from_vec(av.rows, len, data);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * av.cols);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let v = Mat::from_vec(idx.len(), av.cols, data);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Place row `k` of `a` at row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, idx.len());
        let mut v = Mat::zeros(n, av.cols);
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(av.row(k));
        }
        self.push(v, Op::ScatterRows(a, idx.to_vec()))
    }

    /// Row-wise inner product, `n×m, n×m -> n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = (0..av.rows).map(|i| dot(av.row(i), bv.row(i))).collect();
        let v = Mat::from_vec(av.rows, 1, data);
        self.push(v, Op::RowDot(a, b))
    }

    /// Multiply row `i` of `a` by `s[i]`, with `s` an `n×1` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).clone();
        let mut v = self.value(a).clone();
        assert_eq!(sv.shape(), (v.rows, 1));
        for i in 0..v.rows {
            let k = sv.data[i];
            v.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        self.push(v, Op::ScaleRows(a, s))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::SumAll(a))
    }

    /// Euclidean norm of each row, `n×m -> n×1`. The subgradient at zero is 0.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|i| dot(av.row(i), av.row(i)).sqrt()).collect();
        let v = Mat::from_vec(av.rows, 1, data);
        self.push(v, Op::RowNorm(a))
    }

    /// L2-normalize each row; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Softmax over all entries of a column vector (log-sum-exp stabilized).
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Mat::from_vec(av.rows, av.cols, softmax_slice(&av.data));
        self.push(v, Op::Softmax(a))
    }

    /// Softmax of an `E×1` edge-score column within each source segment.
    pub fn segment_softmax(&mut self, e: Var, seg: std::rc::Rc<Segments>) -> Var {
        let ev = self.value(e);
        assert_eq!(ev.shape(), (seg.num_edges(), 1));
        let mut out = vec![0.0; seg.num_edges()];
        for i in 0..seg.num_sources() {
            let (s, t) = (seg.offsets[i], seg.offsets[i + 1]);
            if s < t {
                out[s..t].copy_from_slice(&softmax_slice(&ev.data[s..t]));
            }
        }
        let v = Mat::from_vec(seg.num_edges(), 1, out);
        self.push(v, Op::SegmentSoftmax(e, seg))
    }

    /// `out[i] = Σ_{k in seg(i)} alpha[k] · x[target[k]]`.
    pub fn segment_aggregate(&mut self, alpha: Var, x: Var, seg: std::rc::Rc<Segments>) -> Var {
        let (av, xv) = (self.value(alpha), self.value(x));
        assert_eq!(av.shape(), (seg.num_edges(), 1));
        let mut v = Mat::zeros(seg.num_sources(), xv.cols);
        for i in 0..seg.num_sources() {
            for k in seg.offsets[i]..seg.offsets[i + 1] {
                let w = av.data[k];
                let src = xv.row(seg.targets[k]);
                for (o, &s) in v.row_mut(i).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        self.push(v, Op::SegmentAggregate(alpha, x, seg))
    }

    /// Elementwise binary cross-entropy of probabilities `c` against labels,
    /// with `c` clipped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, c: Var, labels: &[f64], eps: f64) -> Var {
        let cv = self.value(c);
        assert_eq!(cv.data.len(), labels.len());
        let data = cv
            .data
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
            })
            .collect();
        let v = Mat::from_vec(cv.rows, cv.cols, data);
        self.push(v, Op::Bce(c, labels.to_vec(), eps))
    }

    /// Reverse pass from a scalar output. Returns the adjoint of every node
    /// (`None` where no gradient flowed).
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, matmul_nt(g, bv));
                accumulate(grads, *b, matmul_tn(av, g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.data.iter_mut().for_each(|x| *x = -*x);
                accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut r = Mat::zeros(1, g.cols);
                for i in 0..g.rows {
                    for (x, y) in r.data.iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                accumulate(grads, *row, r);
            }
            Op::Scale(a, k) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= k);
                accumulate(grads, *a, d);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, out, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, out, |x, t| x * (1.0 - t * t))),
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let slope = *slope;
                accumulate(grads, *a, zip_map(g, av, |x, v| if v >= 0.0 { x } else { x * slope }));
            }
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, out, |x, e| x * e)),
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                let bc = self.value(*b).cols;
                let mut ga = Mat::zeros(g.rows, ac);
                let mut gb = Mat::zeros(g.rows, bc);
                for i in 0..g.rows {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ac]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ac..]);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                for i in 0..g.rows {
                    ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let mut ga = Mat::zeros(idx.len(), g.cols);
                for (k, &i) in idx.iter().enumerate() {
                    ga.row_mut(k).copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(av.rows, av.cols);
                let mut gb = Mat::zeros(bv.rows, bv.cols);
                for i in 0..av.rows {
                    let gi = g.data[i];
                    for (x, y) in ga.row_mut(i).iter_mut().zip(bv.row(i)) {
                        *x = gi * y;
                    }
                    for (x, y) in gb.row_mut(i).iter_mut().zip(av.row(i)) {
                        *x = gi * y;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let mut ga = g.clone();
                let mut gs = Mat::zeros(sv.rows, 1);
                for i in 0..av.rows {
                    let k = sv.data[i];
                    gs.data[i] = dot(g.row(i), av.row(i));
                    ga.row_mut(i).iter_mut().for_each(|x| *x *= k);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, gs);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let ga = Mat::from_vec(av.rows, av.cols, vec![g.data[0]; av.data.len()]);
                accumulate(grads, *a, ga);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    let n = out.data[i];
                    if n > 0.0 {
                        let k = g.data[i] / n;
                        for (x, y) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *x = k * y;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let mut ga = Mat::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    let n = dot(av.row(i), av.row(i)).sqrt();
                    if n > 0.0 {
                        // d(x/|x|) = (g - u (u·g)) / |x|
                        let u = out.row(i);
                        let ug = dot(u, g.row(i));
                        for ((x, &gi), &ui) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(u) {
                            *x = (gi - ui * ug) / n;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let s = dot(&g.data, &out.data);
                let ga = zip_map(g, out, |gi, p| p * (gi - s));
                accumulate(grads, *a, ga);
            }
            Op::SegmentSoftmax(e, seg) => {
                let mut ge = Mat::zeros(seg.num_edges(), 1);
                for i in 0..seg.num_sources() {
                    let (s, t) = (seg.offsets[i], seg.offsets[i + 1]);
                    let inner = dot(&g.data[s..t], &out.data[s..t]);
                    for k in s..t {
                        ge.data[k] = out.data[k] * (g.data[k] - inner);
                    }
                }
                accumulate(grads, *e, ge);
            }
            Op::SegmentAggregate(alpha, x, seg) => {
                let (av, xv) = (self.value(*alpha), self.value(*x));
                let mut galpha = Mat::zeros(seg.num_edges(), 1);
                let mut gx = Mat::zeros(xv.rows, xv.cols);
                for i in 0..seg.num_sources() {
                    let gi = g.row(i);
                    for k in seg.offsets[i]..seg.offsets[i + 1] {
                        let j = seg.targets[k];
                        galpha.data[k] = dot(gi, xv.row(j));
                        let w = av.data[k];
                        for (o, &gv) in gx.row_mut(j).iter_mut().zip(gi) {
                            *o += w * gv;
                        }
                    }
                }
                accumulate(grads, *alpha, galpha);
                accumulate(grads, *x, gx);
            }
            Op::Bce(c, labels, eps) => {
                let cv = self.value(*c);
                let data = cv
                    .data
                    .iter()
                    .zip(labels)
                    .zip(&g.data)
                    .map(
                        |((&p, &y), &gi)| {
                            if p < *eps || p > 1.0 - eps {
                                0.0
                            } else {
                                gi * (-y / p + (1.0 - y) / (1.0 - p))
                            }
                        },
                    )
                    .collect();
                accumulate(grads, *c, Mat::from_vec(cv.rows, cv.cols, data));
            }
        }
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows, a.cols, data)
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
