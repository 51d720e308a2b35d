use super::{sigmoid, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ScaleRows(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Row(Var, usize),
    RowSum(Var),
    SumAll(Var),
    NormalizeRows(Var),
    SoftmaxCols(Var),
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape of tensor operations.
///
/// Build one graph per forward pass. When constructed with tracking disabled
/// (see [`Graph::inference`]) nothing is marked for differentiation and
/// [`Graph::backward`] refuses to run.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    track: bool,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p> Graph<'p> {
    /// A tracking graph without parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            track: true,
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// A tracking graph that can read (and differentiate) `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Graph::new()
        }
    }

    /// A forward-only graph over `params`.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            track: false,
            ..Graph::with_params(params)
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// An input that is never differentiated.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A leaf whose gradient is recorded when the graph tracks.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t, t.requires_grad())
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    /// The leaf for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.index()).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph was built without a parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.expect("param leaf without store").get(*id).data(),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn shape_of(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.dims(v);
        [r, c]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shapes are consistent")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, &self.shape_of(a), &self.shape_of(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let out = matmul_nn(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let out = matmul_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMulNT(a, b), rg))
    }

    /// Row-wise affine map `x · Wᵀ + b` with `W` of shape `[out × in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (n, k2) = self.dims(weight);
        if k != k2 {
            return Err(Error::shape("linear", &[m, k], &[n, k2]));
        }
        let mut out = matmul_nt(self.value(x), self.value(weight), m, k, n);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::shape("linear bias", &[n], &[bv.len()]));
            }
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(m, n, out, Op::Linear(x, weight, bias), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let bv = self.value(bias);
        if bv.len() != c {
            return Err(Error::shape("add_row_bias", &[r, c], &[bv.len()]));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(r, c, out, Op::AddRowBias(x, bias), rg))
    }

    /// Adds a length-`rows` vector to every column.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let bv = self.value(bias);
        if bv.len() != r {
            return Err(Error::shape("add_col_bias", &[r, c], &[bv.len()]));
        }
        let mut out = self.value(x).to_vec();
        for (row, b) in out.chunks_mut(c).zip(bv) {
            row.iter_mut().for_each(|o| *o += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(r, c, out, Op::AddColBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        self.push(r, c, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let sv = self.value(s);
        if sv.len() != r {
            return Err(Error::shape("scale_rows", &[r, c], &self.shape_of(s)));
        }
        let mut out = self.value(x).to_vec();
        for (row, f) in out.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|o| *o *= f);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(r, c, out, Op::ScaleRows(x, s), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = transpose(self.value(x), r, c);
        let rg = self.rg(x);
        self.push(c, r, out, Op::Transpose(x), rg)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_rows of nothing".into()));
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &self.shape_of(first), &self.shape_of(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Places `b` to the right of `a`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if r != rb {
            return Err(Error::shape("concat_cols", &[r, ca], &[rb, cb]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, ca + cb, out, Op::ConcatCols(a, b), rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if i >= r {
            return Err(Error::Input(format!("row {i} out of range for {r} rows")));
        }
        let out = self.value(x)[i * c..(i + 1) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(1, c, out, Op::Row(x, i), rg))
    }

    /// Sum of each row, as an `[rows × 1]` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).chunks(c).map(|row| row.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(r, 1, out, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![s], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let n = super::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let rg = self.rg(x);
        self.push(r, c, out, Op::NormalizeRows(x), rg)
    }

    /// Softmax down each column (over the row index).
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let max = (0..r).map(|i| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..r {
                let e = (xv[i * c + j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for i in 0..r {
                out[i * c + j] /= total;
            }
        }
        let rg = self.rg(x);
        self.push(r, c, out, Op::SoftmaxCols(x), rg)
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Every tracked leaf receives a gradient (zeros when `loss` does not
    /// depend on it). A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; build a new graph for the next pass".into(),
            ));
        }
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape [{r}, {c}]"
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract(
                "loss does not depend on any tracked value".into(),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.rows * node.cols]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let y = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => return,
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.rg(*a) {
                    let ga = matmul_nt(gy, self.value(*b), m, n, k);
                    acc(grads, *a, &ga, &self.nodes);
                }
                if self.rg(*b) {
                    let gb = matmul_tn(self.value(*a), gy, m, k, n);
                    acc(grads, *b, &gb, &self.nodes);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.rg(*a) {
                    let ga = matmul_nn(gy, self.value(*b), m, n, k);
                    acc(grads, *a, &ga, &self.nodes);
                }
                if self.rg(*b) {
                    let gb = matmul_tn(gy, self.value(*a), m, n, k);
                    acc(grads, *b, &gb, &self.nodes);
                }
            }
            Op::Linear(x, w, b) => {
                let (m, k) = self.dims(*x);
                let n = cols;
                if self.rg(*x) {
                    let gx = matmul_nn(gy, self.value(*w), m, n, k);
                    acc(grads, *x, &gx, &self.nodes);
                }
                if self.rg(*w) {
                    let gw = matmul_tn(gy, self.value(*x), m, n, k);
                    acc(grads, *w, &gw, &self.nodes);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    acc(grads, b, &col_sums(gy, m, n), &self.nodes);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, gy, &self.nodes);
                }
                if self.rg(*b) {
                    acc(grads, *b, gy, &self.nodes);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, gy, &self.nodes);
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    acc(grads, *b, &neg, &self.nodes);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga: Vec<f64> = gy.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                    acc(grads, *a, &ga, &self.nodes);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = gy.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                    acc(grads, *b, &gb, &self.nodes);
                }
            }
            Op::AddRowBias(x, b) => {
                if self.rg(*x) {
                    acc(grads, *x, gy, &self.nodes);
                }
                if self.rg(*b) {
                    acc(grads, *b, &col_sums(gy, rows, cols), &self.nodes);
                }
            }
            Op::AddColBias(x, b) => {
                if self.rg(*x) {
                    acc(grads, *x, gy, &self.nodes);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = gy.chunks(cols).map(|r| r.iter().sum()).collect();
                    acc(grads, *b, &gb, &self.nodes);
                }
            }
            Op::Scale(x, s) => {
                let g: Vec<f64> = gy.iter().map(|g| g * s).collect();
                acc(grads, *x, &g, &self.nodes);
            }
            Op::Square(x) => {
                let g: Vec<f64> = gy.iter().zip(self.value(*x)).map(|(g, v)| 2.0 * v * g).collect();
                acc(grads, *x, &g, &self.nodes);
            }
            Op::Tanh(x) => {
                let g: Vec<f64> = gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(grads, *x, &g, &self.nodes);
            }
            Op::Sigmoid(x) => {
                let g: Vec<f64> = gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(grads, *x, &g, &self.nodes);
            }
            Op::Relu(x) => {
                let g: Vec<f64> = gy
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, &g, &self.nodes);
            }
            Op::ScaleRows(x, s) => {
                let sv = self.value(*s);
                if self.rg(*x) {
                    let mut g = gy.to_vec();
                    for (row, f) in g.chunks_mut(cols).zip(sv) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(grads, *x, &g, &self.nodes);
                }
                if self.rg(*s) {
                    let gs: Vec<f64> = gy
                        .chunks(cols)
                        .zip(self.value(*x).chunks(cols))
                        .map(|(g, x)| super::dot(g, x))
                        .collect();
                    acc(grads, *s, &gs, &self.nodes);
                }
            }
            Op::Transpose(x) => {
                acc(grads, *x, &transpose(gy, rows, cols), &self.nodes);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        acc(grads, p, &gy[offset..offset + len], &self.nodes);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.dims(*a).1;
                let cb = cols - ca;
                if self.rg(*a) {
                    let g: Vec<f64> = gy.chunks(cols).flat_map(|r| r[..ca].to_vec()).collect();
                    acc(grads, *a, &g, &self.nodes);
                }
                if self.rg(*b) {
                    let g: Vec<f64> = gy.chunks(cols).flat_map(|r| r[ca..ca + cb].to_vec()).collect();
                    acc(grads, *b, &g, &self.nodes);
                }
            }
            Op::Row(x, i) => {
                let (xr, xc) = self.dims(*x);
                let mut g = vec![0.0; xr * xc];
                g[i * xc..(i + 1) * xc].copy_from_slice(gy);
                acc(grads, *x, &g, &self.nodes);
            }
            Op::RowSum(x) => {
                let xc = self.dims(*x).1;
                let g: Vec<f64> = gy.iter().flat_map(|g| std::iter::repeat_n(*g, xc)).collect();
                acc(grads, *x, &g, &self.nodes);
            }
            Op::SumAll(x) => {
                let g = vec![gy[0]; self.value(*x).len()];
                acc(grads, *x, &g, &self.nodes);
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    let range = i * cols..(i + 1) * cols;
                    let n = super::norm(&xv[range.clone()]);
                    if n == 0.0 {
                        continue;
                    }
                    let yr = &y[range.clone()];
                    let gr = &gy[range.clone()];
                    let proj = super::dot(yr, gr);
                    for (o, (gv, yv)) in g[range].iter_mut().zip(gr.iter().zip(yr)) {
                        *o = (gv - yv * proj) / n;
                    }
                }
                acc(grads, *x, &g, &self.nodes);
            }
            Op::SoftmaxCols(x) => {
                let mut g = vec![0.0; rows * cols];
                for j in 0..cols {
                    let inner: f64 = (0..rows).map(|i| y[i * cols + j] * gy[i * cols + j]).sum();
                    for i in 0..rows {
                        g[i * cols + j] = y[i * cols + j] * (gy[i * cols + j] - inner);
                    }
                }
                acc(grads, *x, &g, &self.nodes);
            }
        }
    }

    /// Gradient of the last [`backward`](Graph::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, g.clone()).ok()
    }

    /// `(param, gradient)` for every parameter touched by this graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.param_vars.iter().filter_map(move |slot| {
            let v = (*slot)?;
            let g = self.grads.get(v.0)?.as_ref()?;
            match self.nodes[v.0].value {
                Value::Param(id) => Some((id, g.as_slice())),
                Value::Owned(_) => None,
            }
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], nodes: &[Node]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `a[m×k] · b[k×n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = super::dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, giving `[k×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn col_sums(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in x.chunks(c).take(r) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(&m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(&m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let z = g.constant(&m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let y = g.matmul(p, z).unwrap();
        assert_eq!(g.value(y), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut g = Graph::new();
        let a = g.zeros(2, 3);
        let b = g.zeros(2, 3);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let z = g.zeros(1, 1);
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.scalar(s), 0.5);
        assert_eq!(g.scalar(t), 0.0);
        let x = g.constant(&Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.square(x);
        assert_eq!(g.value(sq), &[1.0, 4.0, 9.0]);
        let other = g.zeros(1, 2);
        assert!(g.sub(x, other).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.input(&Tensor::vector(vec![5.0]).unwrap());
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_graph_does_not_track() {
        let store = ParamStore::default();
        let mut g = Graph::inference(&store);
        let x = g.input(&Tensor::vector(vec![1.0]).unwrap());
        let loss = g.sum(x);
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn normalize_rows_keeps_zero_rows() {
        let mut g = Graph::new();
        let x = g.input(&m(&[&[3.0, 4.0], &[0.0, 0.0]]));
        let y = g.normalize_rows(x);
        assert_eq!(g.value(y), &[0.6, 0.8, 0.0, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap().data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(&m(&[&[1.0, -3.0], &[0.5, 2.0], &[0.0, 0.0]]));
        let y = g.softmax_cols(x);
        let v = g.value(y);
        for j in 0..2 {
            let s: f64 = (0..3).map(|i| v[i * 2 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
