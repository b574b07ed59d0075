//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of a forward pass as a node on a tape.
//! Calling [`Graph::backward`] on a scalar (1×1) node walks the tape in reverse
//! and accumulates gradients for every node that depends on a parameter.
//! Parameters live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`]; their gradients are read back with [`Graph::param_grads`].

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// N×C plus a broadcast 1×C row.
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// Row-wise `x / sqrt(‖x‖² + eps)`.
    NormalizeRows(Var, f64),
    LogClamped(Var, f64, f64),
    Sum(Var),
    SumSquares(Var),
    Gather(Var, Vec<(usize, usize)>),
    Rows(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter (used by gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMulT(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let t = self.tracked(a);
        self.push(v, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×C bias");
        let v = self.value(a) + self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(v, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, s), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::ConcatCols(a, b), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let t = self.tracked(a);
        self.push(v, Op::Gelu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let t = self.tracked(a);
        self.push(v, Op::Sigmoid(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let t = self.tracked(a);
        self.push(v, Op::SoftmaxRows(a), t)
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where clamping is active.
    /// Scales every row to unit length; `eps` keeps zero rows finite.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = (row.dot(&row) + eps).sqrt();
            row /= n;
        }
        let t = self.tracked(a);
        self.push(v, Op::NormalizeRows(a, eps), t)
    }

    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi).ln());
        let t = self.tracked(a);
        self.push(v, Op::LogClamped(a, lo, hi), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let t = self.tracked(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a), t)
    }

    /// Picks individual entries into a k×1 column.
    pub fn gather(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let src = self.value(a);
        let v = Array2::from_shape_fn((idx.len(), 1), |(r, _)| src[idx[r]]);
        let t = self.tracked(a);
        self.push(v, Op::Gather(a, idx), t)
    }

    pub fn rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let t = self.tracked(a);
        self.push(v, Op::Rows(a, idx), t)
    }

    /// Column-wise softmax, composed from transposes.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let at = self.transpose(a);
        let s = self.softmax_rows(at);
        self.transpose(s)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn accumulate(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(b).t());
                    let gb = self.value(a).t().dot(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(b));
                    let gb = g.t().dot(self.value(a));
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Transpose(a) => self.accumulate(a, g.t().to_owned()),
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(b, -&g);
                    self.accumulate(a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(b);
                    let gb = &g * self.value(a);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(row, gr);
                    self.accumulate(a, g);
                }
                Op::Scale(a, s) => self.accumulate(a, g * s),
                Op::ConcatCols(a, b) => {
                    let ca = self.value(a).ncols();
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                    let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Gelu(a) => {
                    let mut ga = self.value(a).mapv(gelu_grad);
                    ga *= &g;
                    self.accumulate(a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &y.mapv(|s| s * (1.0 - s));
                    self.accumulate(a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = &g * y;
                    let dots = ga.sum_axis(Axis(1));
                    for (mut row, (yr, d)) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(dots.iter()))
                    {
                        row.zip_mut_with(&yr, |gv, &yv| *gv -= yv * d);
                    }
                    self.accumulate(a, ga);
                }
                Op::NormalizeRows(a, eps) => {
                    let y = &self.nodes[i].value;
                    let x = self.value(a);
                    let mut ga = g.clone();
                    for ((mut gr, yr), xr) in ga.rows_mut().into_iter().zip(y.rows()).zip(x.rows()) {
                        let n = (xr.dot(&xr) + eps).sqrt();
                        let d = gr.dot(&yr);
                        gr.zip_mut_with(&yr, |gv, &yv| *gv = (*gv - yv * d) / n);
                    }
                    self.accumulate(a, ga);
                }
                Op::LogClamped(a, lo, hi) => {
                    let mut ga = self
                        .value(a)
                        .mapv(|x| if x < lo || x > hi { 0.0 } else { 1.0 / x });
                    ga *= &g;
                    self.accumulate(a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(a).dim(), g[[0, 0]]);
                    self.accumulate(a, ga);
                }
                Op::SumSquares(a) => {
                    let ga = self.value(a) * (2.0 * g[[0, 0]]);
                    self.accumulate(a, ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(self.value(a).dim());
                    for (r, &(i0, j0)) in idx.iter().enumerate() {
                        ga[[i0, j0]] += g[[r, 0]];
                    }
                    self.accumulate(a, ga);
                }
                Op::Rows(a, idx) => {
                    let mut ga = Array2::zeros(self.value(a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    self.accumulate(a, ga);
                }
            }
        }
    }

    /// Gradient of the last `backward` call w.r.t. a node, if it received any.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients summed over every use of the parameter.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Mat> {
        let mut out: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(Option::as_ref)) {
                out[id.0] += g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-5;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol || (x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        let w = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.6]];
        let eval = |x: &Mat, grad: bool| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.constant(w.clone());
            let h = g.matmul(xv, wv);
            let h = g.gelu(h);
            let cat = g.concat_cols(h, xv);
            let sm = g.softmax_rows(cat);
            let sg = g.sigmoid(sm);
            let prod = g.mul(sg, cat);
            let t = g.matmul_t(prod, prod);
            let lg = g.log_clamped(t, 1e-7, 1e7);
            let r = g.rows(lg, vec![1, 0, 1]);
            let picked = g.gather(r, vec![(0, 1), (2, 0)]);
            let a = g.sum(picked);
            let b = g.sum_squares(sm);
            let loss = g.add(a, b);
            if grad {
                g.backward(loss);
                return (g.scalar(loss), g.grad(xv).cloned());
            }
            (g.scalar(loss), None)
        };
        let (_, analytic) = eval(&x0, true);
        let numeric = numeric_grad(&x0, |x| eval(x, false).0);
        assert_close(&analytic.unwrap(), &numeric, 1e-5);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        let p = g.mul(a, b);
        g.backward(p);
        let grads = g.param_grads(&store);
        assert_eq!(grads[0][[0, 0]], 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let x = g.input(array![[3.0, 4.0]]);
        let m = g.mul(c, x);
        let s = g.sum(m);
        g.backward(s);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn normalize_rows_values_and_gradient() {
        let x0 = array![[3.0, 4.0], [0.2, -1.5], [0.0, 0.0]];
        let w = array![[0.7, -0.2], [0.1, 0.9], [-0.4, 0.3]];
        let eval = |x: &Mat, grad: bool| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = g.normalize_rows(xv, 1e-12);
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv);
            let loss = g.sum(p);
            if grad {
                g.backward(loss);
                return (g.value(y).clone(), g.grad(xv).cloned());
            }
            (g.value(y).clone(), None)
        };
        let (y, analytic) = eval(&x0, true);
        assert!((y[[0, 0]] - 0.6).abs() < 1e-12 && (y[[0, 1]] - 0.8).abs() < 1e-12);
        assert!(y.row(2).iter().all(|v| v.is_finite()));
        let x1 = x0.slice(ndarray::s![..2, ..]).to_owned();
        let numeric = numeric_grad(&x1, |x| {
            let full = ndarray::concatenate![Axis(0), x.view(), x0.slice(ndarray::s![2.., ..])];
            (eval(&full, false).0 * &w).sum()
        });
        let analytic = analytic.unwrap();
        assert_close(&analytic.slice(ndarray::s![..2, ..]).to_owned(), &numeric, 1e-5);
    }
}
