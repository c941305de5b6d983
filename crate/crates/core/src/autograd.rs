//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D array; vectors are stored as `1 × n`
//! rows. Parameters live in a [`ParamStore`] and are referenced by the
//! tape rather than copied, so a forward pass over a large embedding
//! table does not clone it.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, replacing any existing tensor of the same name.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.names.push(name.clone());
        self.values.push(value);
        self.index.insert(name, id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Array2<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Array2<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Pick(Var, usize, usize),
}

struct Node {
    value: Value,
    op: Op,
}

/// A recording of one forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.params.get(*id),
        }
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a constant (gradient passes through unchanged).
    pub fn shift(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Shift(a))
    }

    pub fn shift_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Shift(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Cols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((rows.len(), av.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&av.row(r));
        }
        self.push(out, Op::Gather(a, rows.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a)[[row, col]]);
        self.push(out, Op::Pick(a, row, col))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    accumulate(&mut param_grads[id.0], g.clone());
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[row.0], dr);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g * *c),
                Op::Shift(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::MulConst(a, c) => accumulate(&mut grads[a.0], &g * c),
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let mut da = Array2::zeros(y.raw_dim());
                    Zip::from(da.rows_mut())
                        .and(y.rows())
                        .and(g.rows())
                        .for_each(|mut d, y, g| {
                            let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut d)
                                .and(&y)
                                .and(&g)
                                .for_each(|d, &y, &g| *d = y * (g - dot));
                        });
                    accumulate(&mut grads[a.0], da);
                }
                Op::LogSoftmax(a) => {
                    let y = self.value(Var(i));
                    let mut da = Array2::zeros(y.raw_dim());
                    Zip::from(da.rows_mut())
                        .and(y.rows())
                        .and(g.rows())
                        .for_each(|mut d, y, g| {
                            let gs = g.sum();
                            Zip::from(&mut d)
                                .and(&y)
                                .and(&g)
                                .for_each(|d, &y, &g| *d = g - y.exp() * gs);
                        });
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gam;
                    let cols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh: f64 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is / cols * (cols * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gamma.0], dgamma);
                    accumulate(&mut grads[beta.0], dbeta);
                }
                Op::Gelu(a) => {
                    let da = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * gelu_grad(x));
                    accumulate(&mut grads[a.0], da);
                }
                Op::Tanh(a) => {
                    let da = Zip::from(&g)
                        .and(self.value(Var(i)))
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads[a.0], da);
                }
                Op::Sigmoid(a) => {
                    let da = Zip::from(&g)
                        .and(self.value(Var(i)))
                        .map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads[a.0], da);
                }
                Op::Ln(a) => {
                    let da = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g / x);
                    accumulate(&mut grads[a.0], da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x >= *lo && x <= *hi { g } else { 0.0 });
                    accumulate(&mut grads[a.0], da);
                }
                Op::Cols(a, start) => {
                    let mut da = Array2::zeros(self.value(*a).raw_dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let dp = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[p.0], dp);
                        offset += w;
                    }
                }
                Op::Gather(a, rows) => {
                    let slot = &mut grads[a.0];
                    let target = slot.get_or_insert_with(|| Array2::zeros(self.value(*a).raw_dim()));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = target.row_mut(r);
                        dst += &g.row(i);
                    }
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads[a.0], da);
                }
                Op::Pick(a, r, c) => {
                    let mut da = Array2::zeros(self.value(*a).raw_dim());
                    da[[*r, *c]] = g[[0, 0]];
                    accumulate(&mut grads[a.0], da);
                }
            }
            grads[i] = Some(g);
        }

        Grads {
            nodes: grads,
            params: param_grads,
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &delta,
        None => *slot = Some(delta),
    }
}

/// Result of a reverse pass.
pub struct Grads {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to a node, if the node was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_param_grads(self) -> ParamGrads {
        ParamGrads { grads: self.params }
    }
}

/// Accumulated parameter gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(scale, src),
                    None => *dst = Some(src * scale),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
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

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

pub fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(f(x) * w))/dx for a unary graph op.
    fn check_unary(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let store = ParamStore::new();
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = build(&mut g, xv);
            let w = Array2::from_shape_fn(g.value(y).raw_dim(), |(r, c)| 0.3 + 0.7 * ((r * 7 + c * 3) % 5) as f64);
            let wv = g.input(w);
            let p = g.mul(y, wv);
            let s = g.sum(p);
            (g.scalar(s), g, xv, s)
        };
        let (_, g, xv, s) = eval(&x);
        let grads = g.backward(s);
        let analytic = grads.wrt(xv).unwrap().clone();
        let h = 1e-5;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let numeric = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "({r},{c}): analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = array![[0.3, -1.2, 2.0], [0.5, 0.1, -0.7]];
        check_unary(x.clone(), |g, v| g.gelu(v));
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.softmax_rows(v));
        check_unary(x.clone(), |g, v| g.log_softmax_rows(v));
        check_unary(x.mapv(|v| v.abs() + 0.5), |g, v| g.ln(v));
        check_unary(x.clone(), |g, v| g.cols(v, 1, 2));
        check_unary(x.clone(), |g, v| g.gather(v, &[1, 0, 1]));
        check_unary(x.clone(), |g, v| g.matmul_t(v, v));
        check_unary(x, |g, v| {
            let gamma = g.input(array![[1.5, -0.5, 2.0]]);
            let beta = g.input(array![[0.1, 0.2, 0.3]]);
            g.layer_norm(v, gamma, beta, 1e-12)
        });
    }

    #[test]
    fn param_gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let id = store.insert("w", array![[2.0, 3.0]]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let w2 = g.param(id);
        assert_eq!(w, w2);
        let p = g.mul(w, w);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.param(id).unwrap(), &array![[4.0, 6.0]]);
    }

    #[test]
    fn matmul_shapes_and_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = store.insert("b", array![[1.0], [-1.0]]);
        let mut g = Graph::new(&store);
        let av = g.param(a);
        let bv = g.param(b);
        let y = g.matmul(av, bv);
        assert_eq!(g.value(y), &array![[-1.0], [-1.0], [-1.0]]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.param(b).unwrap(), &array![[9.0], [12.0]]);
        assert_eq!(grads.param(a).unwrap(), &array![[1.0, -1.0], [1.0, -1.0], [1.0, -1.0]]);
    }
}
