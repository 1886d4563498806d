//! A small tape-based reverse-mode differentiator over dense `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1 × n` rows and scalars are `1 × 1`.
//! A [`Graph`] records one forward pass. Parameters live in a [`ParamStore`]
//! that the graph borrows read-only, so many graphs (one per sentence) can be
//! built concurrently against the same weights. [`Graph::backward`] returns a
//! [`Gradients`] buffer keyed by [`ParamId`].

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which optimizer a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Array2<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), group, value, trainable: true });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient buffer, one optional dense array per parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn add_to(&mut self, id: ParamId, shape: (usize, usize), f: impl FnOnce(&mut Array2<f64>)) {
        let slot = &mut self.grads[id.0];
        let g = slot.get_or_insert_with(|| Array2::zeros(shape));
        f(g);
    }

    pub fn accumulate_param(&mut self, id: ParamId, g: &Array2<f64>) {
        self.add_to(id, g.dim(), |acc| *acc += g);
    }

    /// Adds `other` into `self`, parameter by parameter, in id order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / (norm + 1e-6));
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Var),
    MulConst(Var, Array2<f64>),
    ScaleConst(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    AddToRow(Var, Var, usize),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    ColMax(Var, Vec<usize>),
    SoftmaxRows(Var),
    MaxPoolRows(Var, Array2<usize>),
    LayerNormRows { x: Var, gamma: Var, beta: Var, normed: Array2<f64>, inv_std: Vec<f64> },
    BceWithLogitsMean(Var, Array2<f64>),
    MeanAll(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
}

/// One recorded forward computation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(value)) => value,
            (Op::Param(id), None) => self.store.value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    /// A parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), value)
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), value)
    }

    /// Multiplies every row of `a` elementwise by the `1 × n` row `row`
    /// (right-multiplication by a diagonal matrix).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(Op::MulRow(a, row), value)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Var {
        let factor = self.scalar(s);
        let value = self.value(a) * factor;
        self.push(Op::Scale(a, s), value)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let value = self.value(a) * &mask;
        self.push(Op::MulConst(a, mask), value)
    }

    pub fn scale_const(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(Op::ScaleConst(a, factor), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)));
        self.push(Op::Gelu(a), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    /// Builds a matrix whose i-th row is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        self.push(Op::GatherRows(a, idx), value)
    }

    /// `a + δ_p rowᵀ`: adds the `1 × n` vector `row` to row `p` of `a`.
    pub fn add_to_row(&mut self, a: Var, row: Var, p: usize) -> Var {
        let mut value = self.value(a).clone();
        {
            let r = self.value(row);
            let mut target = value.row_mut(p);
            target += &r.row(0);
        }
        self.push(Op::AddToRow(a, row, p), value)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row count mismatch");
        self.push(Op::ConcatCols(a, b), value)
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(Op::SliceCols(a, start), value)
    }

    /// Stacks `1 × n` rows into a `k × n` matrix.
    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        let views: Vec<_> = rows.iter().map(|r| self.value(*r).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("stack_rows: width mismatch");
        self.push(Op::StackRows(rows), value)
    }

    /// Columnwise maximum over rows: `s_q = max_j a_jq`, returned as `1 × Q`.
    pub fn col_max(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.dim();
        let mut arg = Vec::with_capacity(cols);
        let mut value = Array2::zeros((1, cols));
        for q in 0..cols {
            let mut best = 0;
            for j in 1..rows {
                if av[[j, q]] > av[[best, q]] {
                    best = j;
                }
            }
            arg.push(best);
            value[[0, q]] = av[[best, q]];
        }
        self.push(Op::ColMax(a, arg), value)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(Op::SoftmaxRows(a), value)
    }

    /// Coordinatewise max over contiguous row groups. Group `i` covers rows
    /// `groups[i].0 .. groups[i].1` and becomes output row `i`.
    pub fn max_pool_rows(&mut self, a: Var, groups: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let cols = av.ncols();
        let mut value = Array2::zeros((groups.len(), cols));
        let mut arg = Array2::zeros((groups.len(), cols));
        for (i, &(lo, hi)) in groups.iter().enumerate() {
            assert!(lo < hi, "max_pool_rows: empty group");
            for c in 0..cols {
                let mut best = lo;
                for r in lo + 1..hi {
                    if av[[r, c]] > av[[best, c]] {
                        best = r;
                    }
                }
                value[[i, c]] = av[[best, c]];
                arg[[i, c]] = best;
            }
        }
        self.push(Op::MaxPoolRows(a, arg), value)
    }

    /// Row-wise layer normalisation with `1 × n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &normed * self.value(gamma) + self.value(beta);
        self.push(Op::LayerNormRows { x, gamma, beta, normed, inv_std }, value)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and a constant
    /// target of the same shape. The target is not differentiated.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: Array2<f64>) -> Var {
        let u = self.value(logits);
        assert_eq!(u.dim(), target.dim(), "bce_with_logits_mean: shape mismatch");
        let total: f64 = u.iter().zip(target.iter()).map(|(&u, &g)| bce_with_logits(u, g)).sum();
        let value = Array2::from_elem((1, 1), total / u.len() as f64);
        self.push(Op::BceWithLogitsMean(logits, target), value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array2::from_elem((1, 1), av.sum() / av.len() as f64);
        self.push(Op::MeanAll(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    /// Inverted dropout with a freshly sampled Bernoulli mask. A no-op when
    /// `rng` is `None` or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Var {
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let (r, c) = self.shape(a);
                let mask = Array2::from_shape_fn((r, c), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                self.mul_const(a, mask)
            }
            _ => a,
        }
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.reverse(loss, &[]).0
    }

    /// Gradients of `loss` with respect to arbitrary nodes, zero where the
    /// loss does not depend on them.
    pub fn backward_vars(&self, loss: Var, wrt: &[Var]) -> Vec<Array2<f64>> {
        self.reverse(loss, wrt).1
    }

    fn reverse(&self, loss: Var, wrt: &[Var]) -> (Gradients, Vec<Array2<f64>>) {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(self.store);

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        let mut kept: Vec<Array2<f64>> = wrt.iter().map(|&v| Array2::zeros(self.shape(v))).collect();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            for (k, v) in wrt.iter().enumerate() {
                if v.0 == i {
                    kept[k] = gy.clone();
                }
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shape = self.store.value(*id).dim();
                    out.add_to(*id, shape, |g| *g += &gy);
                }
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gy.dot(self.value(*b));
                    let gb = gy.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, -gy);
                }
                Op::Mul(a, b) => {
                    let ga = &gy * self.value(*b);
                    let gb = &gy * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, gy);
                    acc(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let ga = &gy * self.value(*row);
                    let gr = (&gy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let factor = self.scalar(*s);
                    let gs = (&gy * self.value(*a)).sum();
                    acc(&mut grads, *a, &gy * factor);
                    acc(&mut grads, *s, Array2::from_elem((1, 1), gs));
                }
                Op::MulConst(a, mask) => acc(&mut grads, *a, &gy * mask),
                Op::ScaleConst(a, factor) => acc(&mut grads, *a, &gy * *factor),
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let ga = &gy * &y.mapv(|t| 1.0 - t * t);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let ga = &gy * &y.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = x.mapv(|x| {
                        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        cdf + x * pdf
                    });
                    acc(&mut grads, *a, &gy * &d);
                }
                Op::Transpose(a) => acc(&mut grads, *a, gy.t().to_owned()),
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (out_row, &src) in idx.iter().enumerate() {
                        let mut target = ga.row_mut(src);
                        target += &gy.row(out_row);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::AddToRow(a, row, p) => {
                    let gr = gy.row(*p).to_owned().insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, gy);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.shape(*a).1;
                    let ga = gy.slice(s![.., ..wa]).to_owned();
                    let gb = gy.slice(s![.., wa..]).to_owned();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let width = gy.ncols();
                    ga.slice_mut(s![.., *start..*start + width]).assign(&gy);
                    acc(&mut grads, *a, ga);
                }
                Op::StackRows(rows) => {
                    let mut offset = 0;
                    for r in rows {
                        let h = self.shape(*r).0;
                        let gr = gy.slice(s![offset..offset + h, ..]).to_owned();
                        offset += h;
                        acc(&mut grads, *r, gr);
                    }
                }
                Op::ColMax(a, arg) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (q, &j) in arg.iter().enumerate() {
                        ga[[j, q]] += gy[[0, q]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut ga = &gy * y;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        grow.zip_mut_with(&yrow, |g, &yv| *g -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxPoolRows(a, arg) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for ((r, c), &src) in arg.indexed_iter() {
                        ga[[src, c]] += gy[[r, c]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, gamma, beta, normed, inv_std } => {
                    let gamma_v = self.value(*gamma);
                    let g_gamma = (&gy * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_beta = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &gy * gamma_v;
                    let n = dxhat.ncols() as f64;
                    let mut gx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = normed.row(r);
                        let mean_d = dr.sum() / n;
                        let mean_dx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..dxhat.ncols() {
                            gx[[r, c]] = inv_std[r] * (dr[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, g_gamma);
                    acc(&mut grads, *beta, g_beta);
                }
                Op::BceWithLogitsMean(logits, target) => {
                    let u = self.value(*logits);
                    let scale = gy[[0, 0]] / u.len() as f64;
                    let mut gu = Array2::zeros(u.dim());
                    ndarray::Zip::from(&mut gu).and(u).and(target).for_each(|g, &u, &t| {
                        *g = (sigmoid(u) - t) * scale;
                    });
                    acc(&mut grads, *logits, gu);
                }
                Op::MeanAll(a) => {
                    let shape = self.shape(*a);
                    let g = gy[[0, 0]] / (shape.0 * shape.1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(shape, g));
                }
                Op::SumAll(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, Array2::from_elem(shape, gy[[0, 0]]));
                }
            }
        }
        (out, kept)
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

/// `-(g·log σ(u) + (1-g)·log(1-σ(u)))`, computed without forming σ(u).
pub fn bce_with_logits(u: f64, g: f64) -> f64 {
    u.max(0.0) - u * g + (-u.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x) ∘ w))/dx for a unary builder.
    fn check<F>(shape: (usize, usize), extra: &[(usize, usize)], build: F)
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mut ids = vec![store.add("x0", ParamGroup::Head, random(&mut rng, shape.0, shape.1)).unwrap()];
        for (k, s) in extra.iter().enumerate() {
            ids.push(store.add(&format!("x{}", k + 1), ParamGroup::Head, random(&mut rng, s.0, s.1)).unwrap());
        }
        let eval = |store: &ParamStore| -> (f64, Option<Gradients>) {
            let mut g = Graph::new(store);
            let vars: Vec<Var> = ids.iter().map(|id| g.param(*id)).collect();
            let y = build(&mut g, &vars);
            let (r, c) = g.shape(y);
            let w = Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64);
            let wv = g.constant(w);
            let prod = g.mul(y, wv);
            let loss = g.sum_all(prod);
            (g.scalar(loss), Some(g.backward(loss)))
        };
        let (_, grads) = eval(&store);
        let grads = grads.unwrap();
        let h = 1e-6;
        for id in &ids {
            let analytic = grads.get(*id).cloned().unwrap_or_else(|| Array2::zeros(store.value(*id).dim()));
            for idx in 0..store.value(*id).len() {
                let (r, c) = (idx / store.value(*id).ncols(), idx % store.value(*id).ncols());
                let orig = store.value(*id)[[r, c]];
                store.value_mut(*id)[[r, c]] = orig + h;
                let (fp, _) = eval(&store);
                store.value_mut(*id)[[r, c]] = orig - h;
                let (fm, _) = eval(&store);
                store.value_mut(*id)[[r, c]] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                    "param {:?}[{r},{c}]: analytic {a} numeric {numeric}",
                    id
                );
            }
        }
    }

    #[test]
    fn matmul_and_transpose_grads() {
        check((3, 4), &[(4, 2)], |g, v| g.matmul(v[0], v[1]));
        check((3, 4), &[(2, 4)], |g, v| g.matmul_t(v[0], v[1]));
        check((3, 4), &[], |g, v| g.transpose(v[0]));
    }

    #[test]
    fn elementwise_grads() {
        check((2, 3), &[(2, 3)], |g, v| g.mul(v[0], v[1]));
        check((2, 3), &[(2, 3)], |g, v| g.sub(v[0], v[1]));
        check((2, 3), &[(1, 3)], |g, v| g.mul_row(v[0], v[1]));
        check((2, 3), &[(1, 3)], |g, v| g.add_row(v[0], v[1]));
        check((2, 3), &[(1, 1)], |g, v| g.scale(v[0], v[1]));
        check((2, 3), &[], |g, v| g.tanh(v[0]));
        check((2, 3), &[], |g, v| g.sigmoid(v[0]));
        check((2, 3), &[], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn structural_grads() {
        check((4, 3), &[], |g, v| g.gather_rows(v[0], vec![2, 0, 2]));
        check((4, 3), &[(1, 3)], |g, v| g.add_to_row(v[0], v[1], 2));
        check((2, 3), &[(2, 2)], |g, v| g.concat_cols(v[0], v[1]));
        check((2, 5), &[], |g, v| g.slice_cols(v[0], 1, 3));
        check((1, 3), &[(2, 3)], |g, v| g.stack_rows(vec![v[0], v[1]]));
        check((3, 4), &[], |g, v| g.col_max(v[0]));
        check((2, 4), &[], |g, v| g.softmax_rows(v[0]));
        check((5, 3), &[], |g, v| g.max_pool_rows(v[0], &[(0, 1), (1, 4), (4, 5)]));
        check((3, 4), &[(1, 4), (1, 4)], |g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-12));
    }

    #[test]
    fn bce_grad_is_sigmoid_minus_target() {
        let mut store = ParamStore::new();
        let id = store.add("u", ParamGroup::Head, array![[0.0, 2.0, -1.0]]).unwrap();
        let mut g = Graph::new(&store);
        let u = g.param(id);
        let loss = g.bce_with_logits_mean(u, array![[1.0, sigmoid(2.0), 0.0]]);
        assert!((g.scalar(loss) - ((2f64).ln() + bce_with_logits(2.0, sigmoid(2.0)) + bce_with_logits(-1.0, 0.0)) / 3.0).abs() < 1e-12);
        let grads = g.backward(loss);
        let gu = grads.get(id).unwrap();
        assert!((gu[[0, 0]] + 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(gu[[0, 1]], 0.0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.add("a", ParamGroup::Head, array![[3.0, 4.0]]).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let loss = g.sum_all(a);
        let mut grads = g.backward(loss);
        let mut two = grads.clone();
        two.accumulate(&grads);
        assert!((two.global_norm() - 8f64.sqrt()).abs() < 1e-12);
        let before = grads.clip_global_norm(1.0);
        assert!((before - 2f64.sqrt()).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-5);
    }
}
