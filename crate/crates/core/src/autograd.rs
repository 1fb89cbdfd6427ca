//! Small reverse-mode differentiation tape over dense f64 matrices.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, records the forward pass
//! and replays it backwards into a [`ParamGrads`] accumulator. Every op
//! needed by the encoders has a hand-written adjoint.

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self · other
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// selfᵀ · other
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn shared dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self · otherᵀ
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt shared dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Lazily allocated gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        self.grads[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) {
        self.slot(id, grad.shape()).add_assign(grad);
    }

    pub fn accumulate_scalar(&mut self, id: ParamId, grad: f64) {
        self.slot(id, (1, 1)).data[0] += grad;
    }

    /// Adds `other` into `self`, parameter by parameter, in index order.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.add_assign(g),
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    /// Drops the gradients of parameters for which `keep` is false.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    ConcatRows(Var, Var),
    Row(Var, usize),
    MeanRows(Var),
    L2Normalize {
        x: Var,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Matrix>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows `ids` of a parameter table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (h, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            rstd.push(r);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            out,
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
        }
        self.push(Op::Gelu(x), out)
    }

    /// Multi-head scaled dot-product attention over all positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[cols.clone()];
                let row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                    max = max.max(*s);
                }
                let mut total = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let w = p.row(i)[j];
                    let vj = &vv.row(j)[cols.clone()];
                    for (o, x) in out.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    /// Stacks `b`'s rows under `a`'s.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat_rows width");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Matrix {
            rows: av.rows + bv.rows,
            cols: av.cols,
            data,
        };
        self.push(Op::ConcatRows(a, b), out)
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let out = Matrix::row_vector(self.value(x).row(index).to_vec());
        self.push(Op::Row(x, index), out)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.rows > 0, "mean over zero rows");
        let mut out = vec![0.0; xv.cols];
        for i in 0..xv.rows {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let n = xv.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Op::MeanRows(x), Matrix::row_vector(out))
    }

    /// Scales a row vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1, "l2_normalize expects a row vector");
        let norm = dot(&xv.data, &xv.data).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        let out = Matrix::row_vector(xv.data.iter().map(|v| v / norm).collect());
        Ok(self.push(Op::L2Normalize { x, norm }, out))
    }

    /// Propagates the seed gradients back through the tape, adding every
    /// parameter's gradient into `grads`.
    pub fn backward(&self, seeds: &[(Var, &Matrix)], grads: &mut ParamGrads) {
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            accumulate(&mut adj, *v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Gather { table, ids } => {
                    let shape = self.params.get(*table).shape();
                    let slot = grads.slot(*table, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, v) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate_owned(&mut adj, *a, ga);
                    accumulate_owned(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, &g);
                    accumulate_owned(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        for (s, v) in gr.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate_owned(&mut adj, *row, Matrix::row_vector(gr));
                    accumulate_owned(&mut adj, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let mut dx = Matrix::zeros(rows, cols);
                    #[allow(clippy::needless_range_loop)]
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut dxhat = vec![0.0; cols];
                        for j in 0..cols {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = dot(&dxhat, hr) / cols as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate_owned(&mut adj, *gain, Matrix::row_vector(dgain));
                    accumulate_owned(&mut adj, *bias, Matrix::row_vector(dbias));
                    accumulate_owned(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &x) in dx.data.iter_mut().zip(&xv.data) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    }
                    accumulate_owned(&mut adj, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(n, d);
                    let mut dk = Matrix::zeros(n, d);
                    let mut dv = Matrix::zeros(n, d);
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..n {
                            let gi = &g.row(i)[cols.clone()];
                            // dP_ij = <dO_i, V_j>
                            let dp: Vec<f64> = (0..n).map(|j| dot(gi, &vv.row(j)[cols.clone()])).collect();
                            let pi = p.row(i);
                            let inner = dot(&dp, pi);
                            for j in 0..n {
                                let w = pi[j];
                                for (o, x) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                    *o += w * x;
                                }
                                let ds = w * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for (o, x) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kv.row(j)[cols.clone()]) {
                                    *o += ds * x;
                                }
                                for (o, x) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qv.row(i)[cols.clone()]) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                    accumulate_owned(&mut adj, *q, dq);
                    accumulate_owned(&mut adj, *k, dk);
                    accumulate_owned(&mut adj, *v, dv);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).rows * g.cols;
                    let ga = Matrix {
                        rows: self.value(*a).rows,
                        cols: g.cols,
                        data: g.data[..split].to_vec(),
                    };
                    let gb = Matrix {
                        rows: self.value(*b).rows,
                        cols: g.cols,
                        data: g.data[split..].to_vec(),
                    };
                    accumulate_owned(&mut adj, *a, ga);
                    accumulate_owned(&mut adj, *b, gb);
                }
                Op::Row(x, index) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    dx.row_mut(*index).copy_from_slice(&g.data);
                    accumulate_owned(&mut adj, *x, dx);
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows;
                    let mut dx = Matrix::zeros(rows, g.cols);
                    let scaled: Vec<f64> = g.data.iter().map(|v| v / rows as f64).collect();
                    for r in 0..rows {
                        dx.row_mut(r).copy_from_slice(&scaled);
                    }
                    accumulate_owned(&mut adj, *x, dx);
                }
                Op::L2Normalize { x, norm } => {
                    let y = self.nodes[i].value.as_ref().expect("normalized value");
                    let yg = dot(&y.data, &g.data);
                    let dx = Matrix::row_vector(
                        g.data
                            .iter()
                            .zip(&y.data)
                            .map(|(gv, yv)| (gv - yv * yg) / norm)
                            .collect(),
                    );
                    accumulate_owned(&mut adj, *x, dx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Builds a small graph exercising every op and returns a scalar
    /// (dot of the output with a fixed probe) plus the parameter grads.
    fn scalar(store: &ParamStore, probe: &[f64], grads: Option<&mut ParamGrads>) -> f64 {
        let mut tape = Tape::new(store);
        let ids = |n: &str| store.find(n).unwrap();
        let x = tape.gather(ids("table"), &[2, 0, 2]);
        let cls = tape.param(ids("cls"));
        let seq = tape.concat_rows(cls, x);
        let pos = tape.gather(ids("pos"), &[0, 1, 2, 3]);
        let seq = tape.add(seq, pos);
        let (g, b) = (tape.param(ids("g")), tape.param(ids("b")));
        let h = tape.layer_norm(seq, g, b);
        let w = tape.param(ids("w"));
        let q = tape.matmul(h, w);
        let a = tape.attention(q, h, seq, 2);
        let a = tape.gelu(a);
        let bias = tape.param(ids("bias"));
        let a = tape.add_row(a, bias);
        let first = tape.row(a, 0);
        let mean = tape.mean_rows(a);
        let both = tape.add(first, mean);
        let out = tape.l2_normalize(both).unwrap();
        let value = dot(tape.value(out).data(), probe);
        if let Some(grads) = grads {
            let seed = Matrix::row_vector(probe.to_vec());
            tape.backward(&[(out, &seed)], grads);
        }
        value
    }

    #[test]
    fn tape_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("table", random(&mut rng, 4, 4));
        store.add("cls", random(&mut rng, 1, 4));
        store.add("pos", random(&mut rng, 5, 4));
        store.add("g", random(&mut rng, 1, 4));
        store.add("b", random(&mut rng, 1, 4));
        store.add("w", random(&mut rng, 4, 4));
        store.add("bias", random(&mut rng, 1, 4));
        let probe: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut grads = ParamGrads::for_store(&store);
        scalar(&store, &probe, Some(&mut grads));

        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.get(id).data().len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let numeric = (scalar(&plus, &probe, None) - scalar(&minus, &probe, None)) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    err < 1e-5 || (numeric - analytic).abs() < 1e-9,
                    "{}[{k}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
        // Row 1 and 3 of the table were never gathered.
        let table = grads.get(store.find("table").unwrap()).unwrap();
        assert!(table.row(1).iter().all(|&v| v == 0.0));
        assert!(table.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_vector_cannot_be_normalized() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.input(Matrix::zeros(1, 3));
        assert!(matches!(tape.l2_normalize(z), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, 3, 5);
        let b = random(&mut rng, 5, 2);
        let c = random(&mut rng, 3, 2);
        let ab = a.matmul(&b);
        let bt = Matrix::from_vec(2, 5, (0..10).map(|i| b.data()[(i % 5) * 2 + i / 5]).collect()).unwrap();
        let ab2 = a.matmul_nt(&bt);
        for (x, y) in ab.data().iter().zip(ab2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let atc = a.matmul_tn(&c);
        assert_eq!(atc.shape(), (5, 2));
        let expected: f64 = (0..3).map(|r| a.row(r)[1] * c.row(r)[0]).sum();
        assert!((atc.row(1)[0] - expected).abs() < 1e-12);
    }
}
