//! Reverse-mode gradient tape over a closed set of matrix primitives.
//!
//! A [`Tape`] records one forward pass. Parameter leaves are registered by
//! name and keep a copy of the values they were read from, which lets
//! [`Tape::backward_checked`] refuse to differentiate a pass whose parameters
//! have since been mutated. Each reverse sweep walks the recorded nodes once,
//! from the output back to the first leaf.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, attend_row, dot, log_sigmoid, sigmoid, vec_mat};
use crate::numerics::{ParamVector, RealMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    RowSlice {
        src: Var,
        start: usize,
    },
    Select {
        src: Var,
        row: usize,
        col: usize,
    },
    SumAll(Var),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: RealMatrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    /// Drops all recorded nodes so the tape can record a fresh pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: RealMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: &RealMatrix) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateSegment(name.to_string()));
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Registers every segment of `params` in order.
    pub fn params(&mut self, params: &ParamVector) -> Result<Vec<Var>> {
        params.iter().map(|(n, m)| self.param(n, m)).collect()
    }

    pub fn constant(&mut self, value: RealMatrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn expect_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Rows of `table` picked by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::ShapeMismatch(format!(
                "gather row {bad} from a table of {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = RealMatrix::from_raw(ids.len(), t.cols(), data);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "add")?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = RealMatrix::from_raw(x.rows(), x.cols(), data);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 x n` bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::ShapeMismatch(format!(
                "row bias {:?} for {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, bj) in value.row_mut(i).iter_mut().zip(b.data()) {
                *o += bj;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "mul")?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = RealMatrix::from_raw(x.rows(), x.cols(), data);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.scaled(c);
        self.push(value, Op::Scale(a, c))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, w) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.cols() != w.rows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} by {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let mut value = RealMatrix::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            vec_mat(x.row(i), w.data(), value.row_mut(i));
        }
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, w) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.cols() != w.cols() {
            return Err(Error::ShapeMismatch(format!(
                "matmul_bt {:?} by {:?}ᵀ",
                x.shape(),
                w.shape()
            )));
        }
        let mut value = RealMatrix::zeros(x.rows(), w.rows());
        for i in 0..x.rows() {
            kernels::mat_vec(w.data(), x.row(i), value.row_mut(i));
        }
        Ok(self.push(value, Op::MatMulBT(a, b)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = &self.nodes[a.0].value;
        let value =
            RealMatrix::from_raw(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect());
        self.push(value, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = RealMatrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            kernels::log_softmax(x.row(i), value.row_mut(i));
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Causal multi-head self-attention over rows of `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.expect_same(q, k, "attention q/k")?;
        self.expect_same(q, v, "attention q/v")?;
        let (n, d) = self.shape(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch(format!("{heads} heads for width {d}")));
        }
        let mut value = RealMatrix::zeros(n, d);
        let mut probs = vec![0.0; heads * n * n];
        let (qm, km, vm) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut row_probs = vec![0.0; heads * n];
        for i in 0..n {
            let len = i + 1;
            attend_row(
                qm.row(i),
                &km.data()[..len * d],
                &vm.data()[..len * d],
                heads,
                value.row_mut(i),
                Some(&mut row_probs[..heads * len]),
            );
            for h in 0..heads {
                for j in 0..len {
                    probs[(h * n + i) * n + j] = row_probs[h * len + j];
                }
            }
        }
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    pub fn row_slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[src.0].value;
        if start + len > x.rows() {
            return Err(Error::ShapeMismatch(format!(
                "rows {start}..{} of a {}-row matrix",
                start + len,
                x.rows()
            )));
        }
        let data = x.data()[start * x.cols()..(start + len) * x.cols()].to_vec();
        let value = RealMatrix::from_raw(len, x.cols(), data);
        Ok(self.push(value, Op::RowSlice { src, start }))
    }

    /// Scalar entry `(row, col)`.
    pub fn select(&mut self, src: Var, row: usize, col: usize) -> Result<Var> {
        let x = &self.nodes[src.0].value;
        if row >= x.rows() || col >= x.cols() {
            return Err(Error::ShapeMismatch(format!(
                "select ({row}, {col}) from {:?}",
                x.shape()
            )));
        }
        let value = RealMatrix::scalar(x.get(row, col));
        Ok(self.push(value, Op::Select { src, row, col }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().sum();
        self.push(RealMatrix::scalar(total), Op::SumAll(a))
    }

    /// `Σ c_i · x_i` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Ok(self.constant(RealMatrix::scalar(0.0)));
        };
        let (r, c) = self.shape(first);
        let mut value = RealMatrix::zeros(r, c);
        for &(v, coef) in terms {
            if self.shape(v) != (r, c) {
                return Err(Error::ShapeMismatch("lin_comb terms".into()));
            }
            value.axpy(coef, &self.nodes[v.0].value);
        }
        Ok(self.push(value, Op::LinComb(terms.to_vec())))
    }

    /// Fails if any registered parameter differs from `current`.
    pub fn verify_params(&self, current: &ParamVector) -> Result<()> {
        for (name, v) in &self.params {
            let now = current.require(name)?;
            if now != &self.nodes[v.0].value {
                return Err(Error::StaleTape(name.clone()));
            }
        }
        Ok(())
    }

    /// Exact gradient of scalar node `output` times `seed` with respect to
    /// every registered parameter, in registration order.
    pub fn backward(&self, output: Var, seed: f64) -> Result<ParamVector> {
        let (rows, cols) = self.shape(output);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        let mut adj: Vec<Option<RealMatrix>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(RealMatrix::scalar(seed));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Param) {
                adj[i] = Some(g);
            }
        }
        let mut grads = ParamVector::new();
        for (name, v) in &self.params {
            let g = match adj.get(v.0).and_then(|a| a.clone()) {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*v);
                    RealMatrix::zeros(r, c)
                }
            };
            grads.push(name.clone(), g)?;
        }
        Ok(grads)
    }

    /// [`Tape::backward`] after checking the parameters are unchanged.
    pub fn backward_checked(
        &self,
        output: Var,
        seed: f64,
        current: &ParamVector,
    ) -> Result<ParamVector> {
        self.verify_params(current)?;
        self.backward(output, seed)
    }

    fn propagate(&self, i: usize, g: &RealMatrix, adj: &mut [Option<RealMatrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let slot = |adj: &mut [Option<RealMatrix>], v: Var| -> *mut RealMatrix {
            let entry = &mut adj[v.0];
            if entry.is_none() {
                let (r, c) = self.nodes[v.0].value.shape();
                *entry = Some(RealMatrix::zeros(r, c));
            }
            entry.as_mut().unwrap() as *mut RealMatrix
        };
        // Safety: each `slot` pointer is used before the next call to `slot`,
        // so no two live mutable references alias.
        macro_rules! acc {
            ($v:expr) => {
                unsafe { &mut *slot(adj, $v) }
            };
        }
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Gather { table, ids } => {
                let t = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in t.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Add(a, b) => {
                acc!(*a).add_assign(g);
                acc!(*b).add_assign(g);
            }
            Op::AddRow(a, bias) => {
                acc!(*a).add_assign(g);
                let b = acc!(*bias);
                for r in 0..g.rows() {
                    for (o, x) in b.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a).clone(), val(*b).clone());
                let ga = acc!(*a);
                for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(xb.data()) {
                    *o += gv * y;
                }
                let gb = acc!(*b);
                for ((o, gv), y) in gb.data_mut().iter_mut().zip(g.data()).zip(xa.data()) {
                    *o += gv * y;
                }
            }
            Op::Scale(a, c) => acc!(*a).axpy(*c, g),
            Op::MatMul(a, b) => {
                // out = X W:  dX = G Wᵀ,  dW = Xᵀ G
                let (x, w) = (val(*a), val(*b));
                let ga = acc!(*a);
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    let orow = ga.row_mut(r);
                    for (k, o) in orow.iter_mut().enumerate() {
                        *o += dot(grow, w.row(k));
                    }
                }
                let gw = acc!(*b);
                for r in 0..g.rows() {
                    let (xrow, grow) = (x.row(r), g.row(r));
                    for (k, xk) in xrow.iter().enumerate() {
                        for (o, gj) in gw.row_mut(k).iter_mut().zip(grow) {
                            *o += xk * gj;
                        }
                    }
                }
            }
            Op::MatMulBT(a, b) => {
                // out = X Wᵀ:  dX = G W,  dW = Gᵀ X
                let (x, w) = (val(*a), val(*b));
                let ga = acc!(*a);
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    let orow = ga.row_mut(r);
                    for (v, gv) in grow.iter().enumerate() {
                        for (o, wv) in orow.iter_mut().zip(w.row(v)) {
                            *o += gv * wv;
                        }
                    }
                }
                let gw = acc!(*b);
                for r in 0..g.rows() {
                    let (xrow, grow) = (x.row(r), g.row(r));
                    for (v, gv) in grow.iter().enumerate() {
                        for (o, xj) in gw.row_mut(v).iter_mut().zip(xrow) {
                            *o += gv * xj;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = acc!(*a);
                for ((o, gv), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * (1.0 - t * t);
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = acc!(*a);
                for ((o, gv), s) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * s * (1.0 - s);
                }
            }
            Op::LogSigmoid(a) => {
                // d/dx ln σ(x) = σ(-x)
                let x = val(*a).clone();
                let ga = acc!(*a);
                for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *o += gv * sigmoid(-xv);
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                let ga = acc!(*a);
                for ((o, gv), e) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * e;
                }
            }
            Op::Log(a) => {
                let x = val(*a).clone();
                let ga = acc!(*a);
                for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *o += gv / xv;
                }
            }
            Op::LogSoftmaxRows(a) => {
                // dz = g - softmax(z) Σg
                let z = val(*a).clone();
                let ga = acc!(*a);
                let mut p = vec![0.0; z.cols()];
                for r in 0..z.rows() {
                    let grow = g.row(r);
                    if grow.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    kernels::softmax(z.row(r), &mut p);
                    let total: f64 = grow.iter().sum();
                    for ((o, gv), pv) in ga.row_mut(r).iter_mut().zip(grow).zip(&p) {
                        *o += gv - pv * total;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, adj);
            }
            Op::RowSlice { src, start } => {
                let s = acc!(*src);
                for r in 0..g.rows() {
                    for (o, x) in s.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Select { src, row, col } => {
                let s = acc!(*src);
                let idx = row * s.cols() + col;
                s.data_mut()[idx] += g.item();
            }
            Op::SumAll(a) => {
                let gv = g.item();
                for o in acc!(*a).data_mut() {
                    *o += gv;
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc!(v).axpy(c, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &RealMatrix,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        adj: &mut [Option<RealMatrix>],
    ) {
        let (qm, km, vm) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (n, d) = qm.shape();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = RealMatrix::zeros(n, d);
        let mut dk = RealMatrix::zeros(n, d);
        let mut dv = RealMatrix::zeros(n, d);
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let lo = h * hd;
            let hi = lo + hd;
            for i in 0..n {
                let p = &probs[(h * n + i) * n..(h * n + i) * n + i + 1];
                let gi = &g.row(i)[lo..hi];
                // dV_j += p_ij g_i ;  dP_ij = <g_i, v_j>
                for j in 0..=i {
                    for (o, x) in dv.row_mut(j)[lo..hi].iter_mut().zip(gi) {
                        *o += p[j] * x;
                    }
                    dp[j] = dot(gi, &vm.row(j)[lo..hi]);
                }
                // dS = P ⊙ (dP - <dP, P>)
                let centre: f64 = (0..=i).map(|j| dp[j] * p[j]).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - centre) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &km.row(j)[lo..hi];
                    for (o, x) in dq.row_mut(i)[lo..hi].iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let qi = &qm.row(i)[lo..hi];
                    for (o, x) in dk.row_mut(j)[lo..hi].iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            let entry = &mut adj[var.0];
            match entry {
                Some(m) => m.add_assign(&grad),
                None => *entry = Some(grad),
            }
        }
    }
}
