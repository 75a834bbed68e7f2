//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! tape in reverse creation order. Spatial derivatives are carried as extra
//! row blocks (see [`super::jet`]), so differentiating a loss that contains
//! spatial gradients only ever needs first-order reverse mode.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    /// `ln(1 + exp(βz)) / β`
    Softplus { beta: f64 },
    Relu,
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Softplus { beta } => {
                let bz = beta * z;
                let s = sigmoid(bz);
                let v = if bz > 30.0 { z } else { bz.exp().ln_1p() / beta };
                (v, s, beta * s * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias { x: Var, bias: Var, rows: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Neg(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Sigmoid(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    NormRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    PadRows(Var),
    Reshape(Var),
    CumsumExclusiveCols(Var),
    SumRowGroups { x: Var, group: usize },
    JetAct { z: Var, blocks: usize, act: Activation },
    JetPe { x: Var, blocks: usize, freqs: usize, include_input: bool },
    JetNorm { x: Var, blocks: usize },
    LaplaceDensity { s: Var, log_alpha: Var, log_beta: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded computation. Values are kept for the backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    frozen: Vec<bool>,
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter bound in the graph. A
    /// parameter that was bound but is unreachable from the loss gets zeros.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params.iter().map(move |&(id, v)| (id, self.wrt(v)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.wrt(v))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks parameters that must be bound as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            if self.frozen.len() <= id.0 {
                self.frozen.resize(id.0 + 1, false);
            }
            self.frozen[id.0] = true;
        }
    }

    fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.get(id.0).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        self.push(value, op, tracked)
    }

    /// A value the loss may be differentiated against.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let frozen = self.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Param, !frozen);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// A constant copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ── linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(m, n, out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[1, k]` bias to the first `rows` rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, rows: usize) -> Result<Var> {
        let [n, k] = self.shape(x);
        if self.shape(bias) != [1, k] || rows > n {
            return Err(Error::Shape(format!(
                "bias {:?} for [{n}, {k}] over {rows} rows",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * k..(r + 1) * k];
            add_into(row, &b);
        }
        Ok(self.push_op(out, Op::AddBias { x, bias, rows }, &[x, bias]))
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    /// Scales each row of `a` by the matching entry of the column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let [n, k] = self.shape(a);
        if self.shape(c) != [n, 1] {
            return Err(Error::Shape(format!("mul_col [{n}, {k}] by {:?}", self.shape(c))));
        }
        let mut out = self.value(a).clone();
        let col = self.value(c).data().to_vec();
        for (r, &s) in col.iter().enumerate() {
            out.data_mut()[r * k..(r + 1) * k].iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push_op(out, Op::MulCol(a, c), &[a, c]))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let t = self.map(a, |x| x * f);
        self.push_op(t, Op::Scale(a, f), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push_op(t, Op::Offset(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| -x);
        self.push_op(t, Op::Neg(a), &[a])
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push_op(t, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push_op(t, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::sqrt);
        self.push_op(t, Op::Sqrt(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push_op(t, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push_op(t, Op::Sigmoid(a), &[a])
    }

    // ── reductions ────────────────────────────────────────────────────

    /// `[n, k] -> [n, 1]`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let k = ta.cols();
        let data = (0..ta.rows()).map(|r| ta.data()[r * k..(r + 1) * k].iter().sum()).collect();
        let t = Tensor::column(data);
        self.push_op(t, Op::SumCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Mean over all entries; an empty tensor has mean zero.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = if ta.is_empty() { 0.0 } else { ta.data().iter().sum::<f64>() / ta.len() as f64 };
        self.push_op(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Euclidean norm of each row, `[n, k] -> [n, 1]`. The subgradient of a
    /// zero row is zero.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let k = ta.cols();
        let data = (0..ta.rows())
            .map(|r| ta.data()[r * k..(r + 1) * k].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::column(data);
        self.push_op(t, Op::NormRows(a), &[a])
    }

    // ── structure ─────────────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p)[0]).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p)[0] != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(n, total, data)?;
        Ok(self.push_op(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, k] = self.shape(x);
        if start + len > k {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {k}")));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(n, len, data)?;
        Ok(self.push_op(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let k = parts.first().map(|&p| self.shape(p)[1]).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p)[1] != k) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len() / k.max(1);
        let t = Tensor::new(if k == 0 { 0 } else { n }, k, data)?;
        Ok(self.push_op(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, k] = self.shape(x);
        if start + len > n {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {n}")));
        }
        let data = self.value(x).data()[start * k..(start + len) * k].to_vec();
        let t = Tensor::new(len, k, data)?;
        Ok(self.push_op(t, Op::SliceRows { x, start }, &[x]))
    }

    /// `out[r] = table[idx[r]]`
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let [n, k] = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather row {bad} of {n}")));
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in &idx {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(idx.len(), k, data)?;
        Ok(self.push_op(t, Op::GatherRows { table, idx }, &[table]))
    }

    /// Appends zero rows so the result has `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let [n, k] = self.shape(x);
        if total < n {
            return Err(Error::Shape(format!("pad_rows {n} to {total}")));
        }
        let mut data = self.value(x).data().to_vec();
        data.resize(total * k, 0.0);
        let t = Tensor::new(total, k, data)?;
        Ok(self.push_op(t, Op::PadRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = Tensor::new(rows, cols, self.value(x).data().to_vec())?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// `out[r, j] = Σ_{i<j} x[r, i]`
    pub fn cumsum_exclusive_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let k = tx.cols();
        let mut out = Tensor::zeros(tx.rows(), k);
        for r in 0..tx.rows() {
            let mut acc = 0.0;
            for j in 0..k {
                out.set(r, j, acc);
                acc += tx.get(r, j);
            }
        }
        self.push_op(out, Op::CumsumExclusiveCols(x), &[x])
    }

    /// Sums consecutive groups of `group` rows: `[m·group, k] -> [m, k]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let [n, k] = self.shape(x);
        if group == 0 || n % group != 0 {
            return Err(Error::Shape(format!("sum_row_groups {n} rows by {group}")));
        }
        let tx = self.value(x);
        let m = n / group;
        let mut out = Tensor::zeros(m, k);
        for r in 0..n {
            let dst = &mut out.data_mut()[(r / group) * k..(r / group + 1) * k];
            add_into(dst, tx.row(r));
        }
        Ok(self.push_op(out, Op::SumRowGroups { x, group }, &[x]))
    }

    // ── fused jet ops ─────────────────────────────────────────────────

    /// Activation applied to the value block; tangent blocks are scaled by
    /// the activation's derivative at the value.
    pub fn jet_act(&mut self, z: Var, blocks: usize, act: Activation) -> Result<Var> {
        let [rows, k] = self.shape(z);
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::Shape(format!("jet_act {rows} rows in {blocks} blocks")));
        }
        let n = rows / blocks;
        let tz = self.value(z);
        let mut out = Tensor::zeros(rows, k);
        let head = n * k;
        for i in 0..head {
            let (v, d1, _) = act.eval(tz.data()[i]);
            out.data_mut()[i] = v;
            for b in 1..blocks {
                out.data_mut()[b * head + i] = d1 * tz.data()[b * head + i];
            }
        }
        Ok(self.push_op(out, Op::JetAct { z, blocks, act }, &[z]))
    }

    /// Sinusoidal encoding `[x, sin(2⁰πx), cos(2⁰πx), …]` of every row,
    /// with tangent blocks propagated by the chain rule.
    pub fn jet_pe(&mut self, x: Var, blocks: usize, freqs: usize, include_input: bool) -> Result<Var> {
        let [rows, d] = self.shape(x);
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::Shape(format!("jet_pe {rows} rows in {blocks} blocks")));
        }
        let n = rows / blocks;
        let width = d * (2 * freqs + usize::from(include_input));
        let tx = self.value(x);
        let mut out = Tensor::zeros(rows, width);
        for r in 0..n {
            let x0 = tx.row(r);
            let mut col = 0;
            if include_input {
                for b in 0..blocks {
                    let src = tx.row(b * n + r);
                    out.data_mut()[(b * n + r) * width..(b * n + r) * width + d].copy_from_slice(src);
                }
                col = d;
            }
            for l in 0..freqs {
                let w = (1u64 << l) as f64 * std::f64::consts::PI;
                for c in 0..d {
                    let (s, co) = (w * x0[c]).sin_cos();
                    out.set(r, col + c, s);
                    out.set(r, col + d + c, co);
                    for b in 1..blocks {
                        let dx = tx.get(b * n + r, c);
                        out.set(b * n + r, col + c, w * co * dx);
                        out.set(b * n + r, col + d + c, -w * s * dx);
                    }
                }
                col += 2 * d;
            }
        }
        Ok(self.push_op(out, Op::JetPe { x, blocks, freqs, include_input }, &[x]))
    }

    /// Row norm of the value block with its directional derivatives.
    pub fn jet_norm(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let rows = self.shape(x)[0];
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::Shape(format!("jet_norm {rows} rows in {blocks} blocks")));
        }
        let n = rows / blocks;
        let tx = self.value(x);
        let mut out = Tensor::zeros(rows, 1);
        for r in 0..n {
            let x0 = tx.row(r);
            let nr = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.set(r, 0, nr);
            if nr > 0.0 {
                for b in 1..blocks {
                    let dot: f64 = x0.iter().zip(tx.row(b * n + r)).map(|(a, b)| a * b).sum();
                    out.set(b * n + r, 0, dot / nr);
                }
            }
        }
        Ok(self.push_op(out, Op::JetNorm { x, blocks }, &[x]))
    }

    /// `σ = α Φ_β(−s)` with `Φ_β` the zero-mean Laplace CDF, α and β given
    /// as `[1, 1]` log-parameters.
    pub fn laplace_density(&mut self, s: Var, log_alpha: Var, log_beta: Var) -> Result<Var> {
        if self.shape(s)[1] != 1 || self.shape(log_alpha) != [1, 1] || self.shape(log_beta) != [1, 1] {
            return Err(Error::Shape("laplace_density expects [n,1], [1,1], [1,1]".into()));
        }
        let alpha = self.value(log_alpha).item().exp();
        let beta = self.value(log_beta).item().exp();
        let t = self.map(s, |sv| laplace_density_value(sv, alpha, beta));
        Ok(self.push_op(t, Op::LaplaceDensity { s, log_alpha, log_beta }, &[s, log_alpha, log_beta]))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse-mode sweep from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.tracked(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self
            .param_vars
            .iter()
            .filter(|(_, v)| self.tracked(**v))
            .map(|(&id, &v)| (id, v))
            .collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.tracked(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, vb, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, va, true, g, false, gb, true);
                }
            }
            Op::AddBias { x, bias, rows } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let k = out.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in 0..*rows {
                        add_into(gb, &g[r * k..(r + 1) * k]);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::MulCol(a, c) => {
                let k = out.cols();
                let (va, vc) = (self.value(*a).data(), self.value(*c).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &s) in vc.iter().enumerate() {
                        for j in 0..k {
                            ga[r * k + j] += g[r * k + j] * s;
                        }
                    }
                }
                if let Some(gc) = self.acc(grads, *c) {
                    for r in 0..vc.len() {
                        gc[r] += (0..k).map(|j| g[r * k + j] * va[r * k + j]).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let sign = if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * sign;
                    }
                }
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += 2.0 * va[i] * g[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                let vo = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if vo[i] > 0.0 {
                            ga[i] += 0.5 * g[i] / vo[i];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let vo = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vo[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let vo = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vo[i] * (1.0 - vo[i]);
                    }
                }
            }
            Op::SumCols(a) => {
                let k = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &gr) in g.iter().enumerate() {
                        ga[r * k..(r + 1) * k].iter_mut().for_each(|d| *d += gr);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::NormRows(a) => {
                let k = self.shape(*a)[1];
                let va = self.value(*a).data();
                let vo = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..vo.len() {
                        if vo[r] > 0.0 {
                            let s = g[r] / vo[r];
                            for j in 0..k {
                                ga[r * k + j] += s * va[r * k + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..out.rows() {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let k = self.shape(*x)[1];
                let w = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..out.rows() {
                        add_into(&mut gx[r * k + start..r * k + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let k = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * k..start * k + g.len()], g);
                }
            }
            Op::GatherRows { table, idx } => {
                let k = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * k..(i + 1) * k], &g[r * k..(r + 1) * k]);
                    }
                }
            }
            Op::PadRows(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let len = gx.len();
                    add_into(gx, &g[..len]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::CumsumExclusiveCols(x) => {
                let k = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..out.rows() {
                        let mut acc = 0.0;
                        for j in (0..k).rev() {
                            gx[r * k + j] += acc;
                            acc += g[r * k + j];
                        }
                    }
                }
            }
            Op::SumRowGroups { x, group } => {
                let k = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() / k.max(1);
                    for r in 0..n {
                        let src = &g[(r / group) * k..(r / group + 1) * k];
                        add_into(&mut gx[r * k..(r + 1) * k], src);
                    }
                }
            }
            Op::JetAct { z, blocks, act } => {
                let tz = self.value(*z).data();
                if let Some(gz) = self.acc(grads, *z) {
                    let head = tz.len() / blocks;
                    for i in 0..head {
                        let (_, d1, d2) = act.eval(tz[i]);
                        let mut g0 = g[i] * d1;
                        for b in 1..*blocks {
                            let j = b * head + i;
                            g0 += g[j] * tz[j] * d2;
                            gz[j] += g[j] * d1;
                        }
                        gz[i] += g0;
                    }
                }
            }
            Op::JetPe { x, blocks, freqs, include_input } => {
                let [rows, d] = self.shape(*x);
                let n = rows / blocks;
                let width = out.cols();
                let tx = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..n {
                        let mut col = 0;
                        if *include_input {
                            for b in 0..*blocks {
                                let row = b * n + r;
                                for c in 0..d {
                                    gx[row * d + c] += g[row * width + c];
                                }
                            }
                            col = d;
                        }
                        for l in 0..*freqs {
                            let w = (1u64 << l) as f64 * std::f64::consts::PI;
                            for c in 0..d {
                                let (s, co) = (w * tx.get(r, c)).sin_cos();
                                let gs = g[r * width + col + c];
                                let gc = g[r * width + col + d + c];
                                let mut g0 = gs * w * co - gc * w * s;
                                for b in 1..*blocks {
                                    let row = b * n + r;
                                    let dx = tx.get(row, c);
                                    let ts = g[row * width + col + c];
                                    let tc = g[row * width + col + d + c];
                                    g0 += -ts * w * w * s * dx - tc * w * w * co * dx;
                                    gx[row * d + c] += ts * w * co - tc * w * s;
                                }
                                gx[r * d + c] += g0;
                            }
                            col += 2 * d;
                        }
                    }
                }
            }
            Op::JetNorm { x, blocks } => {
                let [rows, k] = self.shape(*x);
                let n = rows / blocks;
                let tx = self.value(*x);
                let vo = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..n {
                        let nr = vo[r];
                        if nr <= 0.0 {
                            continue;
                        }
                        let x0 = tx.row(r);
                        for c in 0..k {
                            gx[r * k + c] += g[r] * x0[c] / nr;
                        }
                        for b in 1..*blocks {
                            let row = b * n + r;
                            let xt = tx.row(row);
                            let dot: f64 = x0.iter().zip(xt).map(|(a, b)| a * b).sum();
                            let gt = g[row];
                            for c in 0..k {
                                gx[r * k + c] += gt * (xt[c] / nr - dot * x0[c] / (nr * nr * nr));
                                gx[row * k + c] += gt * x0[c] / nr;
                            }
                        }
                    }
                }
            }
            Op::LaplaceDensity { s, log_alpha, log_beta } => {
                let alpha = self.value(*log_alpha).item().exp();
                let beta = self.value(*log_beta).item().exp();
                let vs = self.value(*s).data();
                let vo = out.data();
                if let Some(gs) = self.acc(grads, *s) {
                    for i in 0..g.len() {
                        let e = (-vs[i].abs() / beta).exp();
                        gs[i] += g[i] * (-alpha * e / (2.0 * beta));
                    }
                }
                if let Some(ga) = self.acc(grads, *log_alpha) {
                    ga[0] += g.iter().zip(vo).map(|(gi, o)| gi * o).sum::<f64>();
                }
                if let Some(gb) = self.acc(grads, *log_beta) {
                    let mut acc = 0.0;
                    for i in 0..g.len() {
                        let a = vs[i].abs();
                        let e = (-a / beta).exp();
                        // dσ/dβ · β
                        let d = 0.5 * alpha * e * a / beta;
                        acc += g[i] * if vs[i] >= 0.0 { d } else { -d };
                    }
                    gb[0] += acc;
                }
            }
        }
    }
}

/// Closed-form `α Φ_β(−s)`.
#[inline]
pub fn laplace_density_value(s: f64, alpha: f64, beta: f64) -> f64 {
    let e = 0.5 * (-s.abs() / beta).exp();
    if s >= 0.0 {
        alpha * e
    } else {
        alpha * (1.0 - e)
    }
}
