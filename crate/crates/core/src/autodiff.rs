//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends
//! a node holding its output value; [`Tape::backward`] walks the nodes in
//! reverse insertion order (a valid reverse topological order, since a node
//! can only reference earlier nodes) and accumulates gradients into the
//! parameter leaves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, gemm, Layout, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    MeanRows { input: Var, valid: Option<Vec<bool>> },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    SumAll(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter in a store.
/// Parameters the loss does not depend on get exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values().iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    /// Adds `other` into `self`, scaled by `weight`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += weight * b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// The trainable leaf for `id`. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn zeros_like(&mut self, v: Var) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        self.constant(Tensor::zeros(shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Transposed, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul_t", Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", value, Op::Add(a, b), ng)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if self.value(bias).len() != c {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        let shape = self.shape(a).to_vec();
        self.push("add_bias", Tensor::new(shape, out)?, Op::AddBias(a, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, data)?, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push("scale", value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| tensor::gelu(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push("gelu", Tensor::new(shape, data)?, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Row softmax where columns with `valid[j] == false` get exactly zero
    /// weight.
    pub fn masked_softmax_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if let Some(v) = valid {
            if v.len() != c {
                return Err(shape_err("softmax_rows", self.shape(a), &[v.len()]));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::Contract("softmax mask hides every column".into()));
            }
        }
        let mut out = self.value(a).data().to_vec();
        tensor::softmax_rows_in_place(&mut out, r, c, valid);
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push("softmax_rows", Tensor::new(shape, out)?, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        if self.value(gain).len() != d || self.value(bias).len() != d || d == 0 {
            return Err(shape_err("layer_norm", self.shape(a), self.shape(gain)));
        }
        let x = self.value(a);
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut stats = Vec::with_capacity(rows);
        tensor::layer_norm_rows(
            x.data(),
            rows,
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            Some(&mut stats),
        );
        let ng = self.ng(a) || self.ng(gain) || self.ng(bias);
        let shape = self.shape(a).to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                stats,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(a);
        self.push("transpose", value, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let ng = self.ng(a);
        self.push("reshape", value, Op::Reshape(a), ng)
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, c) = self.dims2(first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p)?;
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Joins matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_cols", Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start + len > r {
            return Err(shape_err("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push("slice_rows", Tensor::new(vec![len, c], data)?, Op::SliceRows { input: a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start + len > c {
            return Err(shape_err("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        self.push("slice_cols", Tensor::new(vec![r, len], data)?, Op::SliceCols { input: a, start }, ng)
    }

    /// Mean over rows (optionally only the rows flagged valid), as a `1×c`
    /// matrix.
    pub fn mean_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if let Some(v) = valid {
            if v.len() != r {
                return Err(shape_err("mean_rows", self.shape(a), &[v.len()]));
            }
        }
        let count = valid.map_or(r, |v| v.iter().filter(|&&b| b).count());
        if count == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            if valid.map_or(true, |v| v[i]) {
                for (o, x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(a);
        self.push(
            "mean_rows",
            Tensor::new(vec![1, c], out)?,
            Op::MeanRows {
                input: a,
                valid: valid.map(<[bool]>::to_vec),
            },
            ng,
        )
    }

    /// Gathers rows of a `vocab×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Validation(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Negative log-likelihood of `target` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Validation(format!(
                "target class {target} outside {} logits",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| libm::exp(v - max)).sum();
        let lse = max + libm::log(sum);
        let probs = z.iter().map(|&v| libm::exp(v - lse)).collect();
        let loss = lse - z[target];
        let ng = self.ng(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (o, x) in out.grads[id.index()].data_mut().iter_mut().zip(g) {
                    *o += x;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, Layout::Normal, bv, Layout::Transposed, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    gemm(k, m, n, av, Layout::Transposed, g, Layout::Normal, gb, true);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (n, _) = self.dims2(*b)?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · B
                    gemm(m, n, k, g, Layout::Normal, bv, Layout::Normal, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Gᵀ · A
                    gemm(n, m, k, g, Layout::Transposed, av, Layout::Normal, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                let c = self.value(*bias).len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), &z) in ga.iter_mut().zip(g).zip(av) {
                        *o += x * tensor::gelu_grad(z);
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2()?;
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                stats,
            } => {
                let d = self.value(*gain).len();
                let x = self.value(*input).data();
                let gamma = self.value(*gain).data();
                let rows = x.len() / d;
                let mut xhat = vec![0.0; x.len()];
                for i in 0..rows {
                    let (mean, rstd) = stats[i];
                    for j in 0..d {
                        xhat[i * d + j] = (x[i * d + j] - mean) * rstd;
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..rows {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    let inv_d = 1.0 / d as f64;
                    for i in 0..rows {
                        let rstd = stats[i].1;
                        let mut mean_dx = 0.0;
                        let mut mean_dx_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gamma[j];
                            mean_dx += dxh;
                            mean_dx_xhat += dxh * xhat[i * d + j];
                        }
                        mean_dx *= inv_d;
                        mean_dx_xhat *= inv_d;
                        for j in 0..d {
                            let dxh = g[i * d + j] * gamma[j];
                            gx[i * d + j] += rstd * (dxh - mean_dx - xhat[i * d + j] * mean_dx_xhat);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2()?;
                let gt = tensor::transpose_data(g, r, c);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&gt).for_each(|(o, x)| *o += x);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, x)| *o += x);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.dims2(p)?;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            let src = &g[i * total + col..i * total + col + w];
                            gp[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(o, x)| *o += x);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { input, start } => {
                let (_, c) = self.dims2(*input)?;
                if let Some(ga) = self.acc(grads, *input) {
                    ga[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::SliceCols { input, start } => {
                let (r, c) = self.dims2(*input)?;
                let (_, w) = node.value.dims2()?;
                if let Some(ga) = self.acc(grads, *input) {
                    for i in 0..r {
                        let dst = &mut ga[i * c + start..i * c + start + w];
                        dst.iter_mut().zip(&g[i * w..(i + 1) * w]).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::MeanRows { input, valid } => {
                let (r, c) = self.dims2(*input)?;
                let count = valid.as_ref().map_or(r, |v| v.iter().filter(|&&b| b).count());
                let inv = 1.0 / count as f64;
                if let Some(ga) = self.acc(grads, *input) {
                    for i in 0..r {
                        if valid.as_ref().map_or(true, |v| v[i]) {
                            for j in 0..c {
                                ga[i * c + j] += g[j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (_, d) = self.dims2(*table)?;
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = g[0];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += scale * (p - onehot);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(())
    }
}
