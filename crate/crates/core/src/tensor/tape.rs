//! Reverse-mode tape.
//!
//! Each operation evaluates eagerly, appends a node holding its value and
//! whatever it needs for the backward pass, and returns a [`Var`] handle.
//! With gradients disabled nothing is saved beyond the values.

use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{self, AttnMask, FlopCounter, MatOut, MatView};
use super::params::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Activation-accounting bucket a node is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    Other,
    Extractor,
    Latent,
    Lane,
}

impl Scope {
    fn index(self) -> usize {
        match self {
            Scope::Other => 0,
            Scope::Extractor => 1,
            Scope::Latent => 2,
            Scope::Lane => 3,
        }
    }
}

/// One pathway inside a grouped latent attention: `rows` query rows that
/// attend to themselves plus the first `latent` shared rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LaneGroup {
    pub rows: usize,
    pub latent: usize,
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    TileAdd {
        base: Var,
        rows: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Modulate {
        x: Var,
        alpha: Var,
        beta: Var,
        group_rows: usize,
    },
    Gelu {
        a: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<Vec<f64>>,
    },
    LaneAttention {
        q: Var,
        ks: Var,
        vs: Var,
        kl: Var,
        vl: Var,
        heads: usize,
        groups: Vec<LaneGroup>,
        probs: Vec<Vec<Vec<f64>>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Variance floor added inside layer normalization.
pub const LN_VAR_FLOOR: f64 = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    scope: Scope,
    flops: FlopCounter,
    scope_bytes: [usize; 4],
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            scope: Scope::Other,
            flops: FlopCounter::new(),
            scope_bytes: [0; 4],
        }
    }

    /// Forward-only tape; saves no backward buffers.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Bytes of activations (values plus saved backward buffers) charged
    /// to a scope so far.
    pub fn scope_bytes(&self, scope: Scope) -> usize {
        self.scope_bytes[scope.index()]
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let saved = match &op {
            Op::LayerNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            Op::Attention { probs, .. } => probs.iter().map(Vec::len).sum(),
            Op::LaneAttention { probs, .. } => probs.iter().flatten().map(Vec::len).sum(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        };
        if !matches!(op, Op::Leaf { .. }) {
            self.scope_bytes[self.scope.index()] += value.bytes() + saved * 8;
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// A free input that receives a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        let g = self.grad_enabled;
        self.push(t, Op::Leaf { param: None }, g)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let g = self.grad_enabled;
        self.nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Leaf { param: Some(id) },
            needs_grad: g,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1], &self.flops);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![sa[0], sb[1]], out)?, Op::MatMul { a, b }, ng))
    }

    /// `x · w + b` with `w` of shape `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let cin = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != cin {
            return Err(mismatch("linear", &sx, &sw));
        }
        let n = self.value(x).rows();
        let cout = sw[1];
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(mismatch("linear bias", &sw, self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            1.0,
            MatView::row_major(self.value(x).data(), n, cin),
            MatView::row_major(self.value(w).data(), cin, cout),
            if b.is_some() { 1.0 } else { 0.0 },
            MatOut::row_major(&mut out, cout),
            &self.flops,
        );
        finite("linear", &out)?;
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, ng))
    }

    /// Tiles `base (r x d)` once per row of `rows (g x d)` and adds that
    /// row to every tile row: output row `g*r + i` = `base[i] + rows[g]`.
    pub fn tile_add(&mut self, base: Var, rows: Var) -> Result<Var> {
        let d = self.value(base).cols();
        if self.value(rows).cols() != d {
            return Err(mismatch("tile_add", self.shape(base), self.shape(rows)));
        }
        let r = self.value(base).rows();
        let g = self.value(rows).rows();
        let mut out = Vec::with_capacity(g * r * d);
        for gi in 0..g {
            let add = self.value(rows).row(gi);
            for i in 0..r {
                out.extend(self.value(base).row(i).iter().zip(add).map(|(x, y)| x + y));
            }
        }
        let ng = self.needs(base) || self.needs(rows);
        Ok(self.push(Tensor::new(vec![g * r, d], out)?, Op::TileAdd { base, rows }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        finite("scale", &out)?;
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a, s }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let d = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != d {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside {} rows", t.rows()),
            });
        }
        let out = t.slice_rows(start, end);
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceRows { a, start }, ng))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(TensorError::Invalid {
                    op: "gather",
                    msg: format!("index {i} outside table of {n} rows"),
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.data().to_vec();
        kernels::softmax_rows(&mut out, t.cols());
        finite("softmax", &out)?;
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, ng))
    }

    /// Per-row layer normalization with an optional learnable affine.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if let Some((g, b)) = affine {
            if self.value(g).len() != d || self.value(b).len() != d {
                return Err(mismatch("layer_norm", t.shape(), self.shape(g)));
            }
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_VAR_FLOOR).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = match affine {
            Some((g, b)) => {
                let (gv, bv) = (self.value(g).data(), self.value(b).data());
                xhat.chunks(d)
                    .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((x, g), b)| x * g + b))
                    .collect()
            }
            None => xhat.clone(),
        };
        finite("layer_norm", &out)?;
        let shape = t.shape().to_vec();
        let ng = self.needs(x) || affine.is_some_and(|(g, b)| self.needs(g) || self.needs(b));
        let (xhat, inv_std) = if ng {
            // without an affine the output already is xhat
            (if affine.is_some() { xhat } else { Vec::new() }, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                affine,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Adaptive modulation `x * (1 + alpha_g) + beta_g`, where rows are
    /// split into consecutive groups of `group_rows` and group `g` uses row
    /// `g` of `alpha` and `beta`.
    pub fn modulate(&mut self, x: Var, alpha: Var, beta: Var, group_rows: usize) -> Result<Var> {
        let (t, a, b) = (self.value(x), self.value(alpha), self.value(beta));
        let d = t.cols();
        if a.cols() != d || b.cols() != d || a.rows() != b.rows() || a.rows() * group_rows != t.rows() {
            return Err(mismatch("modulate", t.shape(), a.shape()));
        }
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let g = r / group_rows;
            out.extend(
                t.row(r)
                    .iter()
                    .zip(a.row(g))
                    .zip(b.row(g))
                    .map(|((x, a), b)| x * (1.0 + a) + b),
            );
        }
        let shape = t.shape().to_vec();
        let ng = self.needs(x) || self.needs(alpha) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Modulate {
                x,
                alpha,
                beta,
                group_rows,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { a }, ng))
    }

    /// Multi-head masked scaled dot-product attention over already
    /// projected queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(mismatch("attention", tq.shape(), tk.shape()));
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let fwd =
            kernels::attention_forward(tq.data(), tk.data(), tv.data(), nq, nk, d, heads, &mask, ng, &self.flops)?;
        Ok(self.push(
            Tensor::new(vec![nq, d], fwd.out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs: fwd.probs.unwrap_or_default(),
            },
            ng,
        ))
    }

    /// Grouped attention: the rows of each group attend to the group's own
    /// keys (`ks`, `vs` rows) followed by the first `latent` rows of the
    /// shared keys `kl`, `vl`. Groups are independent and run in parallel.
    #[allow(clippy::too_many_arguments)]
    pub fn lane_attention(
        &mut self,
        q: Var,
        ks: Var,
        vs: Var,
        kl: Var,
        vl: Var,
        heads: usize,
        groups: &[LaneGroup],
    ) -> Result<Var> {
        let d = self.value(q).cols();
        let r = self.value(q).rows();
        for v in [ks, vs, kl, vl] {
            if self.value(v).cols() != d {
                return Err(mismatch("lane_attention", self.shape(q), self.shape(v)));
            }
        }
        if self.value(ks).rows() != r || self.value(vs).rows() != r || self.value(kl).rows() != self.value(vl).rows() {
            return Err(mismatch("lane_attention", self.shape(ks), self.shape(kl)));
        }
        let n_lat = self.value(kl).rows();
        let total: usize = groups.iter().map(|g| g.rows).sum();
        if total != r {
            return Err(mismatch("lane_attention", &[r], &[total]));
        }
        if let Some(g) = groups.iter().find(|g| g.latent > n_lat) {
            return Err(TensorError::Invalid {
                op: "lane_attention",
                msg: format!("pathway requests {} latent rows, {} available", g.latent, n_lat),
            });
        }
        let ng = [q, ks, vs, kl, vl].iter().any(|&v| self.needs(v));
        let offsets = group_offsets(groups);
        let (qd, ksd, vsd, kld, vld) = (
            self.value(q).data(),
            self.value(ks).data(),
            self.value(vs).data(),
            self.value(kl).data(),
            self.value(vl).data(),
        );
        let flops = &self.flops;
        let results: Vec<Result<kernels::AttnForward>> = groups
            .par_iter()
            .zip(&offsets)
            .map(|(g, &r0)| {
                let (kk, vv) = group_keys(ksd, vsd, kld, vld, r0, g, d);
                kernels::attention_forward(
                    &qd[r0 * d..(r0 + g.rows) * d],
                    &kk,
                    &vv,
                    g.rows,
                    g.rows + g.latent,
                    d,
                    heads,
                    &AttnMask::Full,
                    ng,
                    flops,
                )
            })
            .collect();
        let mut out = Vec::with_capacity(r * d);
        let mut probs = Vec::new();
        for res in results {
            let f = res?;
            out.extend_from_slice(&f.out);
            if let Some(p) = f.probs {
                probs.push(p);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, d], out)?,
            Op::LaneAttention {
                q,
                ks,
                vs,
                kl,
                vl,
                heads,
                groups: groups.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean cross-entropy over rows whose target differs from `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(mismatch("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == ignore {
                continue;
            }
            if tgt >= v {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("target {tgt} outside {v} classes"),
                });
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[tgt];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "every target is the ignore id".into(),
            });
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs: if ng { probs } else { Vec::new() },
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a }, ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(TensorError::NoGradRecorded);
        }
        if self.value(out).len() != 1 {
            return Err(mismatch("backward", self.shape(out), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let fc = &self.flops;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        1.0,
                        MatView::row_major(g, m, n),
                        MatView::transposed(tb.data(), k, n),
                        0.0,
                        MatOut::row_major(&mut da, k),
                        fc,
                    );
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        1.0,
                        MatView::transposed(ta.data(), m, k),
                        MatView::row_major(g, m, n),
                        0.0,
                        MatOut::row_major(&mut db, n),
                        fc,
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, cin, cout) = (tx.rows(), tw.rows(), tw.cols());
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * cin];
                    kernels::gemm(
                        1.0,
                        MatView::row_major(g, n, cout),
                        MatView::transposed(tw.data(), cin, cout),
                        0.0,
                        MatOut::row_major(&mut dx, cin),
                        fc,
                    );
                    self.acc(grads, *x, dx);
                }
                self.acc_with(grads, *w, |dw| {
                    kernels::gemm(
                        1.0,
                        MatView::transposed(tx.data(), n, cin),
                        MatView::row_major(g, n, cout),
                        1.0,
                        MatOut::row_major(dw, cout),
                        fc,
                    );
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, |db| {
                        for row in g.chunks(cout) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::TileAdd { base, rows } => {
                let d = self.value(*base).cols();
                let r = self.value(*base).rows();
                self.acc_with(grads, *base, |db| {
                    for tile in g.chunks(r * d) {
                        for (x, y) in db.iter_mut().zip(tile) {
                            *x += y;
                        }
                    }
                });
                self.acc_with(grads, *rows, |dr| {
                    for (gi, tile) in g.chunks(r * d).enumerate() {
                        for row in tile.chunks(d) {
                            for (x, y) in dr[gi * d..(gi + 1) * d].iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { a, s } => self.acc(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let d = self.value(*a).cols();
                let s = start * d;
                self.acc_with(grads, *a, |da| {
                    for (x, y) in da[s..s + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                self.acc_with(grads, *table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (x, y) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                affine,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let xhat: &[f64] = if affine.is_some() { xhat } else { node.value.data() };
                let dxhat: Vec<f64> = match affine {
                    Some((gm, bt)) => {
                        self.acc_with(grads, *gm, |dg| {
                            for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                                for ((o, gv), xv) in dg.iter_mut().zip(gr).zip(xr) {
                                    *o += gv * xv;
                                }
                            }
                        });
                        self.acc_with(grads, *bt, |db| {
                            for gr in g.chunks(d) {
                                for (o, gv) in db.iter_mut().zip(gr) {
                                    *o += gv;
                                }
                            }
                        });
                        let gam = self.value(*gm).data();
                        g.chunks(d)
                            .flat_map(|gr| gr.iter().zip(gam).map(|(a, b)| a * b))
                            .collect()
                    }
                    None => g.to_vec(),
                };
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..inv_std.len() {
                        let dh = &dxhat[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Modulate {
                x,
                alpha,
                beta,
                group_rows,
            } => {
                let (tx, ta) = (self.value(*x), self.value(*alpha));
                let d = tx.cols();
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..tx.rows() {
                        let a = ta.row(r / group_rows);
                        for j in 0..d {
                            dx[r * d + j] = g[r * d + j] * (1.0 + a[j]);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc_with(grads, *alpha, |da| {
                    for r in 0..tx.rows() {
                        let gi = r / group_rows;
                        for j in 0..d {
                            da[gi * d + j] += g[r * d + j] * tx.data()[r * d + j];
                        }
                    }
                });
                self.acc_with(grads, *beta, |db| {
                    for r in 0..tx.rows() {
                        let gi = r / group_rows;
                        for j in 0..d {
                            db[gi * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let b = kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    g,
                    tq.rows(),
                    tk.rows(),
                    tq.cols(),
                    *heads,
                    mask,
                    fc,
                )?;
                self.acc(grads, *q, b.dq);
                self.acc(grads, *k, b.dk);
                self.acc(grads, *v, b.dv);
            }
            Op::LaneAttention {
                q,
                ks,
                vs,
                kl,
                vl,
                heads,
                groups,
                probs,
            } => {
                let d = self.value(*q).cols();
                let offsets = group_offsets(groups);
                let (qd, ksd, vsd, kld, vld) = (
                    self.value(*q).data(),
                    self.value(*ks).data(),
                    self.value(*vs).data(),
                    self.value(*kl).data(),
                    self.value(*vl).data(),
                );
                let parts: Vec<Result<kernels::AttnBackward>> = groups
                    .par_iter()
                    .zip(&offsets)
                    .zip(probs)
                    .map(|((gr, &r0), p)| {
                        let (kk, vv) = group_keys(ksd, vsd, kld, vld, r0, gr, d);
                        kernels::attention_backward(
                            &qd[r0 * d..(r0 + gr.rows) * d],
                            &kk,
                            &vv,
                            p,
                            &g[r0 * d..(r0 + gr.rows) * d],
                            gr.rows,
                            gr.rows + gr.latent,
                            d,
                            *heads,
                            &AttnMask::Full,
                            fc,
                        )
                    })
                    .collect();
                let r = self.value(*q).rows();
                let n_lat = self.value(*kl).rows();
                let mut dq = vec![0.0; r * d];
                let mut dks = vec![0.0; r * d];
                let mut dvs = vec![0.0; r * d];
                let mut dkl = vec![0.0; n_lat * d];
                let mut dvl = vec![0.0; n_lat * d];
                for ((gr, &r0), part) in groups.iter().zip(&offsets).zip(parts) {
                    let b = part?;
                    let own = gr.rows * d;
                    dq[r0 * d..r0 * d + own].copy_from_slice(&b.dq);
                    dks[r0 * d..r0 * d + own].copy_from_slice(&b.dk[..own]);
                    dvs[r0 * d..r0 * d + own].copy_from_slice(&b.dv[..own]);
                    for (x, y) in dkl.iter_mut().zip(&b.dk[own..]) {
                        *x += y;
                    }
                    for (x, y) in dvl.iter_mut().zip(&b.dv[own..]) {
                        *x += y;
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *ks, dks);
                self.acc(grads, *vs, dvs);
                self.acc(grads, *kl, dkl);
                self.acc(grads, *vl, dvl);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + t] -= scale;
                }
                self.acc(grads, *logits, dl);
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

fn group_offsets(groups: &[LaneGroup]) -> Vec<usize> {
    let mut off = 0;
    groups
        .iter()
        .map(|g| {
            let o = off;
            off += g.rows;
            o
        })
        .collect()
}

/// Keys/values of one group: its own rows, then the shared latent prefix.
fn group_keys(
    ks: &[f64],
    vs: &[f64],
    kl: &[f64],
    vl: &[f64],
    r0: usize,
    g: &LaneGroup,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut kk = Vec::with_capacity((g.rows + g.latent) * d);
    kk.extend_from_slice(&ks[r0 * d..(r0 + g.rows) * d]);
    kk.extend_from_slice(&kl[..g.latent * d]);
    let mut vv = Vec::with_capacity((g.rows + g.latent) * d);
    vv.extend_from_slice(&vs[r0 * d..(r0 + g.rows) * d]);
    vv.extend_from_slice(&vl[..g.latent * d]);
    (kk, vv)
}

/// Gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(tape.value(v).shape().to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Gradient per parameter, summed over every place it was used.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &self.grads[i]) {
                match &mut out[id.index()] {
                    Some(e) => {
                        for (x, y) in e.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
