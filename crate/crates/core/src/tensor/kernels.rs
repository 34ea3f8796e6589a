//! Low-level numeric kernels: strided matrix products, masked scaled
//! dot-product attention, and elementwise helpers.
//!
//! Matrix products go through `matrixmultiply`, whose per-element
//! reduction order depends only on the inner dimension. Large products are
//! split across threads by row blocks, which never changes a result bit.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use super::{Result, TensorError};

/// Counts floating-point operations performed by matrix products
/// (2 per multiply-accumulate). Elementwise work is not counted.
#[derive(Debug, Default)]
pub struct FlopCounter(AtomicU64);

impl FlopCounter {
    pub fn new() -> Self {
        Self(AtomicU64::new(0))
    }

    pub fn add(&self, flops: u64) {
        self.0.fetch_add(flops, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// A strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatView<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }

    fn sub_rows(&self, start: usize, rows: usize) -> Self {
        Self {
            offset: self.offset + start * self.rs,
            rows,
            ..*self
        }
    }
}

/// Mutable destination for a product.
pub struct MatOut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatOut<'a> {
    pub fn row_major(data: &'a mut [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

const PAR_MIN_ROWS: usize = 128;
const PAR_MIN_WORK: usize = 1 << 20;

/// `C = alpha * A·B + beta * C` where beta is 0 or 1.
pub fn gemm(
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    c: MatOut<'_>,
    counter: &FlopCounter,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check();
    b.check();
    let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "gemm output out of bounds");
    counter.add(2 * (m * n * k) as u64);
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c.data[c.offset + i * c.rs + j * c.cs] = 0.0;
                }
            }
        }
        return;
    }
    let cptr = SendPtr(unsafe { c.data.as_mut_ptr().add(c.offset) });
    let threads = rayon::current_num_threads();
    let disjoint_rows = c.cs == 1 && c.rs >= n;
    if threads > 1 && disjoint_rows && m >= PAR_MIN_ROWS && m * n * k >= PAR_MIN_WORK {
        let chunk = m.div_ceil(threads * 2).max(32);
        let starts: Vec<usize> = (0..m).step_by(chunk).collect();
        starts.par_iter().for_each(|&r0| {
            let rows = chunk.min(m - r0);
            let sub = a.sub_rows(r0, rows);
            let p = cptr;
            // SAFETY: row blocks of C are disjoint because rs >= n and cs == 1.
            unsafe {
                raw_gemm(alpha, &sub, &b, beta, p.0.add(r0 * c.rs), c.rs, c.cs, n);
            }
        });
    } else {
        // SAFETY: bounds checked above.
        unsafe {
            raw_gemm(alpha, &a, &b, beta, cptr.0, c.rs, c.cs, n);
        }
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(
    alpha: f64,
    a: &MatView<'_>,
    b: &MatView<'_>,
    beta: f64,
    c: *mut f64,
    rsc: usize,
    csc: usize,
    n: usize,
) {
    matrixmultiply::dgemm(
        a.rows,
        a.cols,
        n,
        alpha,
        a.data.as_ptr().add(a.offset),
        a.rs as isize,
        a.cs as isize,
        b.data.as_ptr().add(b.offset),
        b.rs as isize,
        b.cs as isize,
        beta,
        c,
        rsc as isize,
        csc as isize,
    );
}

/// Plain row-major product `a (m x k) · b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, counter: &FlopCounter) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatView::row_major(a, m, k),
        MatView::row_major(b, k, n),
        0.0,
        MatOut::row_major(&mut out, n),
        counter,
    );
    out
}

/// Which keys each query row may attend to. `true` means attend.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Dense boolean `nq x nk` mask.
    Dense(Arc<Vec<bool>>),
    /// Consecutive row groups `(rows, keys)`: the rows of a group attend
    /// to key prefix `[0, keys)`. Only the active prefix is computed.
    RowGroups(Vec<(usize, usize)>),
}

impl AttnMask {
    /// Block-causal mask over `blocks` blocks of `block` tokens each.
    pub fn block_causal(blocks: usize, block: usize) -> Self {
        AttnMask::RowGroups((1..=blocks).map(|i| (block, i * block)).collect())
    }

    /// Dense lower-triangular causal mask.
    pub fn causal(n: usize) -> Self {
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                m[i * n + j] = true;
            }
        }
        AttnMask::Dense(Arc::new(m))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Segment {
    pub row0: usize,
    pub rows: usize,
    pub keys: usize,
    /// offset of this segment's probabilities within one head's buffer
    pub prob_off: usize,
}

pub(crate) fn segments(mask: &AttnMask, nq: usize, nk: usize) -> Result<Vec<Segment>> {
    const OP: &str = "attention";
    match mask {
        AttnMask::Full => {
            if nk == 0 && nq > 0 {
                return Err(TensorError::FullyMasked { op: OP, row: 0 });
            }
            Ok(vec![Segment {
                row0: 0,
                rows: nq,
                keys: nk,
                prob_off: 0,
            }])
        }
        AttnMask::Dense(m) => {
            if m.len() != nq * nk {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    left: vec![nq, nk],
                    right: vec![m.len()],
                });
            }
            for r in 0..nq {
                if !m[r * nk..(r + 1) * nk].iter().any(|&x| x) {
                    return Err(TensorError::FullyMasked { op: OP, row: r });
                }
            }
            Ok(vec![Segment {
                row0: 0,
                rows: nq,
                keys: nk,
                prob_off: 0,
            }])
        }
        AttnMask::RowGroups(groups) => {
            let mut out = Vec::with_capacity(groups.len());
            let (mut row0, mut off) = (0, 0);
            for &(rows, keys) in groups {
                if keys == 0 && rows > 0 {
                    return Err(TensorError::FullyMasked { op: OP, row: row0 });
                }
                if keys > nk {
                    return Err(TensorError::Invalid {
                        op: OP,
                        msg: format!("group key prefix {keys} exceeds {nk} keys"),
                    });
                }
                out.push(Segment {
                    row0,
                    rows,
                    keys,
                    prob_off: off,
                });
                row0 += rows;
                off += rows * keys;
            }
            if row0 != nq {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    left: vec![nq],
                    right: vec![row0],
                });
            }
            Ok(out)
        }
    }
}

pub(crate) fn probs_len(segs: &[Segment]) -> usize {
    segs.iter().map(|s| s.rows * s.keys).sum()
}

/// Softmax over one row in place, honouring an optional allow-mask.
/// Masked entries become exactly zero.
fn softmax_row(row: &mut [f64], allow: Option<&[bool]>) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allow.is_none_or(|a| a[j]) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allow.is_none_or(|a| a[j]) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        softmax_row(row, None);
    }
}

pub struct AttnForward {
    pub out: Vec<f64>,
    /// per-head probability buffers, laid out by segment
    pub probs: Option<Vec<Vec<f64>>>,
}

/// Multi-head scaled dot-product attention on pre-projected `q (nq x d)`,
/// `k, v (nk x d)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask,
    keep_probs: bool,
    counter: &FlopCounter,
) -> Result<AttnForward> {
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("{heads} heads do not divide width {d}"),
        });
    }
    let segs = segments(mask, nq, nk)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let plen = probs_len(&segs);
    let dense = match mask {
        AttnMask::Dense(m) => Some(m.clone()),
        _ => None,
    };
    let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let mut out_h = vec![0.0; nq * dh];
            let mut probs = vec![0.0; plen];
            for s in &segs {
                let p = &mut probs[s.prob_off..s.prob_off + s.rows * s.keys];
                let qv = MatView {
                    data: q,
                    offset: s.row0 * d + h * dh,
                    rows: s.rows,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let kt = MatView {
                    data: k,
                    offset: h * dh,
                    rows: dh,
                    cols: s.keys,
                    rs: 1,
                    cs: d,
                };
                gemm(scale, qv, kt, 0.0, MatOut::row_major(p, s.keys), counter);
                for (r, row) in p.chunks_mut(s.keys).enumerate() {
                    let allow = dense
                        .as_ref()
                        .map(|m| &m[(s.row0 + r) * nk..(s.row0 + r) * nk + s.keys]);
                    softmax_row(row, allow);
                }
                let vv = MatView {
                    data: v,
                    offset: h * dh,
                    rows: s.keys,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let pv = MatView::row_major(p, s.rows, s.keys);
                let oo = MatOut {
                    data: &mut out_h,
                    offset: s.row0 * dh,
                    rs: dh,
                    cs: 1,
                };
                gemm(1.0, pv, vv, 0.0, oo, counter);
            }
            (out_h, probs)
        })
        .collect();
    let mut out = vec![0.0; nq * d];
    for (h, (out_h, _)) in per_head.iter().enumerate() {
        for r in 0..nq {
            out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&out_h[r * dh..(r + 1) * dh]);
        }
    }
    if !out.iter().all(|x| x.is_finite()) {
        return Err(TensorError::NonFinite { op: "attention" });
    }
    let probs = keep_probs.then(|| per_head.into_iter().map(|(_, p)| p).collect());
    Ok(AttnForward { out, probs })
}

pub struct AttnBackward {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[Vec<f64>],
    dout: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask,
    counter: &FlopCounter,
) -> Result<AttnBackward> {
    let segs = segments(mask, nq, nk)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let per_head: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let mut dq = vec![0.0; nq * dh];
            let mut dk = vec![0.0; nk * dh];
            let mut dv = vec![0.0; nk * dh];
            for s in &segs {
                let p = &probs[h][s.prob_off..s.prob_off + s.rows * s.keys];
                let dov = MatView {
                    data: dout,
                    offset: s.row0 * d + h * dh,
                    rows: s.rows,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                // dV += P^T dO
                gemm(
                    1.0,
                    MatView::transposed(p, s.rows, s.keys),
                    dov,
                    1.0,
                    MatOut::row_major(&mut dv, dh),
                    counter,
                );
                // dP = dO V^T
                let mut ds = vec![0.0; s.rows * s.keys];
                let vt = MatView {
                    data: v,
                    offset: h * dh,
                    rows: dh,
                    cols: s.keys,
                    rs: 1,
                    cs: d,
                };
                gemm(1.0, dov, vt, 0.0, MatOut::row_major(&mut ds, s.keys), counter);
                for (drow, prow) in ds.chunks_mut(s.keys).zip(p.chunks(s.keys)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                // dQ += dS K
                let kv = MatView {
                    data: k,
                    offset: h * dh,
                    rows: s.keys,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let dq_out = MatOut {
                    data: &mut dq,
                    offset: s.row0 * dh,
                    rs: dh,
                    cs: 1,
                };
                gemm(1.0, MatView::row_major(&ds, s.rows, s.keys), kv, 1.0, dq_out, counter);
                // dK += dS^T Q
                let qv = MatView {
                    data: q,
                    offset: s.row0 * d + h * dh,
                    rows: s.rows,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                gemm(
                    1.0,
                    MatView::transposed(&ds, s.rows, s.keys),
                    qv,
                    1.0,
                    MatOut::row_major(&mut dk, dh),
                    counter,
                );
            }
            (dq, dk, dv)
        })
        .collect();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    for (h, (hq, hk, hv)) in per_head.iter().enumerate() {
        for r in 0..nq {
            dq[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&hq[r * dh..(r + 1) * dh]);
        }
        for r in 0..nk {
            dk[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&hk[r * dh..(r + 1) * dh]);
            dv[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&hv[r * dh..(r + 1) * dh]);
        }
    }
    Ok(AttnBackward { dq, dk, dv })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| rng::normal(&mut r)).collect()
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (37, 300, 19);
        let a = rand_vec(m * k, 1);
        let b = rand_vec(k * n, 2);
        let fc = FlopCounter::new();
        let c = matmul(&a, &b, m, k, n, &fc);
        let r = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&r) {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(fc.get(), 2 * (m * k * n) as u64);
    }

    #[test]
    fn matmul_rows_are_independent_bitwise() {
        // Inner dimension above the packing block so multi-block
        // accumulation is exercised too.
        for &(m, k, n) in &[(300, 600, 70), (129, 128, 517), (1024, 128, 384)] {
            let a = rand_vec(m * k, 3);
            let b = rand_vec(k * n, 4);
            let fc = FlopCounter::new();
            let full = matmul(&a, &b, m, k, n, &fc);
            for &(r0, r1) in &[(0, 1), (5, 69), (64, 128), (m - 3, m)] {
                let part = matmul(&a[r0 * k..r1 * k], &b, r1 - r0, k, n, &fc);
                assert_eq!(&full[r0 * n..r1 * n], &part[..], "rows {r0}..{r1}");
            }
        }
    }

    #[test]
    fn row_groups_validate() {
        assert!(segments(&AttnMask::RowGroups(vec![(2, 0)]), 2, 4).is_err());
        assert!(segments(&AttnMask::RowGroups(vec![(2, 5)]), 2, 4).is_err());
        assert!(segments(&AttnMask::RowGroups(vec![(1, 2)]), 2, 4).is_err());
        assert_eq!(segments(&AttnMask::block_causal(3, 2), 6, 6).unwrap().len(), 3);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
