//! Closed-form GEMM FLOP and activation accounting for the latent-space
//! decoder and for a full-history causal decoder of matched width and
//! depth, plus instrumented counterparts for both.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Result;
use crate::mesh::PointCloudSet;
use crate::model::layers::{Init, Linear, Norm, SelfBlock};
use crate::model::{LaneModel, ModelConfig, POINT_FEATURES};
use crate::tensor::{AttnMask, ParamStore, Scope, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Lane,
    FullHistory,
}

/// GEMM FLOPs of one forward pass, split by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub extractor: u64,
    pub latent: u64,
    pub decoder: u64,
    pub head: u64,
    /// Query-key score products only (a subset of the above).
    pub attention_scores: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.extractor + self.latent + self.decoder + self.head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: CostMode,
    pub length: usize,
    pub flops: u64,
    pub breakdown: FlopBreakdown,
    /// Training activation bytes of the token decoder stack for one
    /// sample (one pathway, `m = M`, for the latent decoder).
    pub activation_bytes: u64,
}

fn lin(n: usize, cin: usize, cout: usize) -> u64 {
    2 * (n * cin * cout) as u64
}

/// Projections, attention and FFN of a cross block; returns (total, scores).
fn cross_block(c: &ModelConfig, nq: usize, nk: usize) -> (u64, u64) {
    let d = c.d_model;
    let proj = 2 * lin(nq, d, d) + 2 * lin(nk, d, d);
    let scores = 2 * (nq * nk * d) as u64;
    let ffn = lin(nq, d, c.d_ff) + lin(nq, c.d_ff, d);
    (proj + 2 * scores + ffn, scores)
}

/// Self block over `n` rows where `keys` is the total number of
/// (query, key) pairs scored.
fn self_block(c: &ModelConfig, n: usize, keys: usize) -> (u64, u64) {
    let d = c.d_model;
    let scores = 2 * (keys * d) as u64;
    (4 * lin(n, d, d) + 2 * scores + lin(n, d, c.d_ff) + lin(n, c.d_ff, d), scores)
}

fn extractor(c: &ModelConfig) -> (u64, u64) {
    let d = c.d_model;
    let [n1, n2, n3, n4] = c.counts;
    let mut total: u64 = [n1, n2, n3, n4].iter().map(|&n| lin(n, POINT_FEATURES, d)).sum();
    let mut scores = 0;
    for (nq, nk) in [(n2, n1), (n3, n2), (n4, n3)] {
        let (t, s) = cross_block(c, nq, nk);
        total += t;
        scores += s;
    }
    for _ in 1..c.n_enc_layers {
        let (t, s) = self_block(c, n2, n2 * n2);
        total += t;
        scores += s;
    }
    (total, scores)
}

/// Length embedding, constructor and block-causal latent layers.
fn latent(c: &ModelConfig, m: usize) -> (u64, u64) {
    let d = c.d_model;
    let ts = c.t_sc;
    let nz = c.counts[3];
    let r = m * (ts + 1);
    let scores = 2 * (m * (ts + 1) * (ts + 1 + nz) * d) as u64;
    let constructor = 4 * lin(r, d, d) + 2 * lin(nz, d, d) + 2 * scores + lin(r, d, c.d_ff) + lin(r, c.d_ff, d);
    let keys = ts * ts * m * (m + 1) / 2;
    let (ar, ar_scores) = self_block(c, m * ts, keys);
    (
        lin(1, d, d) + constructor + c.n_ar_layers as u64 * ar,
        scores + c.n_ar_layers as u64 * ar_scores,
    )
}

/// One batched decode over pathways `ms`; returns (blocks, head, scores).
pub fn pathway_batch_flops(c: &ModelConfig, ms: &[usize]) -> (u64, u64, u64) {
    let d = c.d_model;
    let l = c.l_sub;
    let b = ms.len();
    let max_m = ms.iter().copied().max().unwrap_or(0);
    let keys: usize = ms.iter().map(|&m| l * (l + m * c.t_sc)).sum();
    let scores = 2 * (keys * d) as u64;
    let cond = 3 * lin(b, d, d);
    let proj = 4 * lin(b * l, d, d) + 2 * lin(max_m * c.t_sc, d, d);
    let ffn = lin(b * l, d, c.d_ff) + lin(b * l, c.d_ff, d);
    let per_block = cond + proj + 2 * scores + ffn;
    let k = c.k_blocks as u64;
    (k * per_block, lin(b * l, d, c.vocab), k * scores)
}

/// Training activation elements charged to the decoding blocks for one
/// pathway `m` (values plus saved backward buffers).
pub fn lane_activation_elems(c: &ModelConfig, m: usize) -> u64 {
    let (d, l, f, h) = (c.d_model, c.l_sub, c.d_ff, c.n_heads);
    let mt = m * c.t_sc;
    let stem = mt * d + d + l * d + d;
    let block = 4 * d + 12 * l * d + 2 * l + 2 * mt * d + h * l * (l + mt) + 2 * l * f;
    let tail = 2 * l * d + l + l * c.vocab;
    (stem + c.k_blocks * block + tail) as u64
}

/// Training activation elements of the full-history decoder over `n`
/// tokens.
pub fn baseline_activation_elems(c: &ModelConfig, n: usize) -> u64 {
    let (d, f, h) = (c.d_model, c.d_ff, c.n_heads);
    let block = 12 * n * d + 2 * n + h * n * n + 2 * n * f;
    (c.k_blocks * block + 2 * n * d + n + n * c.vocab) as u64
}

/// Closed-form forward cost at sequence length `length`. The latent mode
/// decodes each pathway separately.
pub fn flops_account(c: &ModelConfig, length: usize, mode: CostMode) -> CostReport {
    let m = c.num_subsequences(length).max(1);
    let mut b = FlopBreakdown::default();
    let activation_bytes;
    match mode {
        CostMode::Lane => {
            let (e, es) = extractor(c);
            let (lt, ls) = latent(c, m);
            b.extractor = e;
            b.latent = lt;
            b.attention_scores = es + ls;
            for mi in 1..=m {
                let (blocks, head, s) = pathway_batch_flops(c, &[mi]);
                b.decoder += blocks;
                b.head += head;
                b.attention_scores += s;
            }
            activation_bytes = 8 * lane_activation_elems(c, m);
        }
        CostMode::FullHistory => {
            let (t, s) = self_block(c, length, length * length);
            let k = c.k_blocks as u64;
            b.decoder = k * t;
            b.attention_scores = k * s;
            b.head = lin(length, c.d_model, c.vocab);
            activation_bytes = 8 * baseline_activation_elems(c, length);
        }
    }
    CostReport {
        mode,
        length,
        flops: b.total(),
        breakdown: b,
        activation_bytes,
    }
}

/// Attention-score FLOPs of the decoding blocks alone, latent over
/// full-history.
pub fn decoder_score_ratio(c: &ModelConfig, length: usize) -> f64 {
    let m = c.num_subsequences(length).max(1);
    let lane: u64 = (1..=m).map(|mi| pathway_batch_flops(c, &[mi]).2).sum();
    let base = c.k_blocks as u64 * self_block(c, length, length * length).1;
    lane as f64 / base as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub length: usize,
    pub lane_flops: u64,
    pub baseline_flops: u64,
    pub lane_mem: u64,
    pub baseline_mem: u64,
    pub score_ratio: f64,
}

pub fn sweep(c: &ModelConfig, lengths: &[usize]) -> Vec<SweepRow> {
    lengths
        .iter()
        .map(|&l| {
            let a = flops_account(c, l, CostMode::Lane);
            let b = flops_account(c, l, CostMode::FullHistory);
            SweepRow {
                length: l,
                lane_flops: a.flops,
                baseline_flops: b.flops,
                lane_mem: a.activation_bytes,
                baseline_mem: b.activation_bytes,
                score_ratio: decoder_score_ratio(c, l),
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("L,lane_flops,baseline_flops,lane_mem,baseline_mem\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.length, r.lane_flops, r.baseline_flops, r.lane_mem, r.baseline_mem
        );
    }
    s
}

/// Smallest length from which the latent decoder is cheaper at every
/// length up to `max_len`, if any.
pub fn crossover(c: &ModelConfig, max_len: usize) -> Option<usize> {
    let mut start = None;
    for l in 1..=max_len {
        let lane = flops_account(c, l, CostMode::Lane).flops;
        let base = flops_account(c, l, CostMode::FullHistory).flops;
        match (lane < base, start) {
            (true, None) => start = Some(l),
            (false, Some(_)) => start = None,
            _ => {}
        }
    }
    start
}

/// Op-counter FLOPs of one real forward: hierarchy plus every pathway
/// decoded on its own.
pub fn instrumented_lane_flops(model: &LaneModel, pcs: &PointCloudSet, length: usize) -> Result<u64> {
    let s = &model.store;
    let mut t = Tape::inference();
    let m = model.config.num_subsequences(length);
    let z = model.extract(&mut t, s, pcs)?;
    let le = model.length_embedding(&mut t, s, length)?;
    let enc = model.construct(&mut t, s, z, le, m)?;
    let h = model.autoregress(&mut t, s, enc)?;
    for mi in 1..=m {
        model.decode_pathways(&mut t, s, h, le, &[mi])?;
    }
    Ok(t.flops().get())
}

/// Full-history causal decoder with the same width, depth and vocabulary.
pub struct Baseline {
    pub config: ModelConfig,
    pub store: ParamStore,
    blocks: Vec<SelfBlock>,
    norm: Norm,
    head: Linear,
}

impl Baseline {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derived(seed, "baseline");
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let (d, f) = (config.d_model, config.d_ff);
        let blocks = (0..config.k_blocks)
            .map(|k| SelfBlock::new(&mut init, &format!("base{k}"), d, f))
            .collect();
        let norm = Norm::new(&mut init, "base.norm", d);
        let head = Linear::new(&mut init, "base.head", d, config.vocab);
        Self {
            config: config.clone(),
            store,
            blocks,
            norm,
            head,
        }
    }

    /// Runs the stack on random embeddings of `n` tokens under `Scope::Lane`
    /// and returns (forward GEMM FLOPs, activation bytes).
    pub fn instrumented(&self, n: usize, train: bool) -> Result<(u64, usize)> {
        let mut t = if train { Tape::new() } else { Tape::inference() };
        let mut rng = crate::rng::derived(n as u64, "baseline-input");
        let x0 = t.constant(Tensor::randn(&[n, self.config.d_model], 1.0, &mut rng));
        t.set_scope(Scope::Lane);
        let s = &self.store;
        let mask = AttnMask::causal(n);
        let mut x = x0;
        for b in &self.blocks {
            x = b.forward(&mut t, s, x, self.config.n_heads, mask.clone())?;
        }
        let x = self.norm.forward(&mut t, s, x)?;
        self.head.forward(&mut t, s, x)?;
        Ok((t.flops().get(), t.scope_bytes(Scope::Lane)))
    }
}
