//! The generation network: point-cloud extractor, latent space
//! constructor, latent autoregressive block and the stacked query-driven
//! decoding blocks that turn a prefix of latent spaces into the logits of
//! one subsequence.

mod config;
pub(crate) mod layers;
pub mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::mesh::{MeshError, Point, PointCloudSet};
use crate::tensor::{AttnMask, LaneGroup, ParamId, ParamStore, Scope, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{TokenError, PAD};

pub use config::ModelConfig;
pub use train::{
    append_jsonl, checkpoint_config, load_model, MPolicy, SampleGradients, StepReport, TrainSample, Trainer, TrainerConfig,
};

use layers::{CrossBlock, Init, LaneBlock, Linear, Norm, SelfBlock};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("length {length} outside supported range 1..={capacity}")]
    Length { length: usize, capacity: usize },
    #[error("pathway exceeds hierarchy: m = {m}, hierarchy has {spaces} spaces")]
    Pathway { m: usize, spaces: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Sine/cosine octaves used by the point featurizer.
pub const POINT_OCTAVES: usize = 6;
/// Width of the raw point features: xyz plus a sine and cosine per octave
/// per axis.
pub const POINT_FEATURES: usize = 3 + 3 * 2 * POINT_OCTAVES;

/// Standard deviation for learned token tables (queries, initial latent
/// spaces, subsequence index embeddings).
const TABLE_STD: f64 = 1.0;

/// Which equation a latent hierarchy has passed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Output of the constructor: one space per subsequence, independent.
    Encoded,
    /// After block-causal self-attention across spaces.
    Autoregressed,
}

/// `M` latent spaces of `t_sc` tokens, stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy {
    /// `(M * t_sc) x d_model`.
    pub spaces: Tensor,
    pub m: usize,
    pub t_sc: usize,
    pub stage: Stage,
    /// Requested sequence length.
    pub length: usize,
    /// Projected length embedding, `1 x d_model`.
    pub length_embedding: Tensor,
}

impl LatentHierarchy {
    /// Rows of space `m` (1-based).
    pub fn space(&self, m: usize) -> Tensor {
        self.spaces.slice_rows((m - 1) * self.t_sc, m * self.t_sc)
    }
}

struct Net {
    feat: Linear,
    enc_cross: CrossBlock,
    enc_self: Vec<SelfBlock>,
    up3: CrossBlock,
    up4: CrossBlock,
    sc_init: ParamId,
    len_proj: Linear,
    constructor: CrossBlock,
    ar: Vec<SelfBlock>,
    ar_norm: Norm,
    queries: ParamId,
    index: ParamId,
    lane: Vec<LaneBlock>,
    out_norm: Norm,
    head: Linear,
}

pub struct LaneModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    net: Net,
    extractor_calls: AtomicUsize,
    ar_calls: AtomicUsize,
}

impl std::fmt::Debug for LaneModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LaneModel")
            .field("config", &self.config)
            .field("params", &self.store.numel())
            .finish()
    }
}

impl LaneModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derived(seed, "init");
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let i = &mut init;
        let feat = Linear::new(i, "feat", POINT_FEATURES, d);
        let enc_cross = CrossBlock::new(i, "enc.cross", d, c.d_ff);
        let enc_self = (1..c.n_enc_layers)
            .map(|l| SelfBlock::new(i, &format!("enc.self{l}"), d, c.d_ff))
            .collect();
        let up3 = CrossBlock::new(i, "up3", d, c.d_ff);
        let up4 = CrossBlock::new(i, "up4", d, c.d_ff);
        let sc_init = i.randn("sc_init".into(), &[c.m_max * c.t_sc, d], TABLE_STD);
        let len_proj = Linear::new(i, "len_proj", d, d);
        let constructor = CrossBlock::new(i, "construct", d, c.d_ff);
        let ar = (0..c.n_ar_layers)
            .map(|l| SelfBlock::new(i, &format!("ar{l}"), d, c.d_ff))
            .collect();
        let ar_norm = Norm::new(i, "ar.norm", d);
        let queries = i.randn("queries".into(), &[c.l_sub, d], TABLE_STD);
        let index = i.randn("index".into(), &[c.m_max, d], TABLE_STD);
        let lane = (0..c.k_blocks)
            .map(|k| LaneBlock::new(i, &format!("lane{k}"), d, c.d_ff))
            .collect();
        let out_norm = Norm::new(i, "out.norm", d);
        let head = Linear::new(i, "head", d, c.vocab);
        let net = Net {
            feat,
            enc_cross,
            enc_self,
            up3,
            up4,
            sc_init,
            len_proj,
            constructor,
            ar,
            ar_norm,
            queries,
            index,
            lane,
            out_norm,
            head,
        };
        Ok(Self {
            config,
            store,
            net,
            extractor_calls: AtomicUsize::new(0),
            ar_calls: AtomicUsize::new(0),
        })
    }

    /// Number of extractor runs since construction.
    pub fn extractor_calls(&self) -> usize {
        self.extractor_calls.load(Ordering::Relaxed)
    }

    /// Number of latent autoregressive block runs since construction.
    pub fn ar_calls(&self) -> usize {
        self.ar_calls.load(Ordering::Relaxed)
    }

    /// Ids of the zero-initialized modulation layers.
    pub fn modulation_params(&self) -> Vec<ParamId> {
        self.net
            .lane
            .iter()
            .flat_map(|b| [Some(b.alpha.w), b.alpha.b, Some(b.beta.w), b.beta.b])
            .flatten()
            .collect()
    }

    pub fn check_length(&self, length: usize) -> Result<()> {
        let capacity = self.config.capacity();
        if length == 0 || length > capacity {
            return Err(ModelError::Length { length, capacity });
        }
        Ok(())
    }

    fn heads(&self) -> usize {
        self.config.n_heads
    }

    /// Point features followed by the shared projection.
    pub fn featurize(&self, t: &mut Tape, s: &ParamStore, points: &[Point]) -> Result<Var> {
        let x = t.constant(point_features(points)?);
        Ok(self.net.feat.forward(t, s, x)?)
    }

    /// Encoder and both upsamplers: returns `Z` with `N4` rows.
    pub fn extract(&self, t: &mut Tape, s: &ParamStore, pcs: &PointCloudSet) -> Result<Var> {
        let counts = pcs.counts();
        if counts != self.config.counts {
            return Err(ModelError::Invalid(format!(
                "point counts {counts:?} do not match config {:?}",
                self.config.counts
            )));
        }
        self.extractor_calls.fetch_add(1, Ordering::Relaxed);
        let old = t.set_scope(Scope::Extractor);
        let r = self.extract_inner(t, s, pcs);
        t.set_scope(old);
        r
    }

    fn extract_inner(&self, t: &mut Tape, s: &ParamStore, pcs: &PointCloudSet) -> Result<Var> {
        let code = self.encode_points(t, s, &pcs.x1, &pcs.x2)?;
        let n3 = self.upsample(t, s, 0, &pcs.x3, code)?;
        self.upsample(t, s, 1, &pcs.x4, n3)
    }

    /// Point-cloud encoder: `x2` queries attend to `x1`, then self-attention
    /// layers. One row per `x2` point.
    pub fn encode_points(&self, t: &mut Tape, s: &ParamStore, x1: &[Point], x2: &[Point]) -> Result<Var> {
        let h = self.heads();
        let f1 = self.featurize(t, s, x1)?;
        let f2 = self.featurize(t, s, x2)?;
        let mut code = self.net.enc_cross.forward(t, s, f2, f1, h)?;
        for b in &self.net.enc_self {
            code = b.forward(t, s, code, h, AttnMask::Full)?;
        }
        Ok(code)
    }

    /// Upsampling stage `stage` (0 or 1): featurized `queries` attend to
    /// the current latent code.
    pub fn upsample(&self, t: &mut Tape, s: &ParamStore, stage: usize, queries: &[Point], latent: Var) -> Result<Var> {
        let block = match stage {
            0 => &self.net.up3,
            1 => &self.net.up4,
            _ => return Err(ModelError::Invalid(format!("no upsampling stage {stage}"))),
        };
        let f = self.featurize(t, s, queries)?;
        Ok(block.forward(t, s, f, latent, self.heads())?)
    }

    /// Projected length embedding, `1 x d_model`.
    pub fn length_embedding(&self, t: &mut Tape, s: &ParamStore, length: usize) -> Result<Var> {
        self.check_length(length)?;
        let raw = length_features(length, self.config.l_sub, self.config.d_model);
        let x = t.constant(raw);
        Ok(self.net.len_proj.forward(t, s, x)?)
    }

    /// Encoded latent spaces `sc^e_1..sc^e_M`, `(M * t_sc) x d`. Each
    /// space's query stream is its initial tokens followed by the length
    /// embedding; the stream attends to itself and to `z`.
    pub fn construct(&self, t: &mut Tape, s: &ParamStore, z: Var, le: Var, m: usize) -> Result<Var> {
        let c = &self.config;
        if m == 0 || m > c.m_max {
            return Err(ModelError::Pathway { m, spaces: c.m_max });
        }
        let old = t.set_scope(Scope::Latent);
        let r = (|| {
            let ts = c.t_sc;
            let init = t.param(s, self.net.sc_init);
            let table = t.concat_rows(&[init, le])?;
            let le_row = c.m_max * ts;
            let mut ids = Vec::with_capacity(m * (ts + 1));
            for j in 0..m {
                ids.extend(j * ts..(j + 1) * ts);
                ids.push(le_row);
            }
            let x = t.gather(table, &ids)?;
            let nz = t.value(z).rows();
            let groups = vec![
                LaneGroup {
                    rows: ts + 1,
                    latent: nz,
                };
                m
            ];
            let y = self.net.constructor.forward_joint(t, s, x, z, self.heads(), &groups)?;
            let keep: Vec<usize> = (0..m).flat_map(|j| j * (ts + 1)..j * (ts + 1) + ts).collect();
            Ok(t.gather(y, &keep)?)
        })();
        t.set_scope(old);
        r
    }

    /// Block-causal self-attention across spaces.
    pub fn autoregress(&self, t: &mut Tape, s: &ParamStore, encoded: Var) -> Result<Var> {
        let ts = self.config.t_sc;
        let rows = t.value(encoded).rows();
        if rows == 0 || rows % ts != 0 {
            return Err(ModelError::Invalid(format!("{rows} latent rows is not a multiple of {ts}")));
        }
        self.ar_calls.fetch_add(1, Ordering::Relaxed);
        let old = t.set_scope(Scope::Latent);
        let r = (|| {
            let mask = AttnMask::block_causal(rows / ts, ts);
            let mut x = encoded;
            for b in &self.net.ar {
                x = b.forward(t, s, x, self.heads(), mask.clone())?;
            }
            Ok(self.net.ar_norm.forward(t, s, x)?)
        })();
        t.set_scope(old);
        r
    }

    /// Logits for a batch of pathways: `(B * l_sub) x vocab`, pathway `b`
    /// occupying rows `b*l_sub..(b+1)*l_sub`. `latents` holds at least the
    /// first `max(ms)` spaces; pathway `m` only ever reads the first `m`.
    pub fn decode_pathways(&self, t: &mut Tape, s: &ParamStore, latents: Var, le: Var, ms: &[usize]) -> Result<Var> {
        let c = &self.config;
        let ts = c.t_sc;
        let spaces = t.value(latents).rows() / ts;
        let Some(&max_m) = ms.iter().max() else {
            return Err(ModelError::Invalid("no pathways requested".into()));
        };
        if let Some(&m) = ms.iter().find(|&&m| m == 0 || m > spaces || m > c.m_max) {
            return Err(ModelError::Pathway { m, spaces });
        }
        let old = t.set_scope(Scope::Lane);
        let r = (|| {
            let latent = t.slice_rows(latents, 0, max_m * ts)?;
            let table = t.param(s, self.net.index);
            let idx: Vec<usize> = ms.iter().map(|m| m - 1).collect();
            let ie = t.gather(table, &idx)?;
            let q = t.param(s, self.net.queries);
            let mut x = t.tile_add(q, ie)?;
            let cond = t.tile_add(le, ie)?;
            let groups: Vec<LaneGroup> = ms
                .iter()
                .map(|&m| LaneGroup {
                    rows: c.l_sub,
                    latent: m * ts,
                })
                .collect();
            for b in &self.net.lane {
                x = b.forward(t, s, x, cond, latent, self.heads(), &groups)?;
            }
            let x = self.net.out_norm.forward(t, s, x)?;
            Ok(self.net.head.forward(t, s, x)?)
        })();
        t.set_scope(old);
        r
    }

    /// Full training forward for one sample and one subsequence index
    /// (1-based): mean cross-entropy over the non-PAD targets.
    pub fn loss(&self, t: &mut Tape, s: &ParamStore, pcs: &PointCloudSet, target: &[u16], length: usize, m: usize) -> Result<Var> {
        let c = &self.config;
        let spaces = c.num_subsequences(length);
        if m == 0 || m > spaces {
            return Err(ModelError::Pathway { m, spaces });
        }
        let want = (m - 1) * c.l_sub..m * c.l_sub;
        let targets: Vec<usize> = want.map(|i| usize::from(target.get(i).copied().unwrap_or(PAD))).collect();
        let z = self.extract(t, s, pcs)?;
        let le = self.length_embedding(t, s, length)?;
        let enc = self.construct(t, s, z, le, spaces)?;
        let hier = self.autoregress(t, s, enc)?;
        let logits = self.decode_pathways(t, s, hier, le, &[m])?;
        Ok(t.cross_entropy(logits, &targets, usize::from(PAD))?)
    }

    /// Extractor and constructor only, on an inference tape.
    pub fn encode_hierarchy(&self, pcs: &PointCloudSet, length: usize) -> Result<LatentHierarchy> {
        self.check_length(length)?;
        let m = self.config.num_subsequences(length);
        let s = &self.store;
        let mut t = Tape::inference();
        let z = self.extract(&mut t, s, pcs)?;
        let le = self.length_embedding(&mut t, s, length)?;
        let enc = self.construct(&mut t, s, z, le, m)?;
        Ok(LatentHierarchy {
            spaces: t.value(enc).clone(),
            m,
            t_sc: self.config.t_sc,
            stage: Stage::Encoded,
            length,
            length_embedding: t.value(le).clone(),
        })
    }

    /// Runs the latent autoregressive block on an encoded hierarchy.
    pub fn autoregress_hierarchy(&self, h: &LatentHierarchy) -> Result<LatentHierarchy> {
        if h.stage != Stage::Encoded {
            return Err(ModelError::Invalid("hierarchy is already autoregressed".into()));
        }
        let mut t = Tape::inference();
        let x = t.constant(h.spaces.clone());
        let y = self.autoregress(&mut t, &self.store, x)?;
        Ok(LatentHierarchy {
            spaces: t.value(y).clone(),
            stage: Stage::Autoregressed,
            ..h.clone()
        })
    }

    /// Extractor, constructor and autoregressive block, each run once.
    pub fn build_hierarchy(&self, pcs: &PointCloudSet, length: usize) -> Result<LatentHierarchy> {
        let h = self.encode_hierarchy(pcs, length)?;
        self.autoregress_hierarchy(&h)
    }

    /// One logits tensor (`l_sub x vocab`) per requested pathway, computed
    /// as a single batched forward.
    pub fn predict_pathways(&self, h: &LatentHierarchy, ms: &[usize]) -> Result<Vec<Tensor>> {
        if h.stage != Stage::Autoregressed {
            return Err(ModelError::Invalid("hierarchy must be autoregressed before decoding".into()));
        }
        if let Some(&m) = ms.iter().find(|&&m| m == 0 || m > h.m) {
            return Err(ModelError::Pathway { m, spaces: h.m });
        }
        let mut t = Tape::inference();
        let lat = t.constant(h.spaces.clone());
        let le = t.constant(h.length_embedding.clone());
        let logits = self.decode_pathways(&mut t, &self.store, lat, le, ms)?;
        let l = self.config.l_sub;
        let out = t.value(logits);
        Ok((0..ms.len()).map(|b| out.slice_rows(b * l, (b + 1) * l)).collect())
    }

    pub fn predict_subsequence(&self, h: &LatentHierarchy, m: usize) -> Result<Tensor> {
        Ok(self.predict_pathways(h, &[m])?.remove(0))
    }
}

/// `[p, sin(2^f pi p), cos(2^f pi p)]` for `f` in `0..POINT_OCTAVES`.
pub fn point_features(points: &[Point]) -> Result<Tensor> {
    if points.is_empty() {
        return Err(ModelError::Invalid("empty point set".into()));
    }
    let mut data = Vec::with_capacity(points.len() * POINT_FEATURES);
    for p in points {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::Tensor(TensorError::NonFinite { op: "point features" }));
        }
        data.extend_from_slice(p);
        for f in 0..POINT_OCTAVES {
            let w = f64::from(1u32 << f) * std::f64::consts::PI;
            for &c in p {
                data.push((w * c).sin());
            }
            for &c in p {
                data.push((w * c).cos());
            }
        }
    }
    Ok(Tensor::new(vec![points.len(), POINT_FEATURES], data)?)
}

/// Sinusoidal code of `(L / l_sub, L mod l_sub)`, `d/2` columns each,
/// as a `1 x d` tensor.
pub fn length_features(length: usize, l_sub: usize, d: usize) -> Tensor {
    let half = d / 2;
    let nf = half / 2;
    let mut row = Vec::with_capacity(d);
    for a in [length / l_sub, length % l_sub] {
        let a = a as f64;
        for i in 0..nf {
            let w = 10000f64.powf(-(i as f64) / nf as f64);
            row.push((a * w).sin());
        }
        for i in 0..nf {
            let w = 10000f64.powf(-(i as f64) / nf as f64);
            row.push((a * w).cos());
        }
    }
    Tensor::new(vec![1, d], row).expect("length features shape")
}
