//! Inference: build the latent hierarchy once, decode every subsequence
//! either one at a time or as batches of independent pathways, then
//! assemble and detokenize.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{corrupt_mesh, make_pointcloud_set, normalize, Mesh, MeshError, PointCloudSet};
use crate::model::{LaneModel, LatentHierarchy, ModelError, Stage};
use crate::tensor::Tensor;
use crate::tokenizer::{detokenize_best_effort, Decoded, Scheme, TokenSequence, EOS, PAD};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("batch_limit must be at least 1")]
    BatchLimit,
    #[error("unknown decode mode {0:?}")]
    Mode(String),
    #[error("token mismatch between decode modes at position {position}")]
    Mismatch { position: usize },
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// One pathway per forward pass, in index order.
    Serial,
    /// Pathways batched up to a limit, each masked to its own prefix.
    Adagraph,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Serial => "serial",
            DecodeMode::Adagraph => "adagraph",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecodeMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(DecodeMode::Serial),
            "adagraph" => Ok(DecodeMode::Adagraph),
            _ => Err(EngineError::Mode(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathwayStatus {
    Pending,
    Running,
    Done,
}

/// One decoding pathway: subsequence `m` reads latent spaces `1..=m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwaySpec {
    pub m: usize,
    pub status: PathwayStatus,
}

impl PathwaySpec {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            status: PathwayStatus::Pending,
        }
    }

    /// 1-based indices of the latent spaces this pathway may read.
    pub fn active_spaces(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub hierarchy_s: f64,
    pub decode_s: f64,
    /// Requested length over decode time.
    pub tok_per_s: f64,
    pub mode: DecodeMode,
    pub batch_limit: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub length: usize,
}

/// Per-subsequence digest of the logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsequenceSummary {
    pub m: usize,
    /// Mean over positions of the winning logit.
    pub mean_max_logit: f64,
    /// Mean over positions of the softmax entropy.
    pub mean_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    /// Assembled sequence.
    pub tokens: TokenSequence,
    /// Greedy tokens of every subsequence, `M * l_sub` of them.
    pub raw: Vec<u16>,
    pub logits: Vec<Tensor>,
    pub summaries: Vec<SubsequenceSummary>,
    pub timing: Timing,
}

/// Hardware threads available to rayon.
pub fn default_batch_limit() -> usize {
    rayon::current_num_threads().max(1)
}

/// Runs extractor, constructor and latent block once for length `length`.
pub fn build_hierarchy(model: &LaneModel, pcs: &PointCloudSet, length: usize) -> Result<(LatentHierarchy, f64)> {
    let start = Instant::now();
    let h = model.build_hierarchy(pcs, length)?;
    Ok((h, start.elapsed().as_secs_f64()))
}

/// Lowest-id argmax of each row.
pub fn greedy(logits: &Tensor) -> Vec<u16> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

fn summarize(m: usize, logits: &Tensor) -> SubsequenceSummary {
    let n = logits.rows().max(1) as f64;
    let mut max_sum = 0.0;
    let mut ent_sum = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lz = z.ln();
        let ent: f64 = row
            .iter()
            .map(|x| {
                let lp = x - max - lz;
                -lp.exp() * lp
            })
            .sum();
        max_sum += max;
        ent_sum += ent;
    }
    SubsequenceSummary {
        m,
        mean_max_logit: max_sum / n,
        mean_entropy: ent_sum / n,
    }
}

/// Truncate at the first EOS inside the first `length` tokens, otherwise
/// keep `length` tokens and force the last to EOS; PAD tokens are dropped.
pub fn assemble(raw: &[u16], length: usize) -> Vec<u16> {
    let window = &raw[..length.min(raw.len())];
    let mut out: Vec<u16> = match window.iter().position(|&t| t == EOS) {
        Some(p) => window[..=p].to_vec(),
        None => {
            let mut v = window.to_vec();
            if let Some(last) = v.last_mut() {
                *last = EOS;
            }
            v
        }
    };
    out.retain(|&t| t != PAD);
    out
}

fn check_hierarchy(h: &LatentHierarchy, length: usize) -> Result<()> {
    if h.stage != Stage::Autoregressed {
        return Err(ModelError::Invalid("hierarchy must be autoregressed before decoding".into()).into());
    }
    if h.length != length {
        return Err(ModelError::Invalid(format!("hierarchy built for L = {}, decoding L = {length}", h.length)).into());
    }
    Ok(())
}

fn finish(
    scheme: Scheme,
    length: usize,
    logits: Vec<Tensor>,
    mode: DecodeMode,
    batch_limit: usize,
    decode_s: f64,
) -> GenerationResult {
    let raw: Vec<u16> = logits.iter().flat_map(greedy).collect();
    let summaries = logits.iter().enumerate().map(|(i, l)| summarize(i + 1, l)).collect();
    let tokens = TokenSequence::from_tokens(assemble(&raw, length), scheme);
    GenerationResult {
        tokens,
        raw,
        summaries,
        timing: Timing {
            hierarchy_s: 0.0,
            decode_s,
            tok_per_s: if decode_s > 0.0 { length as f64 / decode_s } else { f64::INFINITY },
            mode,
            batch_limit,
            m: logits.len(),
            length,
        },
        logits,
    }
}

/// Reference decoding: subsequences one forward pass at a time, in order.
pub fn serial_generate(model: &LaneModel, h: &LatentHierarchy, length: usize, scheme: Scheme) -> Result<GenerationResult> {
    check_hierarchy(h, length)?;
    let start = Instant::now();
    let mut logits = Vec::with_capacity(h.m);
    for m in 1..=h.m {
        logits.push(model.predict_subsequence(h, m)?);
    }
    let s = start.elapsed().as_secs_f64();
    Ok(finish(scheme, length, logits, DecodeMode::Serial, 1, s))
}

/// Pathway decoding: `M` independent pathways, run in waves of at most
/// `batch_limit` as single batched forwards.
pub fn adagraph_generate(
    model: &LaneModel,
    h: &LatentHierarchy,
    length: usize,
    scheme: Scheme,
    batch_limit: usize,
) -> Result<GenerationResult> {
    check_hierarchy(h, length)?;
    if batch_limit == 0 {
        return Err(EngineError::BatchLimit);
    }
    let start = Instant::now();
    let mut specs: Vec<PathwaySpec> = (1..=h.m).map(PathwaySpec::new).collect();
    let mut slots: Vec<Option<Tensor>> = vec![None; h.m];
    for wave in 0..h.m.div_ceil(batch_limit) {
        let range = wave * batch_limit..((wave + 1) * batch_limit).min(h.m);
        let ms: Vec<usize> = specs[range.clone()].iter().map(|p| p.m).collect();
        specs[range.clone()].iter_mut().for_each(|p| p.status = PathwayStatus::Running);
        let out = model.predict_pathways(h, &ms)?;
        for (spec, l) in specs[range].iter_mut().zip(out) {
            slots[spec.m - 1] = Some(l);
            spec.status = PathwayStatus::Done;
        }
    }
    debug_assert!(specs.iter().all(|p| p.status == PathwayStatus::Done));
    let logits: Vec<Tensor> = slots.into_iter().map(|s| s.expect("every pathway decoded")).collect();
    let s = start.elapsed().as_secs_f64();
    Ok(finish(scheme, length, logits, DecodeMode::Adagraph, batch_limit, s))
}

/// Builds the hierarchy and decodes it in the requested mode.
pub fn generate(
    model: &LaneModel,
    pcs: &PointCloudSet,
    length: usize,
    scheme: Scheme,
    mode: DecodeMode,
    batch_limit: usize,
) -> Result<GenerationResult> {
    let (h, hs) = build_hierarchy(model, pcs, length)?;
    let mut r = match mode {
        DecodeMode::Serial => serial_generate(model, &h, length, scheme)?,
        DecodeMode::Adagraph => adagraph_generate(model, &h, length, scheme, batch_limit)?,
    };
    r.timing.hierarchy_s = hs;
    Ok(r)
}

/// What generation is conditioned on.
#[derive(Clone, Debug)]
pub enum GenerateInput {
    Cloud(PointCloudSet),
    /// A mesh that is normalized, optionally corrupted by removing a
    /// fraction of its faces, then sampled with `seed`.
    Mesh { mesh: Mesh, corrupt_fraction: f64, seed: u64 },
}

impl GenerateInput {
    pub fn into_clouds(self, counts: [usize; 4]) -> Result<PointCloudSet> {
        match self {
            GenerateInput::Cloud(p) => Ok(p),
            GenerateInput::Mesh {
                mesh,
                corrupt_fraction,
                seed,
            } => {
                let mut m = normalize(&mesh)?;
                if corrupt_fraction > 0.0 {
                    m = corrupt_mesh(&m, corrupt_fraction, seed)?;
                }
                Ok(make_pointcloud_set(&m, counts, seed)?)
            }
        }
    }
}

/// End-to-end: conditioning input to best-effort decoded mesh.
pub fn generate_mesh(
    model: &LaneModel,
    input: GenerateInput,
    length: usize,
    scheme: Scheme,
    mode: DecodeMode,
    batch_limit: usize,
) -> Result<(Decoded, GenerationResult)> {
    let pcs = input.into_clouds(model.config.counts)?;
    let r = generate(model, &pcs, length, scheme, mode, batch_limit)?;
    Ok((detokenize_best_effort(&r.tokens), r))
}
