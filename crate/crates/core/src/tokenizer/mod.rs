//! Mesh <-> token sequence conversion.
//!
//! Coordinates are quantized to 512 bins per axis and emitted in z, y, x
//! order, three tokens per vertex. Two schemes are provided: [`Scheme::Flat`]
//! writes every face as nine tokens, [`Scheme::HalfEdge`] walks the surface
//! depth-first and writes one apex vertex per newly reached face.

mod flat;
mod halfedge;
mod io;

pub use io::{decode_tokens, encode_tokens, read_tokens, write_tokens};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{dequantize, quantize, Mesh};

pub const COORD_BINS: u16 = 512;
pub const BOS: u16 = 512;
pub const EOS: u16 = 513;
pub const PAD: u16 = 514;
pub const END_BRANCH: u16 = 515;
pub const NEW_COMP: u16 = 516;
pub const VOCAB_SIZE: usize = 517;

pub fn is_coord(t: u16) -> bool {
    t < COORD_BINS
}

pub fn token_name(t: u16) -> String {
    match t {
        BOS => "BOS".into(),
        EOS => "EOS".into(),
        PAD => "PAD".into(),
        END_BRANCH => "END_BRANCH".into(),
        NEW_COMP => "NEW_COMP".into(),
        t => t.to_string(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenError {
    #[error("vertex {vertex} coordinate {value} outside [0, 1); normalize the mesh first")]
    Unnormalized { vertex: usize, value: f64 },
    #[error("mesh has no non-degenerate faces after quantization")]
    NoFaces,
    #[error("inconsistent winding: directed edge {from:?} -> {to:?} (z,y,x bins) used by two faces")]
    Winding { from: [u16; 3], to: [u16; 3] },
    #[error("token {position}: {msg}")]
    Grammar { position: usize, msg: String },
    #[error("token file: {0}")]
    Format(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, TokenError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Flat,
    #[default]
    #[serde(rename = "halfedge")]
    HalfEdge,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Flat => "flat",
            Scheme::HalfEdge => "halfedge",
        }
    }

    pub(crate) fn byte(self) -> u8 {
        match self {
            Scheme::Flat => 0,
            Scheme::HalfEdge => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Scheme::Flat),
            1 => Some(Scheme::HalfEdge),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Scheme::Flat),
            "halfedge" => Ok(Scheme::HalfEdge),
            _ => Err(TokenError::Format(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
    pub scheme: Scheme,
    /// Token count excluding trailing padding.
    pub true_length: usize,
}

impl TokenSequence {
    /// Wraps raw ids; `true_length` excludes trailing PAD.
    pub fn from_tokens(tokens: Vec<u16>, scheme: Scheme) -> Self {
        let true_length = tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
        Self {
            tokens,
            scheme,
            true_length,
        }
    }

    pub fn len(&self) -> usize {
        self.true_length
    }

    pub fn is_empty(&self) -> bool {
        self.true_length == 0
    }

    pub fn real(&self) -> &[u16] {
        &self.tokens[..self.true_length]
    }

    /// Checks the framing invariants: BOS first, EOS at `true_length - 1`,
    /// PAD only beyond `true_length`, ids within the vocabulary.
    pub fn check_framing(&self) -> Result<()> {
        let g = |position, msg: &str| TokenError::Grammar {
            position,
            msg: msg.to_string(),
        };
        if self.true_length > self.tokens.len() {
            return Err(g(self.tokens.len(), "true length exceeds buffer"));
        }
        if let Some(p) = self.tokens.iter().position(|&t| usize::from(t) >= VOCAB_SIZE) {
            return Err(g(p, "unknown token"));
        }
        if self.true_length < 2 || self.tokens[0] != BOS {
            return Err(g(0, "sequence must start with BOS"));
        }
        if self.tokens[self.true_length - 1] != EOS {
            return Err(g(self.true_length - 1, "sequence must end with EOS"));
        }
        if let Some(p) = self.tokens[..self.true_length - 1].iter().position(|&t| t == EOS || t == PAD) {
            return Err(g(p, "EOS or PAD before end of sequence"));
        }
        if let Some(p) = self.tokens[self.true_length..].iter().position(|&t| t != PAD) {
            return Err(g(self.true_length + p, "non-PAD token after EOS"));
        }
        Ok(())
    }

    /// Space-separated ids.
    pub fn to_text(&self) -> String {
        self.real().iter().map(u16::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn from_text(text: &str, scheme: Scheme) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, w) in text.split_whitespace().enumerate() {
            let t: u16 = w.parse().map_err(|_| TokenError::Grammar {
                position: i,
                msg: format!("not a token id: {w:?}"),
            })?;
            if usize::from(t) >= VOCAB_SIZE {
                return Err(TokenError::Grammar {
                    position: i,
                    msg: format!("unknown token {t}"),
                });
            }
            tokens.push(t);
        }
        Ok(Self::from_tokens(tokens, scheme))
    }
}

/// Quantized vertex key in emission order `[z, y, x]`.
pub type VKey = [u16; 3];

/// Mesh after quantization, merging of coincident vertices and removal of
/// collapsed or repeated faces.
#[derive(Clone, Debug)]
pub(crate) struct QuantMesh {
    pub keys: Vec<VKey>,
    pub faces: Vec<[usize; 3]>,
}

pub(crate) fn key_of(p: [f64; 3]) -> VKey {
    [quantize(p[2]), quantize(p[1]), quantize(p[0])]
}

pub(crate) fn point_of(k: VKey) -> [f64; 3] {
    [dequantize(k[2]), dequantize(k[1]), dequantize(k[0])]
}

/// Rotate a face so its smallest key comes first, keeping orientation.
pub(crate) fn rotate_canonical<T: Copy>(f: [T; 3], key: impl Fn(T) -> VKey) -> [T; 3] {
    let ks = [key(f[0]), key(f[1]), key(f[2])];
    let m = (0..3).min_by_key(|&i| ks[i]).unwrap();
    [f[m], f[(m + 1) % 3], f[(m + 2) % 3]]
}

pub(crate) fn quantize_mesh(mesh: &Mesh) -> Result<QuantMesh> {
    for (i, v) in mesh.vertices().iter().enumerate() {
        for &c in v {
            if !(0.0..1.0).contains(&c) {
                return Err(TokenError::Unnormalized { vertex: i, value: c });
            }
        }
    }
    let mut index: HashMap<VKey, usize> = HashMap::new();
    let mut keys = Vec::new();
    let remap: Vec<usize> = mesh
        .vertices()
        .iter()
        .map(|&p| {
            let k = key_of(p);
            *index.entry(k).or_insert_with(|| {
                keys.push(k);
                keys.len() - 1
            })
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut faces = Vec::new();
    for f in mesh.faces() {
        let q = [remap[f[0]], remap[f[1]], remap[f[2]]];
        if q[0] == q[1] || q[1] == q[2] || q[0] == q[2] {
            continue;
        }
        let c = rotate_canonical(q, |i| keys[i]);
        if seen.insert(c) {
            faces.push(c);
        }
    }
    if faces.is_empty() {
        return Err(TokenError::NoFaces);
    }
    Ok(QuantMesh { keys, faces })
}

/// Oriented face set of a mesh after quantization, each face as its three
/// vertex keys rotated to start at the smallest. Used to compare meshes
/// modulo vertex numbering and face order.
pub fn quantized_face_set(mesh: &Mesh) -> Result<BTreeSet<[VKey; 3]>> {
    let q = quantize_mesh(mesh)?;
    Ok(q.faces.iter().map(|f| [q.keys[f[0]], q.keys[f[1]], q.keys[f[2]]]).collect())
}

pub fn tokenize(mesh: &Mesh, scheme: Scheme) -> Result<TokenSequence> {
    let q = quantize_mesh(mesh)?;
    let tokens = match scheme {
        Scheme::Flat => flat::encode(&q),
        Scheme::HalfEdge => halfedge::encode(&q)?,
    };
    Ok(TokenSequence::from_tokens(tokens, scheme))
}

pub fn tokenize_flat(mesh: &Mesh) -> Result<TokenSequence> {
    tokenize(mesh, Scheme::Flat)
}

pub fn tokenize_halfedge(mesh: &Mesh) -> Result<TokenSequence> {
    tokenize(mesh, Scheme::HalfEdge)
}

/// Result of a best-effort decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub mesh: Mesh,
    /// Set when decoding stopped at a grammar error; `mesh` then holds
    /// every face completed before it.
    pub partial: bool,
    pub error: Option<TokenError>,
}

/// Incremental face collector shared by both decoders.
pub(crate) struct FaceBuilder {
    index: HashMap<VKey, usize>,
    keys: Vec<VKey>,
    faces: Vec<[usize; 3]>,
}

impl FaceBuilder {
    pub fn new() -> Self {
        Self {
            index: HashMap::new(),
            keys: Vec::new(),
            faces: Vec::new(),
        }
    }

    pub fn vertex(&mut self, k: VKey) -> usize {
        let keys = &mut self.keys;
        *self.index.entry(k).or_insert_with(|| {
            keys.push(k);
            keys.len() - 1
        })
    }

    pub fn push(&mut self, f: [usize; 3]) {
        self.faces.push(f);
    }

    pub fn finish(self) -> Mesh {
        Mesh::new(self.keys.into_iter().map(point_of).collect(), self.faces).expect("decoded faces are valid")
    }
}

fn decode_inner(seq: &TokenSequence) -> (FaceBuilder, Option<TokenError>) {
    match seq.scheme {
        Scheme::Flat => flat::decode(&seq.tokens),
        Scheme::HalfEdge => halfedge::decode(&seq.tokens),
    }
}

/// Strict decode: any grammar violation is an error with its position.
pub fn detokenize(seq: &TokenSequence) -> Result<Mesh> {
    let (b, err) = decode_inner(seq);
    match err {
        Some(e) => Err(e),
        None => Ok(b.finish()),
    }
}

/// Lenient decode: stops at the first violation and keeps the faces
/// completed before it.
pub fn detokenize_best_effort(seq: &TokenSequence) -> Decoded {
    let (b, err) = decode_inner(seq);
    Decoded {
        mesh: b.finish(),
        partial: err.is_some(),
        error: err,
    }
}

/// A sequence cut into `m` consecutive chunks of `l_sub` tokens; the last
/// chunk is PAD-filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsequenceBatch {
    pub subsequences: Vec<Vec<u16>>,
    pub l_sub: usize,
    pub true_length: usize,
}

impl SubsequenceBatch {
    pub fn m(&self) -> usize {
        self.subsequences.len()
    }

    /// Concatenation with trailing padding removed.
    pub fn concat(&self) -> Vec<u16> {
        let mut out: Vec<u16> = self.subsequences.concat();
        out.truncate(self.true_length);
        out
    }
}

/// Number of chunks for a sequence of length `len`.
pub fn num_subsequences(len: usize, l_sub: usize) -> usize {
    len.div_ceil(l_sub)
}

pub fn split_subsequences(seq: &TokenSequence, l_sub: usize) -> SubsequenceBatch {
    assert!(l_sub >= 1, "l_sub must be positive");
    let real = seq.real();
    let subsequences = real
        .chunks(l_sub)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(l_sub, PAD);
            v
        })
        .collect();
    SubsequenceBatch {
        subsequences,
        l_sub,
        true_length: real.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqStats {
    pub length: usize,
    pub faces: usize,
    /// `(L - 2) / faces`, or 0 when there are no faces.
    pub tokens_per_face: f64,
    pub control_tokens: usize,
    /// Set when `tokens_per_face` is undefined (no faces).
    pub no_faces: bool,
}

pub fn seq_stats(seq: &TokenSequence) -> Result<SeqStats> {
    let mesh = detokenize(seq)?;
    let faces = mesh.num_faces();
    let length = seq.len();
    let control_tokens = seq.real().iter().filter(|&&t| !is_coord(t)).count();
    Ok(SeqStats {
        length,
        faces,
        tokens_per_face: if faces == 0 {
            0.0
        } else {
            (length - 2) as f64 / faces as f64
        },
        control_tokens,
        no_faces: faces == 0,
    })
}

pub(crate) fn grammar(position: usize, msg: impl Into<String>) -> TokenError {
    TokenError::Grammar {
        position,
        msg: msg.into(),
    }
}

/// Reads one vertex (three coordinate tokens) at `pos`.
pub(crate) fn read_vertex(tokens: &[u16], pos: usize) -> std::result::Result<VKey, TokenError> {
    let mut k = [0u16; 3];
    for (i, slot) in k.iter_mut().enumerate() {
        match tokens.get(pos + i) {
            Some(&t) if is_coord(t) => *slot = t,
            Some(&t) if usize::from(t) >= VOCAB_SIZE => return Err(grammar(pos + i, format!("unknown token {t}"))),
            Some(&t) => {
                return Err(grammar(
                    pos + i,
                    format!("coordinate group of length {i} ended by {}", token_name(t)),
                ))
            }
            None => return Err(grammar(pos + i, format!("sequence ended inside a coordinate group of length {i}"))),
        }
    }
    Ok(k)
}

/// Checks that everything after `pos` is PAD.
pub(crate) fn expect_padding(tokens: &[u16], pos: usize) -> Option<TokenError> {
    tokens[pos..]
        .iter()
        .position(|&t| t != PAD)
        .map(|p| grammar(pos + p, "non-PAD token after EOS"))
}
