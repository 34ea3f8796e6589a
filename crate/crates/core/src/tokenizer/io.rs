//! Binary token container: magic `LANETOK1`, one scheme byte (0 flat,
//! 1 halfedge), little-endian `u32` length, then that many little-endian
//! `u16` ids. Trailing padding is not stored.

use std::path::Path;

use super::{Scheme, TokenError, TokenSequence, VOCAB_SIZE};

const MAGIC: &[u8; 8] = b"LANETOK1";

pub fn encode_tokens(seq: &TokenSequence) -> Vec<u8> {
    let real = seq.real();
    let mut out = Vec::with_capacity(13 + 2 * real.len());
    out.extend_from_slice(MAGIC);
    out.push(seq.scheme.byte());
    out.extend_from_slice(&(real.len() as u32).to_le_bytes());
    for t in real {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenSequence, TokenError> {
    let bad = |m: &str| TokenError::Format(m.to_string());
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(bad("missing LANETOK1 magic"));
    }
    let scheme = Scheme::from_byte(bytes[8]).ok_or_else(|| bad("unknown scheme byte"))?;
    let len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() != 2 * len {
        return Err(TokenError::Format(format!(
            "header says {len} tokens, body holds {} bytes",
            body.len()
        )));
    }
    let mut tokens = Vec::with_capacity(len);
    for (i, c) in body.chunks_exact(2).enumerate() {
        let t = u16::from_le_bytes([c[0], c[1]]);
        if usize::from(t) >= VOCAB_SIZE {
            return Err(TokenError::Grammar {
                position: i,
                msg: format!("unknown token {t}"),
            });
        }
        tokens.push(t);
    }
    Ok(TokenSequence {
        true_length: tokens.len(),
        tokens,
        scheme,
    })
}

pub fn write_tokens(seq: &TokenSequence, path: &Path) -> Result<(), TokenError> {
    std::fs::write(path, encode_tokens(seq)).map_err(|e| TokenError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn read_tokens(path: &Path) -> Result<TokenSequence, TokenError> {
    let bytes = std::fs::read(path).map_err(|e| TokenError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    decode_tokens(&bytes)
}
