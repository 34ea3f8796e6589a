use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::mesh::PointCloudSet;
use crate::tokenizer::VOCAB_SIZE;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of stacked decoding blocks.
    pub k_blocks: usize,
    /// Tokens per latent space.
    pub t_sc: usize,
    /// Maximum number of subsequence slots.
    pub m_max: usize,
    /// Tokens per subsequence.
    pub l_sub: usize,
    pub vocab: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_ar_layers: usize,
    /// Point counts `(N1, N2, N3, N4)`.
    pub counts: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            k_blocks: 4,
            t_sc: 16,
            m_max: 32,
            l_sub: 64,
            vocab: VOCAB_SIZE,
            d_ff: 512,
            n_enc_layers: 2,
            n_ar_layers: 2,
            counts: [8192, 512, 1024, 2048],
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            k_blocks: 2,
            t_sc: 4,
            m_max: 3,
            l_sub: 8,
            vocab: VOCAB_SIZE,
            d_ff: 32,
            n_enc_layers: 2,
            n_ar_layers: 1,
            counts: [64, 8, 16, 32],
        }
    }

    /// Longest sequence the model can generate.
    pub fn capacity(&self) -> usize {
        self.m_max * self.l_sub
    }

    /// Number of subsequences for a sequence of `len` tokens.
    pub fn num_subsequences(&self, len: usize) -> usize {
        len.div_ceil(self.l_sub)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4", self.d_model));
        }
        if self.k_blocks == 0 || self.n_enc_layers == 0 || self.n_ar_layers == 0 {
            return bad("block counts must be at least 1".into());
        }
        if self.t_sc == 0 || self.m_max == 0 || self.l_sub == 0 || self.d_ff == 0 {
            return bad("t_sc, m_max, l_sub and d_ff must be positive".into());
        }
        if self.vocab != VOCAB_SIZE {
            return bad(format!("vocab must be {VOCAB_SIZE}"));
        }
        PointCloudSet::check_ordering(self.counts).map_err(|e| ModelError::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
