use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{ANSWER_LEN, QUESTION_LEN};

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Answer encoder and partial-question encoder hidden size.
    pub hidden: usize,
    /// Hidden size of every attention module.
    pub att_hidden: usize,
    /// Decoder GRU hidden size. Must equal `hidden`: the answer vector is
    /// added to the encoder state, which is concatenated with the decoder
    /// state.
    pub decoder_hidden: usize,
    pub d_v: usize,
    pub d_e: usize,
    pub k: usize,
    /// MFB sum-pooling window.
    pub pool_window: usize,
    /// MFB expansion size.
    pub fused_expansion: usize,
    pub vocab_size: usize,
    pub max_question_len: usize,
    pub answer_len: usize,
    /// Drop semantic features and the guiding context entirely.
    pub ablate_semantic: bool,
}

impl ModelConfig {
    /// Full-scale dimensions for a given vocabulary size.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            hidden: 1280,
            att_hidden: 512,
            decoder_hidden: 1280,
            d_v: 2048,
            d_e: 300,
            k: 36,
            pool_window: 5,
            fused_expansion: 1600,
            vocab_size,
            max_question_len: QUESTION_LEN,
            answer_len: ANSWER_LEN,
            ablate_semantic: false,
        }
    }

    /// Desk-scale network for the given data sizes, small enough to train on
    /// a laptop CPU in minutes.
    pub fn desk(vocab_size: usize, k: usize, d_v: usize) -> Self {
        Self {
            hidden: 32,
            att_hidden: 16,
            decoder_hidden: 32,
            d_v,
            d_e: 16,
            k,
            pool_window: 3,
            fused_expansion: 96,
            vocab_size,
            max_question_len: QUESTION_LEN,
            answer_len: ANSWER_LEN,
            ablate_semantic: false,
        }
    }

    /// The small configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            att_hidden: 6,
            decoder_hidden: 8,
            d_v: 5,
            d_e: 4,
            k: 3,
            pool_window: 3,
            fused_expansion: 12,
            vocab_size: 20,
            max_question_len: QUESTION_LEN,
            answer_len: ANSWER_LEN,
            ablate_semantic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("att_hidden", self.att_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("k", self.k),
            ("pool_window", self.pool_window),
            ("fused_expansion", self.fused_expansion),
            ("max_question_len", self.max_question_len),
            ("answer_len", self.answer_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must cover the reserved tokens plus one word".into(),
            ));
        }
        if !self.fused_expansion.is_multiple_of(self.pool_window) {
            return Err(Error::Config(format!(
                "pool_window {} does not divide fused_expansion {}",
                self.pool_window, self.fused_expansion
            )));
        }
        if self.decoder_hidden != self.hidden {
            return Err(Error::Config(format!(
                "decoder_hidden ({}) must equal hidden ({})",
                self.decoder_hidden, self.hidden
            )));
        }
        Ok(())
    }

    /// MFB output size `N_f / j`.
    pub fn fused_dim(&self) -> usize {
        self.fused_expansion / self.pool_window
    }

    /// Semantic vector size: attribute and object embeddings.
    pub fn semantic_dim(&self) -> usize {
        2 * self.d_e
    }

    /// Guiding context size `d_v + 2 d_e`.
    pub fn guide_dim(&self) -> usize {
        self.d_v + self.semantic_dim()
    }

    /// Per-region input size of the MFB projection.
    pub fn enhanced_dim(&self) -> usize {
        if self.ablate_semantic {
            self.d_v
        } else {
            self.guide_dim()
        }
    }

    pub fn encoder_input_dim(&self) -> usize {
        let guide = if self.ablate_semantic { 0 } else { self.guide_dim() };
        self.d_e + self.decoder_hidden + guide
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.d_v + self.hidden
    }
}
