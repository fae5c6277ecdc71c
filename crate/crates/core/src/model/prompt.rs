use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::{seeded, standard_normal};
use crate::{Error, Result, Tensor};

pub const DEFAULT_MAX_TOKENS: usize = 16;

/// Hashed bag-of-tokens text conditioning. Each token maps to a fixed
/// pseudo-random vector seeded by its hash, so equal strings always embed
/// identically.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    text: String,
    tokens: Tensor,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl PromptEmbedding {
    /// Embeds `text` as one row per token, keeping at most `max_tokens`.
    /// Text with no tokens gives the null embedding.
    pub fn encode(text: &str, text_dim: usize, max_tokens: usize) -> Result<Self> {
        if text_dim == 0 || max_tokens == 0 {
            return Err(Error::invalid("prompt", "text_dim and max_tokens must be positive"));
        }
        let mut data = Vec::new();
        let mut count = 0;
        for tok in tokenize(text).take(max_tokens) {
            let row = standard_normal(&mut seeded(fnv1a(tok.as_bytes())), text_dim);
            let scale = 1.0 / crate::math::sqrt(text_dim as f64);
            data.extend(row.into_iter().map(|v| v * scale));
            count += 1;
        }
        if count == 0 {
            return Ok(Self::null(text_dim));
        }
        Ok(PromptEmbedding {
            text: String::from(text),
            tokens: Tensor::from_vec(&[count, text_dim], data)?,
        })
    }

    /// The unconditional embedding: a single all-zero token.
    pub fn null(text_dim: usize) -> Self {
        PromptEmbedding {
            text: String::new(),
            tokens: Tensor::zeros(&[1, text_dim]),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// `[tokens, text_dim]`.
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }
}
