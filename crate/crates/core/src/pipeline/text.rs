use sha2::{Digest, Sha256};

use crate::model::TextCondition;
use crate::tensor::{SeededRng, Tensor};

/// Turns captions into token embeddings for cross-attention.
pub trait TextEmbeddingProvider {
    fn text_dim(&self) -> usize;
    fn embed(&self, caption: &str) -> TextCondition;
}

/// Deterministic stand-in for a language-model encoder: every lowercase
/// whitespace token maps to a fixed pseudo-random vector seeded by a hash of
/// the token. Sequences are truncated or zero-padded to `max_tokens`, with
/// padding masked out. A blank caption yields the null condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashingTextStub {
    pub text_dim: usize,
    pub max_tokens: usize,
}

impl HashingTextStub {
    pub fn new(text_dim: usize, max_tokens: usize) -> Self {
        Self {
            text_dim,
            max_tokens,
        }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = SeededRng::new(seed, 0);
        (0..self.text_dim).map(|_| rng.normal()).collect()
    }
}

impl TextEmbeddingProvider for HashingTextStub {
    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn embed(&self, caption: &str) -> TextCondition {
        let tokens: Vec<String> = caption
            .split_whitespace()
            .take(self.max_tokens)
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return TextCondition::null(self.text_dim);
        }
        let mut data = Vec::with_capacity(self.max_tokens * self.text_dim);
        for t in &tokens {
            data.extend(self.token_vector(t));
        }
        data.resize(self.max_tokens * self.text_dim, 0.0);
        let mut mask = vec![true; tokens.len()];
        mask.resize(self.max_tokens, false);
        let tokens = Tensor::new(&[self.max_tokens, self.text_dim], data).expect("sized above");
        TextCondition::new(tokens, mask).expect("at least one real token")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_token_keyed() {
        let p = HashingTextStub::new(8, 120);
        let a = p.embed("A cat on a mat");
        assert_eq!(a, p.embed("a CAT on  a mat"));
        assert_eq!(a.len(), 120);
        assert_eq!(a.mask().iter().filter(|&&m| m).count(), 5);
        // "a" appears twice: identical rows.
        let d = a.tokens().data();
        assert_eq!(&d[0..8], &d[24..32]);
        assert_ne!(&d[0..8], &d[8..16]);
    }

    #[test]
    fn long_captions_truncate() {
        let p = HashingTextStub::new(4, 120);
        let caption = vec!["word"; 300].join(" ");
        let t = p.embed(&caption);
        assert_eq!(t.len(), 120);
        assert!(t.mask().iter().all(|&m| m));
    }

    #[test]
    fn blank_caption_is_null() {
        let p = HashingTextStub::new(4, 120);
        let t = p.embed("   ");
        assert!(t.is_null());
        assert_eq!(t.mask().len(), 1);
    }
}
