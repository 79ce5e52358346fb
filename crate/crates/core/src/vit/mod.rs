//! A small Vision Transformer whose attention honours a per-image keep mask.

mod model;

pub use model::{ForwardOutput, NoPruning, PruneHook, StageState, ViT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, MASK_VALUE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub num_classes: usize,
    /// 1-based block indices followed by a pruning layer, ascending.
    pub prune_after: Vec<usize>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// 16x16 grayscale, 17 tokens, four blocks, pruning after blocks 2 and 3.
    pub fn desk() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 32,
            depth: 4,
            num_heads: 4,
            ffn_mult: 4,
            num_classes: 4,
            prune_after: vec![2, 3],
        }
    }

    /// 197-token geometry (224px, patch 16) at width 192, depth 12.
    pub fn throughput_bench() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 192,
            depth: 12,
            num_heads: 3,
            ffn_mult: 4,
            num_classes: 1000,
            prune_after: vec![3, 6, 9],
        }
    }

    /// DeiT-S geometry, used for FLOP accounting.
    pub fn deit_small() -> Self {
        Self {
            embed_dim: 384,
            num_heads: 6,
            ..Self::throughput_bench()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.channels == 0 || self.num_classes == 0 || self.ffn_mult == 0 {
            return err("channels, num_classes and ffn_mult must be positive".into());
        }
        if self.prune_after.iter().any(|b| *b == 0 || *b > self.depth) {
            return err(format!(
                "prune_after {:?} must lie within 1..={}",
                self.prune_after, self.depth
            ));
        }
        if self.prune_after.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("prune_after {:?} must be strictly ascending", self.prune_after));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens per image (excluding the class token).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn num_stages(&self) -> usize {
        self.prune_after.len()
    }
}

/// Per-image boolean keep flags over `[batch, tokens]`; index 0 is the class token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepMask {
    batch: usize,
    tokens: usize,
    keep: Vec<bool>,
}

impl KeepMask {
    pub fn all(batch: usize, tokens: usize) -> Self {
        Self {
            batch,
            tokens,
            keep: vec![true; batch * tokens],
        }
    }

    pub fn from_flags(batch: usize, tokens: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != batch * tokens {
            return Err(Error::Shape(format!("{} flags for {batch}x{tokens} mask", keep.len())));
        }
        if (0..batch).any(|b| !keep[b * tokens]) {
            return Err(Error::Invariant("class token must stay kept".into()));
        }
        Ok(Self { batch, tokens, keep })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, b: usize, t: usize) -> bool {
        self.keep[b * self.tokens + t]
    }

    pub(crate) fn set(&mut self, b: usize, t: usize, keep: bool) {
        self.keep[b * self.tokens + t] = keep;
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.keep[b * self.tokens..(b + 1) * self.tokens]
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    /// Kept non-class token indices of image `b`, ascending.
    pub fn active(&self, b: usize) -> Vec<usize> {
        (1..self.tokens).filter(|&t| self.get(b, t)).collect()
    }

    /// Number of kept non-class tokens of image `b`.
    pub fn kept_non_class(&self, b: usize) -> usize {
        self.row(b)[1..].iter().filter(|k| **k).count()
    }

    /// `kept(self) ⊆ kept(earlier)` for every image.
    pub fn is_subset_of(&self, earlier: &KeepMask) -> bool {
        self.keep.len() == earlier.keep.len() && self.keep.iter().zip(&earlier.keep).all(|(a, b)| !*a || *b)
    }

    /// Additive attention mask, one key row per `(image, head)` group.
    pub fn additive<F: Scalar>(&self, heads: usize) -> Vec<F> {
        let masked = F::of(MASK_VALUE);
        let mut out = Vec::with_capacity(self.batch * heads * self.tokens);
        for b in 0..self.batch {
            let row: Vec<F> = self
                .row(b)
                .iter()
                .map(|k| if *k { F::zero() } else { masked })
                .collect();
            for _ in 0..heads {
                out.extend_from_slice(&row);
            }
        }
        out
    }
}

/// Token features `[B, T, D]` with their keep mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<F> {
    pub features: Tensor<F>,
    pub keep_mask: KeepMask,
}

impl<F: Scalar> TokenBatch<F> {
    pub fn batch(&self) -> usize {
        self.features.shape[0]
    }

    pub fn tokens(&self) -> usize {
        self.features.shape[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape[2]
    }

    pub fn token(&self, b: usize, t: usize) -> &[F] {
        let (n, d) = (self.tokens(), self.dim());
        &self.features.values[(b * n + t) * d..(b * n + t + 1) * d]
    }
}

/// Physically drops pruned tokens, preserving the relative order of kept ones.
///
/// All images must keep the same number of tokens (a length bucket), which is
/// always true for a single image.
pub fn compact_inference<F: Scalar>(tokens: &TokenBatch<F>) -> Result<TokenBatch<F>> {
    let (batch, n, d) = (tokens.batch(), tokens.tokens(), tokens.dim());
    let kept = tokens.keep_mask.row(0).iter().filter(|k| **k).count();
    if (0..batch).any(|b| tokens.keep_mask.row(b).iter().filter(|k| **k).count() != kept) {
        return Err(Error::Shape(
            "compaction needs equal kept counts across the batch".into(),
        ));
    }
    let mut values = Vec::with_capacity(batch * kept * d);
    for b in 0..batch {
        for t in 0..n {
            if tokens.keep_mask.get(b, t) {
                values.extend_from_slice(tokens.token(b, t));
            }
        }
    }
    Ok(TokenBatch {
        features: Tensor::new(&[batch, kept, d], values)?,
        keep_mask: KeepMask::all(batch, kept),
    })
}
