use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{next_token_logits_adapted, AdapterState, FusionMode};
use crate::backbone::{generate, BackboneWeights, Sampling};
use crate::error::Result;

/// A frozen backbone paired with an adapter, ready for decoding.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedModel<'a> {
    pub backbone: &'a BackboneWeights,
    pub adapter: &'a AdapterState,
    pub fusion: FusionMode,
}

impl<'a> AdaptedModel<'a> {
    pub fn new(backbone: &'a BackboneWeights, adapter: &'a AdapterState, fusion: FusionMode) -> Self {
        Self {
            backbone,
            adapter,
            fusion,
        }
    }

    pub fn next_logits(&self, tokens: &[usize], features: Option<&[f32]>) -> Result<Vec<f32>> {
        next_token_logits_adapted(self.backbone, self.adapter, tokens, features, self.fusion)
    }

    /// Greedy continuation of `prompt`, stopping at EOS, the token budget, or
    /// the context window.
    pub fn complete(&self, prompt: &[usize], features: Option<&[f32]>, max_new: usize) -> Result<Vec<usize>> {
        let reserved = match (features, self.fusion) {
            (Some(_), FusionMode::Early) => self.adapter.config.visual_len,
            _ => 0,
        };
        let room = self.backbone.config.max_seq_len.saturating_sub(reserved + prompt.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        generate(
            |ctx| self.next_logits(ctx, features),
            prompt,
            max_new.min(room),
            Sampling::Greedy,
            &mut rng,
        )
    }
}
