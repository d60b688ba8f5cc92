//! Learnable additions on top of the frozen backbone: adaptation prompts with
//! zero-initialized gates in the last `L` layers, per-channel scale/bias
//! around every linear map, learnable norm copies, and the visual projection
//! whose tokens are fused into the first `K` layers.

mod count;
mod forward;
mod model;

pub use count::{count_tunable, TunableBreakdown};
pub use model::AdaptedModel;
pub use forward::{
    forward_adapted, forward_adapted_vars, forward_v1_style, gated_attention, next_token_logits_adapted,
    project_visual, project_visual_vars, scaled_linear, scaled_linear_forward, zero_init_prefix_attention,
    AdaptedInput, AdapterVars, FusionMode, LayerAdapterVars, Prefix,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneWeights, LINEARS};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Fnv64, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// `L`: number of final layers carrying adaptation prompts.
    pub prompt_layers: usize,
    pub prompt_len: usize,
    /// `K`: visual tokens live in layers `1..=K`.
    pub fusion_layers: usize,
    /// Number of visual tokens produced from one feature vector.
    pub visual_len: usize,
    pub feat_dim: usize,
}

impl AdapterConfig {
    pub fn desk() -> Self {
        Self {
            prompt_layers: 3,
            prompt_len: 10,
            fusion_layers: 1,
            visual_len: 4,
            feat_dim: 16,
        }
    }

    /// LLaMA-7B setup: prompts in the last 31 of 32 layers, 20 visual
    /// prompts in the first layer, CLIP ViT-L/14 global features.
    pub fn llama7b() -> Self {
        Self {
            prompt_layers: 31,
            prompt_len: 10,
            fusion_layers: 1,
            visual_len: 20,
            feat_dim: 768,
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let n = backbone.n_layers;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.prompt_layers == 0 || self.prompt_layers > n - 1 {
            return bad(format!("prompt_layers {} must lie in 1..={}", self.prompt_layers, n - 1));
        }
        if self.fusion_layers == 0 || self.fusion_layers + self.prompt_layers > n {
            return bad(format!(
                "fusion_layers {} must be at least 1 and at most n_layers - prompt_layers = {}",
                self.fusion_layers,
                n - self.prompt_layers
            ));
        }
        if self.prompt_len == 0 || self.visual_len == 0 || self.feat_dim == 0 {
            return bad("prompt_len, visual_len and feat_dim must be positive".into());
        }
        if self.visual_len >= backbone.max_seq_len {
            return bad(format!(
                "visual_len {} leaves no room in max_seq_len {}",
                self.visual_len, backbone.max_seq_len
            ));
        }
        Ok(())
    }

    /// First (0-based) layer that carries adaptation prompts.
    pub fn first_prompt_layer(&self, backbone: &BackboneConfig) -> usize {
        backbone.n_layers - self.prompt_layers
    }
}

/// `y = s ⊙ (x W + b)` parameters for one linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleBias {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl ScaleBias {
    pub fn identity(d_out: usize) -> Self {
        Self {
            scale: Tensor::ones([d_out]).with_requires_grad(true),
            bias: Tensor::zeros([d_out]).with_requires_grad(true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter {
    /// One entry per linear, in [`LINEARS`] order.
    pub linears: Vec<ScaleBias>,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    /// `[prompt_len × d_model]`, present in the last `L` layers.
    pub prompt: Option<Tensor>,
    /// `[n_heads]`, paired with `prompt`.
    pub gate: Option<Tensor>,
    /// `[n_heads]`, present in the first `K` layers.
    pub visual_gate: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualProjection {
    /// `[feat_dim × d_model]`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// `[visual_len × d_model]` offsets added to the replicated projection.
    pub pos_offset: Tensor,
}

/// Every learnable tensor of the adapted model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub backbone: BackboneConfig,
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapter>,
    pub final_norm: Tensor,
    pub head: ScaleBias,
    pub visual: VisualProjection,
}

/// Which part of the adapter a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorKind {
    Prompt,
    Gate,
    VisualGate,
    Scale,
    Bias,
    Norm,
    VisualProjection,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

/// Names, shapes and kinds of every learnable tensor, in canonical order.
pub fn adapter_layout(bb: &BackboneConfig, ad: &AdapterConfig) -> Vec<TensorSpec> {
    let (d, h, v) = (bb.d_model, bb.n_heads, bb.vocab_size);
    let first_prompt = ad.first_prompt_layer(bb);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| out.push(TensorSpec { name, shape, kind });
    for i in 0..bb.n_layers {
        push(format!("layer.{i}.attn_norm.weight"), vec![d], TensorKind::Norm);
        push(format!("layer.{i}.ffn_norm.weight"), vec![d], TensorKind::Norm);
        for name in LINEARS {
            let d_out = linear_out_dim(bb, name);
            push(format!("layer.{i}.{name}.scale"), vec![d_out], TensorKind::Scale);
            push(format!("layer.{i}.{name}.bias"), vec![d_out], TensorKind::Bias);
        }
        if i >= first_prompt {
            push(format!("layer.{i}.attn.prompt"), vec![ad.prompt_len, d], TensorKind::Prompt);
            push(format!("layer.{i}.attn.gate"), vec![h], TensorKind::Gate);
        }
        if i < ad.fusion_layers {
            push(format!("layer.{i}.visual.gate"), vec![h], TensorKind::VisualGate);
        }
    }
    push("final_norm.weight".into(), vec![d], TensorKind::Norm);
    push("head.scale".into(), vec![v], TensorKind::Scale);
    push("head.bias".into(), vec![v], TensorKind::Bias);
    push("visual.proj.weight".into(), vec![ad.feat_dim, d], TensorKind::VisualProjection);
    push("visual.proj.bias".into(), vec![d], TensorKind::VisualProjection);
    push("visual.pos_offset".into(), vec![ad.visual_len, d], TensorKind::VisualProjection);
    out
}

pub fn linear_out_dim(bb: &BackboneConfig, name: &str) -> usize {
    match name {
        "w_gate" | "w_up" => bb.ffn_hidden,
        _ => bb.d_model,
    }
}

impl AdapterState {
    /// Fresh adapter: gates 0, scales 1, biases 0, norms copied from the
    /// backbone, prompts and projection drawn from `seed`.
    pub fn new(backbone: &BackboneWeights, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let bb = &backbone.config;
        bb.validate()?;
        config.validate(bb)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (bb.d_model, bb.n_heads);
        let first_prompt = config.first_prompt_layer(bb);
        let learnable = |t: Tensor| t.with_requires_grad(true);
        let layers = backbone
            .layers
            .iter()
            .enumerate()
            .map(|(i, lw)| {
                let has_prompt = i >= first_prompt;
                LayerAdapter {
                    linears: LINEARS.iter().map(|n| ScaleBias::identity(linear_out_dim(bb, n))).collect(),
                    attn_norm: learnable(lw.attn_norm.clone()),
                    ffn_norm: learnable(lw.ffn_norm.clone()),
                    prompt: has_prompt.then(|| learnable(Tensor::randn([config.prompt_len, d], 0.1, &mut rng))),
                    gate: has_prompt.then(|| learnable(Tensor::zeros([h]))),
                    visual_gate: (i < config.fusion_layers).then(|| learnable(Tensor::zeros([h]))),
                }
            })
            .collect();
        let proj_std = 1.0 / (config.feat_dim as f32).sqrt();
        let visual = VisualProjection {
            weight: learnable(Tensor::randn([config.feat_dim, d], proj_std, &mut rng)),
            bias: learnable(Tensor::zeros([d])),
            pos_offset: learnable(Tensor::randn([config.visual_len, d], 0.1, &mut rng)),
        };
        Ok(Self {
            backbone: bb.clone(),
            config: config.clone(),
            layers,
            final_norm: learnable(backbone.final_norm.clone()),
            head: ScaleBias::identity(bb.vocab_size),
            visual,
        })
    }

    /// Every learnable tensor with its stable name, in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.attn_norm.weight"), &l.attn_norm));
            out.push((format!("layer.{i}.ffn_norm.weight"), &l.ffn_norm));
            for (name, sb) in LINEARS.iter().zip(&l.linears) {
                out.push((format!("layer.{i}.{name}.scale"), &sb.scale));
                out.push((format!("layer.{i}.{name}.bias"), &sb.bias));
            }
            if let (Some(p), Some(g)) = (&l.prompt, &l.gate) {
                out.push((format!("layer.{i}.attn.prompt"), p));
                out.push((format!("layer.{i}.attn.gate"), g));
            }
            if let Some(g) = &l.visual_gate {
                out.push((format!("layer.{i}.visual.gate"), g));
            }
        }
        out.push(("final_norm.weight".into(), &self.final_norm));
        out.push(("head.scale".into(), &self.head.scale));
        out.push(("head.bias".into(), &self.head.bias));
        out.push(("visual.proj.weight".into(), &self.visual.weight));
        out.push(("visual.proj.bias".into(), &self.visual.bias));
        out.push(("visual.pos_offset".into(), &self.visual.pos_offset));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{i}.attn_norm.weight"), &mut l.attn_norm));
            out.push((format!("layer.{i}.ffn_norm.weight"), &mut l.ffn_norm));
            for (name, sb) in LINEARS.iter().zip(l.linears.iter_mut()) {
                out.push((format!("layer.{i}.{name}.scale"), &mut sb.scale));
                out.push((format!("layer.{i}.{name}.bias"), &mut sb.bias));
            }
            if let (Some(p), Some(g)) = (&mut l.prompt, &mut l.gate) {
                out.push((format!("layer.{i}.attn.prompt"), p));
                out.push((format!("layer.{i}.attn.gate"), g));
            }
            if let Some(g) = &mut l.visual_gate {
                out.push((format!("layer.{i}.visual.gate"), g));
            }
        }
        out.push(("final_norm.weight".into(), &mut self.final_norm));
        out.push(("head.scale".into(), &mut self.head.scale));
        out.push(("head.bias".into(), &mut self.head.bias));
        out.push(("visual.proj.weight".into(), &mut self.visual.weight));
        out.push(("visual.proj.bias".into(), &mut self.visual.bias));
        out.push(("visual.pos_offset".into(), &mut self.visual.pos_offset));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.take_grad();
        }
    }

    /// Hash over the named tensors selected by `filter`.
    pub fn fingerprint_where(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h = Fnv64::new();
        for (name, t) in self.tensors() {
            if filter(&name) {
                h.write(name.as_bytes());
                h.write(&t.fingerprint().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_where(|_| true)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::json!({
            "backbone": self.backbone,
            "adapter": self.config,
        });
        checkpoint::write(path, "adapter", &config, &self.tensors())
    }

    /// Load an adapter checkpoint for use with a backbone of config `bb`.
    pub fn load(path: &Path, bb: &BackboneConfig) -> Result<Self> {
        let mut ckpt = checkpoint::read(path, "adapter")?;
        let stored_bb: BackboneConfig = serde_json::from_value(ckpt.config["backbone"].clone())
            .map_err(|e| Error::Format(format!("adapter checkpoint backbone config: {e}")))?;
        let config: AdapterConfig = serde_json::from_value(ckpt.config["adapter"].clone())
            .map_err(|e| Error::Format(format!("adapter checkpoint adapter config: {e}")))?;
        check_backbone_match(bb, &stored_bb)?;
        config.validate(bb)?;
        let mut state = Self::zeros(bb, &config);
        for (name, slot) in state.tensors_mut() {
            let shape = slot.shape().to_vec();
            *slot = ckpt.take_shaped(&name, &shape)?.with_requires_grad(true);
        }
        ckpt.finish()?;
        Ok(state)
    }

    /// Zero-filled state with the right shapes.
    fn zeros(bb: &BackboneConfig, config: &AdapterConfig) -> Self {
        let (d, h) = (bb.d_model, bb.n_heads);
        let first_prompt = config.first_prompt_layer(bb);
        let layers = (0..bb.n_layers)
            .map(|i| LayerAdapter {
                linears: LINEARS.iter().map(|n| ScaleBias::identity(linear_out_dim(bb, n))).collect(),
                attn_norm: Tensor::zeros([d]),
                ffn_norm: Tensor::zeros([d]),
                prompt: (i >= first_prompt).then(|| Tensor::zeros([config.prompt_len, d])),
                gate: (i >= first_prompt).then(|| Tensor::zeros([h])),
                visual_gate: (i < config.fusion_layers).then(|| Tensor::zeros([h])),
            })
            .collect();
        Self {
            backbone: bb.clone(),
            config: config.clone(),
            layers,
            final_norm: Tensor::zeros([d]),
            head: ScaleBias::identity(bb.vocab_size),
            visual: VisualProjection {
                weight: Tensor::zeros([config.feat_dim, d]),
                bias: Tensor::zeros([d]),
                pos_offset: Tensor::zeros([config.visual_len, d]),
            },
        }
    }
}

/// Checkpoint `found` must describe the same backbone as `expected`.
pub fn check_backbone_match(expected: &BackboneConfig, found: &BackboneConfig) -> Result<()> {
    let fields: [(&'static str, usize, usize); 6] = [
        ("d_model", expected.d_model, found.d_model),
        ("n_layers", expected.n_layers, found.n_layers),
        ("n_heads", expected.n_heads, found.n_heads),
        ("ffn_hidden", expected.ffn_hidden, found.ffn_hidden),
        ("vocab_size", expected.vocab_size, found.vocab_size),
        ("max_seq_len", expected.max_seq_len, found.max_seq_len),
    ];
    for (field, e, f) in fields {
        if e != f {
            return Err(Error::ConfigMismatch {
                field,
                expected: e,
                found: f,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (BackboneWeights, AdapterConfig) {
        let bb = BackboneConfig {
            vocab_size: 17,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            ffn_hidden: 12,
            max_seq_len: 32,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        };
        let ad = AdapterConfig {
            prompt_layers: 2,
            prompt_len: 3,
            fusion_layers: 1,
            visual_len: 2,
            feat_dim: 5,
        };
        (BackboneWeights::init(&bb, 0).unwrap(), ad)
    }

    #[test]
    fn fresh_state_has_identity_values() {
        let (w, ad) = small();
        let s = AdapterState::new(&w, &ad, 1).unwrap();
        for (name, t) in s.tensors() {
            assert!(t.requires_grad(), "{name}");
            if name.ends_with(".gate") || name.ends_with(".bias") && !name.starts_with("visual") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
            if name.ends_with(".scale") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
        }
        assert_eq!(s.layers[0].attn_norm.data(), w.layers[0].attn_norm.data());
        assert!(s.layers[0].prompt.is_none() && s.layers[1].prompt.is_some());
        assert!(s.layers[0].visual_gate.is_some() && s.layers[1].visual_gate.is_none());
    }

    #[test]
    fn names_are_unique_and_match_layout() {
        let (w, ad) = small();
        let s = AdapterState::new(&w, &ad, 1).unwrap();
        let names: Vec<String> = s.tensors().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let layout = adapter_layout(&w.config, &ad);
        assert_eq!(layout.len(), names.len());
        for (spec, (name, t)) in layout.iter().zip(s.tensors()) {
            assert_eq!(spec.name, name);
            assert_eq!(spec.shape, t.shape());
        }
    }

    #[test]
    fn invalid_layer_split_is_rejected() {
        let (w, mut ad) = small();
        ad.prompt_layers = 3;
        assert!(AdapterState::new(&w, &ad, 0).is_err());
        ad.prompt_layers = 2;
        ad.fusion_layers = 2;
        assert!(AdapterState::new(&w, &ad, 0).is_err());
    }

    #[test]
    fn save_load_round_trip_and_mismatch() {
        let (w, ad) = small();
        let mut s = AdapterState::new(&w, &ad, 4).unwrap();
        s.layers[2].gate.as_mut().unwrap().data_mut()[1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ad.ckpt");
        s.save(&path).unwrap();
        let back = AdapterState::load(&path, &w.config).unwrap();
        assert_eq!(back.fingerprint(), s.fingerprint());

        let mut other = w.config.clone();
        other.d_model = 16;
        match AdapterState::load(&path, &other) {
            Err(Error::ConfigMismatch {
                field,
                expected,
                found,
            }) => {
                assert_eq!((field, expected, found), ("d_model", 16, 8));
            }
            r => panic!("expected a config mismatch, got {r:?}"),
        }
    }
}
