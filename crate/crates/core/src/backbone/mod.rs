//! The frozen decoder-only transformer: config, weights, the unadapted
//! forward pass, pretraining on text, and autoregressive generation.
//!
//! Batches are packed: every sequence's rows are concatenated for the
//! position-wise parts of a layer, attention runs per sequence, and rotary
//! positions restart at 0 for each sequence.

mod generate;
mod pretrain;
pub mod tokenizer;

pub use generate::{generate, Sampling};
pub use pretrain::{heldout_loss, pretrain_backbone, sequence_loss_batch, PretrainConfig, PretrainReport};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Fnv64, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl BackboneConfig {
    /// Default desk-scale model.
    pub fn desk() -> Self {
        Self {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 1024,
            max_seq_len: 128,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// LLaMA-7B dimensions, used for parameter accounting only.
    pub fn llama7b() -> Self {
        Self {
            vocab_size: 32000,
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            ffn_hidden: 11008,
            max_seq_len: 2048,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, d_model, ffn_hidden and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary positions", self.head_dim()));
        }
        if self.n_layers < 2 {
            return bad(format!("n_layers {} must be at least 2", self.n_layers));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Total parameter count of [`BackboneWeights`] for this config.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_hidden, self.vocab_size);
        let per_layer = 4 * d * d + 3 * d * f + 2 * d;
        2 * v * d + self.n_layers * per_layer + d
    }
}

/// Names of the seven linear maps inside a layer, in canonical order.
pub const LINEARS: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    fn fields(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm.weight", &self.attn_norm),
            ("wq.weight", &self.wq),
            ("wk.weight", &self.wk),
            ("wv.weight", &self.wv),
            ("wo.weight", &self.wo),
            ("ffn_norm.weight", &self.ffn_norm),
            ("w_gate.weight", &self.w_gate),
            ("w_up.weight", &self.w_up),
            ("w_down.weight", &self.w_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("attn_norm.weight", &mut self.attn_norm),
            ("wq.weight", &mut self.wq),
            ("wk.weight", &mut self.wk),
            ("wv.weight", &mut self.wv),
            ("wo.weight", &mut self.wo),
            ("ffn_norm.weight", &mut self.ffn_norm),
            ("w_gate.weight", &mut self.w_gate),
            ("w_up.weight", &mut self.w_up),
            ("w_down.weight", &mut self.w_down),
        ]
    }

    /// Linear weight by its name in [`LINEARS`]. Stored as `[d_in × d_out]`.
    pub fn linear(&self, name: &str) -> &Tensor {
        match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            other => panic!("no linear called {other}"),
        }
    }
}

/// All backbone parameters. Linear weights are stored `[d_in × d_out]` so a
/// layer computes `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl BackboneWeights {
    /// Gaussian init (std 0.02, residual outputs scaled by 1/sqrt(2N)),
    /// unit norms, all tensors trainable.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.ffn_hidden, config.vocab_size);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let embed = Tensor::randn([v, d], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::ones([d]),
                wq: Tensor::randn([d, d], std, &mut rng),
                wk: Tensor::randn([d, d], std, &mut rng),
                wv: Tensor::randn([d, d], std, &mut rng),
                wo: Tensor::randn([d, d], resid_std, &mut rng),
                ffn_norm: Tensor::ones([d]),
                w_gate: Tensor::randn([d, f], std, &mut rng),
                w_up: Tensor::randn([d, f], std, &mut rng),
                w_down: Tensor::randn([f, d], resid_std, &mut rng),
            })
            .collect();
        let final_norm = Tensor::ones([d]);
        let head = Tensor::randn([d, v], std, &mut rng);
        let mut w = Self {
            config: config.clone(),
            embed,
            layers,
            final_norm,
            head,
        };
        w.set_frozen(false);
        Ok(w)
    }

    /// Every tensor with its checkpoint name, in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed.weight".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("layer.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.weight".into(), &self.final_norm));
        out.push(("head.weight".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed.weight".to_string(), &mut self.embed)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("layer.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.weight".into(), &mut self.final_norm));
        out.push(("head.weight".into(), &mut self.head));
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, t) in self.tensors_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    /// True when no tensor requires a gradient.
    pub fn is_frozen(&self) -> bool {
        self.tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// FNV-1a hash over every tensor's name, shape and bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for (name, t) in self.tensors() {
            h.write(name.as_bytes());
            h.write(&t.fingerprint().to_le_bytes());
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, "backbone", &self.config, &self.tensors())
    }

    /// Load a backbone checkpoint; the result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let mut ckpt = checkpoint::read(path, "backbone")?;
        let config: BackboneConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Format(format!("backbone config: {e}")))?;
        config.validate()?;
        let mut w = Self::init_shapes(&config);
        for (name, slot) in w.tensors_mut() {
            let shape = slot.shape().to_vec();
            *slot = ckpt.take_shaped(&name, &shape)?;
        }
        ckpt.finish()?;
        w.set_frozen(true);
        Ok(w)
    }

    /// Zero-filled weights with the right shapes.
    fn init_shapes(config: &BackboneConfig) -> Self {
        let (d, f, v) = (config.d_model, config.ffn_hidden, config.vocab_size);
        let layer = LayerWeights {
            attn_norm: Tensor::zeros([d]),
            wq: Tensor::zeros([d, d]),
            wk: Tensor::zeros([d, d]),
            wv: Tensor::zeros([d, d]),
            wo: Tensor::zeros([d, d]),
            ffn_norm: Tensor::zeros([d]),
            w_gate: Tensor::zeros([d, f]),
            w_up: Tensor::zeros([d, f]),
            w_down: Tensor::zeros([f, d]),
        };
        Self {
            config: config.clone(),
            embed: Tensor::zeros([v, d]),
            layers: vec![layer; config.n_layers],
            final_norm: Tensor::zeros([d]),
            head: Tensor::zeros([d, v]),
        }
    }

    /// Bind every tensor onto `tape` (gradient flags follow each tensor).
    pub fn bind<'w, T: Real>(&'w self, tape: &mut Tape<'w, T>) -> BackboneVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|(_, t)| tape.param(t)).collect();
        BackboneVars::from_slice(self.config.n_layers, &vars)
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles for the backbone, mirroring [`BackboneWeights`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl BackboneVars {
    /// Build from vars listed in the canonical [`BackboneWeights::tensors`] order.
    pub fn from_slice(n_layers: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 3 + 9 * n_layers, "wrong number of backbone vars");
        let layers = (0..n_layers)
            .map(|i| {
                let v = &vars[1 + 9 * i..1 + 9 * (i + 1)];
                LayerVars {
                    attn_norm: v[0],
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    wo: v[4],
                    ffn_norm: v[5],
                    w_gate: v[6],
                    w_up: v[7],
                    w_down: v[8],
                }
            })
            .collect();
        Self {
            embed: vars[0],
            layers,
            final_norm: vars[vars.len() - 2],
            head: vars[vars.len() - 1],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down,
            ]);
        }
        out.extend([self.final_norm, self.head]);
        out
    }
}

/// Which rows of the packed batch get logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitRows {
    All,
    /// Only the final position of each sequence.
    Last,
}

/// Row offsets and rotary positions of a packed batch.
#[derive(Clone, Debug)]
pub struct Packing {
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
    pub positions: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl Packing {
    pub fn new(config: &BackboneConfig, seqs: &[&[usize]], reserved: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidTensor("empty batch".into()));
        }
        let max = config.max_seq_len.saturating_sub(reserved);
        let mut lens = Vec::with_capacity(seqs.len());
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        let mut tokens = Vec::new();
        for s in seqs {
            if s.is_empty() {
                return Err(Error::InvalidTensor("empty sequence".into()));
            }
            if s.len() > max {
                return Err(Error::SequenceTooLong { len: s.len(), max });
            }
            if let Some(&id) = s.iter().find(|&&id| id >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: config.vocab_size,
                });
            }
            offsets.push(tokens.len());
            lens.push(s.len());
            positions.extend(0..s.len());
            tokens.extend_from_slice(s);
        }
        Ok(Self {
            lens,
            offsets,
            positions,
            tokens,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Index of the last row of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.offsets.iter().zip(&self.lens).map(|(o, l)| o + l - 1).collect()
    }
}

/// Gather the given rows of a `[rows × d]` var.
pub fn gather_rows<T: Real>(tape: &mut Tape<'_, T>, x: Var, rows: &[usize]) -> Result<Var> {
    let parts = rows
        .iter()
        .map(|&r| tape.slice(x, 0, r, 1))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 0)
}

/// Causal multi-head self-attention over each packed sequence.
fn causal_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    packing: &Packing,
    n_heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let hd = d / n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut per_seq = Vec::with_capacity(packing.lens.len());
    for (&off, &len) in packing.offsets.iter().zip(&packing.lens) {
        let (qs, ks, vs) = (tape.slice(q, 0, off, len)?, tape.slice(k, 0, off, len)?, tape.slice(v, 0, off, len)?);
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice(qs, 1, h * hd, hd)?;
            let kh = tape.slice(ks, 1, h * hd, hd)?;
            let vh = tape.slice(vs, 1, h * hd, hd)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let p = tape.causal_softmax_rows(s, 0)?;
            heads.push(tape.matmul(p, vh)?);
        }
        per_seq.push(tape.concat(&heads, 1)?);
    }
    if per_seq.len() == 1 {
        return Ok(per_seq[0]);
    }
    tape.concat(&per_seq, 0)
}

/// Unadapted forward pass over a packed batch; returns logits for the
/// requested rows.
pub fn forward_base_vars<T: Real>(
    tape: &mut Tape<'_, T>,
    config: &BackboneConfig,
    vars: &BackboneVars,
    packing: &Packing,
    rows: LogitRows,
) -> Result<Var> {
    let eps = config.norm_eps;
    let mut h = tape.embedding(vars.embed, &packing.tokens)?;
    for lv in &vars.layers {
        let x = tape.rms_norm(h, lv.attn_norm, eps)?;
        let q = tape.matmul(x, lv.wq)?;
        let k = tape.matmul(x, lv.wk)?;
        let v = tape.matmul(x, lv.wv)?;
        let q = tape.rope(q, config.n_heads, &packing.positions, config.rope_base)?;
        let k = tape.rope(k, config.n_heads, &packing.positions, config.rope_base)?;
        let a = causal_attention(tape, q, k, v, packing, config.n_heads)?;
        let o = tape.matmul(a, lv.wo)?;
        h = tape.add(h, o)?;

        let x = tape.rms_norm(h, lv.ffn_norm, eps)?;
        let g = tape.matmul(x, lv.w_gate)?;
        let u = tape.matmul(x, lv.w_up)?;
        let g = tape.silu(g);
        let m = tape.mul(g, u)?;
        let dn = tape.matmul(m, lv.w_down)?;
        h = tape.add(h, dn)?;
    }
    if rows == LogitRows::Last {
        h = gather_rows(tape, h, &packing.last_rows())?;
    }
    let h = tape.rms_norm(h, vars.final_norm, eps)?;
    tape.matmul(h, vars.head)
}

/// Logits `[seq × vocab]` of the frozen model for one token sequence.
pub fn forward_base(weights: &BackboneWeights, tokens: &[usize]) -> Result<Tensor> {
    let packing = Packing::new(&weights.config, &[tokens], 0)?;
    let mut tape = Tape::<f32>::new();
    let vars = weights.bind(&mut tape);
    let logits = forward_base_vars(&mut tape, &weights.config, &vars, &packing, LogitRows::All)?;
    Tensor::new(tape.shape(logits).to_vec(), tape.value(logits).to_vec())
}

/// Logits of the final position only.
pub fn next_token_logits(weights: &BackboneWeights, tokens: &[usize]) -> Result<Vec<f32>> {
    let packing = Packing::new(&weights.config, &[tokens], 0)?;
    let mut tape = Tape::<f32>::new();
    let vars = weights.bind(&mut tape);
    let logits = forward_base_vars(&mut tape, &weights.config, &vars, &packing, LogitRows::Last)?;
    Ok(tape.value(logits).to_vec())
}
