use std::collections::HashMap;

use super::{adapter_layout, AdapterConfig, AdapterState};
use crate::backbone::{gather_rows, BackboneConfig, BackboneVars, BackboneWeights, LayerVars, LogitRows, Packing};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// How visual features enter the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Visual tokens are a gated prefix in the first `K` layers.
    Early,
    /// The projected global feature is added to every adaptation prompt row.
    V1,
}

/// One sequence of an adapted batch, with optional image features.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedInput<'a> {
    pub tokens: &'a [usize],
    pub features: Option<&'a [f32]>,
}

#[derive(Clone, Debug)]
pub struct LayerAdapterVars {
    /// Scales and biases in [`crate::backbone::LINEARS`] order.
    pub scale: Vec<Var>,
    pub bias: Vec<Var>,
    pub attn_norm: Var,
    pub ffn_norm: Var,
    pub prompt: Option<Var>,
    pub gate: Option<Var>,
    pub visual_gate: Option<Var>,
}

/// Tape handles for every adapter tensor.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub layers: Vec<LayerAdapterVars>,
    pub final_norm: Var,
    pub head_scale: Var,
    pub head_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub pos_offset: Var,
}

impl AdapterVars {
    /// Build from vars listed in canonical layout order.
    pub fn from_slice(bb: &BackboneConfig, ad: &AdapterConfig, vars: &[Var]) -> Self {
        let layout = adapter_layout(bb, ad);
        assert_eq!(layout.len(), vars.len(), "wrong number of adapter vars");
        let by_name: HashMap<&str, Var> = layout.iter().map(|s| s.name.as_str()).zip(vars.iter().copied()).collect();
        let get = |n: &str| by_name[n];
        let opt = |n: &str| by_name.get(n).copied();
        let layers = (0..bb.n_layers)
            .map(|i| LayerAdapterVars {
                scale: crate::backbone::LINEARS
                    .iter()
                    .map(|l| get(&format!("layer.{i}.{l}.scale")))
                    .collect(),
                bias: crate::backbone::LINEARS
                    .iter()
                    .map(|l| get(&format!("layer.{i}.{l}.bias")))
                    .collect(),
                attn_norm: get(&format!("layer.{i}.attn_norm.weight")),
                ffn_norm: get(&format!("layer.{i}.ffn_norm.weight")),
                prompt: opt(&format!("layer.{i}.attn.prompt")),
                gate: opt(&format!("layer.{i}.attn.gate")),
                visual_gate: opt(&format!("layer.{i}.visual.gate")),
            })
            .collect();
        Self {
            layers,
            final_norm: get("final_norm.weight"),
            head_scale: get("head.scale"),
            head_bias: get("head.bias"),
            proj_weight: get("visual.proj.weight"),
            proj_bias: get("visual.proj.bias"),
            pos_offset: get("visual.pos_offset"),
        }
    }
}

impl AdapterState {
    /// Bind every tensor onto `tape` (gradient flags follow each tensor).
    pub fn bind<'w, T: Real>(&'w self, tape: &mut Tape<'w, T>) -> AdapterVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|(_, t)| tape.param(t)).collect();
        AdapterVars::from_slice(&self.backbone, &self.config, &vars)
    }
}

/// `s ⊙ (x W + b)` with `s` and `b` broadcast over rows.
pub fn scaled_linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: Var, s: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    tape.mul_row(y, s)
}

/// `f32` convenience for [`scaled_linear`]; `w` never receives a gradient.
pub fn scaled_linear_forward(x: &Tensor, w: &Tensor, s: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let rows = x.numel() / x.shape().last().copied().unwrap_or(1);
    let d_in = *x.shape().last().unwrap_or(&0);
    let xv = tape.leaf([rows, d_in], x.data().to_vec(), false);
    let (wv, sv, bv) = (tape.bind(w, false), tape.bind(s, false), tape.bind(b, false));
    if s.shape() != b.shape() || w.shape().len() != 2 || s.shape() != [w.shape()[1]] {
        return Err(Error::shape("scaled_linear", w.shape(), s.shape()));
    }
    let y = scaled_linear(&mut tape, xv, wv, sv, bv)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    Tensor::new(shape, tape.value(y).to_vec())
}

/// A gated prefix: keys and values `[P × d]` and a per-head gate vector.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub k: Var,
    pub v: Var,
    pub gate: Var,
}

/// Attention for one sequence. Per head, the word segment uses a causal
/// softmax over word keys only, and each prefix segment uses its own softmax
/// scaled by `gate[h]`; the weighted values are summed. With every gate at
/// zero the result equals plain causal attention.
///
/// `q` is the rotated query used against the (rotated) word keys. Prefix
/// rows have no position, so their scores use `q_prefix`, the query before
/// rotation.
pub fn gated_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    q_prefix: Var,
    k: Var,
    v: Var,
    prefixes: &[Prefix],
    n_heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let hd = d / n_heads;
    let inv = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, 1, h * hd, hd)?;
        let kh = tape.slice(k, 1, h * hd, hd)?;
        let vh = tape.slice(v, 1, h * hd, hd)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, inv);
        let p = tape.causal_softmax_rows(s, 0)?;
        let mut o = tape.matmul(p, vh)?;
        let qh = if prefixes.is_empty() {
            qh
        } else {
            tape.slice(q_prefix, 1, h * hd, hd)?
        };
        for pre in prefixes {
            let kp = tape.slice(pre.k, 1, h * hd, hd)?;
            let vp = tape.slice(pre.v, 1, h * hd, hd)?;
            let s = tape.matmul_nt(qh, kp)?;
            let s = tape.scale(s, inv);
            let p = tape.softmax_rows(s)?;
            let p = tape.scale_by_elem(p, pre.gate, h)?;
            let op = tape.matmul(p, vp)?;
            o = tape.add(o, op)?;
        }
        heads.push(o);
    }
    tape.concat(&heads, 1)
}

/// Unmasked multi-head attention (visual tokens among themselves).
fn full_attention<T: Real>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let d = tape.shape(q)[1];
    let hd = d / n_heads;
    let inv = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, 1, h * hd, hd)?;
        let kh = tape.slice(k, 1, h * hd, hd)?;
        let vh = tape.slice(v, 1, h * hd, hd)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, inv);
        let p = tape.softmax_rows(s)?;
        heads.push(tape.matmul(p, vh)?);
    }
    tape.concat(&heads, 1)
}

fn lin<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: Var, la: &LayerAdapterVars, idx: usize) -> Result<Var> {
    scaled_linear(tape, x, w, la.scale[idx], la.bias[idx])
}

/// Residual gated feed-forward block with scaled linears.
fn ffn_block<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    lv: &LayerVars,
    la: &LayerAdapterVars,
    eps: f64,
) -> Result<Var> {
    let x = tape.rms_norm(h, la.ffn_norm, eps)?;
    let g = lin(tape, x, lv.w_gate, la, 4)?;
    let u = lin(tape, x, lv.w_up, la, 5)?;
    let g = tape.silu(g);
    let m = tape.mul(g, u)?;
    let dn = lin(tape, m, lv.w_down, la, 6)?;
    tape.add(h, dn)
}

/// Prompt keys and values for one layer (no norm, no rotation).
fn prompt_kv<T: Real>(tape: &mut Tape<'_, T>, rows: Var, lv: &LayerVars, la: &LayerAdapterVars) -> Result<(Var, Var)> {
    Ok((lin(tape, rows, lv.wk, la, 1)?, lin(tape, rows, lv.wv, la, 2)?))
}

fn check_features(ad: &AdapterConfig, f: &[f32]) -> Result<()> {
    if f.len() != ad.feat_dim {
        return Err(Error::shape("visual features", &[f.len()], &[ad.feat_dim]));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidTensor("visual features must be finite".into()));
    }
    Ok(())
}

/// Projected global feature `f W + b` as a `[1 × d]` var.
fn project_global<T: Real>(tape: &mut Tape<'_, T>, ad: &AdapterConfig, av: &AdapterVars, f: &[f32]) -> Result<Var> {
    check_features(ad, f)?;
    let fv = tape.constant([1, ad.feat_dim], f);
    let p = tape.matmul(fv, av.proj_weight)?;
    tape.add_row(p, av.proj_bias)
}

/// Visual tokens `[V × d]`: the projected feature replicated into every
/// position plus a learned per-position offset.
pub fn project_visual_vars<T: Real>(
    tape: &mut Tape<'_, T>,
    ad: &AdapterConfig,
    av: &AdapterVars,
    features: &[f32],
) -> Result<Var> {
    let p = project_global(tape, ad, av, features)?;
    tape.add_row(av.pos_offset, p)
}

pub fn project_visual(features: &[f32], adapter: &AdapterState) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let av = adapter.bind(&mut tape);
    let u = project_visual_vars(&mut tape, &adapter.config, &av, features)?;
    Tensor::new(tape.shape(u).to_vec(), tape.value(u).to_vec())
}

/// Adapted forward pass over a packed batch; returns logits for the
/// requested rows.
#[allow(clippy::too_many_arguments)]
pub fn forward_adapted_vars<T: Real>(
    tape: &mut Tape<'_, T>,
    bb: &BackboneConfig,
    ad: &AdapterConfig,
    bv: &BackboneVars,
    av: &AdapterVars,
    inputs: &[AdaptedInput<'_>],
    rows: LogitRows,
    mode: FusionMode,
) -> Result<Var> {
    let eps = bb.norm_eps;
    let nh = bb.n_heads;
    let any_visual = inputs.iter().any(|i| i.features.is_some());
    let reserved = if any_visual && mode == FusionMode::Early {
        ad.visual_len
    } else {
        0
    };
    let seqs: Vec<&[usize]> = inputs.iter().map(|i| i.tokens).collect();
    let packing = Packing::new(bb, &seqs, reserved)?;

    let projected: Vec<Option<Var>> = inputs
        .iter()
        .map(|i| i.features.map(|f| project_global(tape, ad, av, f)).transpose())
        .collect::<Result<_>>()?;

    // Early fusion: stack every example's visual tokens into one stream and
    // remember which block of V rows belongs to which example.
    let mut vis_block: Vec<Option<usize>> = vec![None; inputs.len()];
    let mut stream: Option<Var> = None;
    if mode == FusionMode::Early && any_visual {
        let mut blocks = Vec::new();
        for (b, p) in projected.iter().enumerate() {
            if let Some(p) = p {
                vis_block[b] = Some(blocks.len());
                blocks.push(tape.add_row(av.pos_offset, *p)?);
            }
        }
        stream = Some(if blocks.len() == 1 { blocks[0] } else { tape.concat(&blocks, 0)? });
    }
    let vl = ad.visual_len;

    let mut h = tape.embedding(bv.embed, &packing.tokens)?;
    for (l, (lv, la)) in bv.layers.iter().zip(&av.layers).enumerate() {
        let x = tape.rms_norm(h, la.attn_norm, eps)?;
        let q_raw = lin(tape, x, lv.wq, la, 0)?;
        let k = lin(tape, x, lv.wk, la, 1)?;
        let v = lin(tape, x, lv.wv, la, 2)?;
        let q = tape.rope(q_raw, nh, &packing.positions, bb.rope_base)?;
        let k = tape.rope(k, nh, &packing.positions, bb.rope_base)?;

        let fuse = l < ad.fusion_layers && stream.is_some() && la.visual_gate.is_some();
        let visual = if fuse {
            let u = stream.unwrap();
            let xu = tape.rms_norm(u, la.attn_norm, eps)?;
            Some((
                lin(tape, xu, lv.wq, la, 0)?,
                lin(tape, xu, lv.wk, la, 1)?,
                lin(tape, xu, lv.wv, la, 2)?,
            ))
        } else {
            None
        };

        let shared_prompt = match (la.prompt, la.gate) {
            (Some(p), Some(_)) => Some(prompt_kv(tape, p, lv, la)?),
            _ => None,
        };

        let mut per_seq = Vec::with_capacity(inputs.len());
        for (b, (&off, &len)) in packing.offsets.iter().zip(&packing.lens).enumerate() {
            let mut prefixes = Vec::with_capacity(2);
            if let (Some((pk, pv)), Some(gate)) = (shared_prompt, la.gate) {
                let (pk, pv) = match (mode, projected[b]) {
                    (FusionMode::V1, Some(g)) => {
                        let rows = tape.add_row(la.prompt.unwrap(), g)?;
                        prompt_kv(tape, rows, lv, la)?
                    }
                    _ => (pk, pv),
                };
                prefixes.push(Prefix { k: pk, v: pv, gate });
            }
            if let (Some((_, ku, vu)), Some(j)) = (visual, vis_block[b]) {
                prefixes.push(Prefix {
                    k: tape.slice(ku, 0, j * vl, vl)?,
                    v: tape.slice(vu, 0, j * vl, vl)?,
                    gate: la.visual_gate.unwrap(),
                });
            }
            let qs = tape.slice(q, 0, off, len)?;
            let qr = tape.slice(q_raw, 0, off, len)?;
            let ks = tape.slice(k, 0, off, len)?;
            let vs = tape.slice(v, 0, off, len)?;
            per_seq.push(gated_attention(tape, qs, qr, ks, vs, &prefixes, nh)?);
        }
        let attn = if per_seq.len() == 1 { per_seq[0] } else { tape.concat(&per_seq, 0)? };
        let o = lin(tape, attn, lv.wo, la, 3)?;
        h = tape.add(h, o)?;
        h = ffn_block(tape, h, lv, la, eps)?;

        // The visual stream only needs updating if a later layer still reads it.
        if let Some((qu, ku, vu)) = visual {
            if l + 1 < ad.fusion_layers {
                let u = stream.unwrap();
                let n_blocks = tape.shape(u)[0] / vl;
                let mut outs = Vec::with_capacity(n_blocks);
                for j in 0..n_blocks {
                    let qb = tape.slice(qu, 0, j * vl, vl)?;
                    let kb = tape.slice(ku, 0, j * vl, vl)?;
                    let vb = tape.slice(vu, 0, j * vl, vl)?;
                    outs.push(full_attention(tape, qb, kb, vb, nh)?);
                }
                let a = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
                let o = lin(tape, a, lv.wo, la, 3)?;
                let u = tape.add(u, o)?;
                stream = Some(ffn_block(tape, u, lv, la, eps)?);
            }
        }
    }
    if rows == LogitRows::Last {
        h = gather_rows(tape, h, &packing.last_rows())?;
    }
    let h = tape.rms_norm(h, av.final_norm, eps)?;
    scaled_linear(tape, h, bv.head, av.head_scale, av.head_bias)
}

fn run_single(
    backbone: &BackboneWeights,
    adapter: &AdapterState,
    tokens: &[usize],
    features: Option<&[f32]>,
    rows: LogitRows,
    mode: FusionMode,
) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let bv = backbone.bind(&mut tape);
    let av = adapter.bind(&mut tape);
    let input = [AdaptedInput { tokens, features }];
    let y = forward_adapted_vars(
        &mut tape,
        &backbone.config,
        &adapter.config,
        &bv,
        &av,
        &input,
        rows,
        mode,
    )?;
    Tensor::new(tape.shape(y).to_vec(), tape.value(y).to_vec())
}

/// Logits `[seq × vocab]` of the adapted model with early visual fusion.
pub fn forward_adapted(
    backbone: &BackboneWeights,
    adapter: &AdapterState,
    tokens: &[usize],
    features: Option<&[f32]>,
) -> Result<Tensor> {
    run_single(backbone, adapter, tokens, features, LogitRows::All, FusionMode::Early)
}

/// Logits `[seq × vocab]` with the global visual feature added to every
/// adaptation prompt instead of early fusion.
pub fn forward_v1_style(
    backbone: &BackboneWeights,
    adapter: &AdapterState,
    tokens: &[usize],
    features: Option<&[f32]>,
) -> Result<Tensor> {
    run_single(backbone, adapter, tokens, features, LogitRows::All, FusionMode::V1)
}

/// Logits of the final position only.
pub fn next_token_logits_adapted(
    backbone: &BackboneWeights,
    adapter: &AdapterState,
    tokens: &[usize],
    features: Option<&[f32]>,
    mode: FusionMode,
) -> Result<Vec<f32>> {
    Ok(run_single(backbone, adapter, tokens, features, LogitRows::Last, mode)?.into_data())
}

/// One layer's prefix attention for a single sequence: attention norm, the
/// layer's scaled q/k/v projections, rotary positions on the words (the
/// prompt is scored with the unrotated query), the prompt as a gated prefix, then the output projection. Returns the block
/// output that the layer adds to its residual stream.
#[allow(clippy::too_many_arguments)]
pub fn zero_init_prefix_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    bb: &BackboneConfig,
    h: Var,
    prompt: Var,
    gate: Var,
    lv: &LayerVars,
    la: &LayerAdapterVars,
) -> Result<Var> {
    let rows = tape.shape(h)[0];
    let positions: Vec<usize> = (0..rows).collect();
    let x = tape.rms_norm(h, la.attn_norm, bb.norm_eps)?;
    let q_raw = lin(tape, x, lv.wq, la, 0)?;
    let k = lin(tape, x, lv.wk, la, 1)?;
    let v = lin(tape, x, lv.wv, la, 2)?;
    let q = tape.rope(q_raw, bb.n_heads, &positions, bb.rope_base)?;
    let k = tape.rope(k, bb.n_heads, &positions, bb.rope_base)?;
    let (pk, pv) = prompt_kv(tape, prompt, lv, la)?;
    let a = gated_attention(tape, q, q_raw, k, v, &[Prefix { k: pk, v: pv, gate }], bb.n_heads)?;
    lin(tape, a, lv.wo, la, 3)
}
