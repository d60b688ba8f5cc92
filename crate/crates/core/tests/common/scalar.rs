//! Straight-line scalar reimplementation of the (adapted) transformer in f64.
//!
//! Nothing here touches the tape: every dot product, softmax and norm is an
//! explicit loop, written from the model definition, so it can serve as an
//! independent oracle for the tape-based forward passes.

use padapt::backbone::BackboneWeights;
use padapt::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.iter().map(|&x| x as f64).collect()).collect()
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

pub struct Layer {
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    /// wq, wk, wv, wo, w_gate, w_up, w_down as `[d_in][d_out]`.
    pub w: Vec<Mat>,
    pub scale: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub prompt: Option<Mat>,
    pub gate: Vec<f64>,
    pub visual_gate: Option<Vec<f64>>,
}

pub struct Visual {
    pub proj: Mat,
    pub bias: Vec<f64>,
    pub pos: Mat,
}

pub struct BaseModel {
    pub n_heads: usize,
    pub eps: f64,
    pub rope_base: f64,
    pub embed: Mat,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
    pub head: Mat,
    pub head_scale: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub visual: Option<Visual>,
}

impl BaseModel {
    pub fn from_weights(w: &BackboneWeights) -> Self {
        let c = &w.config;
        let layers = w
            .layers
            .iter()
            .map(|l| {
                let ws: Vec<Mat> = [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down]
                    .iter()
                    .map(|t| mat(t))
                    .collect();
                let scale = ws.iter().map(|m| vec![1.0; m[0].len()]).collect();
                let bias = ws.iter().map(|m| vec![0.0; m[0].len()]).collect();
                Layer {
                    attn_norm: vec64(&l.attn_norm),
                    ffn_norm: vec64(&l.ffn_norm),
                    w: ws,
                    scale,
                    bias,
                    prompt: None,
                    gate: vec![0.0; c.n_heads],
                    visual_gate: None,
                }
            })
            .collect();
        Self {
            n_heads: c.n_heads,
            eps: c.norm_eps,
            rope_base: c.rope_base,
            embed: mat(&w.embed),
            layers,
            final_norm: vec64(&w.final_norm),
            head: mat(&w.head),
            head_scale: vec![1.0; c.vocab_size],
            head_bias: vec![0.0; c.vocab_size],
            visual: None,
        }
    }
}

pub fn rmsnorm(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w).map(|(v, g)| v * r * g).collect()
}

/// `s ⊙ (x W + b)`.
pub fn linear(x: &[f64], w: &Mat, s: &[f64], b: &[f64]) -> Vec<f64> {
    let n = w[0].len();
    let mut y = vec![0.0; n];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..n {
            y[j] += xi * w[i][j];
        }
    }
    (0..n).map(|j| s[j] * (y[j] + b[j])).collect()
}

fn rope(x: &mut [f64], pos: usize, n_heads: usize, base: f64) {
    let hd = x.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
            let (c, s) = (theta.cos(), theta.sin());
            let j = h * hd + 2 * i;
            let (a, b) = (x[j], x[j + 1]);
            x[j] = a * c - b * s;
            x[j + 1] = a * s + b * c;
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn head_slice(v: &[f64], h: usize, hd: usize) -> &[f64] {
    &v[h * hd..(h + 1) * hd]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted sum `Σ_j p_j · v_j[h]` added into `out[h]`, scaled by `g`.
fn accumulate(out: &mut [f64], p: &[f64], vals: &[Vec<f64>], h: usize, hd: usize, g: f64) {
    for (pj, vj) in p.iter().zip(vals) {
        for c in 0..hd {
            out[h * hd + c] += g * pj * vj[h * hd + c];
        }
    }
}

fn ffn(model: &BaseModel, l: &Layer, h: &mut [f64]) {
    let x = rmsnorm(h, &l.ffn_norm, model.eps);
    let g = linear(&x, &l.w[4], &l.scale[4], &l.bias[4]);
    let u = linear(&x, &l.w[5], &l.scale[5], &l.bias[5]);
    let m: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
    let dn = linear(&m, &l.w[6], &l.scale[6], &l.bias[6]);
    for (a, b) in h.iter_mut().zip(dn) {
        *a += b;
    }
}

/// Logits for every position of `tokens`.
///
/// `features` switches on the visual path: with `v1 = false` visual tokens
/// are a prefix in the layers that carry a visual gate; with `v1 = true` the
/// projected feature (without position offsets) is added to every prompt row.
pub fn forward(model: &BaseModel, tokens: &[usize], features: &[f64], v1: Option<()>) -> Mat {
    let nh = model.n_heads;
    let d = model.embed[0].len();
    let hd = d / nh;
    let inv = 1.0 / (hd as f64).sqrt();
    let mut hs: Mat = tokens.iter().map(|&t| model.embed[t].clone()).collect();

    let projected: Option<Vec<f64>> = match (&model.visual, features.is_empty()) {
        (Some(vis), false) => {
            let mut p = vis.bias.clone();
            for (i, f) in features.iter().enumerate() {
                for j in 0..d {
                    p[j] += f * vis.proj[i][j];
                }
            }
            Some(p)
        }
        _ => None,
    };
    let mut us: Option<Mat> = match (&projected, v1, &model.visual) {
        (Some(p), None, Some(vis)) => Some(
            vis.pos
                .iter()
                .map(|row| row.iter().zip(p).map(|(a, b)| a + b).collect())
                .collect(),
        ),
        _ => None,
    };

    for l in &model.layers {
        let xs: Mat = hs.iter().map(|h| rmsnorm(h, &l.attn_norm, model.eps)).collect();
        let mut qs: Mat = xs.iter().map(|x| linear(x, &l.w[0], &l.scale[0], &l.bias[0])).collect();
        let mut ks: Mat = xs.iter().map(|x| linear(x, &l.w[1], &l.scale[1], &l.bias[1])).collect();
        let vs: Mat = xs.iter().map(|x| linear(x, &l.w[2], &l.scale[2], &l.bias[2])).collect();
        // Prefix rows carry no position and are scored with the raw query.
        let raw_qs = qs.clone();
        for (t, (q, k)) in qs.iter_mut().zip(ks.iter_mut()).enumerate() {
            rope(q, t, nh, model.rope_base);
            rope(k, t, nh, model.rope_base);
        }

        // Prompt keys and values (no norm, no rotation).
        let prompt_kv = l.prompt.as_ref().map(|p| {
            let rows: Mat = match (&projected, v1) {
                (Some(g), Some(())) => p
                    .iter()
                    .map(|r| r.iter().zip(g).map(|(a, b)| a + b).collect())
                    .collect(),
                _ => p.clone(),
            };
            let pk: Mat = rows.iter().map(|r| linear(r, &l.w[1], &l.scale[1], &l.bias[1])).collect();
            let pv: Mat = rows.iter().map(|r| linear(r, &l.w[2], &l.scale[2], &l.bias[2])).collect();
            (pk, pv)
        });
        // Visual keys and values for layers that carry a visual gate.
        let visual_kv = match (&us, &l.visual_gate) {
            (Some(u), Some(_)) => {
                let xu: Mat = u.iter().map(|r| rmsnorm(r, &l.attn_norm, model.eps)).collect();
                let qu: Mat = xu.iter().map(|x| linear(x, &l.w[0], &l.scale[0], &l.bias[0])).collect();
                let ku: Mat = xu.iter().map(|x| linear(x, &l.w[1], &l.scale[1], &l.bias[1])).collect();
                let vu: Mat = xu.iter().map(|x| linear(x, &l.w[2], &l.scale[2], &l.bias[2])).collect();
                Some((qu, ku, vu))
            }
            _ => None,
        };

        let mut attn: Mat = vec![vec![0.0; d]; hs.len()];
        for (t, out) in attn.iter_mut().enumerate() {
            for h in 0..nh {
                let q = head_slice(&qs[t], h, hd);
                let s: Vec<f64> = (0..=t).map(|j| dot(q, head_slice(&ks[j], h, hd)) * inv).collect();
                accumulate(out, &softmax(&s), &vs[..=t], h, hd, 1.0);
                let q = head_slice(&raw_qs[t], h, hd);
                if let Some((pk, pv)) = &prompt_kv {
                    let s: Vec<f64> = pk.iter().map(|k| dot(q, head_slice(k, h, hd)) * inv).collect();
                    accumulate(out, &softmax(&s), pv, h, hd, l.gate[h]);
                }
                if let (Some((_, ku, vu)), Some(g)) = (&visual_kv, &l.visual_gate) {
                    let s: Vec<f64> = ku.iter().map(|k| dot(q, head_slice(k, h, hd)) * inv).collect();
                    accumulate(out, &softmax(&s), vu, h, hd, g[h]);
                }
            }
        }
        for (h, a) in hs.iter_mut().zip(&attn) {
            let o = linear(a, &l.w[3], &l.scale[3], &l.bias[3]);
            for (x, y) in h.iter_mut().zip(o) {
                *x += y;
            }
            ffn(model, l, h);
        }

        // The visual stream runs through this layer too, then is dropped once
        // no later layer carries a visual gate.
        if let Some((qu, ku, vu)) = &visual_kv {
            let u = us.as_mut().unwrap();
            for (i, row) in u.iter_mut().enumerate() {
                let mut out = vec![0.0; d];
                for h in 0..nh {
                    let q = head_slice(&qu[i], h, hd);
                    let s: Vec<f64> = ku.iter().map(|k| dot(q, head_slice(k, h, hd)) * inv).collect();
                    accumulate(&mut out, &softmax(&s), vu, h, hd, 1.0);
                }
                let o = linear(&out, &l.w[3], &l.scale[3], &l.bias[3]);
                for (x, y) in row.iter_mut().zip(o) {
                    *x += y;
                }
                ffn(model, l, row);
            }
        }
    }

    hs.iter()
        .map(|h| {
            let x = rmsnorm(h, &model.final_norm, model.eps);
            linear(&x, &model.head, &model.head_scale, &model.head_bias)
        })
        .collect()
}

impl BaseModel {
    /// The adapted model: backbone weights plus every adapter tensor.
    pub fn from_adapted(w: &BackboneWeights, a: &padapt::adapter::AdapterState) -> Self {
        let mut m = Self::from_weights(w);
        for (l, la) in m.layers.iter_mut().zip(&a.layers) {
            l.attn_norm = vec64(&la.attn_norm);
            l.ffn_norm = vec64(&la.ffn_norm);
            l.scale = la.linears.iter().map(|sb| vec64(&sb.scale)).collect();
            l.bias = la.linears.iter().map(|sb| vec64(&sb.bias)).collect();
            l.prompt = la.prompt.as_ref().map(mat);
            l.gate = la.gate.as_ref().map(vec64).unwrap_or_else(|| vec![0.0; m.n_heads]);
            l.visual_gate = la.visual_gate.as_ref().map(vec64);
        }
        m.final_norm = vec64(&a.final_norm);
        m.head_scale = vec64(&a.head.scale);
        m.head_bias = vec64(&a.head.bias);
        m.visual = Some(Visual {
            proj: mat(&a.visual.weight),
            bias: vec64(&a.visual.bias),
            pos: mat(&a.visual.pos_offset),
        });
        m
    }
}
