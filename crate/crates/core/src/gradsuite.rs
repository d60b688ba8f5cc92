//! Finite-difference gradient suite: every tape op in isolation, then a
//! 2-layer adapted model end to end in both fusion modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{forward_adapted_vars, AdaptedInput, AdapterConfig, AdapterState, AdapterVars, FusionMode};
use crate::backbone::{BackboneConfig, BackboneVars, BackboneWeights, LogitRows};
use crate::error::Result;
use crate::tensor::{GradCheckReport, Tape, Var};

type Leaves = Vec<(Vec<usize>, Vec<f64>)>;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn push(&mut self, name: &str, r: GradCheckReport) {
        self.checked += r.checked;
        self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
        self.passed &= r.passed();
        self.entries.push(SuiteEntry {
            name: name.to_string(),
            checked: r.checked,
            max_rel_err: r.max_rel_err,
            failures: r.failures.len(),
        });
    }

    /// Coordinates checked through the whole adapted model.
    pub fn model_coordinates(&self) -> usize {
        self.entries.iter().filter(|e| e.name.starts_with("model")).map(|e| e.checked).sum()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Reduce `out` with fixed random weights so every output coordinate matters.
fn project(t: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = t.leaf(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), false);
    let y = t.mul(out, w)?;
    Ok(t.sum(y))
}

fn model_configs() -> (BackboneConfig, AdapterConfig) {
    let bb = BackboneConfig {
        vocab_size: 13,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 12,
        max_seq_len: 24,
        rope_base: 10000.0,
        norm_eps: 1e-5,
    };
    let ad = AdapterConfig {
        prompt_layers: 1,
        prompt_len: 3,
        fusion_layers: 1,
        visual_len: 2,
        feat_dim: 5,
    };
    (bb, ad)
}

/// A 2-layer backbone pushed away from linearity plus an adapter with
/// generic (non-identity) values, all as f64 leaves.
fn model_leaves(bb: &BackboneConfig, ad: &AdapterConfig, seed: u64) -> Result<(Leaves, usize)> {
    let mut w = BackboneWeights::init(bb, seed)?;
    for (_, t) in w.tensors_mut() {
        if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|x| *x *= 4.0);
        }
    }
    w.set_frozen(true);
    let mut state = AdapterState::new(&w, ad, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for (name, t) in state.tensors_mut() {
        let centre = if name.ends_with("scale") || name.contains("norm") { 1.0 } else { 0.0 };
        let spread = if name.ends_with("gate") { 0.8 } else { 0.4 };
        for x in t.data_mut() {
            *x = centre + rng.gen_range(-spread..spread);
        }
    }
    let n_bb = w.tensors().len();
    let leaves = w
        .tensors()
        .into_iter()
        .chain(state.tensors())
        .map(|(_, t)| (t.shape().to_vec(), t.data().iter().map(|&x| x as f64).collect()))
        .collect();
    Ok((leaves, n_bb))
}

/// Run the suite. Each op samples up to 400 coordinates; the adapted model
/// samples 1000 per fusion mode.
pub fn run_gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        entries: Vec::new(),
        checked: 0,
        max_rel_err: 0.0,
        passed: true,
    };
    let n = 400;
    macro_rules! op {
        ($name:expr, [$($shape:expr),+], |$t:ident, $v:ident| $body:expr) => {{
            let leaves: Leaves = vec![$(random(&$shape, &mut rng)),+];
            let r = GradCheckReport::run(&leaves, |$t: &mut Tape<'_, f64>, $v: &[Var]| $body, n, seed)?;
            report.push($name, r);
        }};
    }

    op!("matmul", [[3, 4], [4, 5]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    });
    op!("matmul_nt", [[3, 4], [5, 4]], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        project(t, y, 2)
    });
    op!("add", [[2, 3], [2, 3]], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 3)
    });
    op!("mul", [[2, 3], [2, 3]], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 4)
    });
    op!("scale", [[7]], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 5)
    });
    op!("add_row", [[3, 4], [4]], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, 6)
    });
    op!("mul_row", [[3, 4], [4]], |t, v| {
        let y = t.mul_row(v[0], v[1])?;
        project(t, y, 7)
    });
    op!("silu", [[3, 5]], |t, v| {
        let x = t.scale(v[0], 3.0);
        let y = t.silu(x);
        project(t, y, 8)
    });
    op!("rms_norm", [[3, 6], [6]], |t, v| {
        let y = t.rms_norm(v[0], v[1], 1e-5)?;
        project(t, y, 9)
    });
    op!("softmax_rows", [[3, 5]], |t, v| {
        let x = t.scale(v[0], 2.0);
        let y = t.softmax_rows(x)?;
        project(t, y, 10)
    });
    op!("causal_softmax_rows", [[4, 6]], |t, v| {
        let y = t.causal_softmax_rows(v[0], 2)?;
        project(t, y, 11)
    });
    op!("scale_by_elem", [[3, 4], [3]], |t, v| {
        let y = t.scale_by_elem(v[0], v[1], 1)?;
        project(t, y, 12)
    });
    op!("concat", [[2, 3], [2, 2], [1, 3]], |t, v| {
        let a = t.concat(&[v[0], v[1]], 1)?;
        let b = t.concat(&[v[0], v[2]], 0)?;
        let pa = project(t, a, 13)?;
        let pb = project(t, b, 14)?;
        t.add(pa, pb)
    });
    op!("slice", [[4, 5]], |t, v| {
        let a = t.slice(v[0], 0, 1, 2)?;
        let b = t.slice(v[0], 1, 2, 3)?;
        let pa = project(t, a, 15)?;
        let pb = project(t, b, 16)?;
        t.add(pa, pb)
    });
    op!("embedding", [[5, 3]], |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2])?;
        project(t, y, 17)
    });
    op!("cross_entropy_masked", [[4, 6]], |t, v| {
        let x = t.scale(v[0], 2.0);
        t.cross_entropy_masked(x, &[1, 5, 0, 3], &[1.0, 0.0, 1.0, 1.0])
    });
    op!("sum", [[2, 2]], |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    });
    op!("rope", [[3, 8]], |t, v| {
        let y = t.rope(v[0], 2, &[0, 3, 7], 10000.0)?;
        project(t, y, 18)
    });

    let (bb, ad) = model_configs();
    let (leaves, n_bb) = model_leaves(&bb, &ad, seed.wrapping_mul(31).wrapping_add(27))?;
    let feats = |s: u64| -> Vec<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        (0..ad.feat_dim).map(|_| r.gen_range(-1.0..1.0)).collect()
    };
    let (f1, f2) = (feats(seed + 30), feats(seed + 31));
    let seqs: [(&[usize], Option<&[f32]>); 3] =
        [(&[1, 5, 2, 8], Some(&f1)), (&[3, 3, 7], None), (&[9, 0], Some(&f2))];
    let targets = [5usize, 2, 8, 4, 3, 7, 12, 0, 6];
    let mask = [1.0f32; 9];
    for (name, mode) in [("model_early_fusion", FusionMode::Early), ("model_v1_fusion", FusionMode::V1)] {
        let r = GradCheckReport::run(
            &leaves,
            |t, v| {
                let bv = BackboneVars::from_slice(bb.n_layers, &v[..n_bb]);
                let av = AdapterVars::from_slice(&bb, &ad, &v[n_bb..]);
                let inputs: Vec<AdaptedInput> =
                    seqs.iter().map(|&(tokens, features)| AdaptedInput { tokens, features }).collect();
                let logits = forward_adapted_vars(t, &bb, &ad, &bv, &av, &inputs, LogitRows::All, mode)?;
                t.cross_entropy_masked(logits, &targets, &mask)
            },
            1000,
            seed,
        )?;
        report.push(name, r);
    }
    Ok(report)
}
