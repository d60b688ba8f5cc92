use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{self, BOS, EOS};
use super::{forward_base_vars, BackboneConfig, BackboneWeights, LogitRows, Packing};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_ratio: f32,
    pub seed: u64,
    /// Fraction of corpus lines held out for evaluation.
    pub heldout_fraction: f32,
    /// Stop early once the running training loss drops below this.
    pub target_loss: Option<f32>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            warmup: 50,
            min_lr_ratio: 0.1,
            seed: 0,
            heldout_fraction: 0.05,
            target_loss: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f32>,
    pub heldout_initial: f32,
    pub heldout_final: f32,
    pub steps_run: usize,
}

/// `BOS text EOS`, truncated to the context window.
fn line_tokens(line: &str, max_len: usize) -> Vec<usize> {
    let mut t = vec![BOS];
    t.extend(tokenizer::encode(line));
    t.push(EOS);
    t.truncate(max_len + 1);
    t
}

/// Mean next-token loss of a batch of token sequences; also backpropagates
/// into trainable weights when `train` is set.
pub fn sequence_loss_batch(weights: &mut BackboneWeights, seqs: &[Vec<usize>], train: bool) -> Result<f32> {
    let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
    let mask = vec![1.0f32; targets.len()];
    let packing = Packing::new(&weights.config, &inputs, 0)?;
    let grads = {
        let mut tape = Tape::<f32>::new();
        let vars = weights.bind(&mut tape);
        let logits = forward_base_vars(&mut tape, &weights.config, &vars, &packing, LogitRows::All)?;
        let loss = tape.cross_entropy_masked(logits, &targets, &mask)?;
        let value = tape.scalar(loss);
        if !train || !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = vars.all().iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();
        (value, grads)
    };
    let (value, grads) = grads;
    for ((_, t), g) in weights.tensors_mut().into_iter().zip(grads) {
        if let Some(g) = g {
            t.accumulate_grad(&g);
        }
    }
    Ok(value)
}

/// Mean loss over `lines`, evaluated in fixed-size chunks.
pub fn heldout_loss(weights: &mut BackboneWeights, lines: &[String]) -> Result<f32> {
    let seqs: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| line_tokens(l, weights.config.max_seq_len))
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(Error::Dataset("held-out corpus slice is empty".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in seqs.chunks(32) {
        let n: usize = chunk.iter().map(|s| s.len() - 1).sum();
        total += sequence_loss_batch(weights, chunk, false)? as f64 * n as f64;
        count += n;
    }
    Ok((total / count as f64) as f32)
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f32 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f32 / cfg.warmup as f32;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f32;
    let progress = ((step - cfg.warmup) as f32 / span).min(1.0);
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos)
}

/// Train a fresh backbone on `corpus` (one document per line) and freeze it.
pub fn pretrain_backbone(
    config: &BackboneConfig,
    corpus: &[String],
    cfg: &PretrainConfig,
) -> Result<(BackboneWeights, PretrainReport)> {
    let lines: Vec<&String> = corpus.iter().filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::Dataset("corpus is empty".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("pretraining needs steps >= 1 and batch_size >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<&String> = lines.clone();
    order.shuffle(&mut rng);
    let n_held = if order.len() < 2 {
        0
    } else {
        ((order.len() as f32 * cfg.heldout_fraction).ceil() as usize).clamp(1, order.len() - 1)
    };
    let (held, train): (Vec<String>, Vec<String>) = if n_held == 0 {
        (vec![order[0].clone()], vec![order[0].clone()])
    } else {
        (
            order[..n_held].iter().map(|s| s.to_string()).collect(),
            order[n_held..].iter().map(|s| s.to_string()).collect(),
        )
    };
    let train: Vec<Vec<usize>> = train.iter().map(|l| line_tokens(l, config.max_seq_len)).collect();

    let mut weights = BackboneWeights::init(config, cfg.seed)?;
    let heldout_initial = heldout_loss(&mut weights, &held)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut report = PretrainReport {
        heldout_initial,
        ..Default::default()
    };
    let mut cursor = train.len();
    let mut perm: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= perm.len() {
                perm = (0..train.len()).collect();
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[perm[cursor]].clone());
            cursor += 1;
        }
        let loss = sequence_loss_batch(&mut weights, &batch, true)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                stream: "corpus".into(),
                reason: format!("loss is {loss}"),
            });
        }
        let lr = lr_at(cfg, step);
        {
            let mut named = weights.tensors_mut();
            let mut params: Vec<(&str, &mut crate::tensor::Tensor)> =
                named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
            opt.step(&mut params, lr);
        }
        for (_, t) in weights.tensors_mut() {
            t.take_grad();
        }
        if !weights.is_finite() {
            return Err(Error::Training {
                step,
                stream: "corpus".into(),
                reason: "non-finite weights after update".into(),
            });
        }
        report.losses.push(loss);
        report.steps_run = step + 1;
        if let Some(target) = cfg.target_loss {
            let window = &report.losses[report.losses.len().saturating_sub(10)..];
            if window.len() == 10 && window.iter().sum::<f32>() / 10.0 < target {
                break;
            }
        }
    }
    report.heldout_final = heldout_loss(&mut weights, &held)?;
    weights.set_frozen(true);
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 64,
            max_seq_len: 64,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn learning_rate_schedule_warms_up_then_decays() {
        let cfg = PretrainConfig {
            steps: 100,
            warmup: 10,
            ..Default::default()
        };
        assert!(lr_at(&cfg, 0) < lr_at(&cfg, 9));
        assert!((lr_at(&cfg, 10) - cfg.lr).abs() < 1e-9);
        assert!((lr_at(&cfg, 99) - cfg.lr * cfg.min_lr_ratio).abs() < 1e-4);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = pretrain_backbone(&small(), &[], &PretrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn short_run_lowers_heldout_loss_and_freezes() {
        let corpus: Vec<String> = (0..40).map(|i| format!("the cat sat on mat {}", i % 4)).collect();
        let cfg = PretrainConfig {
            steps: 40,
            batch_size: 4,
            warmup: 5,
            ..Default::default()
        };
        let (w, report) = pretrain_backbone(&small(), &corpus, &cfg).unwrap();
        assert!(report.heldout_final < report.heldout_initial, "{report:?}");
        assert!(w.is_frozen());
    }

    #[test]
    fn divergence_reports_the_step() {
        let corpus = vec!["abc".to_string(); 4];
        let cfg = PretrainConfig {
            steps: 5,
            batch_size: 2,
            lr: f32::INFINITY,
            warmup: 1,
            ..Default::default()
        };
        let err = pretrain_backbone(&small(), &corpus, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
    }
}
