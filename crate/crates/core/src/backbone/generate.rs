use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::EOS;
use crate::error::Result;

/// Decoding rule for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Greedy,
    Temperature(f32),
    TopK(usize),
}

fn argmax(logits: &[f32]) -> usize {
    // First maximum wins so ties resolve deterministically.
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(logits: &[f32], temperature: f32, rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&x| (((x - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    argmax(logits)
}

fn pick(logits: &[f32], mode: Sampling, rng: &mut impl Rng) -> usize {
    match mode {
        Sampling::Greedy => argmax(logits),
        Sampling::Temperature(t) if t <= 0.0 => argmax(logits),
        Sampling::Temperature(t) => sample_softmax(logits, t, rng),
        Sampling::TopK(k) => {
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k.max(1));
            let top: Vec<f32> = idx.iter().map(|&i| logits[i]).collect();
            idx[sample_softmax(&top, 1.0, rng)]
        }
    }
}

/// Autoregressive decoding. `next_logits` maps the full token context to the
/// logits of its final position. Returns the new tokens, without the EOS that
/// stopped generation.
pub fn generate(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f32>>,
    prompt: &[usize],
    max_new: usize,
    mode: Sampling,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = next_logits(&ctx)?;
        let next = pick(&logits, mode, rng);
        if next == EOS {
            break;
        }
        ctx.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A fake model that prefers `(last + 1) % 5`, with EOS after token 4.
    fn counter(ctx: &[usize]) -> Result<Vec<f32>> {
        let mut l = vec![0.0f32; 259];
        let last = *ctx.last().unwrap();
        if last == 4 {
            l[EOS] = 5.0;
        } else {
            l[(last + 1) % 5] = 3.0;
            l[(last + 2) % 5] = 2.5;
        }
        Ok(l)
    }

    #[test]
    fn greedy_follows_argmax_and_stops_at_eos() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = generate(counter, &[0], 10, Sampling::Greedy, &mut rng).unwrap();
        assert_eq!(out, vec![1, 2, 3, 4]);
        let out = generate(counter, &[0], 2, Sampling::Greedy, &mut rng).unwrap();
        assert_eq!(out, vec![1, 2]);
    }

    #[test]
    fn tiny_temperature_matches_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let greedy = generate(counter, &[0], 10, Sampling::Greedy, &mut rng).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cold = generate(counter, &[0], 10, Sampling::Temperature(1e-3), &mut rng).unwrap();
            assert_eq!(cold, greedy);
        }
    }

    #[test]
    fn top_one_is_greedy_and_top_k_stays_in_the_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let greedy = generate(counter, &[0], 10, Sampling::Greedy, &mut rng).unwrap();
        assert_eq!(generate(counter, &[0], 10, Sampling::TopK(1), &mut rng).unwrap(), greedy);
        for _ in 0..50 {
            let t = pick(&counter(&[1]).unwrap(), Sampling::TopK(2), &mut rng);
            assert!(t == 2 || t == 3);
        }
    }
}
