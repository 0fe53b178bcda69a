//! Length-normalized beam search over the translation model, with the
//! degenerate single-beam case doubling as greedy decoding.

use crate::corpus::{Batch, BOS, EOS, PAD};
use crate::error::Result;
use crate::eval::EvalConfig;
use crate::model::{encode, prefix_distributions, EncoderStates, ModelParams};
use crate::rng::{RngStream, StreamPurpose};

fn source_batch(src: &[u32]) -> Batch {
    let src_len = src.len().max(1);
    let mut padded = vec![PAD; src_len];
    padded[..src.len()].copy_from_slice(src);
    Batch {
        n: 1,
        src_len,
        tgt_len: 2,
        src: padded,
        tgt: vec![BOS, EOS],
        tgt_mask: vec![true],
    }
}

/// Encode one source sentence without dropout.
pub fn encode_source(params: &ModelParams, src: &[u32]) -> Result<EncoderStates> {
    let mut dummy = RngStream::new(0, StreamPurpose::DropoutPass1);
    encode(params, &source_batch(src), 0.0, &mut dummy)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    seq: Vec<u32>,
    log_prob: f64,
}

fn length_penalty(generated: usize, alpha: f64) -> f64 {
    ((5.0 + generated as f64) / 6.0).powf(alpha)
}

/// Beam search with the ((5+len)/6)^alpha normalization. Hypotheses end
/// at EOS or after max_len_factor * source_len + 8 tokens; a finished
/// hypothesis is never extended. Returns content tokens only.
pub fn beam_search(params: &ModelParams, src: &[u32], cfg: &EvalConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let enc = encode_source(params, src)?;
    let max_new = cfg.max_len_factor * src.len() + 8;

    let mut active = vec![Hypothesis { seq: vec![BOS], log_prob: 0.0 }];
    // (content seq incl EOS marker stripped later, normalized score)
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = active.iter().map(|h| h.seq.clone()).collect();
        let dists = prefix_distributions(params, &enc, &prefixes)?;

        // (score, source hypothesis, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (hi, dist) in dists.iter().enumerate() {
            for (v, &p) in dist.iter().enumerate() {
                let v = v as u32;
                if v == PAD || v == BOS || p <= 0.0 {
                    continue;
                }
                candidates.push((active[hi].log_prob + p.ln(), hi, v));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });

        // Top `beam` candidates only; an EOS there retires its
        // hypothesis and the slot, everything below the window is
        // dropped.
        let mut next = Vec::with_capacity(cfg.beam_size);
        for &(score, hi, v) in candidates.iter().take(cfg.beam_size) {
            if v == EOS {
                let generated = active[hi].seq.len(); // content + EOS
                finished.push((
                    active[hi].seq[1..].to_vec(),
                    score / length_penalty(generated, cfg.length_penalty),
                ));
            } else {
                let mut seq = active[hi].seq.clone();
                seq.push(v);
                next.push(Hypothesis { seq, log_prob: score });
            }
        }
        active = next;
    }

    // Anything still active hit the length cap; it competes as-is.
    for h in active {
        let generated = h.seq.len() - 1;
        finished.push((
            h.seq[1..].to_vec(),
            h.log_prob / length_penalty(generated.max(1), cfg.length_penalty),
        ));
    }
    let best = finished
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(seq, _)| seq)
        .unwrap_or_default();
    Ok(best)
}

/// Decode every source sentence in order.
pub fn translate_corpus(
    params: &ModelParams,
    sources: &[Vec<u32>],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<u32>>> {
    sources.iter().map(|s| beam_search(params, s, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::rng::{RngStream, StreamPurpose};

    fn tiny_params(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            src_vocab: 12,
            tgt_vocab: 12,
            max_len: 64,
            ..ModelConfig::default()
        };
        let mut s = RngStream::new(seed, StreamPurpose::Init);
        init_model(&cfg, &mut s).unwrap()
    }

    fn greedy_by_hand(params: &ModelParams, src: &[u32], cfg: &EvalConfig) -> Vec<u32> {
        let enc = encode_source(params, src).unwrap();
        let mut prefix = vec![BOS];
        let cap = cfg.max_len_factor * src.len() + 8;
        for _ in 0..cap {
            let dist = &prefix_distributions(params, &enc, &[prefix.clone()]).unwrap()[0];
            let next = dist
                .iter()
                .enumerate()
                .filter(|&(v, _)| v as u32 != PAD && v as u32 != BOS)
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(v, _)| v as u32)
                .unwrap();
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        prefix[1..].to_vec()
    }

    #[test]
    fn single_beam_equals_greedy_argmax() {
        let params = tiny_params(7);
        let cfg = EvalConfig { beam_size: 1, ..EvalConfig::default() };
        for src in [vec![4u32, 5, 6], vec![7, 8], vec![9, 10, 11, 4, 5]] {
            assert_eq!(beam_search(&params, &src, &cfg).unwrap(), greedy_by_hand(&params, &src, &cfg));
        }
    }

    #[test]
    fn output_respects_cap_and_never_emits_reserved_tokens() {
        let params = tiny_params(8);
        let cfg = EvalConfig::default();
        for len in 1..6 {
            let src: Vec<u32> = (0..len).map(|i| 4 + (i as u32 % 8)).collect();
            let out = beam_search(&params, &src, &cfg).unwrap();
            assert!(out.len() <= cfg.max_len_factor * src.len() + 8);
            assert!(out.iter().all(|&t| t != PAD && t != BOS && t != EOS));
            assert!(out.iter().all(|&t| (t as usize) < params.config.tgt_vocab));
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let params = tiny_params(9);
        let cfg = EvalConfig::default();
        let src = vec![4u32, 9, 6, 7];
        assert_eq!(
            beam_search(&params, &src, &cfg).unwrap(),
            beam_search(&params, &src, &cfg).unwrap()
        );
        let all = translate_corpus(&params, &[src.clone(), vec![5, 5]], &cfg).unwrap();
        assert_eq!(all[0], beam_search(&params, &src, &cfg).unwrap());
    }

    #[test]
    fn tight_caps_truncate_hypotheses() {
        let params = tiny_params(10);
        let cfg = EvalConfig { max_len_factor: 0, ..EvalConfig::default() };
        let out = beam_search(&params, &[4, 5, 6, 7, 8], &cfg).unwrap();
        assert!(out.len() <= 8);
    }
}
