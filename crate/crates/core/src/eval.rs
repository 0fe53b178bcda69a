//! Corpus BLEU, frequency-bucketed 1-gram recall/precision/F1,
//! sentence-subset scores, and the lexical-diversity metrics MATTR,
//! HD-D, and MTLD.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FrequencyTable, SentenceSubsets, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_size: usize,
    /// Exponent of the ((5+len)/6)^alpha length penalty.
    pub length_penalty: f64,
    /// Decoding stops after max_len_factor * source_len + 8 tokens.
    pub max_len_factor: usize,
    pub bucket_count: usize,
    /// Tokens with a training count below this are "rare" when ranking
    /// sentences into High/Medium/Low subsets.
    pub subset_low_count: u64,
    pub mattr_window: usize,
    pub hdd_sample_size: usize,
    pub mtld_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_size: 4,
            length_penalty: 0.6,
            max_len_factor: 2,
            bucket_count: 5,
            subset_low_count: 50,
            mattr_window: 500,
            hdd_sample_size: 42,
            mtld_threshold: 0.72,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::InvalidConfig("beam size must be >= 1".into()));
        }
        if !(self.mtld_threshold > 0.0 && self.mtld_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mtld threshold {} outside (0,1)",
                self.mtld_threshold
            )));
        }
        if self.bucket_count < 1 || self.mattr_window < 1 || self.hdd_sample_size < 1 {
            return Err(Error::InvalidConfig(
                "bucket count, mattr window, and hdd sample must be >= 1".into(),
            ));
        }
        if self.subset_low_count < 1 {
            return Err(Error::InvalidConfig("subset_low_count must be >= 1".into()));
        }
        if self.length_penalty < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "length penalty {} < 0",
                self.length_penalty
            )));
        }
        Ok(())
    }
}

// ── BLEU ────────────────────────────────────────────────────────────

const MAX_ORDER: usize = 4;

/// Additive sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matched: [u64; MAX_ORDER],
    pub hyp_ngrams: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matched[n] += other.matched[n];
            self.hyp_ngrams[n] += other.hyp_ngrams[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut map: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

fn sentence_stats(hyp: &[String], rf: &[String]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len() as u64,
        ref_len: rf.len() as u64,
        ..BleuStats::default()
    };
    for n in 1..=MAX_ORDER {
        let r = ngram_counts(rf, n);
        for (gram, hc) in ngram_counts(hyp, n) {
            s.hyp_ngrams[n - 1] += hc;
            if let Some(&rc) = r.get(gram) {
                s.matched[n - 1] += hc.min(rc);
            }
        }
    }
    s
}

pub fn bleu_stats(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { hyp: hyps.len(), refs: refs.len() });
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&sentence_stats(h, r));
    }
    Ok(total)
}

/// Corpus score in [0,100] from accumulated statistics: geometric mean
/// of clipped 1..4-gram precisions times the brevity penalty, with no
/// smoothing (any zero precision gives 0).
pub fn bleu_from_stats(s: &BleuStats) -> f64 {
    if s.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        if s.matched[n] == 0 || s.hyp_ngrams[n] == 0 {
            return 0.0;
        }
        log_sum += (s.matched[n] as f64 / s.hyp_ngrams[n] as f64).ln();
    }
    let bp = if s.hyp_len >= s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
}

pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    Ok(bleu_from_stats(&bleu_stats(hyps, refs)?))
}

// ── bucketed 1-gram recall/precision/F1 ─────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketPrf {
    pub bucket: usize,
    pub matched: u64,
    pub ref_total: u64,
    pub hyp_total: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl BucketPrf {
    fn from_counts(bucket: usize, matched: u64, ref_total: u64, hyp_total: u64) -> BucketPrf {
        let recall = if ref_total == 0 { 0.0 } else { matched as f64 / ref_total as f64 };
        let precision = if hyp_total == 0 { 0.0 } else { matched as f64 / hyp_total as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BucketPrf { bucket, matched, ref_total, hyp_total, recall, precision, f1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketedPrf {
    pub buckets: Vec<BucketPrf>,
    pub overall: BucketPrf,
}

impl BucketedPrf {
    /// Count-aggregated scores over a union of buckets.
    pub fn combined(&self, ids: &[usize]) -> BucketPrf {
        let (mut m, mut r, mut h) = (0, 0, 0);
        for b in &self.buckets {
            if ids.contains(&b.bucket) {
                m += b.matched;
                r += b.ref_total;
                h += b.hyp_total;
            }
        }
        BucketPrf::from_counts(usize::MAX, m, r, h)
    }
}

/// Per-type 1-gram matching with per-sentence clipping: a type's match
/// count in one sentence is min(hyp occurrences, ref occurrences).
/// Types missing from the vocabulary land in the rarest bucket.
pub fn one_gram_prf(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    vocab: &Vocabulary,
    freq: &FrequencyTable,
) -> Result<BucketedPrf> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { hyp: hyps.len(), refs: refs.len() });
    }
    let k = freq.n_buckets();
    let bucket_of = |token: &str| -> usize {
        match vocab.lookup(token) {
            Some(id) => freq.bucket(id),
            None => k - 1,
        }
    };
    // type -> (matched, ref count, hyp count)
    let mut per_type: HashMap<String, (u64, u64, u64)> = HashMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let mut hc: HashMap<&str, u64> = HashMap::new();
        let mut rc: HashMap<&str, u64> = HashMap::new();
        for t in h {
            *hc.entry(t).or_insert(0) += 1;
        }
        for t in r {
            *rc.entry(t).or_insert(0) += 1;
        }
        for (t, &c) in &hc {
            let e = per_type.entry(t.to_string()).or_insert((0, 0, 0));
            e.2 += c;
            e.0 += c.min(rc.get(t).copied().unwrap_or(0));
        }
        for (t, &c) in &rc {
            per_type.entry(t.to_string()).or_insert((0, 0, 0)).1 += c;
        }
    }

    let mut counts = vec![(0u64, 0u64, 0u64); k];
    let mut total = (0u64, 0u64, 0u64);
    for (t, (m, r, h)) in &per_type {
        let b = bucket_of(t);
        counts[b].0 += m;
        counts[b].1 += r;
        counts[b].2 += h;
        total.0 += m;
        total.1 += r;
        total.2 += h;
    }
    let buckets = counts
        .iter()
        .enumerate()
        .map(|(b, &(m, r, h))| BucketPrf::from_counts(b, m, r, h))
        .collect();
    Ok(BucketedPrf {
        buckets,
        overall: BucketPrf::from_counts(usize::MAX, total.0, total.1, total.2),
    })
}

// ── sentence subsets ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetBleu {
    pub high: Option<f64>,
    pub medium: Option<f64>,
    pub low: Option<f64>,
}

/// Corpus BLEU restricted to each subset of sentence indices. Empty
/// subsets report no score.
pub fn subset_report(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    subsets: &SentenceSubsets,
) -> Result<SubsetBleu> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { hyp: hyps.len(), refs: refs.len() });
    }
    let mut seen = vec![false; hyps.len()];
    for &i in subsets.high.iter().chain(&subsets.medium).chain(&subsets.low) {
        if i >= hyps.len() {
            return Err(Error::NotAPartition(format!("index {} out of range", i)));
        }
        if seen[i] {
            return Err(Error::NotAPartition(format!("index {} repeated", i)));
        }
        seen[i] = true;
    }
    if let Some(miss) = seen.iter().position(|&s| !s) {
        return Err(Error::NotAPartition(format!("index {} uncovered", miss)));
    }
    let score = |idx: &[usize]| -> Result<Option<f64>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let h: Vec<Vec<String>> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<Vec<String>> = idx.iter().map(|&i| refs[i].clone()).collect();
        Ok(Some(bleu(&h, &r)?))
    };
    Ok(SubsetBleu {
        high: score(&subsets.high)?,
        medium: score(&subsets.medium)?,
        low: score(&subsets.low)?,
    })
}

// ── lexical diversity ───────────────────────────────────────────────

/// Moving-average type-token ratio: mean TTR over all length-W sliding
/// windows, with W clamped to the text length.
pub fn mattr(tokens: &[String], window: usize) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let w = window.max(1).min(tokens.len());
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut types = 0usize;
    for t in &tokens[..w] {
        let c = counts.entry(t).or_insert(0);
        if *c == 0 {
            types += 1;
        }
        *c += 1;
    }
    let mut sum = types as f64 / w as f64;
    let mut n_windows = 1usize;
    for i in w..tokens.len() {
        let out = counts.get_mut(tokens[i - w].as_str()).unwrap();
        *out -= 1;
        if *out == 0 {
            types -= 1;
        }
        let c = counts.entry(&tokens[i]).or_insert(0);
        if *c == 0 {
            types += 1;
        }
        *c += 1;
        sum += types as f64 / w as f64;
        n_windows += 1;
    }
    Ok(sum / n_windows as f64)
}

/// HD-D: each type contributes its probability of appearing in a random
/// size-s draw, divided by s. The no-draw probability is a falling
/// product evaluated in log space.
pub fn hdd(tokens: &[String], sample: usize) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let n = tokens.len();
    if n < sample {
        return Err(Error::TextTooShort { len: n, sample });
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    // Fixed summation order; map iteration order varies per process.
    let mut ordered: Vec<u64> = counts.into_values().collect();
    ordered.sort_unstable();
    let mut total = 0.0;
    for c in ordered {
        let absent = n as u64 - c;
        let p_missing = if absent < sample as u64 {
            0.0
        } else {
            // C(N-c, s) / C(N, s) as a log-space falling product.
            let mut log_p = 0.0;
            for k in 0..sample as u64 {
                log_p += ((absent - k) as f64).ln() - ((n as u64 - k) as f64).ln();
            }
            log_p.exp()
        };
        total += (1.0 - p_missing) / sample as f64;
    }
    Ok(total)
}

fn mtld_direction<'a, I: Iterator<Item = &'a String>>(iter: I, n: usize, tau: f64) -> Result<f64> {
    let mut factors = 0.0;
    let mut types: HashMap<&str, ()> = HashMap::new();
    let mut span = 0usize;
    let mut ttr = 1.0;
    for t in iter {
        span += 1;
        types.entry(t).or_insert(());
        ttr = types.len() as f64 / span as f64;
        if ttr < tau {
            factors += 1.0;
            types.clear();
            span = 0;
            ttr = 1.0;
        }
    }
    if span > 0 {
        factors += (1.0 - ttr) / (1.0 - tau);
    }
    if factors == 0.0 {
        return Err(Error::UndefinedDiversity);
    }
    Ok(n as f64 / factors)
}

/// MTLD: mean sequential-factor length over forward and reversed passes.
/// A factor completes whenever the running TTR drops below the
/// threshold; the tail contributes a partial factor.
pub fn mtld(tokens: &[String], tau: f64) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let fwd = mtld_direction(tokens.iter(), tokens.len(), tau)?;
    let bwd = mtld_direction(tokens.iter().rev(), tokens.len(), tau)?;
    Ok(0.5 * (fwd + bwd))
}

// ── report ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketRow {
    pub id: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrfSummary {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub subsets: SubsetBleu,
    pub buckets: Vec<BucketRow>,
    /// 1-gram scores over all content tokens, buckets pooled.
    pub overall: PrfSummary,
    pub mattr: f64,
    pub hdd: f64,
    pub mtld: f64,
}

/// Full metric sweep: corpus BLEU, subset BLEU, bucketed 1-gram scores,
/// and the diversity metrics over the concatenated hypothesis text.
pub fn evaluate(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    vocab: &Vocabulary,
    freq: &FrequencyTable,
    subsets: &SentenceSubsets,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let prf = one_gram_prf(hyps, refs, vocab, freq)?;
    let flat: Vec<String> = hyps.iter().flatten().cloned().collect();
    Ok(MetricsReport {
        bleu: bleu(hyps, refs)?,
        subsets: subset_report(hyps, refs, subsets)?,
        buckets: prf
            .buckets
            .iter()
            .map(|b| BucketRow { id: b.bucket, recall: b.recall, precision: b.precision, f1: b.f1 })
            .collect(),
        overall: PrfSummary {
            recall: prf.overall.recall,
            precision: prf.overall.precision,
            f1: prf.overall.f1,
        },
        mattr: mattr(&flat, cfg.mattr_window)?,
        hdd: hdd(&flat, cfg.hdd_sample_size)?,
        mtld: mtld(&flat, cfg.mtld_threshold)?,
    })
}

pub fn write_metrics(report: &MetricsReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(dir.join("metrics.json"), json + "\n")?;
    let mut csv = String::from("bucket,recall,precision,f1\n");
    for b in &report.buckets {
        csv.push_str(&format!("{},{:.6},{:.6},{:.6}\n", b.id, b.recall, b.precision, b.f1));
    }
    let o = &report.overall;
    csv.push_str(&format!("overall,{:.6},{:.6},{:.6}\n", o.recall, o.precision, o.f1));
    std::fs::write(dir.join("buckets.csv"), csv)?;
    Ok(())
}
