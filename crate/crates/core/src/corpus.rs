//! Synthetic Zipfian parallel corpora, vocabulary and frequency
//! bookkeeping, token-budget batching, and frequency buckets.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamPurpose};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub fn is_reserved(id: u32) -> bool {
    id < RESERVED_TOKENS.len() as u32
}

// ── corpus generation ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingRule {
    /// Seeded token permutation, then the token order is reversed.
    BijectiveMapReverse,
    /// Identity map: the target sentence equals the source sentence.
    BijectiveMapIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipfCorpusConfig {
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub pair_count: usize,
    pub seed: u64,
    pub mapping_rule: MappingRule,
}

impl Default for ZipfCorpusConfig {
    fn default() -> Self {
        ZipfCorpusConfig {
            vocab_size: 200,
            zipf_exponent: 1.1,
            len_min: 4,
            len_max: 12,
            pair_count: 8889,
            seed: 1,
            mapping_rule: MappingRule::BijectiveMapReverse,
        }
    }
}

impl ZipfCorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} < 10",
                self.vocab_size
            )));
        }
        if self.len_min < 1 || self.len_min > self.len_max {
            return Err(Error::InvalidConfig(format!(
                "bad sentence length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        if self.pair_count < 1 {
            return Err(Error::InvalidConfig("pair_count < 1".into()));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "zipf_exponent {} must be positive",
                self.zipf_exponent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Contiguous train/dev/test split; dev and test take `dev` and
    /// `test` pairs from the end.
    pub fn split(&self, dev: usize, test: usize) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
        let n = self.len();
        if dev + test >= n {
            return Err(Error::InvalidConfig(format!(
                "split: {} pairs cannot hold dev {} + test {}",
                n, dev, test
            )));
        }
        let train_n = n - dev - test;
        let take = |lo: usize, hi: usize| ParallelCorpus {
            src: self.src[lo..hi].to_vec(),
            tgt: self.tgt[lo..hi].to_vec(),
        };
        Ok((
            take(0, train_n),
            take(train_n, train_n + dev),
            take(train_n + dev, n),
        ))
    }
}

fn content_token(index: usize) -> String {
    format!("w{:04}", index)
}

/// Draw parallel sentence pairs with i.i.d. Zipf(a) source tokens over
/// `vocab_size` content ranks; the target is a fixed bijection of the
/// source ids, optionally reversed.
pub fn generate_zipf_corpus(cfg: &ZipfCorpusConfig) -> Result<ParallelCorpus> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let mut stream = RngStream::new(cfg.seed, StreamPurpose::Corpus);

    // Inverse-CDF table over the finite rank distribution, p(r) ~ r^-a.
    let weights: Vec<f64> = (1..=v).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(v);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    cdf[v - 1] = 1.0;

    // The bijection is drawn before any sentence so it is a fixed
    // property of the seed.
    let sigma: Vec<usize> = match cfg.mapping_rule {
        MappingRule::BijectiveMapIdentity => (0..v).collect(),
        MappingRule::BijectiveMapReverse => {
            let mut p: Vec<usize> = (0..v).collect();
            stream.shuffle(&mut p);
            p
        }
    };

    let mut corpus = ParallelCorpus::default();
    for _ in 0..cfg.pair_count {
        let len = cfg.len_min + stream.below(cfg.len_max - cfg.len_min + 1);
        let mut src = Vec::with_capacity(len);
        let mut tgt = Vec::with_capacity(len);
        for _ in 0..len {
            let u = stream.next_f64();
            let rank = cdf.partition_point(|&c| c < u).min(v - 1);
            src.push(content_token(rank));
            tgt.push(content_token(sigma[rank]));
        }
        if cfg.mapping_rule == MappingRule::BijectiveMapReverse {
            tgt.reverse();
        }
        corpus.src.push(src);
        corpus.tgt.push(tgt);
    }
    Ok(corpus)
}

// ── vocabulary and frequencies ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn content_size(&self) -> usize {
        self.size() - RESERVED_TOKENS.len()
    }

    pub fn encode_token(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn decode_token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<u32> {
        sentence.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.decode_token(i).to_string()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    bucket_by_id: Vec<usize>,
    n_buckets: usize,
}

impl FrequencyTable {
    /// Counts indexed by token id; reserved ids hold 0.
    pub fn new(counts: Vec<u64>) -> FrequencyTable {
        FrequencyTable {
            counts,
            bucket_by_id: Vec::new(),
            n_buckets: 0,
        }
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Count clamped to 1, for use under logarithms.
    pub fn clamped_count(&self, id: u32) -> u64 {
        self.count(id).max(1)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    /// Bucket of a token id; ids without a real count (reserved, or
    /// never seen in training) land in the rarest bucket.
    pub fn bucket(&self, id: u32) -> usize {
        self.bucket_by_id
            .get(id as usize)
            .copied()
            .unwrap_or(self.n_buckets.saturating_sub(1))
    }

    pub fn assign_buckets(&mut self, k: usize) -> Result<()> {
        self.bucket_by_id = frequency_buckets(self, k)?;
        self.n_buckets = k;
        Ok(())
    }
}

/// Build a vocabulary and frequency table from one side of a corpus.
/// Ids are assigned by descending count after the reserved entries,
/// ties by token string.
pub fn build_vocabulary(sentences: &[Vec<String>]) -> Result<(Vocabulary, FrequencyTable)> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, u64)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_to_token: Vec<String> =
        RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
    let mut count_by_id: Vec<u64> = vec![0; RESERVED_TOKENS.len()];
    for (tok, c) in entries {
        id_to_token.push(tok.to_string());
        count_by_id.push(c);
    }
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok((
        Vocabulary { token_to_id, id_to_token },
        FrequencyTable::new(count_by_id),
    ))
}

/// Split content ids into k contiguous frequency bands of near-equal
/// size, most frequent first. Remainder slots go to the more frequent
/// bands; ties are ordered by ascending id. Returns id→bucket for the
/// whole vocabulary (reserved ids map to the rarest band).
pub fn frequency_buckets(freq: &FrequencyTable, k: usize) -> Result<Vec<usize>> {
    let reserved = RESERVED_TOKENS.len();
    let total = freq.counts.len();
    let content = total.saturating_sub(reserved);
    if k < 1 || content < k {
        return Err(Error::TooFewTokens { have: content, want: k });
    }
    let mut ids: Vec<usize> = (reserved..total).collect();
    ids.sort_by(|&a, &b| freq.counts[b].cmp(&freq.counts[a]).then(a.cmp(&b)));

    let base = content / k;
    let extra = content % k;
    let mut out = vec![k - 1; total];
    let mut pos = 0;
    for b in 0..k {
        let size = base + usize::from(b < extra);
        for &id in &ids[pos..pos + size] {
            out[id] = b;
        }
        pos += size;
    }
    Ok(out)
}

// ── batching ────────────────────────────────────────────────────────

/// One padded minibatch. Target rows are `BOS tokens.. EOS PAD..`; the
/// mask covers prediction positions (row t predicts tgt[t+1]), so its
/// count is the number of real target tokens including EOS.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn mask_count(&self) -> usize {
        self.tgt_mask.iter().filter(|m| **m).count()
    }

    /// Ids of the gold tokens at masked positions, row-major order.
    pub fn gold_ids(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.mask_count());
        for s in 0..self.n {
            for t in 0..self.tgt_len - 1 {
                if self.tgt_mask[s * (self.tgt_len - 1) + t] {
                    out.push(self.tgt[s * self.tgt_len + t + 1]);
                }
            }
        }
        out
    }
}

fn build_batch(src: &[&[u32]], tgt: &[&[u32]]) -> Batch {
    let n = src.len();
    let src_len = src.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
    let tgt_len = tgt.iter().map(|t| t.len() + 2).max().unwrap_or(2);
    let mut sm = vec![PAD; n * src_len];
    let mut tm = vec![PAD; n * tgt_len];
    let mut mask = vec![false; n * (tgt_len - 1)];
    for i in 0..n {
        sm[i * src_len..i * src_len + src[i].len()].copy_from_slice(src[i]);
        let row = &mut tm[i * tgt_len..(i + 1) * tgt_len];
        row[0] = BOS;
        row[1..1 + tgt[i].len()].copy_from_slice(tgt[i]);
        row[1 + tgt[i].len()] = EOS;
        for t in 0..tgt[i].len() + 1 {
            mask[i * (tgt_len - 1) + t] = true;
        }
    }
    Batch { n, src_len, tgt_len, src: sm, tgt: tm, tgt_mask: mask }
}

/// Group encoded sentence pairs into batches whose padded target size
/// (rows x row length, BOS/EOS included) stays within `max_tokens`.
/// Epoch order comes entirely from the shuffle stream.
pub fn batch_iterator(
    src: &[Vec<u32>],
    tgt: &[Vec<u32>],
    max_tokens: usize,
    stream: &mut RngStream,
) -> Result<Vec<Batch>> {
    assert_eq!(src.len(), tgt.len());
    for t in tgt {
        if t.len() + 2 > max_tokens {
            return Err(Error::SentenceTooLong { len: t.len(), budget: max_tokens });
        }
    }
    let mut order: Vec<usize> = (0..src.len()).collect();
    stream.shuffle(&mut order);

    let mut batches = Vec::new();
    let mut group: Vec<usize> = Vec::new();
    let mut widest = 0;
    for &i in &order {
        let w = widest.max(tgt[i].len() + 2);
        if !group.is_empty() && (group.len() + 1) * w > max_tokens {
            let s: Vec<&[u32]> = group.iter().map(|&j| src[j].as_slice()).collect();
            let t: Vec<&[u32]> = group.iter().map(|&j| tgt[j].as_slice()).collect();
            batches.push(build_batch(&s, &t));
            group.clear();
            widest = 0;
        }
        widest = widest.max(tgt[i].len() + 2);
        group.push(i);
    }
    if !group.is_empty() {
        let s: Vec<&[u32]> = group.iter().map(|&j| src[j].as_slice()).collect();
        let t: Vec<&[u32]> = group.iter().map(|&j| tgt[j].as_slice()).collect();
        batches.push(build_batch(&s, &t));
    }
    Ok(batches)
}

// ── sentence subsets ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSubsets {
    pub high: Vec<usize>,
    pub medium: Vec<usize>,
    pub low: Vec<usize>,
}

/// Partition test sentences into High/Medium/Low frequency tertiles by
/// their proportion of target tokens whose training count falls below
/// `low_threshold`. Low holds the most rare-word-heavy sentences.
pub fn sentence_subsets(
    tgt_sentences: &[Vec<String>],
    vocab: &Vocabulary,
    freq: &FrequencyTable,
    low_threshold: u64,
) -> Result<SentenceSubsets> {
    if tgt_sentences.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut ranked: Vec<(usize, f64)> = tgt_sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rare = s
                .iter()
                .filter(|t| freq.count(vocab.encode_token(t)) < low_threshold)
                .count();
            let prop = if s.is_empty() { 0.0 } else { rare as f64 / s.len() as f64 };
            (i, prop)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let n = ranked.len();
    let low_n = n.div_ceil(3);
    let high_n = (n - low_n).div_ceil(2);
    let mut low: Vec<usize> = ranked[..low_n].iter().map(|p| p.0).collect();
    let mut medium: Vec<usize> = ranked[low_n..n - high_n].iter().map(|p| p.0).collect();
    let mut high: Vec<usize> = ranked[n - high_n..].iter().map(|p| p.0).collect();
    low.sort_unstable();
    medium.sort_unstable();
    high.sort_unstable();
    Ok(SentenceSubsets { high, medium, low })
}

// ── file formats ────────────────────────────────────────────────────

fn write_sentences(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Write `<stem>.src` / `<stem>.tgt`, one space-joined sentence per line.
pub fn write_corpus(dir: &Path, stem: &str, corpus: &ParallelCorpus) -> Result<()> {
    write_sentences(&dir.join(format!("{stem}.src")), &corpus.src)?;
    write_sentences(&dir.join(format!("{stem}.tgt")), &corpus.tgt)
}

pub fn read_corpus(dir: &Path, stem: &str) -> Result<ParallelCorpus> {
    let src = read_sentences(&dir.join(format!("{stem}.src")))?;
    let tgt = read_sentences(&dir.join(format!("{stem}.tgt")))?;
    if src.len() != tgt.len() {
        return Err(Error::LengthMismatch { hyp: src.len(), refs: tgt.len() });
    }
    Ok(ParallelCorpus { src, tgt })
}

/// TSV of `token<TAB>count`, reserved tokens first with count 0, then
/// content tokens in id order (descending count).
pub fn write_vocab_file(path: &Path, vocab: &Vocabulary, freq: &FrequencyTable) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for id in 0..vocab.size() {
        writeln!(f, "{}\t{}", vocab.decode_token(id as u32), freq.count(id as u32))?;
    }
    Ok(())
}

pub fn read_vocab_file(path: &Path) -> Result<(Vocabulary, FrequencyTable)> {
    let text = fs::read_to_string(path)?;
    let mut id_to_token = Vec::new();
    let mut counts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (tok, cnt) = line.split_once('\t').ok_or_else(|| {
            Error::InvalidConfig(format!("vocab line {} lacks a tab", i + 1))
        })?;
        let c: u64 = cnt
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("vocab line {}: bad count", i + 1)))?;
        id_to_token.push(tok.to_string());
        counts.push(c);
    }
    for (i, want) in RESERVED_TOKENS.iter().enumerate() {
        if id_to_token.get(i).map(String::as_str) != Some(*want) {
            return Err(Error::InvalidConfig(format!(
                "vocab file does not start with reserved token {}",
                want
            )));
        }
    }
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok((
        Vocabulary { token_to_id, id_to_token },
        FrequencyTable::new(counts),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> ZipfCorpusConfig {
        ZipfCorpusConfig {
            vocab_size: 30,
            zipf_exponent: 1.1,
            len_min: 2,
            len_max: 6,
            pair_count: 50,
            seed: 7,
            mapping_rule: MappingRule::BijectiveMapReverse,
        }
    }

    #[test]
    fn identity_rule_copies_source() {
        let cfg = ZipfCorpusConfig {
            mapping_rule: MappingRule::BijectiveMapIdentity,
            ..small_cfg()
        };
        let c = generate_zipf_corpus(&cfg).unwrap();
        assert_eq!(c.src, c.tgt);
    }

    #[test]
    fn reverse_rule_reverses_mapped_tokens() {
        let cfg = small_cfg();
        let c = generate_zipf_corpus(&cfg).unwrap();
        // Reversing the target recovers a token-wise bijective image of
        // the source: equal source tokens map to equal target tokens.
        for (s, t) in c.src.iter().zip(&c.tgt) {
            assert_eq!(s.len(), t.len());
            let rt: Vec<&String> = t.iter().rev().collect();
            let mut map: HashMap<&str, &str> = HashMap::new();
            for (a, b) in s.iter().zip(rt) {
                let prev = map.insert(a, b);
                if let Some(p) = prev {
                    assert_eq!(p, b.as_str());
                }
            }
        }
    }

    #[test]
    fn zipf_rank_ratio_tracks_exponent() {
        let cfg = ZipfCorpusConfig {
            vocab_size: 200,
            zipf_exponent: 1.1,
            len_min: 4,
            len_max: 12,
            pair_count: 10_000,
            seed: 3,
            mapping_rule: MappingRule::BijectiveMapIdentity,
        };
        let c = generate_zipf_corpus(&cfg).unwrap();
        let mut count = HashMap::new();
        for s in &c.src {
            for t in s {
                *count.entry(t.clone()).or_insert(0u64) += 1;
            }
        }
        let r1 = count[&content_token(0)] as f64;
        let r100 = count[&content_token(99)] as f64;
        let expected = 100f64.powf(1.1);
        let ratio = r1 / r100;
        assert!(
            ratio > expected / 2.0 && ratio < expected * 2.0,
            "rank-1/rank-100 ratio {} vs expected {}",
            ratio,
            expected
        );
    }

    #[test]
    fn generation_is_deterministic_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        write_corpus(dir.path(), "one", &generate_zipf_corpus(&cfg).unwrap()).unwrap();
        write_corpus(dir.path(), "two", &generate_zipf_corpus(&cfg).unwrap()).unwrap();
        for ext in ["src", "tgt"] {
            let a = fs::read(dir.path().join(format!("one.{ext}"))).unwrap();
            let b = fs::read(dir.path().join(format!("two.{ext}"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_zipf_corpus(&ZipfCorpusConfig { vocab_size: 5, ..small_cfg() }).is_err());
        assert!(generate_zipf_corpus(&ZipfCorpusConfig { len_min: 0, ..small_cfg() }).is_err());
        assert!(generate_zipf_corpus(&ZipfCorpusConfig { len_min: 9, len_max: 8, ..small_cfg() })
            .is_err());
        assert!(generate_zipf_corpus(&ZipfCorpusConfig { pair_count: 0, ..small_cfg() }).is_err());
        assert!(
            generate_zipf_corpus(&ZipfCorpusConfig { zipf_exponent: 0.0, ..small_cfg() }).is_err()
        );
    }

    fn toy(tokens: &[&[&str]]) -> Vec<Vec<String>> {
        tokens
            .iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn vocabulary_counts_target_side() {
        let (vocab, freq) = build_vocabulary(&toy(&[&["a", "a", "b"]])).unwrap();
        assert_eq!(freq.count(vocab.encode_token("a")), 2);
        assert_eq!(freq.count(vocab.encode_token("b")), 1);
        // Ids by descending count after the reserved block.
        assert_eq!(vocab.encode_token("a"), 4);
        assert_eq!(vocab.encode_token("b"), 5);
    }

    #[test]
    fn oov_token_encodes_to_unk() {
        let (vocab, _) = build_vocabulary(&toy(&[&["a"]])).unwrap();
        assert_eq!(vocab.encode_token("never-seen"), UNK);
    }

    #[test]
    fn counts_sum_to_token_total() {
        let c = generate_zipf_corpus(&small_cfg()).unwrap();
        let (_, freq) = build_vocabulary(&c.tgt).unwrap();
        let total: u64 = freq.counts().iter().sum();
        let expect: usize = c.tgt.iter().map(|s| s.len()).sum();
        assert_eq!(total, expect as u64);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(build_vocabulary(&[]), Err(Error::EmptyCorpus)));
    }

    fn table_with_content_counts(counts: &[u64]) -> FrequencyTable {
        let mut all = vec![0u64; RESERVED_TOKENS.len()];
        all.extend_from_slice(counts);
        FrequencyTable::new(all)
    }

    fn bucket_sizes(assign: &[usize], k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for &b in &assign[RESERVED_TOKENS.len()..] {
            sizes[b] += 1;
        }
        sizes
    }

    #[test]
    fn ten_ids_five_buckets_split_evenly() {
        let freq = table_with_content_counts(&[100, 90, 80, 70, 60, 50, 40, 30, 20, 10]);
        let assign = frequency_buckets(&freq, 5).unwrap();
        assert_eq!(bucket_sizes(&assign, 5), vec![2, 2, 2, 2, 2]);
        // Most frequent two ids in bucket 0.
        assert_eq!(assign[4], 0);
        assert_eq!(assign[5], 0);
        assert_eq!(assign[13], 4);
    }

    #[test]
    fn eleven_ids_five_buckets_extra_to_most_frequent() {
        let freq =
            table_with_content_counts(&[110, 100, 90, 80, 70, 60, 50, 40, 30, 20, 10]);
        let assign = frequency_buckets(&freq, 5).unwrap();
        assert_eq!(bucket_sizes(&assign, 5), vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn three_buckets_for_coarse_analysis() {
        let freq = table_with_content_counts(&[9, 8, 7, 6, 5, 4, 3, 2, 1]);
        let assign = frequency_buckets(&freq, 3).unwrap();
        assert_eq!(bucket_sizes(&assign, 3), vec![3, 3, 3]);
    }

    #[test]
    fn too_few_tokens_rejected() {
        let freq = table_with_content_counts(&[3, 2, 1]);
        assert!(matches!(
            frequency_buckets(&freq, 5),
            Err(Error::TooFewTokens { have: 3, want: 5 })
        ));
    }

    #[test]
    fn unseen_ids_fall_in_rarest_bucket() {
        let mut freq = table_with_content_counts(&[50, 40, 30, 20, 10]);
        freq.assign_buckets(5).unwrap();
        assert_eq!(freq.bucket(9999), 4);
        assert_eq!(freq.bucket(UNK), 4);
    }

    fn shuffle_stream() -> RngStream {
        RngStream::new(5, StreamPurpose::Shuffle)
    }

    #[test]
    fn single_sentence_fits_one_batch() {
        let src = vec![vec![4u32, 5, 6]];
        let tgt = vec![vec![6u32, 5, 4]];
        let batches = batch_iterator(&src, &tgt, 1_000_000, &mut shuffle_stream()).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].n, 1);
        assert_eq!(batches[0].tgt, vec![BOS, 6, 5, 4, EOS]);
        assert_eq!(batches[0].mask_count(), 4);
        assert_eq!(batches[0].gold_ids(), vec![6, 5, 4, EOS]);
    }

    #[test]
    fn fixed_stream_reproduces_batch_sequence() {
        let c = generate_zipf_corpus(&small_cfg()).unwrap();
        let (vocab, _) = build_vocabulary(&c.tgt).unwrap();
        let enc: Vec<Vec<u32>> = c.tgt.iter().map(|s| vocab.encode(s)).collect();
        let a = batch_iterator(&enc, &enc, 64, &mut shuffle_stream()).unwrap();
        let b = batch_iterator(&enc, &enc, 64, &mut shuffle_stream()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tgt, y.tgt);
            assert_eq!(x.src, y.src);
        }
    }

    #[test]
    fn epoch_mask_counts_cover_corpus() {
        let c = generate_zipf_corpus(&small_cfg()).unwrap();
        let (vocab, _) = build_vocabulary(&c.tgt).unwrap();
        let enc: Vec<Vec<u32>> = c.tgt.iter().map(|s| vocab.encode(s)).collect();
        let batches = batch_iterator(&enc, &enc, 64, &mut shuffle_stream()).unwrap();
        let masked: usize = batches.iter().map(|b| b.mask_count()).sum();
        let expect: usize = enc.iter().map(|s| s.len() + 1).sum();
        assert_eq!(masked, expect);
    }

    #[test]
    fn oversized_sentence_rejected() {
        let tgt = vec![vec![4u32; 20]];
        let err = batch_iterator(&tgt.clone(), &tgt, 21, &mut shuffle_stream());
        assert!(matches!(err, Err(Error::SentenceTooLong { len: 20, budget: 21 })));
    }

    #[test]
    fn forced_subset_ordering() {
        let (vocab, freq) = build_vocabulary(&toy(&[
            &["f", "f", "f", "f", "f", "f", "r"],
        ]))
        .unwrap();
        // f appears 6 times, r once; threshold 5 makes r rare.
        let test = toy(&[&["r", "r"], &["f", "f"], &["f", "r"]]);
        let subsets = sentence_subsets(&test, &vocab, &freq, 5).unwrap();
        assert_eq!(subsets.low, vec![0]);
        assert_eq!(subsets.medium, vec![2]);
        assert_eq!(subsets.high, vec![1]);
    }

    #[test]
    fn identical_sentences_split_deterministically() {
        let (vocab, freq) = build_vocabulary(&toy(&[&["a"]])).unwrap();
        let test = toy(&[&["a"], &["a"], &["a"]]);
        let s1 = sentence_subsets(&test, &vocab, &freq, 1).unwrap();
        let s2 = sentence_subsets(&test, &vocab, &freq, 1).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.low.len(), 1);
        assert_eq!(s1.medium.len(), 1);
        assert_eq!(s1.high.len(), 1);
    }

    #[test]
    fn tertile_sizes_within_one() {
        let cfg = ZipfCorpusConfig { pair_count: 100, ..small_cfg() };
        let c = generate_zipf_corpus(&cfg).unwrap();
        let (vocab, freq) = build_vocabulary(&c.tgt).unwrap();
        let subsets = sentence_subsets(&c.tgt, &vocab, &freq, 10).unwrap();
        let sizes = [subsets.high.len(), subsets.medium.len(), subsets.low.len()];
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        assert!(max - min <= 1, "sizes {:?}", sizes);
    }

    #[test]
    fn empty_test_set_rejected() {
        let (vocab, freq) = build_vocabulary(&toy(&[&["a"]])).unwrap();
        assert!(matches!(
            sentence_subsets(&[], &vocab, &freq, 1),
            Err(Error::EmptyTestSet)
        ));
    }

    #[test]
    fn vocab_file_round_trips() {
        let c = generate_zipf_corpus(&small_cfg()).unwrap();
        let (vocab, freq) = build_vocabulary(&c.tgt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        write_vocab_file(&path, &vocab, &freq).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "<pad>\t0");
        assert_eq!(lines[3], "<unk>\t0");
        let counts: Vec<u64> = lines[4..]
            .iter()
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));

        let (v2, f2) = read_vocab_file(&path).unwrap();
        assert_eq!(v2.size(), vocab.size());
        for id in 0..vocab.size() as u32 {
            assert_eq!(v2.decode_token(id), vocab.decode_token(id));
            assert_eq!(f2.count(id), freq.count(id));
        }
    }

    #[test]
    fn corpus_files_round_trip() {
        let c = generate_zipf_corpus(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "data", &c).unwrap();
        let back = read_corpus(dir.path(), "data").unwrap();
        assert_eq!(back.src, c.src);
        assert_eq!(back.tgt, c.tgt);
    }

    #[test]
    fn split_is_contiguous_and_total() {
        let c = generate_zipf_corpus(&small_cfg()).unwrap();
        let (train, dev, test) = c.split(5, 5).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(dev.len(), 5);
        assert_eq!(test.len(), 5);
        assert_eq!(train.src[0], c.src[0]);
        assert_eq!(test.src[4], c.src[49]);
    }

    proptest! {
        #[test]
        fn buckets_partition_and_stay_monotone(
            counts in proptest::collection::vec(1u64..1000, 10..60),
            k in 1usize..8,
        ) {
            prop_assume!(counts.len() >= k);
            let freq = table_with_content_counts(&counts);
            let assign = frequency_buckets(&freq, k).unwrap();
            let sizes = bucket_sizes(&assign, k);
            prop_assert_eq!(sizes.iter().sum::<usize>(), counts.len());
            let max = sizes.iter().max().unwrap();
            let min = sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            // Monotone: the rarest count in bucket b is at least the
            // most frequent count in bucket b+1.
            for b in 0..k.saturating_sub(1) {
                let min_b = (0..counts.len())
                    .filter(|i| assign[i + 4] == b)
                    .map(|i| counts[i])
                    .min()
                    .unwrap();
                let max_next = (0..counts.len())
                    .filter(|i| assign[i + 4] == b + 1)
                    .map(|i| counts[i])
                    .max()
                    .unwrap();
                prop_assert!(min_b >= max_next);
            }
        }

        #[test]
        fn encode_decode_round_trip(seed in 0u64..1000) {
            let cfg = ZipfCorpusConfig { seed, pair_count: 10, ..small_cfg() };
            let c = generate_zipf_corpus(&cfg).unwrap();
            let (vocab, _) = build_vocabulary(&c.tgt).unwrap();
            for s in &c.tgt {
                let ids = vocab.encode(s);
                let back = vocab.decode(&ids);
                prop_assert_eq!(&back, s);
                prop_assert_eq!(vocab.encode(&back), ids);
            }
        }

        #[test]
        fn batches_respect_budget_and_cover_corpus(
            seed in 0u64..500,
            budget in 24usize..200,
        ) {
            let cfg = ZipfCorpusConfig { seed, pair_count: 30, len_min: 1, len_max: 9, ..small_cfg() };
            let c = generate_zipf_corpus(&cfg).unwrap();
            let (vocab, _) = build_vocabulary(&c.tgt).unwrap();
            let enc_t: Vec<Vec<u32>> = c.tgt.iter().map(|s| vocab.encode(s)).collect();
            let enc_s: Vec<Vec<u32>> = c.src.iter().map(|s| vocab.encode(s)).collect();
            let mut stream = RngStream::new(seed, StreamPurpose::Shuffle);
            let batches = batch_iterator(&enc_s, &enc_t, budget, &mut stream).unwrap();
            let mut seen = 0usize;
            for b in &batches {
                prop_assert!(b.n * b.tgt_len <= budget);
                seen += b.n;
            }
            prop_assert_eq!(seen, 30);
        }
    }
}
