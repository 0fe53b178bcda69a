//! Token-level contrastive losses over paired decoder passes: positive
//! sets (same-token rows plus each row's dropout twin), frequency-aware
//! soft weights, and the weighted and unweighted loss computations.

use serde::{Deserialize, Serialize};

use crate::corpus::FrequencyTable;
use crate::error::{Error, Result};
use crate::model::{HiddenStateBatch, PassLabel};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqMaxMode {
    /// Max log-count over the tokens of the current batch.
    Batch,
    /// Max log-count over the whole training vocabulary.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub freq_max_mode: FreqMaxMode,
    pub weight_positives: bool,
    pub include_self_in_denominator: bool,
    /// Ablation: add the pass-2 rows (dropout twins included) to every
    /// anchor's denominator.
    pub include_pass2_in_denominator: bool,
    /// Similarity divisor; 1 leaves the cosine untouched.
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            lambda: 2.0,
            gamma: 1.4,
            freq_max_mode: FreqMaxMode::Batch,
            weight_positives: false,
            include_self_in_denominator: true,
            include_pass2_in_denominator: false,
            temperature: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} < 0", self.lambda)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("gamma {} <= 0", self.gamma)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} <= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

// ── positive sets ───────────────────────────────────────────────────

/// Per-anchor positives. The supervised set holds pass-1 indices of the
/// other rows sharing the anchor's token; the dropout positive is the
/// anchor's own pass-2 twin and always exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    pub sup: Vec<Vec<usize>>,
}

impl PositiveSets {
    pub fn n(&self) -> usize {
        self.sup.len()
    }

    /// |S_p(i)|: supervised positives plus the dropout twin.
    pub fn pos_count(&self, i: usize) -> usize {
        1 + self.sup[i].len()
    }
}

fn check_aligned(pass1: &HiddenStateBatch, pass2: &HiddenStateBatch) -> Result<()> {
    if pass1.pass_label != PassLabel::Pass1 || pass2.pass_label != PassLabel::Pass2 {
        return Err(Error::PassMisalignment(format!(
            "expected pass1/pass2, got {:?}/{:?}",
            pass1.pass_label, pass2.pass_label
        )));
    }
    if pass1.token_ids != pass2.token_ids {
        return Err(Error::PassMisalignment("token ids differ between passes".into()));
    }
    if pass1.states.shape() != pass2.states.shape() {
        return Err(Error::PassMisalignment(format!(
            "state shapes differ: {:?} vs {:?}",
            pass1.states.shape(),
            pass2.states.shape()
        )));
    }
    if pass1.states.rows() != pass1.token_ids.len() {
        return Err(Error::PassMisalignment(format!(
            "{} state rows for {} tokens",
            pass1.states.rows(),
            pass1.token_ids.len()
        )));
    }
    Ok(())
}

pub fn collect_positive_sets(
    pass1: &HiddenStateBatch,
    pass2: &HiddenStateBatch,
) -> Result<PositiveSets> {
    check_aligned(pass1, pass2)?;
    let ids = &pass1.token_ids;
    let sup = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            ids.iter()
                .enumerate()
                .filter(|(j, other)| *j != i && *other == id)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    Ok(PositiveSets { sup })
}

// ── frequency scores and soft weights ───────────────────────────────

/// Rarity score in [0,1]: 0 for the most frequent token, 1 for counts of
/// one. The log-ratio form makes the base irrelevant.
pub fn frequency_score(count: u64, max_log_count: f64) -> f64 {
    if max_log_count == 0.0 {
        return 1.0;
    }
    1.0 - (count.max(1) as f64).ln() / max_log_count
}

pub fn batch_max_log_count(token_ids: &[u32], freq: &FrequencyTable) -> f64 {
    token_ids
        .iter()
        .map(|&id| (freq.clamped_count(id) as f64).ln())
        .fold(0.0, f64::max)
}

pub fn corpus_max_log_count(freq: &FrequencyTable) -> f64 {
    freq.counts()
        .iter()
        .map(|&c| (c.max(1) as f64).ln())
        .fold(0.0, f64::max)
}

pub fn frequency_scores(
    token_ids: &[u32],
    freq: &FrequencyTable,
    cfg: &ContrastiveConfig,
) -> Vec<f64> {
    let max_log = match cfg.freq_max_mode {
        FreqMaxMode::Batch => batch_max_log_count(token_ids, freq),
        FreqMaxMode::Corpus => corpus_max_log_count(freq),
    };
    token_ids
        .iter()
        .map(|&id| frequency_score(freq.count(id), max_log))
        .collect()
}

/// N x N soft weights plus the per-anchor raw negative means recorded
/// before normalization.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub n: usize,
    values: Vec<f64>,
    pub raw_negative_means: Vec<f64>,
}

impl WeightMatrix {
    pub fn unit(n: usize) -> WeightMatrix {
        WeightMatrix {
            n,
            values: vec![1.0; n * n],
            raw_negative_means: vec![0.0; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Build the weight matrix from per-row rarity scores. Each anchor's raw
/// products over its negatives (rows with a different token) are divided
/// by their mean and scaled by gamma, so the negative mean lands exactly
/// on gamma; an all-zero row of raw products falls back to plain ones.
pub fn weights_from_scores(
    scores: &[f64],
    token_ids: &[u32],
    cfg: &ContrastiveConfig,
) -> Result<WeightMatrix> {
    cfg.validate()?;
    let n = token_ids.len();
    if scores.len() != n {
        return Err(Error::WeightShapeMismatch { got: vec![scores.len()], want: vec![n] });
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "soft weights need at least 2 rows, got {}",
            n
        )));
    }
    let mut values = vec![1.0; n * n];
    let mut raw_means = vec![0.0; n];
    for i in 0..n {
        let negatives: Vec<usize> =
            (0..n).filter(|&j| token_ids[j] != token_ids[i]).collect();
        if negatives.is_empty() {
            continue;
        }
        let raw_sum: f64 = negatives.iter().map(|&j| scores[i] * scores[j]).sum();
        let mean = raw_sum / negatives.len() as f64;
        raw_means[i] = mean;
        let weight_of = |j: usize| {
            if mean == 0.0 {
                1.0
            } else {
                scores[i] * scores[j] / mean * cfg.gamma
            }
        };
        for &j in &negatives {
            values[i * n + j] = weight_of(j);
        }
        if cfg.weight_positives {
            for j in 0..n {
                if token_ids[j] == token_ids[i] {
                    values[i * n + j] = weight_of(j);
                }
            }
        }
    }
    Ok(WeightMatrix { n, values, raw_negative_means: raw_means })
}

/// Frequency-aware weights for a batch of gold token ids.
pub fn contrast_weights(
    token_ids: &[u32],
    freq: &FrequencyTable,
    cfg: &ContrastiveConfig,
) -> Result<WeightMatrix> {
    let scores = frequency_scores(token_ids, freq, cfg);
    weights_from_scores(&scores, token_ids, cfg)
}

// ── losses ──────────────────────────────────────────────────────────

/// Shared core of both losses:
///   L = -(1/N) sum_i sum_{p in S_p(i)} log( e^{sim(i,p)} / D_i ),
///   D_i = sum_j m(i,j) e^{sim11(i,j)}   (+ pass-2 terms when enabled)
/// with sim the (temperature-scaled) cosine. The dropout positive sits
/// only in the numerator under the default flags.
fn contrastive_core(
    pass1: &HiddenStateBatch,
    pass2: &HiddenStateBatch,
    sets: &PositiveSets,
    weights: Option<&WeightMatrix>,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_aligned(pass1, pass2)?;
    let n = pass1.token_ids.len();
    if sets.n() != n {
        return Err(Error::PassMisalignment(format!(
            "positive sets cover {} anchors, batch has {}",
            sets.n(),
            n
        )));
    }
    if let Some(w) = weights {
        if w.n != n || w.values.len() != n * n {
            return Err(Error::WeightShapeMismatch {
                got: vec![w.n, w.n],
                want: vec![n, n],
            });
        }
    }

    let inv_t = 1.0 / cfg.temperature;
    let h1 = &pass1.states;
    let h2 = &pass2.states;

    let sim11 = ops::scale(&ops::cosine_sim_matrix(h1, h1)?, inv_t);
    let e11 = ops::exp_elem(&sim11);

    let mut denom_mult: Vec<f64> = match weights {
        Some(w) => w.values.clone(),
        None => vec![1.0; n * n],
    };
    if !cfg.include_self_in_denominator {
        for i in 0..n {
            denom_mult[i * n + i] = 0.0;
        }
    }
    let mut den = ops::row_sum(&ops::mul_const(&e11, &denom_mult)?);
    if cfg.include_pass2_in_denominator {
        let sim12 = ops::scale(&ops::cosine_sim_matrix(h1, h2)?, inv_t);
        let mult2: Vec<f64> = match weights {
            Some(w) => w.values.clone(),
            None => vec![1.0; n * n],
        };
        let den2 = ops::row_sum(&ops::mul_const(&ops::exp_elem(&sim12), &mult2)?);
        den = ops::add(&den, &den2)?;
    }
    let log_den = ops::ln_elem(&den)?;

    // Numerator similarities: each anchor's dropout twin plus its
    // supervised positives from pass 1.
    let sim_drop = ops::scale(&ops::cosine_sim_pairs(h1, h2)?, inv_t);
    let mut sup_mask = vec![0.0; n * n];
    let mut pos_counts = vec![0.0; n];
    for i in 0..n {
        pos_counts[i] = sets.pos_count(i) as f64;
        for &j in &sets.sup[i] {
            sup_mask[i * n + j] = 1.0;
        }
    }
    let numer = ops::add(
        &ops::sum_all(&sim_drop),
        &ops::dot_const(&sim11, &sup_mask)?,
    )?;
    let denom_term = ops::dot_const(&log_den, &pos_counts)?;
    Ok(ops::scale(&ops::sub(&denom_term, &numer)?, 1.0 / n as f64))
}

/// Unweighted token-level contrastive loss.
pub fn tcl_loss(
    pass1: &HiddenStateBatch,
    pass2: &HiddenStateBatch,
    sets: &PositiveSets,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    contrastive_core(pass1, pass2, sets, None, cfg)
}

/// Frequency-weighted contrastive loss; reduces to `tcl_loss` when every
/// weight is one.
pub fn fcl_loss(
    pass1: &HiddenStateBatch,
    pass2: &HiddenStateBatch,
    sets: &PositiveSets,
    weights: &WeightMatrix,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    contrastive_core(pass1, pass2, sets, Some(weights), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamPurpose};
    use crate::tensor::grad_check_multi;
    use proptest::prelude::*;

    fn hsb(states: Tensor, ids: &[u32], label: PassLabel) -> HiddenStateBatch {
        HiddenStateBatch { states, token_ids: ids.to_vec(), pass_label: label }
    }

    fn random_pair(ids: &[u32], d: usize, seed: u64) -> (HiddenStateBatch, HiddenStateBatch) {
        let n = ids.len();
        let mut s = RngStream::new(seed, StreamPurpose::Init);
        let mut mk = || -> Vec<f64> { (0..n * d).map(|_| s.uniform(-1.0, 1.0)).collect() };
        let a = mk();
        let b = mk();
        (
            hsb(Tensor::from_vec(vec![n, d], a).unwrap(), ids, PassLabel::Pass1),
            hsb(Tensor::from_vec(vec![n, d], b).unwrap(), ids, PassLabel::Pass2),
        )
    }

    fn freq_with_counts(pairs: &[(u32, u64)]) -> FrequencyTable {
        let max_id = pairs.iter().map(|p| p.0).max().unwrap_or(0) as usize;
        let mut counts = vec![0u64; max_id + 1];
        for &(id, c) in pairs {
            counts[id as usize] = c;
        }
        FrequencyTable::new(counts)
    }

    // ── positive sets ───────────────────────────────────────

    #[test]
    fn repeated_tokens_become_supervised_positives() {
        let (p1, p2) = random_pair(&[7, 8, 7], 4, 1);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        assert_eq!(sets.sup, vec![vec![2], vec![], vec![0]]);
        assert_eq!(sets.pos_count(0), 2);
        assert_eq!(sets.pos_count(1), 1);
    }

    #[test]
    fn distinct_tokens_keep_only_dropout_twin() {
        let (p1, p2) = random_pair(&[4, 5, 6, 7], 4, 2);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        for i in 0..4 {
            assert!(sets.sup[i].is_empty());
            assert_eq!(sets.pos_count(i), 1);
        }
    }

    #[test]
    fn misaligned_passes_rejected() {
        let (p1, p2) = random_pair(&[4, 5], 4, 3);
        let mut wrong_ids = p2.clone();
        wrong_ids.token_ids = vec![5, 4];
        assert!(matches!(
            collect_positive_sets(&p1, &wrong_ids),
            Err(Error::PassMisalignment(_))
        ));
        // Two pass-1 batches are not a pass pair.
        assert!(matches!(
            collect_positive_sets(&p1, &p1),
            Err(Error::PassMisalignment(_))
        ));
    }

    // ── frequency scores ────────────────────────────────────

    #[test]
    fn score_endpoints() {
        let max_log = 100f64.ln();
        assert_eq!(frequency_score(100, max_log), 0.0);
        assert_eq!(frequency_score(1, max_log), 1.0);
        assert!((frequency_score(10, max_log) - 0.5).abs() < 1e-12);
        // Degenerate batch where every count is one.
        assert_eq!(frequency_score(1, 0.0), 1.0);
        assert_eq!(frequency_score(0, max_log), 1.0);
    }

    #[test]
    fn scores_follow_batch_max() {
        let freq = freq_with_counts(&[(4, 100), (5, 10)]);
        let cfg = ContrastiveConfig::default();
        let scores = frequency_scores(&[4, 5], &freq, &cfg);
        assert_eq!(scores[0], 0.0);
        assert!((scores[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corpus_mode_uses_global_max() {
        let freq = freq_with_counts(&[(4, 100), (5, 10), (6, 10_000)]);
        let cfg = ContrastiveConfig {
            freq_max_mode: FreqMaxMode::Corpus,
            ..ContrastiveConfig::default()
        };
        // Token 6 is absent from the batch but still sets the scale.
        let scores = frequency_scores(&[4, 5], &freq, &cfg);
        assert!((scores[0] - 0.5).abs() < 1e-12);
        assert!((scores[1] - 0.75).abs() < 1e-12);
    }

    // ── soft weights ────────────────────────────────────────

    #[test]
    fn hand_worked_weight_row() {
        let cfg = ContrastiveConfig::default();
        let w = weights_from_scores(&[0.0, 0.5, 0.75], &[10, 11, 12], &cfg).unwrap();
        assert!((w.raw_negative_means[1] - 0.1875).abs() < 1e-12);
        assert_eq!(w.get(1, 0), 0.0);
        assert_eq!(w.get(1, 1), 1.0);
        assert!((w.get(1, 2) - 2.8).abs() < 1e-12);
    }

    #[test]
    fn uniform_counts_fall_back_to_unit_weights() {
        let freq = freq_with_counts(&[(4, 7), (5, 7), (6, 7)]);
        let cfg = ContrastiveConfig { gamma: 1.0, ..ContrastiveConfig::default() };
        let w = contrast_weights(&[4, 5, 6], &freq, &cfg).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_token_batch_keeps_unit_row() {
        let freq = freq_with_counts(&[(4, 3), (5, 9)]);
        let cfg = ContrastiveConfig::default();
        let w = contrast_weights(&[4, 4, 4], &freq, &cfg).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn too_small_batch_rejected() {
        let cfg = ContrastiveConfig::default();
        assert!(weights_from_scores(&[1.0], &[4], &cfg).is_err());
        assert!(weights_from_scores(&[1.0, 0.5], &[4], &cfg).is_err());
    }

    #[test]
    fn negative_mean_lands_on_gamma() {
        let freq = freq_with_counts(&[(4, 80), (5, 13), (6, 2), (7, 40)]);
        let cfg = ContrastiveConfig::default();
        let ids = [4u32, 5, 6, 7, 5, 4];
        let w = contrast_weights(&ids, &freq, &cfg).unwrap();
        for i in 0..ids.len() {
            let negs: Vec<usize> =
                (0..ids.len()).filter(|&j| ids[j] != ids[i]).collect();
            if w.raw_negative_means[i] == 0.0 {
                continue;
            }
            let mean: f64 =
                negs.iter().map(|&j| w.get(i, j)).sum::<f64>() / negs.len() as f64;
            assert!((mean - cfg.gamma).abs() < 1e-9, "anchor {i} mean {mean}");
        }
    }

    // ── losses ──────────────────────────────────────────────

    #[test]
    fn two_identical_unit_states_give_log_two() {
        let states = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let p1 = hsb(states.clone(), &[4, 5], PassLabel::Pass1);
        let p2 = hsb(states, &[4, 5], PassLabel::Pass2);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let loss = tcl_loss(&p1, &p2, &sets, &ContrastiveConfig::default()).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-12);
    }

    /// Direct three-loop evaluation of the loss definition.
    fn oracle_loss(
        h1: &[f64],
        h2: &[f64],
        ids: &[u32],
        d: usize,
        weights: Option<&WeightMatrix>,
        cfg: &ContrastiveConfig,
    ) -> f64 {
        let n = ids.len();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb) / cfg.temperature
        };
        fn row(h: &[f64], i: usize, d: usize) -> &[f64] {
            &h[i * d..(i + 1) * d]
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                let w = match weights {
                    Some(w) => w.get(i, j),
                    None => 1.0,
                };
                let w = if i == j && !cfg.include_self_in_denominator { 0.0 } else { w };
                den += w * cos(row(h1, i, d), row(h1, j, d)).exp();
            }
            if cfg.include_pass2_in_denominator {
                for j in 0..n {
                    let w = match weights {
                        Some(w) => w.get(i, j),
                        None => 1.0,
                    };
                    den += w * cos(row(h1, i, d), row(h2, j, d)).exp();
                }
            }
            // Dropout twin.
            total -= (cos(row(h1, i, d), row(h2, i, d)).exp() / den).ln();
            for j in 0..n {
                if j != i && ids[j] == ids[i] {
                    total -= (cos(row(h1, i, d), row(h1, j, d)).exp() / den).ln();
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn tcl_matches_triple_loop_oracle() {
        let ids = [4u32, 5, 4, 6, 5, 7];
        let (p1, p2) = random_pair(&ids, 8, 11);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let cfg = ContrastiveConfig::default();
        let loss = tcl_loss(&p1, &p2, &sets, &cfg).unwrap().item();
        let want = oracle_loss(p1.states.data(), p2.states.data(), &ids, 8, None, &cfg);
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn fcl_matches_triple_loop_oracle() {
        let ids = [4u32, 5, 4, 6, 5, 7];
        let freq = freq_with_counts(&[(4, 1000), (5, 50), (6, 3), (7, 400)]);
        let cfg = ContrastiveConfig::default();
        let (p1, p2) = random_pair(&ids, 8, 13);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let w = contrast_weights(&ids, &freq, &cfg).unwrap();
        let loss = fcl_loss(&p1, &p2, &sets, &w, &cfg).unwrap().item();
        let want = oracle_loss(p1.states.data(), p2.states.data(), &ids, 8, Some(&w), &cfg);
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn unit_weights_reproduce_tcl_exactly() {
        let ids = [4u32, 5, 4, 6];
        let (p1, p2) = random_pair(&ids, 8, 17);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let cfg = ContrastiveConfig::default();
        let t = tcl_loss(&p1, &p2, &sets, &cfg).unwrap().item();
        let f = fcl_loss(&p1, &p2, &sets, &WeightMatrix::unit(4), &cfg).unwrap().item();
        assert_eq!(t.to_bits(), f.to_bits());
    }

    #[test]
    fn ablation_flags_move_the_denominator() {
        let ids = [4u32, 5, 6];
        let (p1, p2) = random_pair(&ids, 8, 19);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let base = tcl_loss(&p1, &p2, &sets, &ContrastiveConfig::default()).unwrap().item();
        let no_self = tcl_loss(
            &p1,
            &p2,
            &sets,
            &ContrastiveConfig {
                include_self_in_denominator: false,
                ..ContrastiveConfig::default()
            },
        )
        .unwrap()
        .item();
        let with_pass2 = tcl_loss(
            &p1,
            &p2,
            &sets,
            &ContrastiveConfig {
                include_pass2_in_denominator: true,
                ..ContrastiveConfig::default()
            },
        )
        .unwrap()
        .item();
        assert!(no_self < base, "removing the self term shrinks denominators");
        assert!(with_pass2 > base, "extra pass-2 rows grow denominators");
    }

    #[test]
    fn weight_shape_mismatch_rejected() {
        let ids = [4u32, 5, 6];
        let (p1, p2) = random_pair(&ids, 8, 23);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let w = WeightMatrix::unit(4);
        assert!(matches!(
            fcl_loss(&p1, &p2, &sets, &w, &ContrastiveConfig::default()),
            Err(Error::WeightShapeMismatch { .. })
        ));
    }

    #[test]
    fn raising_a_negative_weight_raises_the_loss() {
        let ids = [4u32, 5, 6, 7];
        let (p1, p2) = random_pair(&ids, 8, 29);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        let cfg = ContrastiveConfig::default();
        let mut w = WeightMatrix::unit(4);
        let before = fcl_loss(&p1, &p2, &sets, &w, &cfg).unwrap().item();
        w.values[2] += 0.5;
        let after = fcl_loss(&p1, &p2, &sets, &w, &cfg).unwrap().item();
        assert!(after > before);
    }

    #[test]
    fn zero_norm_state_row_rejected() {
        let h1 = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let h2 = Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap();
        let p1 = hsb(h1, &[4, 5], PassLabel::Pass1);
        let p2 = hsb(h2, &[4, 5], PassLabel::Pass2);
        let sets = collect_positive_sets(&p1, &p2).unwrap();
        assert!(matches!(
            tcl_loss(&p1, &p2, &sets, &ContrastiveConfig::default()),
            Err(Error::ZeroNormRow(1))
        ));
    }

    #[test]
    fn losses_pass_gradient_check() {
        let ids = [4u32, 5, 4, 6, 5, 7];
        let freq = freq_with_counts(&[(4, 1000), (5, 50), (6, 3), (7, 400)]);
        let cfg = ContrastiveConfig::default();
        let w = contrast_weights(&ids, &freq, &cfg).unwrap();
        let (p1, p2) = random_pair(&ids, 8, 31);
        for weighted in [false, true] {
            let w = w.clone();
            let cfg = cfg.clone();
            let ids = ids;
            let report = grad_check_multi(
                |xs| {
                    let a = hsb(xs[0].clone(), &ids, PassLabel::Pass1);
                    let b = hsb(xs[1].clone(), &ids, PassLabel::Pass2);
                    let sets = collect_positive_sets(&a, &b)?;
                    if weighted {
                        fcl_loss(&a, &b, &sets, &w, &cfg)
                    } else {
                        tcl_loss(&a, &b, &sets, &cfg)
                    }
                },
                &[p1.states.clone(), p2.states.clone()],
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "weighted={} rel err {}",
                weighted,
                report.max_rel_err
            );
        }
    }

    proptest! {
        #[test]
        fn every_anchor_keeps_a_positive(
            raw_ids in proptest::collection::vec(4u32..12, 2..20),
            seed in 0u64..100,
        ) {
            let (p1, p2) = random_pair(&raw_ids, 6, seed);
            let sets = collect_positive_sets(&p1, &p2).unwrap();
            for i in 0..raw_ids.len() {
                prop_assert!(sets.pos_count(i) >= 1);
            }
        }

        #[test]
        fn weight_matrix_nonnegative_with_gamma_mean(
            counts in proptest::collection::vec(1u64..5000, 4..10),
            seed in 0u64..50,
        ) {
            let n = counts.len();
            let mut s = RngStream::new(seed, StreamPurpose::Shuffle);
            let ids: Vec<u32> = (0..n).map(|_| 4 + s.below(n) as u32).collect();
            let pairs: Vec<(u32, u64)> =
                ids.iter().zip(&counts).map(|(&i, &c)| (i, c)).collect();
            let freq = freq_with_counts(&pairs);
            let cfg = ContrastiveConfig::default();
            let w = contrast_weights(&ids, &freq, &cfg).unwrap();
            for v in w.values() {
                prop_assert!(*v >= 0.0);
            }
            for i in 0..n {
                let negs: Vec<usize> =
                    (0..n).filter(|&j| ids[j] != ids[i]).collect();
                if negs.is_empty() {
                    continue;
                }
                let mean: f64 =
                    negs.iter().map(|&j| w.get(i, j)).sum::<f64>() / negs.len() as f64;
                if w.raw_negative_means[i] == 0.0 {
                    prop_assert_eq!(mean, 1.0);
                } else {
                    prop_assert!((mean - cfg.gamma).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn losses_are_permutation_equivariant(seed in 0u64..50) {
            let ids = [4u32, 5, 4, 6, 7, 5];
            let n = ids.len();
            let d = 8;
            let (p1, p2) = random_pair(&ids, d, seed);
            let freq = freq_with_counts(&[(4, 900), (5, 33), (6, 5), (7, 120)]);
            let cfg = ContrastiveConfig::default();
            let sets = collect_positive_sets(&p1, &p2).unwrap();
            let w = contrast_weights(&ids, &freq, &cfg).unwrap();
            let base_t = tcl_loss(&p1, &p2, &sets, &cfg).unwrap().item();
            let base_f = fcl_loss(&p1, &p2, &sets, &w, &cfg).unwrap().item();

            let mut perm: Vec<usize> = (0..n).collect();
            let mut stream = RngStream::new(seed + 1, StreamPurpose::Shuffle);
            stream.shuffle(&mut perm);
            let permute = |h: &Tensor| {
                let mut data = Vec::with_capacity(n * d);
                for &p in &perm {
                    data.extend_from_slice(&h.data()[p * d..(p + 1) * d]);
                }
                Tensor::from_vec(vec![n, d], data).unwrap()
            };
            let pids: Vec<u32> = perm.iter().map(|&p| ids[p]).collect();
            let q1 = hsb(permute(&p1.states), &pids, PassLabel::Pass1);
            let q2 = hsb(permute(&p2.states), &pids, PassLabel::Pass2);
            let psets = collect_positive_sets(&q1, &q2).unwrap();
            let pw = contrast_weights(&pids, &freq, &cfg).unwrap();
            let perm_t = tcl_loss(&q1, &q2, &psets, &cfg).unwrap().item();
            let perm_f = fcl_loss(&q1, &q2, &psets, &pw, &cfg).unwrap().item();
            prop_assert!((base_t - perm_t).abs() < 1e-12);
            prop_assert!((base_f - perm_f).abs() < 1e-12);
        }

        #[test]
        fn losses_ignore_positive_row_rescaling(
            seed in 0u64..50,
            scale_exp in -3i32..4,
        ) {
            let ids = [4u32, 5, 4, 6];
            let (p1, p2) = random_pair(&ids, 8, seed);
            let cfg = ContrastiveConfig::default();
            let sets = collect_positive_sets(&p1, &p2).unwrap();
            let base = tcl_loss(&p1, &p2, &sets, &cfg).unwrap().item();
            // Rescale one row of pass 1 by a positive factor.
            let c = 10f64.powi(scale_exp);
            let mut data = p1.states.data().to_vec();
            for v in &mut data[8..16] {
                *v *= c;
            }
            let q1 = hsb(Tensor::from_vec(vec![4, 8], data).unwrap(), &ids, PassLabel::Pass1);
            let scaled = tcl_loss(&q1, &p2, &sets, &cfg).unwrap().item();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
