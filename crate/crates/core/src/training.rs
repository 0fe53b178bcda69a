//! Label-smoothed cross-entropy, Adam with warmup scheduling, the
//! two-pass training step that mixes the translation objective with a
//! contrastive term, and the early-stopped training loop.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{
    collect_positive_sets, contrast_weights, fcl_loss, tcl_loss, ContrastiveConfig,
};
use crate::corpus::{batch_iterator, Batch, FrequencyTable, ParallelCorpus, Vocabulary};
use crate::decode::beam_search;
use crate::error::{Error, Result};
use crate::eval::{bleu, EvalConfig};
use crate::model::{
    decode_states, encode, init_model, output_distribution, save_checkpoint, ModelConfig,
    ModelParams, PassLabel,
};
use crate::rng::{RngStream, StreamPurpose};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Baseline,
    Tcl,
    Fcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.998, eps: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    /// Noam warmup. Contrastive runs fall into a state-collapse basin
    /// when peak lr arrives before the translation loss has structure;
    /// at batch 128 that means keeping this >= 600.
    pub warmup_steps: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Padded target-token budget per batch.
    pub batch_max_tokens: usize,
    /// Average the translation loss over both passes instead of taking
    /// pass 1 only.
    pub mt_on_both_passes: bool,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Beam width for the per-epoch dev decode; 1 is greedy.
    pub dev_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Baseline,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            warmup_steps: 800,
            max_epochs: 30,
            patience: 10,
            seed: 1,
            batch_max_tokens: 128,
            mt_on_both_passes: false,
            clip_norm: 5.0,
            dev_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig(format!(
                "label smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 || self.warmup_steps < 1 {
            return Err(Error::InvalidConfig("epochs and warmup must be >= 1".into()));
        }
        if self.dev_beam < 1 {
            return Err(Error::InvalidConfig("dev beam must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig(format!("clip norm {} <= 0", self.clip_norm)));
        }
        Ok(())
    }
}

// ── loss ────────────────────────────────────────────────────────────

/// Mean cross-entropy against the smoothed target: 1-eps on the gold
/// token, eps/(V-1) on every other non-padding token, nothing on the
/// padding column.
pub fn label_smoothed_ce(probs: &Tensor, gold: &[u32], eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidConfig(format!("label smoothing {eps} outside [0,1)")));
    }
    let (n, v) = (probs.rows(), probs.cols());
    if gold.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows for {} gold ids",
            n,
            gold.len()
        )));
    }
    let off = eps / (v - 1) as f64;
    let mut q = vec![0.0; n * v];
    for (i, &g) in gold.iter().enumerate() {
        let g = g as usize;
        if g >= v {
            return Err(Error::InvalidGoldId { id: g, vocab: v });
        }
        let row = &mut q[i * v..(i + 1) * v];
        if eps > 0.0 {
            for slot in row.iter_mut().skip(1) {
                *slot = off;
            }
            row[crate::corpus::PAD as usize] = 0.0;
        }
        row[g] = 1.0 - eps;
    }
    Ok(ops::scale(&ops::ln_dot_const(probs, &q)?, -1.0 / n as f64))
}

/// Inverse-square-root warmup schedule.
pub fn lr_schedule(step: u64, warmup_steps: u64, d_model: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

// ── optimizer ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> OptimizerState {
        let shapes: Vec<usize> =
            params.tensor_list().iter().map(|(_, t)| t.numel()).collect();
        OptimizerState {
            m: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            v: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step; returns the updated parameter tensors
/// in the same order.
pub fn adam_update(
    tensors: &[Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<Vec<Tensor>> {
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tensors, {} grads, {} moment slots",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut out = Vec::with_capacity(tensors.len());
    for (k, (tensor, grad)) in tensors.iter().zip(grads).enumerate() {
        if grad.len() != tensor.numel() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has {} elements, gradient {}",
                k,
                tensor.numel(),
                grad.len()
            )));
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let mut data = tensor.data().to_vec();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
        }
        out.push(Tensor::param(tensor.shape().to_vec(), data)?);
    }
    Ok(out)
}

// ── training step ───────────────────────────────────────────────────

/// Dropout generators for the two forward passes; both advance
/// independently across the whole run.
#[derive(Debug, Clone)]
pub struct DropoutStreams {
    pub pass1: RngStream,
    pub pass2: RngStream,
}

impl DropoutStreams {
    pub fn new(seed: u64) -> DropoutStreams {
        DropoutStreams {
            pass1: RngStream::new(seed, StreamPurpose::DropoutPass1),
            pass2: RngStream::new(seed, StreamPurpose::DropoutPass2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub step: u64,
    pub mt: f64,
    pub contrast: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn finite_or(step: u64, part: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { step, part })
    }
}

/// One optimization step: pass 1 under its own dropout stream always;
/// pass 2 only when a contrastive term with nonzero weight is active.
pub fn training_step(
    params: &ModelParams,
    opt: &mut OptimizerState,
    batch: &Batch,
    freq: &FrequencyTable,
    cfg: &TrainConfig,
    ccfg: &ContrastiveConfig,
    streams: &mut DropoutStreams,
) -> Result<(ModelParams, LossParts)> {
    cfg.validate()?;
    ccfg.validate()?;
    let step = opt.step + 1;
    let lr = lr_schedule(step, cfg.warmup_steps, params.config.d_model);
    let rate = params.config.dropout_rate;

    let named = params.tensor_list();
    for (_, t) in &named {
        t.zero_grad();
    }

    let enc1 = encode(params, batch, rate, &mut streams.pass1)?;
    let h1 = decode_states(params, &enc1, batch, rate, &mut streams.pass1, PassLabel::Pass1)?;
    let mut mt = label_smoothed_ce(
        &output_distribution(params, &h1)?,
        &h1.token_ids,
        cfg.label_smoothing,
    )?;

    let contrastive_on = cfg.objective != Objective::Baseline && ccfg.lambda != 0.0;
    let mut contrast_value = 0.0;
    let total = if contrastive_on {
        let enc2 = encode(params, batch, rate, &mut streams.pass2)?;
        let h2 =
            decode_states(params, &enc2, batch, rate, &mut streams.pass2, PassLabel::Pass2)?;
        if cfg.mt_on_both_passes {
            let mt2 = label_smoothed_ce(
                &output_distribution(params, &h2)?,
                &h2.token_ids,
                cfg.label_smoothing,
            )?;
            mt = ops::scale(&ops::add(&mt, &mt2)?, 0.5);
        }
        let sets = collect_positive_sets(&h1, &h2)?;
        let lc = match cfg.objective {
            Objective::Tcl => tcl_loss(&h1, &h2, &sets, ccfg)?,
            Objective::Fcl => {
                let w = contrast_weights(&h1.token_ids, freq, ccfg)?;
                fcl_loss(&h1, &h2, &sets, &w, ccfg)?
            }
            Objective::Baseline => unreachable!(),
        };
        contrast_value = lc.item();
        ops::add(&mt, &ops::scale(&lc, ccfg.lambda))?
    } else {
        mt.clone()
    };

    let mt_value = finite_or(step, "translation loss", mt.item())?;
    finite_or(step, "contrastive loss", contrast_value)?;
    let total_value = finite_or(step, "total loss", total.item())?;
    debug_assert!((total_value - (mt_value + ccfg.lambda * contrast_value)).abs() <= 1e-9
        || !contrastive_on);

    total.backward()?;

    let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut grads: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let grad_norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    finite_or(step, "gradient norm", grad_norm)?;
    if grad_norm > cfg.clip_norm {
        let s = cfg.clip_norm / grad_norm;
        for g in &mut grads {
            for gi in g.iter_mut() {
                *gi *= s;
            }
        }
    }

    let updated = adam_update(&tensors, &grads, opt, &cfg.adam, lr)?;
    let new_params = params.replace_tensors(step, updated);
    let parts = LossParts {
        step,
        mt: mt_value,
        contrast: contrast_value,
        total: total_value,
        lr,
        grad_norm,
    };
    Ok((new_params, parts))
}

// ── training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        mt: f64,
        contrast: f64,
        total: f64,
        lr: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        dev_bleu: f64,
        best: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.records {
            let line =
                serde_json::to_string(r).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn early_stop(epoch: usize, best_epoch: usize, patience: usize) -> bool {
    epoch - best_epoch >= patience
}

pub struct TrainInputs<'a> {
    pub train: &'a ParallelCorpus,
    pub dev: &'a ParallelCorpus,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    /// Target-side training counts; drives the frequency weights.
    pub freq: &'a FrequencyTable,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
    pub log: TrainLog,
}

/// Full run: init, epoch loop with per-epoch dev BLEU, early stopping,
/// and optional persistence of the best checkpoint plus the log.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ccfg: &ContrastiveConfig,
    inputs: &TrainInputs,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    ccfg.validate()?;
    if inputs.train.is_empty() || inputs.dev.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut init_stream = RngStream::new(cfg.seed, StreamPurpose::Init);
    let mut shuffle = RngStream::new(cfg.seed, StreamPurpose::Shuffle);
    let mut streams = DropoutStreams::new(cfg.seed);

    let mut params = init_model(model_cfg, &mut init_stream)?;
    let mut opt = OptimizerState::new(&params);

    let enc_side = |v: &Vocabulary, side: &[Vec<String>]| -> Vec<Vec<u32>> {
        side.iter().map(|s| v.encode(s)).collect()
    };
    let train_src = enc_side(inputs.src_vocab, &inputs.train.src);
    let train_tgt = enc_side(inputs.tgt_vocab, &inputs.train.tgt);
    let dev_src = enc_side(inputs.src_vocab, &inputs.dev.src);

    let dev_cfg = EvalConfig { beam_size: cfg.dev_beam, ..EvalConfig::default() };
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=cfg.max_epochs {
        let batches = batch_iterator(&train_src, &train_tgt, cfg.batch_max_tokens, &mut shuffle)?;
        for batch in &batches {
            let (next, parts) =
                training_step(&params, &mut opt, batch, inputs.freq, cfg, ccfg, &mut streams)?;
            params = next;
            log.records.push(LogRecord::Step {
                step: parts.step,
                epoch,
                mt: parts.mt,
                contrast: parts.contrast,
                total: parts.total,
                lr: parts.lr,
                grad_norm: parts.grad_norm,
            });
        }

        let hyps: Vec<Vec<String>> = dev_src
            .iter()
            .map(|src| Ok(inputs.tgt_vocab.decode(&beam_search(&params, src, &dev_cfg)?)))
            .collect::<Result<_>>()?;
        let dev_bleu = bleu(&hyps, &inputs.dev.tgt)?;
        let improved = best.as_ref().map_or(true, |(_, b, _)| dev_bleu > *b);
        if improved {
            best = Some((epoch, dev_bleu, params.clone()));
        }
        log.records.push(LogRecord::Epoch { epoch, dev_bleu, best: improved });

        let (best_epoch, ..) = best.as_ref().unwrap();
        if early_stop(epoch, *best_epoch, cfg.patience) {
            break;
        }
    }

    let (best_epoch, best_dev_bleu, best_params) = best.unwrap();
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        log.write(&dir.join("train.log"))?;
        save_checkpoint(&best_params, &dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome { params: best_params, best_epoch, best_dev_bleu, log })
}
