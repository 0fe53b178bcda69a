//! Compact transformer encoder-decoder. The target embedding doubles as
//! the softmax matrix when tied (the default), so both uses share one
//! storage location and one gradient accumulation point.

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, PAD};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::ops::{self, AttnSpan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub tie_softmax: bool,
    /// Pre-norm residual blocks train more stably at this scale than the
    /// classic post-norm arrangement; post-norm stays available.
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            dropout_rate: 0.1,
            src_vocab: 204,
            tgt_vocab: 204,
            max_len: 256,
            tie_softmax: true,
            pre_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("zero-size layer stack".into()));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::InvalidConfig("vocabulary smaller than reserved block".into()));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len < 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct NormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncLayer {
    pub attn: AttentionWeights,
    pub norm1: NormWeights,
    pub ffn: FfnWeights,
    pub norm2: NormWeights,
}

#[derive(Debug, Clone)]
pub struct DecLayer {
    pub self_attn: AttentionWeights,
    pub norm1: NormWeights,
    pub cross_attn: AttentionWeights,
    pub norm2: NormWeights,
    pub ffn: FfnWeights,
    pub norm3: NormWeights,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub step: u64,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    /// Separate softmax matrix; `None` when tied to the target embedding.
    pub w_s: Option<Tensor>,
    pub enc_layers: Vec<EncLayer>,
    pub dec_layers: Vec<DecLayer>,
    pub enc_final: NormWeights,
    pub dec_final: NormWeights,
}

const LAYER_NORM_EPS: f64 = 1e-6;

// ── parameter bookkeeping ───────────────────────────────────────────

enum InitKind {
    /// Uniform in [-r, r].
    Uniform(f64),
    Ones,
    Zeros,
}

/// Canonical tensor layout: (name, shape, init). Construction, listing,
/// checkpointing, and optimizer traversal all follow this one order.
fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = cfg.d_model;
    let embed_r = (3.0 / d as f64).sqrt();
    let proj_r = (6.0 / (2 * d) as f64).sqrt();
    let ffn1_r = (6.0 / (d + cfg.d_ff) as f64).sqrt();

    let mut out: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
    out.push(("src_embed".into(), vec![cfg.src_vocab, d], InitKind::Uniform(embed_r)));
    out.push(("tgt_embed".into(), vec![cfg.tgt_vocab, d], InitKind::Uniform(embed_r)));
    if !cfg.tie_softmax {
        out.push(("w_s".into(), vec![cfg.tgt_vocab, d], InitKind::Uniform(embed_r)));
    }
    let attn = |out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: String| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![d, d], InitKind::Uniform(proj_r)));
            out.push((format!("{prefix}.{}", w.replace('w', "b")), vec![d], InitKind::Zeros));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, InitKind)>, name: String| {
        out.push((format!("{name}.gain"), vec![d], InitKind::Ones));
        out.push((format!("{name}.bias"), vec![d], InitKind::Zeros));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: String| {
        out.push((format!("{prefix}.w1"), vec![d, cfg.d_ff], InitKind::Uniform(ffn1_r)));
        out.push((format!("{prefix}.b1"), vec![cfg.d_ff], InitKind::Zeros));
        out.push((format!("{prefix}.w2"), vec![cfg.d_ff, d], InitKind::Uniform(ffn1_r)));
        out.push((format!("{prefix}.b2"), vec![d], InitKind::Zeros));
    };
    for i in 0..cfg.n_enc_layers {
        attn(&mut out, format!("enc.{i}.attn"));
        norm(&mut out, format!("enc.{i}.norm1"));
        ffn(&mut out, format!("enc.{i}.ffn"));
        norm(&mut out, format!("enc.{i}.norm2"));
    }
    for i in 0..cfg.n_dec_layers {
        attn(&mut out, format!("dec.{i}.self"));
        norm(&mut out, format!("dec.{i}.norm1"));
        attn(&mut out, format!("dec.{i}.cross"));
        norm(&mut out, format!("dec.{i}.norm2"));
        ffn(&mut out, format!("dec.{i}.ffn"));
        norm(&mut out, format!("dec.{i}.norm3"));
    }
    norm(&mut out, "enc_final".into());
    norm(&mut out, "dec_final".into());
    out
}

impl ModelParams {
    /// Assemble the parameter struct from tensors in canonical order.
    fn from_tensors(cfg: ModelConfig, step: u64, tensors: Vec<Tensor>) -> ModelParams {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor list matches layout");
        let src_embed = next();
        let tgt_embed = next();
        let w_s = if cfg.tie_softmax { None } else { Some(next()) };
        let attn = |next: &mut dyn FnMut() -> Tensor| AttentionWeights {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
        };
        let norm = |next: &mut dyn FnMut() -> Tensor| NormWeights {
            gain: next(),
            bias: next(),
        };
        let ffn = |next: &mut dyn FnMut() -> Tensor| FfnWeights {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|_| EncLayer {
                attn: attn(&mut next),
                norm1: norm(&mut next),
                ffn: ffn(&mut next),
                norm2: norm(&mut next),
            })
            .collect();
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|_| DecLayer {
                self_attn: attn(&mut next),
                norm1: norm(&mut next),
                cross_attn: attn(&mut next),
                norm2: norm(&mut next),
                ffn: ffn(&mut next),
                norm3: norm(&mut next),
            })
            .collect();
        let enc_final = norm(&mut next);
        let dec_final = norm(&mut next);
        assert!(it.next().is_none(), "extra tensors beyond layout");
        ModelParams {
            config: cfg,
            step,
            src_embed,
            tgt_embed,
            w_s,
            enc_layers,
            dec_layers,
            enc_final,
            dec_final,
        }
    }

    /// All parameter tensors in canonical order, paired with their names.
    pub fn tensor_list(&self) -> Vec<(String, Tensor)> {
        let names = tensor_layout(&self.config);
        let tensors = self.collect_tensors();
        debug_assert_eq!(names.len(), tensors.len());
        names
            .into_iter()
            .map(|(n, _, _)| n)
            .zip(tensors)
            .collect()
    }

    fn collect_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        out.push(self.src_embed.clone());
        out.push(self.tgt_embed.clone());
        if let Some(ws) = &self.w_s {
            out.push(ws.clone());
        }
        let attn = |out: &mut Vec<Tensor>, a: &AttentionWeights| {
            out.extend(
                [&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo]
                    .into_iter()
                    .cloned(),
            );
        };
        let norm = |out: &mut Vec<Tensor>, n: &NormWeights| {
            out.push(n.gain.clone());
            out.push(n.bias.clone());
        };
        let ffn = |out: &mut Vec<Tensor>, f: &FfnWeights| {
            out.extend([&f.w1, &f.b1, &f.w2, &f.b2].into_iter().cloned());
        };
        for l in &self.enc_layers {
            attn(&mut out, &l.attn);
            norm(&mut out, &l.norm1);
            ffn(&mut out, &l.ffn);
            norm(&mut out, &l.norm2);
        }
        for l in &self.dec_layers {
            attn(&mut out, &l.self_attn);
            norm(&mut out, &l.norm1);
            attn(&mut out, &l.cross_attn);
            norm(&mut out, &l.norm2);
            ffn(&mut out, &l.ffn);
            norm(&mut out, &l.norm3);
        }
        norm(&mut out, &self.enc_final);
        norm(&mut out, &self.dec_final);
        out
    }

    /// Rebuild with replacement tensors (canonical order), keeping config.
    pub fn replace_tensors(&self, step: u64, tensors: Vec<Tensor>) -> ModelParams {
        ModelParams::from_tensors(self.config.clone(), step, tensors)
    }

    /// The matrix multiplying decoder states into logits.
    pub fn softmax_matrix(&self) -> &Tensor {
        self.w_s.as_ref().unwrap_or(&self.tgt_embed)
    }
}

/// Deterministic initialization: uniform draws in canonical tensor order
/// from the given stream; norm gains start at one, biases at zero.
pub fn init_model(cfg: &ModelConfig, stream: &mut RngStream) -> Result<ModelParams> {
    cfg.validate()?;
    let tensors = tensor_layout(cfg)
        .into_iter()
        .map(|(_, shape, kind)| {
            let numel: usize = shape.iter().product();
            let data = match kind {
                InitKind::Uniform(r) => (0..numel).map(|_| stream.uniform(-r, r)).collect(),
                InitKind::Ones => vec![1.0; numel],
                InitKind::Zeros => vec![0.0; numel],
            };
            Tensor::param(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams::from_tensors(cfg.clone(), 0, tensors))
}

// ── forward passes ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassLabel {
    Pass1,
    Pass2,
}

/// Last-layer decoder states restricted to real target positions, one
/// row per predicted token; row i's gold token is `token_ids[i]`.
#[derive(Debug, Clone)]
pub struct HiddenStateBatch {
    pub states: Tensor,
    pub token_ids: Vec<u32>,
    pub pass_label: PassLabel,
}

#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub states: Tensor,
    pub n: usize,
    pub src_len: usize,
    pub valid: Vec<bool>,
}

fn sinusoidal_rows(positions: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * d);
    for &t in positions {
        for j in 0..d {
            let exponent = (2 * (j / 2)) as f64 / d as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

fn embed_positions(
    embed: &Tensor,
    ids: &[u32],
    seq_len: usize,
    max_len: usize,
    rate: f64,
    stream: &mut RngStream,
) -> Result<Tensor> {
    if seq_len > max_len {
        return Err(Error::ShapeMismatch(format!(
            "sequence length {} exceeds max_len {}",
            seq_len, max_len
        )));
    }
    let d = embed.cols();
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let x = ops::scale(&ops::gather_rows(embed, &idx)?, (d as f64).sqrt());
    let positions: Vec<usize> = (0..ids.len()).map(|r| r % seq_len).collect();
    let pos = Tensor::from_vec(vec![ids.len(), d], sinusoidal_rows(&positions, d))?;
    dropout_apply_checked(&ops::add(&x, &pos)?, rate, stream)
}

fn dropout_apply_checked(x: &Tensor, rate: f64, stream: &mut RngStream) -> Result<Tensor> {
    ops::dropout_apply(x, rate, stream)
}

fn attn_block(
    w: &AttentionWeights,
    x_q: &Tensor,
    x_kv: &Tensor,
    heads: usize,
    spans: &[AttnSpan],
    causal: bool,
    kv_valid: Option<&[bool]>,
) -> Result<Tensor> {
    let q = ops::add_bias(&ops::matmul(x_q, &w.wq)?, &w.bq)?;
    let k = ops::add_bias(&ops::matmul(x_kv, &w.wk)?, &w.bk)?;
    let v = ops::add_bias(&ops::matmul(x_kv, &w.wv)?, &w.bv)?;
    let a = ops::attention(&q, &k, &v, heads, spans, causal, kv_valid)?;
    ops::add_bias(&ops::matmul(&a, &w.wo)?, &w.bo)
}

fn ffn_block(f: &FfnWeights, x: &Tensor) -> Result<Tensor> {
    let h = ops::relu(&ops::add_bias(&ops::matmul(x, &f.w1)?, &f.b1)?);
    ops::add_bias(&ops::matmul(&h, &f.w2)?, &f.b2)
}

fn norm_block(n: &NormWeights, x: &Tensor) -> Result<Tensor> {
    ops::layer_norm(x, &n.gain, &n.bias, LAYER_NORM_EPS)
}

/// Residual sublayer in either arrangement. `core` runs on the normalized
/// input under pre-norm and on the raw input under post-norm.
fn sublayer(
    pre_norm: bool,
    norm: &NormWeights,
    x: &Tensor,
    rate: f64,
    stream: &mut RngStream,
    core: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if pre_norm {
        let h = core(&norm_block(norm, x)?)?;
        ops::add(x, &dropout_apply_checked(&h, rate, stream)?)
    } else {
        let h = core(x)?;
        norm_block(norm, &ops::add(x, &dropout_apply_checked(&h, rate, stream)?)?)
    }
}

/// Encoder stack over the padded source matrix. PAD key positions are
/// masked out of every attention; their output rows are never consumed.
pub fn encode(
    params: &ModelParams,
    batch: &Batch,
    rate: f64,
    stream: &mut RngStream,
) -> Result<EncoderStates> {
    let cfg = &params.config;
    let (n, ts) = (batch.n, batch.src_len);
    let valid: Vec<bool> = batch.src.iter().map(|&t| t != PAD).collect();
    let spans: Vec<AttnSpan> = (0..n)
        .map(|b| AttnSpan { q_off: b * ts, q_len: ts, kv_off: b * ts, kv_len: ts })
        .collect();

    let mut x = embed_positions(&params.src_embed, &batch.src, ts, cfg.max_len, rate, stream)?;
    for layer in &params.enc_layers {
        x = sublayer(cfg.pre_norm, &layer.norm1, &x, rate, stream, |h| {
            attn_block(&layer.attn, h, h, cfg.n_heads, &spans, false, Some(&valid))
        })?;
        x = sublayer(cfg.pre_norm, &layer.norm2, &x, rate, stream, |h| {
            ffn_block(&layer.ffn, h)
        })?;
    }
    if cfg.pre_norm {
        x = norm_block(&params.enc_final, &x)?;
    }
    Ok(EncoderStates { states: x, n, src_len: ts, valid })
}

/// Decoder stack over teacher-forced input rows; returns the full
/// [n*t_in, d] last-layer state matrix.
fn decoder_forward(
    params: &ModelParams,
    enc: &EncoderStates,
    input_ids: &[u32],
    n: usize,
    t_in: usize,
    rate: f64,
    stream: &mut RngStream,
) -> Result<Tensor> {
    let cfg = &params.config;
    if enc.n != n && enc.n != 1 {
        return Err(Error::ShapeMismatch(format!(
            "decoder over {} sentences, encoder holds {}",
            n, enc.n
        )));
    }
    let self_spans: Vec<AttnSpan> = (0..n)
        .map(|b| AttnSpan { q_off: b * t_in, q_len: t_in, kv_off: b * t_in, kv_len: t_in })
        .collect();
    // A single encoded sentence may serve many decoder rows (beams).
    let cross_spans: Vec<AttnSpan> = (0..n)
        .map(|b| AttnSpan {
            q_off: b * t_in,
            q_len: t_in,
            kv_off: if enc.n == 1 { 0 } else { b * enc.src_len },
            kv_len: enc.src_len,
        })
        .collect();
    let self_valid: Vec<bool> = input_ids.iter().map(|&t| t != PAD).collect();

    let mut x = embed_positions(&params.tgt_embed, input_ids, t_in, cfg.max_len, rate, stream)?;
    for layer in &params.dec_layers {
        x = sublayer(cfg.pre_norm, &layer.norm1, &x, rate, stream, |h| {
            attn_block(&layer.self_attn, h, h, cfg.n_heads, &self_spans, true, Some(&self_valid))
        })?;
        x = sublayer(cfg.pre_norm, &layer.norm2, &x, rate, stream, |h| {
            attn_block(
                &layer.cross_attn,
                h,
                &enc.states,
                cfg.n_heads,
                &cross_spans,
                false,
                Some(&enc.valid),
            )
        })?;
        x = sublayer(cfg.pre_norm, &layer.norm3, &x, rate, stream, |h| {
            ffn_block(&layer.ffn, h)
        })?;
    }
    if cfg.pre_norm {
        x = norm_block(&params.dec_final, &x)?;
    }
    Ok(x)
}

/// Teacher-forced decoding of a batch; keeps only the states at real
/// prediction positions (gold tokens incl. EOS, never PAD).
pub fn decode_states(
    params: &ModelParams,
    enc: &EncoderStates,
    batch: &Batch,
    rate: f64,
    stream: &mut RngStream,
    pass_label: PassLabel,
) -> Result<HiddenStateBatch> {
    let (n, tt) = (batch.n, batch.tgt_len);
    let t_in = tt - 1;
    // Teacher forcing: feed everything except each row's last slot.
    let mut input_ids = Vec::with_capacity(n * t_in);
    for s in 0..n {
        input_ids.extend_from_slice(&batch.tgt[s * tt..s * tt + t_in]);
    }
    let x = decoder_forward(params, enc, &input_ids, n, t_in, rate, stream)?;

    let keep: Vec<usize> = (0..n * t_in).filter(|&r| batch.tgt_mask[r]).collect();
    let states = ops::gather_rows(&x, &keep)?;
    let token_ids = batch.gold_ids();
    debug_assert_eq!(token_ids.len(), keep.len());
    Ok(HiddenStateBatch { states, token_ids, pass_label })
}

/// Next-token probabilities for a set of equal-length prefixes against
/// one encoded sentence; used by search. No dropout.
pub fn prefix_distributions(
    params: &ModelParams,
    enc: &EncoderStates,
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    let n = prefixes.len();
    let t_in = prefixes[0].len();
    if prefixes.iter().any(|p| p.len() != t_in) {
        return Err(Error::ShapeMismatch("ragged prefix lengths".into()));
    }
    let input_ids: Vec<u32> = prefixes.iter().flatten().copied().collect();
    let mut dummy = RngStream::new(0, crate::rng::StreamPurpose::DropoutPass1);
    let x = decoder_forward(params, enc, &input_ids, n, t_in, 0.0, &mut dummy)?;
    let last_rows: Vec<usize> = (0..n).map(|b| b * t_in + t_in - 1).collect();
    let states = ops::gather_rows(&x, &last_rows)?;
    let probs = ops::row_softmax(&ops::matmul_nt(&states, params.softmax_matrix())?);
    let v = probs.cols();
    Ok((0..n).map(|b| probs.data()[b * v..(b + 1) * v].to_vec()).collect())
}

/// Eq-style output head: softmax over states times the (tied) softmax
/// matrix, one probability row per real target position.
pub fn output_distribution(params: &ModelParams, states: &HiddenStateBatch) -> Result<Tensor> {
    if !states.states.is_finite() {
        return Err(Error::NonFinite("decoder states"));
    }
    let logits = ops::matmul_nt(&states.states, params.softmax_matrix())?;
    Ok(ops::row_softmax(&logits))
}

// ── checkpoints ─────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"FCLCKPT\0";
const CKPT_VERSION: u32 = 1;

fn save_checkpoint_bytes(params: &ModelParams, version: u32) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&version.to_le_bytes());
    let cfg_json = serde_json::to_vec(&params.config)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&params.step.to_le_bytes());

    let tensors = params.tensor_list();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, save_checkpoint_bytes(params, CKPT_VERSION)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptChecksum);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < CKPT_MAGIC.len() + 8 {
        return Err(Error::CorruptChecksum);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptChecksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
        return Err(Error::CorruptChecksum);
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { got: version, want: CKPT_VERSION });
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint config: {e}")))?;
    cfg.validate()?;
    let step = r.u64()?;
    let n_tensors = r.u32()? as usize;

    let layout = tensor_layout(&cfg);
    if n_tensors != layout.len() {
        return Err(Error::CorruptChecksum);
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for (want_name, want_shape, _) in &layout {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::CorruptChecksum)?;
        if name != want_name {
            return Err(Error::CorruptChecksum);
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if &shape != want_shape {
            return Err(Error::CorruptChecksum);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::param(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptChecksum);
    }
    Ok(ModelParams::from_tensors(cfg, step, tensors))
}
