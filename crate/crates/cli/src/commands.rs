//! Subcommand implementations over the core library.

use std::fs;
use std::path::{Path, PathBuf};

use fcl_core::corpus::{
    build_vocabulary, generate_zipf_corpus, read_corpus, read_vocab_file, sentence_subsets,
    write_corpus, write_vocab_file, FrequencyTable, Vocabulary, RESERVED_TOKENS,
};
use fcl_core::decode::translate_corpus;
use fcl_core::error::{Error, Result};
use fcl_core::eval::{evaluate, one_gram_prf, write_metrics, MetricsReport};
use fcl_core::geometry::{
    geometry_report, pca_2d, softmax_embeddings, write_embedding_dump, GeometryReport,
};
use fcl_core::model::{load_checkpoint, ModelParams};
use fcl_core::training::{train, Objective, TrainInputs};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::svg;

// ── logging ─────────────────────────────────────────────────────────

pub enum LogMode {
    Timestamps,
    Plain,
    Quiet,
}

pub struct Log {
    mode: LogMode,
}

impl Log {
    pub fn new(mode: LogMode) -> Log {
        Log { mode }
    }

    pub fn quiet() -> Log {
        Log { mode: LogMode::Quiet }
    }

    pub fn line(&self, msg: &str) {
        match self.mode {
            LogMode::Quiet => {}
            LogMode::Plain => println!("{msg}"),
            LogMode::Timestamps => {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                println!("[{secs}] {msg}");
            }
        }
    }
}

pub fn obj_name(o: Objective) -> &'static str {
    match o {
        Objective::Baseline => "baseline",
        Objective::Tcl => "tcl",
        Objective::Fcl => "fcl",
    }
}

// ── shared helpers ──────────────────────────────────────────────────

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Msg(format!("{what} not found: {}", path.display())))
    }
}

fn read_sentence_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Msg(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn write_sentence_file(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ── gen-corpus ──────────────────────────────────────────────────────

pub fn gen_corpus(cfg: &RunConfig, log: &Log) -> Result<()> {
    let dir = &cfg.paths.corpus_dir;
    fs::create_dir_all(dir)?;
    let full = generate_zipf_corpus(&cfg.corpus)?;
    // 90/5/5; integer floors, remainder to the test split.
    let n = full.len();
    let dev_n = n / 20;
    let test_n = n - (n * 9) / 10 - dev_n;
    let (train_c, dev_c, test_c) = full.split(dev_n, test_n)?;
    let stem = &cfg.paths.stem;
    write_corpus(dir, &format!("{stem}.train"), &train_c)?;
    write_corpus(dir, &format!("{stem}.dev"), &dev_c)?;
    write_corpus(dir, &format!("{stem}.test"), &test_c)?;
    let (src_vocab, src_freq) = build_vocabulary(&train_c.src)?;
    let (tgt_vocab, tgt_freq) = build_vocabulary(&train_c.tgt)?;
    write_vocab_file(&cfg.vocab_file("src"), &src_vocab, &src_freq)?;
    write_vocab_file(&cfg.vocab_file("tgt"), &tgt_vocab, &tgt_freq)?;
    log.line(&format!(
        "wrote {}/{}/{} train/dev/test pairs, {} source and {} target types under {}",
        train_c.len(),
        dev_c.len(),
        test_c.len(),
        src_vocab.content_size(),
        tgt_vocab.content_size(),
        dir.display()
    ));
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

pub fn train_cmd(cfg: &RunConfig, log: &Log) -> Result<()> {
    let stem = &cfg.paths.stem;
    for split in ["train", "dev"] {
        for side in ["src", "tgt"] {
            require(cfg.corpus_file(split, side), "corpus file")?;
        }
    }
    for side in ["src", "tgt"] {
        require(cfg.vocab_file(side), "vocabulary file")?;
    }
    let train_c = read_corpus(&cfg.paths.corpus_dir, &format!("{stem}.train"))?;
    let dev_c = read_corpus(&cfg.paths.corpus_dir, &format!("{stem}.dev"))?;
    let (src_vocab, _) = read_vocab_file(&cfg.vocab_file("src"))?;
    let (tgt_vocab, tgt_freq) = read_vocab_file(&cfg.vocab_file("tgt"))?;

    // Vocabulary sizes come from the data, whatever the config said.
    let mut resolved = cfg.clone();
    resolved.model.src_vocab = src_vocab.size();
    resolved.model.tgt_vocab = tgt_vocab.size();

    let run_dir = resolved.paths.run_dir.clone();
    fs::create_dir_all(&run_dir)?;
    resolved.snapshot(&run_dir)?;
    if RunConfig::load_snapshot(&run_dir.join("config.json"))? != resolved {
        return Err(Error::InvalidConfig("config snapshot does not round-trip".into()));
    }

    log.line(&format!(
        "training {} on {} pairs (dev {}), seed {}, run dir {}",
        obj_name(resolved.train.objective),
        train_c.len(),
        dev_c.len(),
        resolved.train.seed,
        run_dir.display()
    ));
    let inputs = TrainInputs {
        train: &train_c,
        dev: &dev_c,
        src_vocab: &src_vocab,
        tgt_vocab: &tgt_vocab,
        freq: &tgt_freq,
    };
    let outcome = train(&resolved.model, &resolved.train, &resolved.contrastive, &inputs, Some(&run_dir))?;
    log.line(&format!(
        "best epoch {} dev bleu {:.2}; wrote best.ckpt, train.log, config.json",
        outcome.best_epoch, outcome.best_dev_bleu
    ));
    Ok(())
}

// ── translate ───────────────────────────────────────────────────────

pub struct TranslateSpec {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
}

pub fn translate_cmd(cfg: &RunConfig, spec: &TranslateSpec, log: &Log) -> Result<()> {
    let params = load_checkpoint(&require(spec.checkpoint.clone(), "checkpoint")?)?;
    let src_path = spec.src_vocab.clone().unwrap_or_else(|| cfg.vocab_file("src"));
    let tgt_path = spec.tgt_vocab.clone().unwrap_or_else(|| cfg.vocab_file("tgt"));
    let (src_vocab, _) = read_vocab_file(&require(src_path, "vocabulary file")?)?;
    let (tgt_vocab, _) = read_vocab_file(&require(tgt_path, "vocabulary file")?)?;
    let input = read_sentence_file(&require(spec.input.clone(), "input file")?)?;
    let sources: Vec<Vec<u32>> = input.iter().map(|s| src_vocab.encode(s)).collect();
    let hyp_ids = translate_corpus(&params, &sources, &cfg.eval)?;
    let hyps: Vec<Vec<String>> = hyp_ids.iter().map(|ids| tgt_vocab.decode(ids)).collect();
    write_sentence_file(&spec.output, &hyps)?;
    log.line(&format!("translated {} lines into {}", hyps.len(), spec.output.display()));
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────

pub fn evaluate_cmd(
    cfg: &RunConfig,
    hyp: &Path,
    reference: &Path,
    vocab: Option<&Path>,
    log: &Log,
) -> Result<MetricsReport> {
    let hyps = read_sentence_file(&require(hyp.to_path_buf(), "hypothesis file")?)?;
    let refs = read_sentence_file(&require(reference.to_path_buf(), "reference file")?)?;
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { hyp: hyps.len(), refs: refs.len() });
    }
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| cfg.vocab_file("tgt"));
    let (vocab, mut freq) = read_vocab_file(&require(vocab_path, "vocabulary file")?)?;
    freq.assign_buckets(cfg.eval.bucket_count)?;
    let subsets = sentence_subsets(&refs, &vocab, &freq, cfg.eval.subset_low_count)?;
    let report = evaluate(&hyps, &refs, &vocab, &freq, &subsets, &cfg.eval)?;
    let out = &cfg.paths.run_dir;
    fs::create_dir_all(out)?;
    write_metrics(&report, out)?;
    log.line(&format!(
        "bleu {:.2} mattr {:.4} hdd {:.4} mtld {:.2}; wrote metrics.json and buckets.csv in {}",
        report.bleu,
        report.mattr,
        report.hdd,
        report.mtld,
        out.display()
    ));
    Ok(report)
}

// ── analyze ─────────────────────────────────────────────────────────

pub struct AnalyzeSpec {
    pub checkpoint: PathBuf,
    pub vocab: Option<PathBuf>,
    pub svg: bool,
    pub dump_embeddings: bool,
}

pub fn analyze_cmd(cfg: &RunConfig, spec: &AnalyzeSpec, log: &Log) -> Result<GeometryReport> {
    let params = load_checkpoint(&require(spec.checkpoint.clone(), "checkpoint")?)?;
    let vocab_path = spec.vocab.clone().unwrap_or_else(|| cfg.vocab_file("tgt"));
    let (vocab, mut freq) = read_vocab_file(&require(vocab_path, "vocabulary file")?)?;
    freq.assign_buckets(cfg.eval.bucket_count)?;
    let out = &cfg.paths.run_dir;
    fs::create_dir_all(out)?;
    let report = write_geometry(
        &params,
        &vocab,
        &freq,
        cfg.eval.bucket_count,
        out,
        spec.svg,
        spec.dump_embeddings,
    )?;
    log.line(&format!(
        "-uni {:.4} dis {:.4} i1 {:.4} i2 {:.4}; wrote geometry.json and pca.csv in {}",
        report.neg_uniformity,
        report.avg_distance,
        report.i1,
        report.i2,
        out.display()
    ));
    Ok(report)
}

/// Geometry artifacts for one checkpoint: geometry.json, pca.csv, and
/// optionally pca.svg and the text embedding dump.
fn write_geometry(
    params: &ModelParams,
    vocab: &Vocabulary,
    freq: &FrequencyTable,
    k: usize,
    out: &Path,
    want_svg: bool,
    dump: bool,
) -> Result<GeometryReport> {
    let emb = softmax_embeddings(params)?;
    if emb.v != vocab.content_size() {
        return Err(Error::Msg(format!(
            "checkpoint has {} content embeddings but the vocabulary has {} content types",
            emb.v,
            vocab.content_size()
        )));
    }
    let reserved = RESERVED_TOKENS.len();
    let bucket_of: Vec<usize> = (0..emb.v).map(|i| freq.bucket((i + reserved) as u32)).collect();
    let report = geometry_report(&emb, &bucket_of, k)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(out.join("geometry.json"), json + "\n")?;

    let pca = pca_2d(&emb)?;
    let mut csv = String::from("token_id,token,bucket,x,y\n");
    for i in 0..emb.v {
        let id = (i + reserved) as u32;
        csv.push_str(&format!(
            "{},{},{},{:.9e},{:.9e}\n",
            id,
            vocab.decode_token(id),
            bucket_of[i],
            pca.coords[i][0],
            pca.coords[i][1]
        ));
    }
    fs::write(out.join("pca.csv"), csv)?;
    if want_svg {
        fs::write(out.join("pca.svg"), svg::scatter(&pca, &bucket_of, k))?;
    }
    if dump {
        write_embedding_dump(&emb, &out.join("embeddings.txt"))?;
    }
    Ok(report)
}

// ── repro ───────────────────────────────────────────────────────────

struct RunSummary {
    seed: u64,
    objective: Objective,
    bleu: f64,
    rare_f1: f64,
    neg_uni: f64,
    dis: f64,
}

/// Corpus generation, a baseline and an fcl run per seed (in parallel),
/// evaluation and geometry per run, and a comparison table.
pub fn repro_cmd(base: &RunConfig, seeds: &[u64], jobs: Option<usize>, log: &Log) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("repro needs at least one seed".into()));
    }
    let root = base.paths.run_dir.clone();
    let mut cfg = base.clone();
    cfg.paths.corpus_dir = root.join("corpus");
    fs::create_dir_all(&root)?;
    gen_corpus(&cfg, log)?;

    let runs: Vec<(u64, Objective)> = seeds
        .iter()
        .flat_map(|&s| [(s, Objective::Baseline), (s, Objective::Fcl)])
        .collect();
    log.line(&format!(
        "running {} training runs ({} seeds x 2 objectives)",
        runs.len(),
        seeds.len()
    ));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Msg(format!("thread pool: {e}")))?;
    let mut rows: Vec<RunSummary> = pool.install(|| {
        runs.par_iter()
            .map(|&(seed, obj)| run_one(&cfg, &root, seed, obj))
            .collect::<Result<Vec<_>>>()
    })?;
    let rank = |o: Objective| (o != Objective::Baseline) as u8;
    rows.sort_by_key(|r| (r.seed, rank(r.objective)));

    let mut csv = String::from("seed,objective,bleu,rare_f1,neg_uniformity,avg_distance\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.6},{:.6},{:.6}\n",
            r.seed,
            obj_name(r.objective),
            r.bleu,
            r.rare_f1,
            r.neg_uni,
            r.dis
        ));
    }
    fs::write(root.join("comparison.csv"), csv)?;

    log.line(&format!("{:<6} {:<9} {:>7} {:>8} {:>8} {:>8}", "seed", "objective", "bleu", "rare-f1", "-uni", "dis"));
    for r in &rows {
        log.line(&format!(
            "{:<6} {:<9} {:>7.2} {:>8.4} {:>8.4} {:>8.4}",
            r.seed,
            obj_name(r.objective),
            r.bleu,
            r.rare_f1,
            r.neg_uni,
            r.dis
        ));
    }

    let (mut rare_wins, mut spread_wins, mut bleu_held) = (0usize, 0usize, 0usize);
    for &seed in seeds {
        let find = |o: Objective| rows.iter().find(|r| r.seed == seed && r.objective == o);
        let (Some(b), Some(f)) = (find(Objective::Baseline), find(Objective::Fcl)) else {
            continue;
        };
        rare_wins += (f.rare_f1 > b.rare_f1) as usize;
        spread_wins += (f.neg_uni > b.neg_uni && f.dis > b.dis) as usize;
        bleu_held += (f.bleu >= b.bleu - 0.5) as usize;
    }
    let n = seeds.len();
    log.line(&format!(
        "fcl vs baseline over {n} seeds: rare-bucket f1 wins {rare_wins}/{n}, \
         spread wins {spread_wins}/{n}, bleu within 0.5 {bleu_held}/{n}"
    ));
    log.line(&format!("comparison table: {}", root.join("comparison.csv").display()));
    Ok(())
}

fn run_one(cfg: &RunConfig, root: &Path, seed: u64, objective: Objective) -> Result<RunSummary> {
    let mut rc = cfg.clone();
    rc.seed = seed;
    rc.train.seed = seed;
    rc.train.objective = objective;
    rc.paths.run_dir = root.join(format!("s{seed}.{}", obj_name(objective)));
    train_cmd(&rc, &Log::quiet())?;

    let params = load_checkpoint(&rc.paths.run_dir.join("best.ckpt"))?;
    let stem = &rc.paths.stem;
    let test_c = read_corpus(&rc.paths.corpus_dir, &format!("{stem}.test"))?;
    let (src_vocab, _) = read_vocab_file(&rc.vocab_file("src"))?;
    let (tgt_vocab, mut tgt_freq) = read_vocab_file(&rc.vocab_file("tgt"))?;
    let sources: Vec<Vec<u32>> = test_c.src.iter().map(|s| src_vocab.encode(s)).collect();
    let hyp_ids = translate_corpus(&params, &sources, &rc.eval)?;
    let hyps: Vec<Vec<String>> = hyp_ids.iter().map(|ids| tgt_vocab.decode(ids)).collect();
    write_sentence_file(&rc.paths.run_dir.join("test.hyp"), &hyps)?;

    tgt_freq.assign_buckets(rc.eval.bucket_count)?;
    let subsets = sentence_subsets(&test_c.tgt, &tgt_vocab, &tgt_freq, rc.eval.subset_low_count)?;
    let report = evaluate(&hyps, &test_c.tgt, &tgt_vocab, &tgt_freq, &subsets, &rc.eval)?;
    write_metrics(&report, &rc.paths.run_dir)?;

    let k = rc.eval.bucket_count;
    let rare_ids: Vec<usize> = if k >= 2 { vec![k - 2, k - 1] } else { vec![0] };
    let prf = one_gram_prf(&hyps, &test_c.tgt, &tgt_vocab, &tgt_freq)?;
    let rare = prf.combined(&rare_ids);

    let geo = write_geometry(&params, &tgt_vocab, &tgt_freq, k, &rc.paths.run_dir, false, false)?;
    Ok(RunSummary {
        seed,
        objective,
        bleu: report.bleu,
        rare_f1: rare.f1,
        neg_uni: geo.neg_uniformity,
        dis: geo.avg_distance,
    })
}
