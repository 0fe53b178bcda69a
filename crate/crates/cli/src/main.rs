//! `fcl`: one binary driving the whole pipeline — corpus generation,
//! training, decoding, evaluation, embedding geometry, and a repro
//! meta-command that chains them into the comparison experiment.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fcl_core::error::{Error, Result};

use commands::{AnalyzeSpec, Log, LogMode, TranslateSpec};

#[derive(Parser)]
#[command(
    name = "fcl",
    version,
    about = "Frequency-aware contrastive training workbench for a small translation model",
    after_help = "Any configuration key can be set as --<ns>.<key> <value>, e.g. \
                  --train.max_epochs 10 or --contrastive.lambda 2.0. Namespaces: paths, corpus, \
                  model, train, contrastive, eval. FCL_SEED sets the global seed when no seed \
                  flag or override is given."
)]
struct Cli {
    /// JSON config file; command-line values override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed (also settable via FCL_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit timestamps from progress lines so outputs are byte-comparable.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic parallel corpus, its splits, and vocabularies.
    GenCorpus(GenArgs),
    /// Train a model; writes best.ckpt, train.log, and config.json.
    Train(TrainArgs),
    /// Decode a source file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a hypothesis file; writes metrics.json and buckets.csv.
    Evaluate(EvaluateArgs),
    /// Embedding geometry; writes geometry.json, pca.csv, optionally pca.svg.
    Analyze(AnalyzeArgs),
    /// Chain gen-corpus, baseline and fcl training per seed, evaluation,
    /// and analysis into a comparison table.
    Repro(ReproArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory (default: paths.corpus_dir, "corpus").
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training objective (default: train.objective, "baseline").
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Run directory (default: paths.run_dir, "runs/default").
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Baseline,
    Tcl,
    Fcl,
}

impl ObjectiveArg {
    fn name(self) -> &'static str {
        match self {
            ObjectiveArg::Baseline => "baseline",
            ObjectiveArg::Tcl => "tcl",
            ObjectiveArg::Fcl => "fcl",
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Source sentences, one per line.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Hypothesis file to write, one line per input line.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Source vocabulary (default: <corpus_dir>/<stem>.src.vocab.tsv).
    #[arg(long, value_name = "FILE")]
    src_vocab: Option<PathBuf>,
    /// Target vocabulary (default: <corpus_dir>/<stem>.tgt.vocab.tsv).
    #[arg(long, value_name = "FILE")]
    tgt_vocab: Option<PathBuf>,
    /// Beam width (default: eval.beam_size, 4).
    #[arg(long)]
    beam: Option<usize>,
    /// Greedy decoding; same as --beam 1.
    #[arg(long, conflicts_with = "beam")]
    greedy: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Hypothesis file, one sentence per line.
    #[arg(long, value_name = "FILE")]
    hyp: PathBuf,
    /// Reference file, aligned line by line with the hypothesis file.
    #[arg(long = "ref", value_name = "FILE")]
    reference: PathBuf,
    /// Target vocabulary (default: <corpus_dir>/<stem>.tgt.vocab.tsv).
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Frequency bucket count (default: eval.bucket_count, 5).
    #[arg(long)]
    buckets: Option<usize>,
    /// Report directory (default: paths.run_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Target vocabulary (default: <corpus_dir>/<stem>.tgt.vocab.tsv).
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Report directory (default: paths.run_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also render pca.svg from the projection.
    #[arg(long)]
    svg: bool,
    /// Also write the plain-text embedding dump (embeddings.txt).
    #[arg(long)]
    dump_embeddings: bool,
}

#[derive(Args)]
struct ReproArgs {
    /// Comma-separated training seeds; each gets a baseline and an fcl run.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Root directory for the corpus, runs, and comparison table
    /// (default: paths.run_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel runs (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

// ── override plumbing ───────────────────────────────────────────────

/// Pull `--ns.key value` / `--ns.key=value` pairs out of argv before
/// clap sees it; dotted flag names are config overrides, everything
/// else stays.
fn split_dotted(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut plain = Vec::new();
    let mut pairs = Vec::new();
    let mut it = argv.into_iter();
    while let Some(tok) = it.next() {
        if let Some(body) = tok.strip_prefix("--") {
            if body.contains('.') && !body.starts_with('.') {
                match body.split_once('=') {
                    Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
                    None => {
                        let v = it.next().ok_or_else(|| {
                            Error::InvalidConfig(format!("--{body} expects a value"))
                        })?;
                        pairs.push((body.to_string(), v));
                    }
                }
                continue;
            }
        }
        plain.push(tok);
    }
    Ok((plain, pairs))
}

fn quoted(path: &PathBuf) -> Result<String> {
    let s = path
        .to_str()
        .ok_or_else(|| Error::InvalidConfig(format!("path {} is not UTF-8", path.display())))?;
    Ok(serde_json::Value::String(s.to_string()).to_string())
}

/// 0 success, 1 internal numeric failure, 2 user or input error.
fn exit_code(e: &Error) -> u8 {
    use Error::*;
    match e {
        ShapeMismatch(_) | ZeroNormRow(_) | NonScalarLoss(_) | NonFinite(_)
        | PassMisalignment(_) | WeightShapeMismatch { .. } | NonFiniteLoss { .. }
        | DegenerateRow(_) | EigenFailure(_) | UndefinedDiversity => 1,
        _ => 2,
    }
}

fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<()> {
    let log = Log::new(if cli.no_timestamps { LogMode::Plain } else { LogMode::Timestamps });
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let set = |overrides: &mut Vec<(String, String)>, key: &str, value: String| {
        overrides.push((key.to_string(), value));
    };
    match cli.cmd {
        Cmd::GenCorpus(a) => {
            if let Some(dir) = &a.out {
                set(&mut overrides, "paths.corpus_dir", quoted(dir)?);
            }
            let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
            commands::gen_corpus(&cfg, &log)
        }
        Cmd::Train(a) => {
            if let Some(o) = a.objective {
                set(&mut overrides, "train.objective", format!("\"{}\"", o.name()));
            }
            if let Some(dir) = &a.run_dir {
                set(&mut overrides, "paths.run_dir", quoted(dir)?);
            }
            let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
            commands::train_cmd(&cfg, &log)
        }
        Cmd::Translate(a) => {
            if a.greedy {
                set(&mut overrides, "eval.beam_size", "1".to_string());
            } else if let Some(b) = a.beam {
                set(&mut overrides, "eval.beam_size", b.to_string());
            }
            let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
            let spec = TranslateSpec {
                checkpoint: a.checkpoint,
                input: a.input,
                output: a.output,
                src_vocab: a.src_vocab,
                tgt_vocab: a.tgt_vocab,
            };
            commands::translate_cmd(&cfg, &spec, &log)
        }
        Cmd::Evaluate(a) => {
            if let Some(k) = a.buckets {
                set(&mut overrides, "eval.bucket_count", k.to_string());
            }
            if let Some(dir) = &a.out {
                set(&mut overrides, "paths.run_dir", quoted(dir)?);
            }
            let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
            commands::evaluate_cmd(&cfg, &a.hyp, &a.reference, a.vocab.as_deref(), &log)
                .map(|_| ())
        }
        Cmd::Analyze(a) => {
            if let Some(dir) = &a.out {
                set(&mut overrides, "paths.run_dir", quoted(dir)?);
            }
            let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
            let spec = AnalyzeSpec {
                checkpoint: a.checkpoint,
                vocab: a.vocab,
                svg: a.svg,
                dump_embeddings: a.dump_embeddings,
            };
            commands::analyze_cmd(&cfg, &spec, &log).map(|_| ())
        }
        Cmd::Repro(a) => {
            if let Some(dir) = &a.out {
                set(&mut overrides, "paths.run_dir", quoted(dir)?);
            }
            let cfg = config::resolve(cli.config.as_deref(), &overrides)?;
            commands::repro_cmd(&cfg, &a.seeds, a.jobs, &log)
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (plain, dotted) = match split_dotted(argv) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(plain);
    match run(cli, dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
