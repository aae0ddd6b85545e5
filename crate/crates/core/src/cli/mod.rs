//! Command-line front end. Every subcommand is also a library function in
//! [`commands`] so runs can be scripted and tested without a process.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::Checkpoint;
pub use commands::*;
pub use config::RunConfig;

use crate::bpe::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_RESAMPLES;
use crate::outlayer::LayerVariant;
use crate::synth::bench_batches;

#[derive(Parser, Debug)]
#[command(name = "saol", version, about = "Sequence-to-sequence training with structure-aware output layers")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration shared by all subcommands. Flags override the file, which
/// overrides the defaults; `--set` is applied last.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub variant: Option<LayerVariant>,
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    pub d_h: Option<usize>,
    #[arg(long, global = true)]
    pub d_j: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub bidirectional: Option<bool>,
    #[arg(long, global = true)]
    pub sample_rate: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub clip: Option<f64>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let pairs: [(&str, Option<String>); 16] = [
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("variant", self.variant.map(|v| v.to_string())),
            ("d", self.d.map(|v| v.to_string())),
            ("d_h", self.d_h.map(|v| v.to_string())),
            ("d_j", self.d_j.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("max_len", self.max_len.map(|v| v.to_string())),
            ("bidirectional", self.bidirectional.map(|v| v.to_string())),
            ("sample_rate", self.sample_rate.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("clip", self.clip.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn BPE merges and vocabularies; write segmented corpora to data_dir.
    Preprocess {
        #[arg(long)]
        train_src: Option<PathBuf>,
        #[arg(long)]
        train_tgt: Option<PathBuf>,
        #[arg(long)]
        dev_src: Option<PathBuf>,
        #[arg(long)]
        dev_tgt: Option<PathBuf>,
        #[arg(long)]
        bpe_ops: Option<usize>,
        /// One merge table learned over both sides.
        #[arg(long)]
        joint_bpe: bool,
    },
    /// Train on the preprocessed data in data_dir, checkpointing to out_dir.
    Train {
        /// Continue from out_dir/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Translate raw source lines with a checkpoint (`--max-len` caps output length).
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Corpus BLEU, plus per-frequency-bin scores when a checkpoint is given.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Paired bootstrap test between two systems.
    Significance {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, requires = "hyp_b", conflicts_with_all = ["ckpt_a", "ckpt_b", "source"])]
        hyp_a: Option<PathBuf>,
        #[arg(long, requires = "hyp_a")]
        hyp_b: Option<PathBuf>,
        #[arg(long, requires_all = ["ckpt_b", "source"])]
        ckpt_a: Option<PathBuf>,
        #[arg(long, requires = "ckpt_a")]
        ckpt_b: Option<PathBuf>,
        /// Source lines translated by both checkpoints.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
    },
    /// Train every output-layer variant (and each joint size in dj_grid).
    Ablate,
    /// Training throughput over joint sizes and sampling rates.
    Bench {
        #[arg(long, default_value_t = 32000)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_len: usize,
        #[arg(long, default_value_t = 20)]
        sentence_len: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Output-layer capacity and allocated parameters for every variant.
    CountParams {
        /// Defaults to the size of data_dir/src.vocab.
        #[arg(long)]
        src_vocab: Option<usize>,
        /// Defaults to the size of data_dir/tgt.vocab.
        #[arg(long)]
        tgt_vocab: Option<usize>,
    },
}

fn vocab_size(given: Option<usize>, cfg: &RunConfig, side: &str) -> Result<usize> {
    match given {
        Some(n) => Ok(n),
        None => Ok(Vocabulary::load(&DataFiles::new(&cfg.data_dir).vocab(side))?.len()),
    }
}

/// Runs one command and returns its report for stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let mut cfg = cli.config.resolve()?;
    match &cli.command {
        Command::Preprocess {
            train_src,
            train_tgt,
            dev_src,
            dev_tgt,
            bpe_ops,
            joint_bpe,
        } => {
            for (slot, v) in [
                (&mut cfg.train_src, train_src),
                (&mut cfg.train_tgt, train_tgt),
                (&mut cfg.dev_src, dev_src),
                (&mut cfg.dev_tgt, dev_tgt),
            ] {
                if v.is_some() {
                    *slot = v.clone();
                }
            }
            if let Some(n) = bpe_ops {
                cfg.bpe_ops = *n;
            }
            cfg.joint_bpe |= joint_bpe;
            Ok(preprocess(&cfg)?.to_tsv())
        }
        Command::Train { resume } => {
            let o = train(&cfg, *resume)?;
            Ok(format!(
                "epochs\t{}\nbest_score\t{:.4}\nlast_loss\t{:.6}\nparams\t{}\n",
                o.epochs, o.best_score, o.last_loss, o.params
            ))
        }
        Command::Translate {
            checkpoint,
            input,
            output,
        } => {
            // decoding limit: --max-len if given, else the checkpoint's
            let n = translate(checkpoint, input, output, cli.config.max_len)?;
            Ok(format!("translated\t{n}\n"))
        }
        Command::Evaluate {
            hyp,
            reference,
            checkpoint,
        } => Ok(evaluate(hyp, reference, checkpoint.as_deref())?.to_tsv()),
        Command::Significance {
            reference,
            hyp_a,
            hyp_b,
            ckpt_a,
            ckpt_b,
            source,
            resamples,
        } => {
            let input = match (hyp_a, hyp_b, ckpt_a, ckpt_b, source) {
                (Some(a), Some(b), None, None, None) => SignificanceInput::Hypotheses { a, b },
                (None, None, Some(a), Some(b), Some(source)) => SignificanceInput::Checkpoints { a, b, source },
                _ => {
                    return Err(Error::Argument(
                        "give --hyp-a/--hyp-b, or --ckpt-a/--ckpt-b with --source".into(),
                    ))
                }
            };
            Ok(significance(input, reference, *resamples, cfg.seed)?.to_tsv())
        }
        Command::Ablate => Ok(ablation_tsv(&ablate(&cfg)?)),
        Command::Bench {
            vocab,
            batches,
            batch_len,
            sentence_len,
            warmup,
        } => {
            let mut base = cfg.model_config(*vocab, *vocab);
            base.max_len = base.max_len.max(*sentence_len);
            let work = bench_batches(*vocab, *batches, *batch_len, *sentence_len, cfg.seed);
            Ok(bench_tsv(&bench_throughput(&base, &cfg.dj_grid, &cfg.bench_rates, &work, *warmup)?))
        }
        Command::CountParams { src_vocab, tgt_vocab } => {
            let s = vocab_size(*src_vocab, &cfg, "src")?;
            let t = vocab_size(*tgt_vocab, &cfg, "tgt")?;
            Ok(count_tsv(&count_params(&cfg, s, t)?))
        }
    }
}
