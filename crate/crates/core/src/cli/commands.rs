use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::bpe::{
    apply_bpe, build_vocab, detokenize, frequency_bins, learn_bpe, MergeTable, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{binned_scores, corpus_bleu, paired_bootstrap, BinnedReport, BleuReport, SignificanceReport};
use crate::ndmath::AdamConfig;
use crate::outlayer::{param_count, LayerVariant};
use crate::seq2seq::{decode_all, Batch, ModelConfig, Seq2Seq, Trainer};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    if !lines.is_empty() {
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads aligned files; a length mismatch is reported at the first line
/// present in only one of them.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        let (short, long) = if s.len() < t.len() { (src, tgt) } else { (tgt, src) };
        let n = s.len().min(t.len());
        return Err(Error::io_at(
            long,
            n + 1,
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("line has no counterpart: {} ends after {n} lines", short.display()),
            ),
        ));
    }
    Ok((s, t))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Argument(format!("config key '{key}' is required")))
}

/// Paths of preprocessed artifacts under a data directory.
pub struct DataFiles {
    pub dir: PathBuf,
}

impl DataFiles {
    pub fn new(dir: &Path) -> Self {
        DataFiles { dir: dir.to_path_buf() }
    }
    pub fn merges(&self, side: &str) -> PathBuf {
        self.dir.join(format!("{side}.merges"))
    }
    pub fn vocab(&self, side: &str) -> PathBuf {
        self.dir.join(format!("{side}.vocab"))
    }
    pub fn corpus(&self, split: &str, side: &str) -> PathBuf {
        self.dir.join(format!("{split}.{side}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSummary {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub src_tokens: usize,
    pub tgt_tokens: usize,
    pub src_merges: usize,
    pub tgt_merges: usize,
}

impl PreprocessSummary {
    pub fn to_tsv(&self) -> String {
        format!(
            "src_vocab\t{}\ntgt_vocab\t{}\nsrc_tokens\t{}\ntgt_tokens\t{}\nsrc_merges\t{}\ntgt_merges\t{}\n",
            self.src_vocab, self.tgt_vocab, self.src_tokens, self.tgt_tokens, self.src_merges, self.tgt_merges
        )
    }
}

fn segment(merges: &MergeTable, lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| apply_bpe(merges, l)).collect()
}

/// Learns merges and vocabularies and writes segmented corpora to `data_dir`.
pub fn preprocess(cfg: &RunConfig) -> Result<PreprocessSummary> {
    let (src, tgt) = read_parallel(require(&cfg.train_src, "train_src")?, require(&cfg.train_tgt, "train_tgt")?)?;
    let dev = match (&cfg.dev_src, &cfg.dev_tgt) {
        (Some(s), Some(t)) => Some(read_parallel(s, t)?),
        (None, None) => None,
        _ => return Err(Error::Argument("dev_src and dev_tgt must be given together".into())),
    };
    let (src_merges, tgt_merges) = if cfg.joint_bpe {
        let both: Vec<&String> = src.iter().chain(&tgt).collect();
        let m = learn_bpe(&both, cfg.bpe_ops)?;
        (m.clone(), m)
    } else {
        (learn_bpe(&src, cfg.bpe_ops)?, learn_bpe(&tgt, cfg.bpe_ops)?)
    };
    let files = DataFiles::new(&cfg.data_dir);
    std::fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
    let src_seg = segment(&src_merges, &src);
    let tgt_seg = segment(&tgt_merges, &tgt);
    let src_vocab = build_vocab(&src_seg, None);
    let tgt_vocab = build_vocab(&tgt_seg, None);
    src_merges.save(&files.merges("src"))?;
    tgt_merges.save(&files.merges("tgt"))?;
    src_vocab.save(&files.vocab("src"))?;
    tgt_vocab.save(&files.vocab("tgt"))?;
    let join = |seg: &[Vec<String>]| seg.iter().map(|t| t.join(" ")).collect::<Vec<_>>();
    write_lines(&files.corpus("train", "src"), &join(&src_seg))?;
    write_lines(&files.corpus("train", "tgt"), &join(&tgt_seg))?;
    if let Some((ds, dt)) = dev {
        write_lines(&files.corpus("dev", "src"), &join(&segment(&src_merges, &ds)))?;
        write_lines(&files.corpus("dev", "tgt"), &join(&segment(&tgt_merges, &dt)))?;
    }
    Ok(PreprocessSummary {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        src_tokens: src_seg.iter().map(Vec::len).sum(),
        tgt_tokens: tgt_seg.iter().map(Vec::len).sum(),
        src_merges: src_merges.len(),
        tgt_merges: tgt_merges.len(),
    })
}

/// Exclusive ownership of an output directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{}", std::process::id()))
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

struct Loaded {
    src_merges: MergeTable,
    tgt_merges: MergeTable,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train: Pairs,
    dev: Option<(Pairs, Vec<String>)>,
}

fn encode_split(
    src: &[String],
    tgt: &[String],
    sv: &Vocabulary,
    tv: &Vocabulary,
    max_len: usize,
) -> (Pairs, Vec<usize>) {
    let mut pairs = Vec::new();
    let mut kept = Vec::new();
    for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
        let s: Vec<&str> = s.split_whitespace().collect();
        let t: Vec<&str> = t.split_whitespace().collect();
        if s.is_empty() || s.len() > max_len || t.len() > max_len {
            continue;
        }
        pairs.push((sv.encode(&s), tv.encode(&t)));
        kept.push(i);
    }
    (pairs, kept)
}

fn load_data(cfg: &RunConfig) -> Result<Loaded> {
    let files = DataFiles::new(&cfg.data_dir);
    let src_merges = MergeTable::load(&files.merges("src"))?;
    let tgt_merges = MergeTable::load(&files.merges("tgt"))?;
    let src_vocab = Vocabulary::load(&files.vocab("src"))?;
    let tgt_vocab = Vocabulary::load(&files.vocab("tgt"))?;
    let (s, t) = read_parallel(&files.corpus("train", "src"), &files.corpus("train", "tgt"))?;
    let (train, _) = encode_split(&s, &t, &src_vocab, &tgt_vocab, cfg.max_len);
    if train.is_empty() {
        return Err(Error::Argument("no usable training pairs (empty or longer than max_len)".into()));
    }
    let dev_src = files.corpus("dev", "src");
    let dev = if dev_src.exists() {
        let (s, t) = read_parallel(&dev_src, &files.corpus("dev", "tgt"))?;
        let (pairs, kept) = encode_split(&s, &t, &src_vocab, &tgt_vocab, cfg.max_len);
        let refs = kept.iter().map(|&i| detokenize(&t[i].split_whitespace().collect::<Vec<_>>())).collect();
        (!pairs.is_empty()).then_some((pairs, refs))
    } else {
        None
    };
    Ok(Loaded {
        src_merges,
        tgt_merges,
        src_vocab,
        tgt_vocab,
        train,
        dev,
    })
}

/// Word-level hypotheses from index sequences.
fn render(vocab: &Vocabulary, hyps: &[Vec<usize>]) -> Vec<String> {
    hyps.iter().map(|h| detokenize(&vocab.decode(h))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: u64,
    pub best_score: f64,
    pub last_loss: f64,
    pub params: usize,
}

pub const METRICS_HEADER: &str = "epoch\tloss\tbleu\ttokens_per_sec";

/// Trains up to `cfg.epochs` epochs, appending to `metrics.tsv` and keeping
/// `last.ckpt` and `best.ckpt` in `out_dir`. With `resume`, continues from
/// `last.ckpt`; the result equals an uninterrupted run.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let out = cfg.out_dir.clone();
    let _lock = RunLock::acquire(&out)?;
    let last_path = out.join("last.ckpt");
    let best_path = out.join("best.ckpt");
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let (mut trainer, mut epoch, mut best) = if resume {
        let ck = Checkpoint::load(&last_path)?;
        if ck.src_vocab != data.src_vocab || ck.tgt_vocab != data.tgt_vocab {
            return Err(Error::Version("checkpoint vocabularies differ from data_dir".into()));
        }
        if ck.model.config() != &cfg.model_config(data.src_vocab.len(), data.tgt_vocab.len()) {
            return Err(Error::Argument("model settings differ from the checkpoint being resumed".into()));
        }
        let state = ck
            .trainer
            .ok_or_else(|| Error::format("checkpoint", "no optimizer state to resume from"))?;
        let mut t = Trainer::resume(ck.model, adam, state)?;
        t.clip = cfg.clip;
        (t, ck.epoch, ck.best_score)
    } else {
        let model = Seq2Seq::new(cfg.model_config(data.src_vocab.len(), data.tgt_vocab.len()))?;
        let mut t = Trainer::new(model, adam);
        t.clip = cfg.clip;
        (t, 0, f64::NEG_INFINITY)
    };
    let metrics_path = out.join("metrics.tsv");
    let fresh = !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    }
    let mut last_loss = f64::NAN;
    while epoch < cfg.epochs as u64 {
        let rep = trainer.train_epoch(&data.train, cfg.batch_size, epoch)?;
        epoch += 1;
        last_loss = rep.loss;
        let (bleu, score) = match &data.dev {
            Some((pairs, refs)) => {
                let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
                let hyps = decode_all(&trainer.model, &sources, cfg.batch_size, cfg.max_len)?;
                let b = corpus_bleu(&render(&data.tgt_vocab, &hyps), refs)?.bleu;
                (format!("{b:.4}"), b)
            }
            None => ("-".to_string(), -rep.loss),
        };
        writeln!(metrics, "{epoch}\t{:.6}\t{bleu}\t{:.1}", rep.loss, rep.tokens_per_sec())
            .map_err(|e| Error::io(&metrics_path, e))?;
        let improved = score > best;
        if improved {
            best = score;
        }
        let ck = Checkpoint {
            config: cfg.clone(),
            src_vocab: data.src_vocab.clone(),
            tgt_vocab: data.tgt_vocab.clone(),
            src_merges: data.src_merges.clone(),
            tgt_merges: data.tgt_merges.clone(),
            model: trainer.model.clone(),
            trainer: Some(trainer.state().clone()),
            epoch,
            best_score: best,
        };
        ck.save(&last_path)?;
        if improved {
            ck.save(&best_path)?;
        }
    }
    Ok(TrainOutcome {
        epochs: epoch,
        best_score: best,
        last_loss,
        params: trainer.model.param_count(),
    })
}

/// Translates raw lines with a checkpoint's source merges and vocabularies.
pub fn translate_lines(ck: &Checkpoint, lines: &[String], max_len: Option<usize>) -> Result<Vec<String>> {
    let max_len = max_len.unwrap_or(ck.config.max_len);
    let encoded: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| ck.src_vocab.encode(&apply_bpe(&ck.src_merges, l)))
        .collect();
    let (idx, sources): (Vec<usize>, Vec<Vec<usize>>) = encoded
        .into_iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .unzip();
    let hyps = decode_all(&ck.model, &sources, ck.config.batch_size, max_len)?;
    let mut out = vec![String::new(); lines.len()];
    for (i, h) in idx.into_iter().zip(render(&ck.tgt_vocab, &hyps)) {
        out[i] = h;
    }
    Ok(out)
}

pub fn translate(checkpoint: &Path, input: &Path, output: &Path, max_len: Option<usize>) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let lines = read_lines(input)?;
    let hyps = translate_lines(&ck, &lines, max_len)?;
    write_lines(output, &hyps)?;
    Ok(hyps.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub bleu: BleuReport,
    pub binned: Option<BinnedReport>,
}

impl Evaluation {
    pub fn to_tsv(&self) -> String {
        let mut s = self.bleu.to_tsv();
        if let Some(b) = &self.binned {
            s.push_str(&b.to_tsv());
        }
        s
    }
}

/// BLEU of `hyps` against `refs`; with a checkpoint, also the binned token
/// report over the checkpoint's target subwords and frequency bins.
pub fn evaluate_lines(hyps: &[String], refs: &[String], ck: Option<&Checkpoint>) -> Result<Evaluation> {
    let bleu = corpus_bleu(hyps, refs)?;
    let binned = match ck {
        None => None,
        Some(ck) => {
            let bins = frequency_bins(&ck.tgt_vocab)?;
            let h = segment(&ck.tgt_merges, hyps);
            let r = segment(&ck.tgt_merges, refs);
            Some(binned_scores(&h, &r, &ck.tgt_vocab, &bins)?)
        }
    };
    Ok(Evaluation { bleu, binned })
}

pub fn evaluate(hyp: &Path, reference: &Path, checkpoint: Option<&Path>) -> Result<Evaluation> {
    let (h, r) = read_parallel(hyp, reference)?;
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    evaluate_lines(&h, &r, ck.as_ref())
}

/// Inputs of a significance test: two hypothesis files, or two checkpoints
/// translating one source file.
pub enum SignificanceInput<'a> {
    Hypotheses { a: &'a Path, b: &'a Path },
    Checkpoints { a: &'a Path, b: &'a Path, source: &'a Path },
}

pub fn significance(
    input: SignificanceInput<'_>,
    reference: &Path,
    resamples: usize,
    seed: u64,
) -> Result<SignificanceReport> {
    let refs = read_lines(reference)?;
    let (a, b) = match input {
        SignificanceInput::Hypotheses { a, b } => (read_parallel(a, reference)?.0, read_parallel(b, reference)?.0),
        SignificanceInput::Checkpoints { a, b, source } => {
            let src = read_parallel(source, reference)?.0;
            let ta = translate_lines(&Checkpoint::load(a)?, &src, None)?;
            let tb = translate_lines(&Checkpoint::load(b)?, &src, None)?;
            (ta, tb)
        }
    };
    paired_bootstrap(&a, &b, &refs, resamples, seed)
}

/// Ablation grid: every fixed variant once, the joint layer per grid size.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<(LayerVariant, usize)> {
    let mut rows: Vec<(LayerVariant, usize)> = LayerVariant::ALL
        .iter()
        .filter(|&&v| v != LayerVariant::Joint)
        .map(|&v| (v, cfg.d_j))
        .collect();
    rows.extend(cfg.dj_grid.iter().map(|&dj| (LayerVariant::Joint, dj)));
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: LayerVariant,
    pub d_j: Option<usize>,
    pub layer_form: &'static str,
    /// Best dev BLEU (or negated train loss without a dev set).
    pub score: f64,
    /// Whole-model effective parameters: everything but the joint
    /// projection biases, which the capacity accounting leaves uncounted.
    pub params: usize,
    /// Whole-model allocated elements.
    pub allocated: usize,
    /// Effective output-layer capacity.
    pub output_params: usize,
}

pub const ABLATION_HEADER: &str = "variant\td_j\tlayer_form\tscore\tparams\tallocated\toutput_params";

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\n",
            r.variant,
            r.d_j.map_or("-".to_string(), |d| d.to_string()),
            r.layer_form,
            r.score,
            r.params,
            r.allocated,
            r.output_params
        ));
    }
    s
}

/// Trains every grid entry with the shared seed and data (each in its own
/// subdirectory of `out_dir`) and writes `ablation.tsv`.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    for (variant, d_j) in ablation_grid(cfg) {
        let mut c = cfg.clone();
        c.variant = variant;
        c.d_j = d_j;
        let uses_dj = variant == LayerVariant::Joint;
        c.out_dir = cfg.out_dir.join(if uses_dj { format!("{variant}-{d_j}") } else { variant.to_string() });
        let outcome = train(&c, false)?;
        let tgt = Vocabulary::load(&DataFiles::new(&cfg.data_dir).vocab("tgt"))?;
        let cap = param_count(variant, tgt.len(), c.d, c.d_h, d_j)?;
        rows.push(AblationRow {
            variant,
            d_j: uses_dj.then_some(d_j),
            layer_form: variant.layer_form(),
            score: outcome.best_score,
            params: outcome.params - cap.uncounted.iter().map(|(_, n)| n).sum::<usize>(),
            allocated: outcome.params,
            output_params: cap.effective_param_count,
        });
    }
    let path = cfg.out_dir.join("ablation.tsv");
    std::fs::write(&path, ablation_tsv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: LayerVariant,
    pub d_j: usize,
    pub rate: f64,
    pub steps: usize,
    pub tokens: usize,
    pub seconds: f64,
}

impl BenchRow {
    pub fn tokens_per_sec(&self) -> f64 {
        self.tokens as f64 / self.seconds
    }
}

pub const BENCH_HEADER: &str = "variant\td_j\trate\tsteps\ttokens\tseconds\ttokens_per_sec";

pub fn bench_tsv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}\t{:.1}\n",
            r.variant,
            r.d_j,
            r.rate,
            r.steps,
            r.tokens,
            r.seconds,
            r.tokens_per_sec()
        ));
    }
    s
}

/// Training throughput of `base` for every `(d_j, rate)` combination over
/// a fixed workload. After `warmup` untimed steps, every batch of the
/// workload is trained once and timed.
pub fn bench_throughput(
    base: &ModelConfig,
    dj_grid: &[usize],
    rates: &[f64],
    workload: &[Batch],
    warmup: usize,
) -> Result<Vec<BenchRow>> {
    if workload.is_empty() {
        return Err(Error::Argument("empty benchmark workload".into()));
    }
    let mut rows = Vec::new();
    for &d_j in dj_grid {
        for &rate in rates {
            let cfg = ModelConfig {
                d_j,
                sample_rate: rate,
                ..base.clone()
            };
            let mut t = Trainer::new(Seq2Seq::new(cfg)?, AdamConfig::default());
            for b in workload.iter().cycle().take(warmup) {
                t.train_step(b)?;
            }
            let start = Instant::now();
            let mut tokens = 0;
            for b in workload {
                tokens += t.train_step(b)?.tokens;
            }
            rows.push(BenchRow {
                variant: base.variant,
                d_j,
                rate,
                steps: workload.len(),
                tokens,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub variant: LayerVariant,
    pub d_j: Option<usize>,
    pub effective: usize,
    pub uncounted: usize,
    /// Output-layer elements actually allocated.
    pub allocated: usize,
    /// Whole-model allocated elements.
    pub model_total: usize,
}

pub const COUNT_HEADER: &str = "variant\td_j\teffective\tuncounted\tallocated\tmodel_total";

pub fn count_tsv(rows: &[CountRow]) -> String {
    let mut s = format!("{COUNT_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.d_j.map_or("-".to_string(), |d| d.to_string()),
            r.effective,
            r.uncounted,
            r.allocated,
            r.model_total
        ));
    }
    s
}

/// Capacity of every ablation-grid entry for the given vocabulary sizes;
/// entries whose structural constraint fails (tying with `d != d_h`) are skipped.
pub fn count_params(cfg: &RunConfig, src_vocab: usize, tgt_vocab: usize) -> Result<Vec<CountRow>> {
    let mut rows = Vec::new();
    for (variant, d_j) in ablation_grid(cfg) {
        let cap = match param_count(variant, tgt_vocab, cfg.d, cfg.d_h, d_j) {
            Ok(c) => c,
            Err(Error::Constraint(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut c = cfg.clone();
        c.variant = variant;
        c.d_j = d_j;
        let model = Seq2Seq::new(c.model_config(src_vocab, tgt_vocab))?;
        rows.push(CountRow {
            variant,
            d_j: (variant == LayerVariant::Joint).then_some(d_j),
            effective: cap.effective_param_count,
            uncounted: cap.uncounted.iter().map(|(_, n)| n).sum(),
            allocated: model.output.allocated_params(),
            model_total: model.param_count(),
        });
    }
    Ok(rows)
}

/// Creates (truncating) a file for a report.
pub fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}
