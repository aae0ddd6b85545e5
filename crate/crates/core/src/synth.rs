//! Synthetic parallel corpora: a copy task, a lemma+tag inflection task
//! with Zipfian lemma frequencies, and a large-vocabulary benchmark workload.
//!
//! Corpora are whitespace-tokenized lines so they flow through the same
//! vocabulary code as real data.

use crate::bpe::{build_vocab, Vocabulary};
use crate::ndmath::{stream, Rng};
use crate::seq2seq::Batch;

/// Aligned source/target lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn push(&mut self, src: Vec<String>, tgt: Vec<String>) {
        self.src.push(src.join(" "));
        self.tgt.push(tgt.join(" "));
    }
}

/// Index pairs ready for training.
pub type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

pub fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

/// Vocabulary over every whitespace token of `lines`.
pub fn vocab_of(lines: &[String]) -> Vocabulary {
    let toks: Vec<Vec<String>> = lines.iter().map(|l| tokens(l)).collect();
    build_vocab(&toks, None)
}

/// Encodes a corpus with the given vocabularies.
pub fn encode(corpus: &Corpus, src: &Vocabulary, tgt: &Vocabulary) -> Pairs {
    corpus
        .src
        .iter()
        .zip(&corpus.tgt)
        .map(|(s, t)| (src.encode(&tokens(s)), tgt.encode(&tokens(t))))
        .collect()
}

/// Train/dev splits of one task plus vocabularies built on the training side.
#[derive(Clone, Debug)]
pub struct Task {
    pub train: Corpus,
    pub dev: Corpus,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl Task {
    fn from_splits(train: Corpus, dev: Corpus, src_types: &[String], tgt_types: &[String]) -> Task {
        // Every type is listed once more so dev-only types are in-vocabulary;
        // frequencies stay training counts plus one.
        let mut src_lines = train.src.clone();
        src_lines.push(src_types.join(" "));
        let mut tgt_lines = train.tgt.clone();
        tgt_lines.push(tgt_types.join(" "));
        Task {
            src_vocab: vocab_of(&src_lines),
            tgt_vocab: vocab_of(&tgt_lines),
            train,
            dev,
        }
    }

    pub fn train_pairs(&self) -> Pairs {
        encode(&self.train, &self.src_vocab, &self.tgt_vocab)
    }

    pub fn dev_pairs(&self) -> Pairs {
        encode(&self.dev, &self.src_vocab, &self.tgt_vocab)
    }
}

/// Copy task: uniform random sentences over `vocab` word types with lengths
/// in `min_len..=max_len`; target equals source.
pub fn copy_task(vocab: usize, train: usize, dev: usize, min_len: usize, max_len: usize, seed: u64) -> Task {
    let mut rng = Rng::derive(seed, stream::DATA, 0);
    let types: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    let mut gen = |n: usize| {
        let mut c = Corpus::default();
        for _ in 0..n {
            let len = min_len + rng.below(max_len - min_len + 1);
            let s: Vec<String> = (0..len).map(|_| types[rng.below(vocab)].clone()).collect();
            c.push(s.clone(), s);
        }
        c
    };
    let tr = gen(train);
    let dv = gen(dev);
    Task::from_splits(tr, dv, &types, &types)
}

/// Settings of the inflection task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TagTaskConfig {
    pub lemmas: usize,
    pub tags: usize,
    pub train: usize,
    pub dev: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of lemma frequencies.
    pub zipf: f64,
}

impl Default for TagTaskConfig {
    fn default() -> Self {
        TagTaskConfig {
            lemmas: 60,
            tags: 10,
            train: 3000,
            dev: 300,
            min_len: 3,
            max_len: 8,
            zipf: 1.0,
        }
    }
}

/// Inflection task: each source word is a lemma token followed by a tag
/// token (`l7 +T3`); the target is the inflected form as one token
/// (`l7_T3`). Target types share their lemma and tag structure, and the
/// Zipfian lemma distribution leaves many forms rare.
pub fn tag_task(cfg: &TagTaskConfig, seed: u64) -> Task {
    let mut rng = Rng::derive(seed, stream::DATA, 1);
    let weights: Vec<f64> = (0..cfg.lemmas).map(|i| 1.0 / ((i + 1) as f64).powf(cfg.zipf)).collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let draw_lemma = |rng: &mut Rng| {
        let u = rng.next_f64();
        cdf.iter().position(|&c| u < c).unwrap_or(cfg.lemmas - 1)
    };
    let gen = |n: usize, rng: &mut Rng| {
        let mut c = Corpus::default();
        for _ in 0..n {
            let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
            let mut s = Vec::with_capacity(2 * len);
            let mut t = Vec::with_capacity(len);
            for _ in 0..len {
                let l = draw_lemma(rng);
                let g = rng.below(cfg.tags);
                s.push(format!("l{l}"));
                s.push(format!("+T{g}"));
                t.push(format!("l{l}_T{g}"));
            }
            c.push(s, t);
        }
        c
    };
    let tr = gen(cfg.train, &mut rng);
    let dv = gen(cfg.dev, &mut rng);
    let mut src_types: Vec<String> = (0..cfg.lemmas).map(|l| format!("l{l}")).collect();
    src_types.extend((0..cfg.tags).map(|g| format!("+T{g}")));
    let tgt_types: Vec<String> = (0..cfg.lemmas)
        .flat_map(|l| (0..cfg.tags).map(move |g| format!("l{l}_T{g}")))
        .collect();
    Task::from_splits(tr, dv, &src_types, &tgt_types)
}

/// Fixed benchmark workload: `batches` batches of `batch_size` random
/// sentence pairs of exactly `len` tokens over indices `4..vocab`.
pub fn bench_batches(vocab: usize, batches: usize, batch_size: usize, len: usize, seed: u64) -> Vec<Batch> {
    let mut rng = Rng::derive(seed, stream::DATA, 2);
    let n = vocab - crate::bpe::SPECIALS.len();
    (0..batches)
        .map(|_| {
            let mut sent = || -> Vec<usize> { (0..len).map(|_| 4 + rng.below(n)).collect() };
            let src: Vec<Vec<usize>> = (0..batch_size).map(|_| sent()).collect();
            let tgt: Vec<Vec<usize>> = (0..batch_size).map(|_| sent()).collect();
            Batch::new(src, tgt).expect("nonempty synthetic batch")
        })
        .collect()
}
