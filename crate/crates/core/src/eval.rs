//! Corpus BLEU, paired bootstrap resampling and frequency-binned token
//! precision/recall.
//!
//! BLEU follows `multi-bleu.perl`: whitespace tokens, clipped n-gram
//! precisions for n = 1..4 pooled over the corpus, no smoothing, brevity
//! penalty `exp(1 - r/c)` when the hypothesis is shorter.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::bpe::{FrequencyBins, Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::ndmath::{stream, Rng};

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MIN_RESAMPLES: usize = 100;

/// BLEU sufficient statistics of one sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SentenceStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl SentenceStats {
    pub fn new<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> Self {
        let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        let mut s = SentenceStats {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn from_lines(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        SentenceStats::new(&h, &r)
    }

    fn add(&mut self, o: &SentenceStats, times: usize) {
        self.hyp_len += o.hyp_len * times;
        self.ref_len += o.ref_len * times;
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n] * times;
            self.totals[n] += o.totals[n] * times;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuReport {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn from_stats(total: &SentenceStats) -> Self {
        let precisions: [f64; MAX_ORDER] = std::array::from_fn(|n| {
            if total.totals[n] == 0 {
                0.0
            } else {
                total.matches[n] as f64 / total.totals[n] as f64
            }
        });
        let (c, r) = (total.hyp_len as f64, total.ref_len as f64);
        let brevity_penalty = if total.hyp_len == 0 {
            0.0
        } else if c < r {
            (1.0 - r / c).exp()
        } else {
            1.0
        };
        let bleu = if precisions.contains(&0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            (100.0 * brevity_penalty * mean_log.exp()).min(100.0)
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            hyp_len: total.hyp_len,
            ref_len: total.ref_len,
        }
    }

    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu\t{:.4}", self.bleu);
        for (n, p) in self.precisions.iter().enumerate() {
            let _ = writeln!(s, "p{}\t{:.6}", n + 1, p);
        }
        let _ = writeln!(s, "brevity_penalty\t{:.6}", self.brevity_penalty);
        let _ = writeln!(s, "hyp_len\t{}", self.hyp_len);
        let _ = writeln!(s, "ref_len\t{}", self.ref_len);
        s
    }

    pub fn summary_line(&self) -> String {
        format!("bleu\t{:.4}", self.bleu)
    }
}

fn check_aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("{what}: {a} lines vs {b} lines")));
    }
    Ok(())
}

/// Per-sentence statistics of aligned whitespace-tokenized lines.
pub fn sentence_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<Vec<SentenceStats>> {
    check_aligned("hypotheses vs references", hyps.len(), refs.len())?;
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| SentenceStats::from_lines(h.as_ref(), r.as_ref()))
        .collect())
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    let stats = sentence_stats(hyps, refs)?;
    let mut total = SentenceStats::default();
    for s in &stats {
        total.add(s, 1);
    }
    Ok(BleuReport::from_stats(&total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum System {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceReport {
    /// `1 - max(wins_a, wins_b) / resamples`.
    pub p_value: f64,
    /// `1 - wins_a / resamples`: significance of "A is better".
    pub p_a: f64,
    pub p_b: f64,
    pub resamples: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// BLEU(A) - BLEU(B) on the full corpus.
    pub delta: f64,
    pub bleu_a: f64,
    pub bleu_b: f64,
}

impl SignificanceReport {
    /// System with more resample wins, if any.
    pub fn better(&self) -> Option<System> {
        match self.wins_a.cmp(&self.wins_b) {
            std::cmp::Ordering::Greater => Some(System::A),
            std::cmp::Ordering::Less => Some(System::B),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu_a\t{:.4}", self.bleu_a);
        let _ = writeln!(s, "bleu_b\t{:.4}", self.bleu_b);
        let _ = writeln!(s, "delta\t{:.4}", self.delta);
        let _ = writeln!(s, "resamples\t{}", self.resamples);
        let _ = writeln!(s, "wins_a\t{}", self.wins_a);
        let _ = writeln!(s, "wins_b\t{}", self.wins_b);
        let _ = writeln!(s, "ties\t{}", self.ties);
        let _ = writeln!(s, "p_a\t{:.6}", self.p_a);
        let _ = writeln!(s, "p_b\t{:.6}", self.p_b);
        let _ = writeln!(s, "p_value\t{:.6}", self.p_value);
        s
    }

    pub fn summary_line(&self) -> String {
        format!("p_value\t{:.6}", self.p_value)
    }
}

/// Paired bootstrap over sentence indices. Resample `i` draws from
/// `Rng::derive(seed, BOOTSTRAP, i)`; a resample where both systems score
/// the same BLEU is a win for neither.
pub fn paired_bootstrap<A, B, R>(
    hyp_a: &[A],
    hyp_b: &[B],
    refs: &[R],
    resamples: usize,
    seed: u64,
) -> Result<SignificanceReport>
where
    A: AsRef<str>,
    B: AsRef<str>,
    R: AsRef<str>,
{
    check_aligned("system A vs references", hyp_a.len(), refs.len())?;
    check_aligned("system B vs references", hyp_b.len(), refs.len())?;
    if refs.is_empty() {
        return Err(Error::Argument("bootstrap needs at least one sentence".into()));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::Argument(format!(
            "bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    let sa = sentence_stats(hyp_a, refs)?;
    let sb = sentence_stats(hyp_b, refs)?;
    let n = refs.len();
    let bleu_of = |stats: &[SentenceStats], counts: &[usize]| {
        let mut total = SentenceStats::default();
        for (s, &k) in stats.iter().zip(counts) {
            if k > 0 {
                total.add(s, k);
            }
        }
        BleuReport::from_stats(&total).bleu
    };
    let ones = vec![1; n];
    let bleu_a = bleu_of(&sa, &ones);
    let bleu_b = bleu_of(&sb, &ones);
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    let mut counts = vec![0usize; n];
    for i in 0..resamples {
        let mut rng = Rng::derive(seed, stream::BOOTSTRAP, i as u64);
        counts.fill(0);
        for _ in 0..n {
            counts[rng.below(n)] += 1;
        }
        let (a, b) = (bleu_of(&sa, &counts), bleu_of(&sb, &counts));
        match a.partial_cmp(&b) {
            Some(std::cmp::Ordering::Greater) => wins_a += 1,
            Some(std::cmp::Ordering::Less) => wins_b += 1,
            _ => ties += 1,
        }
    }
    let r = resamples as f64;
    Ok(SignificanceReport {
        p_value: 1.0 - wins_a.max(wins_b) as f64 / r,
        p_a: 1.0 - wins_a as f64 / r,
        p_b: 1.0 - wins_b as f64 / r,
        resamples,
        wins_a,
        wins_b,
        ties,
        delta: bleu_a - bleu_b,
        bleu_a,
        bleu_b,
    })
}

/// Token metrics of one frequency bin. A metric is `None` when its
/// denominator is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct BinMetrics {
    pub name: &'static str,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// `None` only when both precision and recall are; an absent side counts as 0.
    pub f1: Option<f64>,
    pub matched: usize,
    pub hyp_count: usize,
    /// Reference token occurrences in the bin.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinnedReport {
    pub bins: Vec<BinMetrics>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl BinnedReport {
    pub fn get(&self, name: &str) -> Option<&BinMetrics> {
        self.bins.iter().find(|b| b.name == name)
    }

    /// Header plus one row per bin; absent metrics print as `-`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin\tprecision\trecall\tf1\tmatched\thyp_count\tsupport\n");
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.name,
                fmt_opt(b.precision),
                fmt_opt(b.recall),
                fmt_opt(b.f1),
                b.matched,
                b.hyp_count,
                b.support
            );
        }
        s
    }
}

/// Per-bin token precision/recall with per-sentence multiset matching.
/// Tokens are looked up in `vocab`; out-of-vocabulary tokens belong to the
/// low bin and special tokens are ignored.
pub fn binned_scores<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[Vec<H>],
    refs: &[Vec<R>],
    vocab: &Vocabulary,
    bins: &FrequencyBins,
) -> Result<BinnedReport> {
    check_aligned("hypotheses vs references", hyps.len(), refs.len())?;
    let mut bin_of = vec![None; vocab.len()];
    for (k, ids) in bins.bins().iter().enumerate() {
        for &i in ids.iter() {
            if i >= vocab.len() || bin_of[i].is_some() {
                return Err(Error::Argument("bins are not a partition of the vocabulary".into()));
            }
            bin_of[i] = Some(k);
        }
    }
    let classify = |t: &str| -> Option<usize> {
        if SPECIALS.contains(&t) {
            return None;
        }
        match vocab.index_of(t) {
            Some(i) => bin_of[i],
            None => Some(2),
        }
    };
    let mut matched = [0usize; 3];
    let mut hyp_count = [0usize; 3];
    let mut support = [0usize; 3];
    for (h, r) in hyps.iter().zip(refs) {
        let mut rc: HashMap<&str, usize> = HashMap::new();
        for t in r {
            if let Some(k) = classify(t.as_ref()) {
                support[k] += 1;
                *rc.entry(t.as_ref()).or_default() += 1;
            }
        }
        for t in h {
            if let Some(k) = classify(t.as_ref()) {
                hyp_count[k] += 1;
                if let Some(c) = rc.get_mut(t.as_ref()) {
                    if *c > 0 {
                        *c -= 1;
                        matched[k] += 1;
                    }
                }
            }
        }
    }
    let bins = (0..3)
        .map(|k| {
            let precision = (hyp_count[k] > 0).then(|| matched[k] as f64 / hyp_count[k] as f64);
            let recall = (support[k] > 0).then(|| matched[k] as f64 / support[k] as f64);
            let f1 = if precision.is_none() && recall.is_none() {
                None
            } else {
                let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
                Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            };
            BinMetrics {
                name: FrequencyBins::NAMES[k],
                precision,
                recall,
                f1,
                matched: matched[k],
                hyp_count: hyp_count[k],
                support: support[k],
            }
        })
        .collect();
    Ok(BinnedReport { bins })
}

/// Positional token accuracy: matches at equal positions over
/// `sum(max(len(hyp), len(ref)))`; 1 for an all-empty corpus.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_aligned("hypotheses vs references", hyps.len(), refs.len())?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}
