//! Byte-pair-encoding subwords, vocabularies and frequency bins.
//!
//! Lines are whitespace-tokenized into words. Learning works on characters
//! with an internal end-of-word marker; applied output uses the `@@ `
//! continuation convention (`Fri@@ day`), undone by [`detokenize`].
//! The characters `& < > @` are carried as the entities `&amp; &lt; &gt;
//! &#64;` (one symbol each) so no subword can contain a raw marker.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Reserved tokens, by index.
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Suffix marking the final symbol of a word inside a merge table.
const END: &str = "</w>";
/// Continuation suffix on every subword except the last of a word.
pub const CONTINUATION: &str = "@@";
const MERGES_HEADER: &str = "SAOL-BPE v1";

/// Ordered merge operations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(Error::format(
                    "merge table",
                    format!("duplicate merge '{} {}'", pair.0, pair.1),
                ));
            }
        }
        Ok(MergeTable { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Serialized form: header line, then `left right` per merge.
    pub fn to_text(&self) -> String {
        let mut s = String::from(MERGES_HEADER);
        s.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MERGES_HEADER => {}
            Some(h) => {
                return Err(Error::Version(format!(
                    "merge file header is '{h}', expected '{MERGES_HEADER}'"
                )))
            }
            None => return Err(Error::format("merge file", "empty")),
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::format(
                        "merge file",
                        format!("line {}: expected 'left right', got '{line}'", i + 2),
                    ))
                }
            }
        }
        MergeTable::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MergeTable::parse(&text)
    }

    /// Symbols the table can emit over `lines`: every base character (plain
    /// and word-final) plus every merge result.
    pub fn symbol_inventory<S: AsRef<str>>(&self, lines: &[S]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for w in lines.iter().flat_map(|l| l.as_ref().split_whitespace()) {
            out.extend(word_symbols(w));
            out.extend(w.chars().map(escape_char));
        }
        out.extend(self.merges.iter().map(|(l, r)| format!("{l}{r}")));
        out
    }

    /// Subwords of one word, continuation markers attached.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            symbols = merge_pair(&symbols, l, r);
        }
        let last = symbols.len() - 1;
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if i == last {
                    s[..s.len() - END.len()].to_string()
                } else {
                    s + CONTINUATION
                }
            })
            .collect()
    }
}

fn escape_char(c: char) -> String {
    match c {
        '&' => "&amp;".into(),
        '<' => "&lt;".into(),
        '>' => "&gt;".into(),
        '@' => "&#64;".into(),
        c => c.into(),
    }
}

fn unescape(s: &str) -> String {
    // `&amp;` last: every other entity's `&` in the input was itself escaped
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&#64;", "@")
        .replace("&amp;", "&")
}

/// Characters of `word`, the last one carrying the end marker.
fn word_symbols(word: &str) -> Vec<String> {
    let mut out: Vec<String> = word.chars().map(escape_char).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(END);
    }
    out
}

fn merge_pair(symbols: &[String], l: &str, r: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_ops` merges. Each round merges the most frequent
/// adjacent pair, ties going to the lexicographically smallest pair; learning
/// stops early once no pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(lines: &[S], num_ops: usize) -> Result<MergeTable> {
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Argument("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| (word_symbols(w), f))
        .collect();

    let mut pair_counts: HashMap<(String, String), i64> = HashMap::new();
    let mut where_: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0].clone(), p[1].clone());
            *pair_counts.entry(key.clone()).or_default() += *f as i64;
            where_.entry(key).or_default().push(wi);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < num_ops {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(ka, ca), (kb, cb)| ca.cmp(cb).then_with(|| kb.cmp(ka)));
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();
        let mut affected = where_.remove(&pair).unwrap_or_default();
        affected.sort_unstable();
        affected.dedup();
        for wi in affected {
            let (syms, f) = &mut words[wi];
            let f = *f as i64;
            if !syms.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue;
            }
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= f;
                    if *c <= 0 {
                        pair_counts.remove(&key);
                    }
                }
            }
            *syms = merge_pair(syms, &pair.0, &pair.1);
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_default() += f;
                where_.entry(key).or_default().push(wi);
            }
        }
        pair_counts.remove(&pair);
        merges.push(pair);
    }
    MergeTable::from_merges(merges)
}

/// Segments a line into subword tokens.
pub fn apply_bpe(merges: &MergeTable, line: &str) -> Vec<String> {
    line.split_whitespace()
        .flat_map(|w| merges.segment_word(w))
        .collect()
}

/// Joins subword tokens back into a line of words.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    unescape(&out)
}

/// Subword token to index map with corpus frequencies; indices 0..4 are [`SPECIALS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from `(token, frequency)` pairs in index order, after the specials.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; SPECIALS.len()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for (tok, f) in entries {
            if index.insert(tok.clone(), tokens.len()).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token '{tok}'")));
            }
            tokens.push(tok);
            freqs.push(f);
        }
        Ok(Vocabulary {
            tokens,
            freqs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS.len()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn frequency(&self, index: usize) -> u64 {
        self.freqs.get(index).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.freqs
    }

    /// Token indices; unknown tokens map to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index_of(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Tokens for indices, dropping padding, BOS and EOS.
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    /// `token<TAB>frequency` lines for every non-special token, in index order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, f) in self.tokens.iter().zip(&self.freqs).skip(SPECIALS.len()) {
            let _ = writeln!(s, "{t}\t{f}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, f) = line.split_once('\t').ok_or_else(|| {
                Error::format("vocabulary file", format!("line {}: missing tab", i + 1))
            })?;
            let f: u64 = f.parse().map_err(|_| {
                Error::format("vocabulary file", format!("line {}: bad frequency '{f}'", i + 1))
            })?;
            entries.push((tok.to_string(), f));
        }
        Vocabulary::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text)
    }
}

/// Frequency-sorted vocabulary over tokenized lines. Ties are broken by
/// token string; `max_size` limits the non-special entries.
pub fn build_vocab<L, S>(lines: &[L], max_size: Option<usize>) -> Vocabulary
where
    L: AsRef<[S]>,
    S: AsRef<str>,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in lines {
        for t in line.as_ref() {
            let t = t.as_ref();
            if !SPECIALS.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(String, u64)> =
        counts.into_iter().map(|(t, f)| (t.to_string(), f)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(m) = max_size {
        entries.truncate(m);
    }
    Vocabulary::from_entries(entries).expect("counted tokens are unique")
}

/// Non-special token indices split into three frequency groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyBins {
    pub high: Vec<usize>,
    pub medium: Vec<usize>,
    pub low: Vec<usize>,
}

impl FrequencyBins {
    pub const NAMES: [&'static str; 3] = ["high", "medium", "low"];

    pub fn bins(&self) -> [&[usize]; 3] {
        [&self.high, &self.medium, &self.low]
    }
}

/// Sorts non-special tokens by frequency (descending, ties by token) and cuts
/// them into three groups of `n / 3`, the remainder going to the high bin.
pub fn frequency_bins(vocab: &Vocabulary) -> Result<FrequencyBins> {
    let mut ids: Vec<usize> = (SPECIALS.len()..vocab.len()).collect();
    if ids.len() < 3 {
        return Err(Error::Argument(format!(
            "frequency bins need at least 3 non-special tokens, got {}",
            ids.len()
        )));
    }
    ids.sort_by(|&a, &b| {
        vocab
            .frequency(b)
            .cmp(&vocab.frequency(a))
            .then_with(|| vocab.token(a).cmp(&vocab.token(b)))
    });
    let k = ids.len() / 3;
    let low = ids.split_off(ids.len() - k);
    let medium = ids.split_off(ids.len() - k);
    Ok(FrequencyBins {
        high: ids,
        medium,
        low,
    })
}
