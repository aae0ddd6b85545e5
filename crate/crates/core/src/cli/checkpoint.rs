//! Binary checkpoint: magic `SAOL1`, a format version, then length-prefixed
//! sections (little-endian throughout): run config text, both vocabularies
//! and merge tables, every model tensor (name, shape, f64 data), optional
//! Adam state and the training counters.

use std::io::{Read, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::bpe::{MergeTable, Vocabulary};
use crate::error::{Error, Result};
use crate::ndmath::{AdamConfig, AdamState, Matrix};
use crate::seq2seq::{Seq2Seq, TrainerState};

pub const MAGIC: &[u8; 5] = b"SAOL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub src_merges: MergeTable,
    pub tgt_merges: MergeTable,
    pub model: Seq2Seq,
    pub trainer: Option<TrainerState>,
    /// Completed epochs.
    pub epoch: u64,
    /// Best dev score so far (BLEU), `-inf` before the first evaluation.
    pub best_score: f64,
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.out.write_all(b)
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u64(s.len() as u64)?;
        self.bytes(s.as_bytes())
    }
    fn matrix(&mut self, m: &Matrix) -> std::io::Result<()> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        let mut buf = Vec::with_capacity(m.len() * 8);
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("checkpoint", "size overflow"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<&'a str> {
        let n = self.usize()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { out: Vec::new() };
        self.write_to(&mut w).expect("writing to memory");
        w.out
    }

    fn write_to<W: Write>(&self, w: &mut Writer<W>) -> std::io::Result<()> {
        w.bytes(MAGIC)?;
        w.bytes(&FORMAT_VERSION.to_le_bytes())?;
        w.str(&self.config.to_text())?;
        w.str(&self.src_vocab.to_text())?;
        w.str(&self.tgt_vocab.to_text())?;
        w.str(&self.src_merges.to_text())?;
        w.str(&self.tgt_merges.to_text())?;
        let tensors = self.model.tensors();
        w.u64(tensors.len() as u64)?;
        for (name, t) in &tensors {
            w.str(name)?;
            w.matrix(t)?;
        }
        match &self.trainer {
            None => w.bytes(&[0])?,
            Some(state) => {
                w.bytes(&[1])?;
                w.u64(state.step)?;
                let cfg = state.adam.first().map(|a| a.config).unwrap_or_default();
                for v in [cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon] {
                    w.f64(v)?;
                }
                w.u64(state.adam.len() as u64)?;
                for a in &state.adam {
                    w.u64(a.step)?;
                    w.matrix(&a.m)?;
                    w.matrix(&a.v)?;
                }
            }
        }
        w.u64(self.epoch)?;
        w.f64(self.best_score)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::format("checkpoint", "bad magic (not a SAOL1 checkpoint)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let config = RunConfig::parse(r.str()?)?;
        let src_vocab = Vocabulary::parse(r.str()?)?;
        let tgt_vocab = Vocabulary::parse(r.str()?)?;
        let src_merges = MergeTable::parse(r.str()?)?;
        let tgt_merges = MergeTable::parse(r.str()?)?;
        let mut model = Seq2Seq::new(config.model_config(src_vocab.len(), tgt_vocab.len()))?;
        let count = r.usize()?;
        let expected = model.tensors().len();
        if count != expected {
            return Err(Error::Version(format!(
                "checkpoint holds {count} tensors, the configured model has {expected}"
            )));
        }
        for (name, slot) in model.tensors_mut() {
            let got = r.str()?;
            if got != name {
                return Err(Error::Version(format!("expected tensor '{name}', found '{got}'")));
            }
            let m = r.matrix()?;
            if m.shape() != slot.shape() {
                return Err(Error::Version(format!(
                    "tensor '{name}' has shape {:?}, vocabulary/config imply {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        let trainer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let cfg = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let n = r.usize()?;
                let mut adam = Vec::with_capacity(n);
                for _ in 0..n {
                    let s = r.u64()?;
                    let m = r.matrix()?;
                    let v = r.matrix()?;
                    adam.push(AdamState {
                        config: cfg,
                        step: s,
                        m,
                        v,
                    });
                }
                Some(TrainerState { step, adam })
            }
            _ => return Err(Error::format("checkpoint", "bad optimizer flag")),
        };
        let epoch = r.u64()?;
        let best_score = r.f64()?;
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            src_vocab,
            tgt_vocab,
            src_merges,
            tgt_merges,
            model,
            trainer,
            epoch,
            best_score,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = Writer {
            out: std::io::BufWriter::new(file),
        };
        self.write_to(&mut w)
            .and_then(|_| w.out.flush())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}
