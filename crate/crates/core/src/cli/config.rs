use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::outlayer::LayerVariant;
use crate::seq2seq::ModelConfig;

/// Everything a run needs. Serialized as flat `key = value` lines with `#`
/// comments; precedence is command line, then file, then [`Default`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    /// Preprocessed artifacts (merges, vocabularies, segmented corpora).
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub bpe_ops: usize,
    /// One merge table over both sides instead of one per side.
    pub joint_bpe: bool,
    pub d: usize,
    pub d_h: usize,
    pub d_j: usize,
    pub layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub variant: LayerVariant,
    pub sample_rate: f64,
    pub seed: u64,
    pub bidirectional: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    /// Joint-space sizes swept by `ablate` and `bench`.
    pub dj_grid: Vec<usize>,
    /// Sampling rates swept by `bench`.
    pub bench_rates: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            bpe_ops: 32000,
            joint_bpe: false,
            d: 512,
            d_h: 512,
            d_j: 512,
            layers: 2,
            dropout: 0.3,
            max_len: 50,
            variant: LayerVariant::Joint,
            sample_rate: 1.0,
            seed: 1,
            bidirectional: false,
            epochs: 10,
            batch_size: 64,
            lr: 0.001,
            clip: 5.0,
            dj_grid: vec![512, 2048, 4096],
            bench_rates: vec![0.5, 0.25, 0.05],
        }
    }
}

pub const KEYS: &[&str] = &[
    "train_src",
    "train_tgt",
    "dev_src",
    "dev_tgt",
    "data_dir",
    "out_dir",
    "bpe_ops",
    "joint_bpe",
    "d",
    "d_h",
    "d_j",
    "layers",
    "dropout",
    "max_len",
    "variant",
    "sample_rate",
    "seed",
    "bidirectional",
    "epochs",
    "batch_size",
    "lr",
    "clip",
    "dj_grid",
    "bench_rates",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Argument(format!("bad value for {key}: '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Argument(format!("bad value for {key}: '{v}' (expected true/false)"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "train_src" => self.train_src = path(v),
            "train_tgt" => self.train_tgt = path(v),
            "dev_src" => self.dev_src = path(v),
            "dev_tgt" => self.dev_tgt = path(v),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "bpe_ops" => self.bpe_ops = parse_num(key, v)?,
            "joint_bpe" => self.joint_bpe = parse_bool(key, v)?,
            "d" => self.d = parse_num(key, v)?,
            "d_h" => self.d_h = parse_num(key, v)?,
            "d_j" => self.d_j = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "sample_rate" => self.sample_rate = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "bidirectional" => self.bidirectional = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "clip" => self.clip = parse_num(key, v)?,
            "dj_grid" => self.dj_grid = parse_list(key, v)?,
            "bench_rates" => self.bench_rates = parse_list(key, v)?,
            _ => return Err(Error::Argument(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Textual value of one field (empty for unset paths).
    pub fn get(&self, key: &str) -> Option<String> {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|x| x.display().to_string()).unwrap_or_default();
        Some(match key {
            "train_src" => p(&self.train_src),
            "train_tgt" => p(&self.train_tgt),
            "dev_src" => p(&self.dev_src),
            "dev_tgt" => p(&self.dev_tgt),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "bpe_ops" => self.bpe_ops.to_string(),
            "joint_bpe" => self.joint_bpe.to_string(),
            "d" => self.d.to_string(),
            "d_h" => self.d_h.to_string(),
            "d_j" => self.d_j.to_string(),
            "layers" => self.layers.to_string(),
            "dropout" => self.dropout.to_string(),
            "max_len" => self.max_len.to_string(),
            "variant" => self.variant.to_string(),
            "sample_rate" => self.sample_rate.to_string(),
            "seed" => self.seed.to_string(),
            "bidirectional" => self.bidirectional.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "clip" => self.clip.to_string(),
            "dj_grid" => join(&self.dj_grid),
            "bench_rates" => join(&self.bench_rates),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("config", format!("line {}: expected 'key = value'", i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::format("config", format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d: self.d,
            d_h: self.d_h,
            d_j: self.d_j,
            layers: self.layers,
            dropout: self.dropout,
            max_len: self.max_len,
            variant: self.variant,
            sample_rate: self.sample_rate,
            seed: self.seed,
            bidirectional: self.bidirectional,
        }
    }

    /// Checks the training-loop fields; model fields are checked by [`ModelConfig::validate`].
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Argument("lr and clip must be positive".into()));
        }
        Ok(())
    }
}
