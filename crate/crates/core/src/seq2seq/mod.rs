//! Stacked LSTM encoder-decoder with Luong global attention ("general"
//! score, concat output layer) hosting any output-layer variant.
//!
//! Row convention: a batch of `B` sentences advances in lock-step; every
//! per-step activation is a `B x width` matrix. Padding positions carry the
//! recurrent state through unchanged, are masked out of attention and are
//! excluded from the loss.
//!
//! Decoder layer `l` starts from the final state of encoder layer `l`. The
//! target embedding is shared with the output layer for every variant except
//! `Full` and receives gradient from both paths.

mod lstm;
mod train;

pub use lstm::{Lstm, LstmStepCache};
pub use train::{
    clip_grad_norm, decode_all, greedy_accuracy, make_batches, EpochReport, StepReport, Trainer,
    TrainerState,
};

use crate::bpe::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::ndmath::{
    dropout_mask, matmul_into, matmul_nt, matmul_tn_into, softmax_inplace, stream, Matrix, Rng,
    INIT_SCALE,
};
use crate::outlayer::{argmax, LayerDims, LayerVariant, OutputLayer};
use crate::sampler::{full_loss_and_grad, sampled_loss_and_grad, SampledSubset};

/// Architecture and regularization of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Embedding width (both sides).
    pub d: usize,
    /// LSTM hidden / translation context width.
    pub d_h: usize,
    /// Joint space width (joint variant only).
    pub d_j: usize,
    /// Stacked layers per side.
    pub layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub variant: LayerVariant,
    /// Fraction of the target vocabulary kept by negative sampling; 1 disables it.
    pub sample_rate: f64,
    pub seed: u64,
    /// Bidirectional encoder, each direction `d_h / 2` wide.
    pub bidirectional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            src_vocab: 0,
            tgt_vocab: 0,
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
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(Error::Argument("max_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.layers < 1 {
            return Err(Error::Argument("layers must be at least 1".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Argument(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.src_vocab == 0 || self.d == 0 || self.d_h == 0 {
            return Err(Error::Argument("vocabulary sizes and widths must be positive".into()));
        }
        if self.bidirectional && !self.d_h.is_multiple_of(2) {
            return Err(Error::Argument("bidirectional encoder needs an even d_h".into()));
        }
        self.output_dims().validate(self.variant)
    }

    pub fn output_dims(&self) -> LayerDims {
        LayerDims {
            vocab: self.tgt_vocab,
            d: self.d,
            d_h: self.d_h,
            d_j: self.d_j,
        }
    }

    fn encoder_hidden(&self) -> usize {
        if self.bidirectional {
            self.d_h / 2
        } else {
            self.d_h
        }
    }
}

/// Sentence pairs of one mini-batch. Targets exclude BOS/EOS; they are added
/// when the batch is run.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Argument(format!(
                "batch has {} sources but {} targets",
                src.len(),
                tgt.len()
            )));
        }
        if src.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if let Some(i) = src.iter().position(Vec::is_empty) {
            return Err(Error::Argument(format!("source sentence {i} is empty")));
        }
        Ok(Batch { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Number of predicted target tokens (including EOS).
    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }

    fn max_tgt(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).max().unwrap_or(0)
    }

    /// Gold output tokens (targets + EOS), the positives for negative sampling.
    pub fn gold_tokens(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.tgt.iter().flatten().copied().collect();
        out.push(EOS);
        out
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (i, (s, t)) in self.src.iter().zip(&self.tgt).enumerate() {
            if s.is_empty() {
                return Err(Error::Argument(format!("source sentence {i} is empty")));
            }
            if let Some(&bad) = s.iter().find(|&&x| x >= cfg.src_vocab) {
                return Err(Error::Argument(format!("source index {bad} out of range")));
            }
            if let Some(&bad) = t.iter().find(|&&x| x >= cfg.tgt_vocab || x == PAD) {
                return Err(Error::Argument(format!("invalid target index {bad}")));
            }
            if s.len() > cfg.max_len || t.len() > cfg.max_len {
                return Err(Error::Argument(format!(
                    "sentence pair {i} exceeds max_len {}",
                    cfg.max_len
                )));
            }
        }
        Ok(())
    }
}

/// Final recurrent state of every layer.
#[derive(Clone, Debug)]
pub struct LayerStates {
    pub h: Vec<Matrix>,
    pub c: Vec<Matrix>,
}

/// Encoder result for one sentence.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `src_len x d_h`.
    pub outputs: Matrix,
    pub finals: LayerStates,
}

/// Decoder state for a batch of sentences.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: LayerStates,
    /// Per sentence, the top-layer encoder outputs `S x d_h` (rows past `src_lens[b]` are padding).
    pub enc: Vec<Matrix>,
    pub src_lens: Vec<usize>,
}

/// Output of one decoder step.
#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// Post-attention states `h_t`, `B x d_h`: the output layer's input.
    pub context: Matrix,
    /// Attention weights over source positions, per sentence.
    pub attention: Vec<Vec<f64>>,
}

/// Loss and gradients of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct PassOutput {
    /// Summed NLL over non-pad target positions.
    pub loss_sum: f64,
    pub tokens: usize,
    /// Gradient of `loss_sum`, laid out like the model.
    pub grads: Seq2Seq,
}

#[derive(Clone, Debug)]
struct AttnCache {
    h_top: Matrix,
    q: Matrix,
    alpha: Vec<Vec<f64>>,
    concat_in: Matrix,
    htilde: Matrix,
}

#[derive(Clone, Debug, Default)]
struct EncLayerCache {
    input_mask: Vec<Option<Matrix>>,
    fwd: Vec<LstmStepCache>,
    rev: Vec<LstmStepCache>,
}

#[derive(Clone, Debug)]
struct EncoderRun {
    /// Top-layer outputs per time step, `B x d_h`.
    top: Vec<Matrix>,
    finals: LayerStates,
    layers: Vec<EncLayerCache>,
    /// `[t][b]` real-token mask.
    mask: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct DecStepCache {
    input_mask: Vec<Option<Matrix>>,
    lstm: Vec<LstmStepCache>,
    attn: AttnCache,
    out_mask: Option<Matrix>,
}

/// Encoder-decoder model. The same type holds gradients (see [`Seq2Seq::zeros_like`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    pub src_embed: Matrix,
    pub tgt_embed: Matrix,
    pub encoder: Vec<Lstm>,
    /// Reverse-direction layers, empty unless bidirectional.
    pub encoder_rev: Vec<Lstm>,
    pub decoder: Vec<Lstm>,
    /// General attention score `enc . (W_a h)`, `d_h x d_h`.
    pub attn_w: Matrix,
    /// Concat layer `tanh([c; h] W_c)`, `2 d_h x d_h`.
    pub concat_w: Matrix,
    pub output: OutputLayer,
}

fn apply_dropout(x: &mut Matrix, p: f64, rng: Option<&mut Rng>) -> Option<Matrix> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let mask = dropout_mask(x.rows(), x.cols(), p, rng);
    for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    Some(mask)
}

fn undo_dropout(dx: &mut Matrix, mask: &Option<Matrix>) {
    if let Some(m) = mask {
        for (v, k) in dx.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
}

fn embed(table: &Matrix, ids: &[usize]) -> Matrix {
    table.gather_rows(ids)
}

impl Seq2Seq {
    /// Fresh model, initialized from the config's seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, stream::INIT, 0);
        let (d, d_h, eh) = (config.d, config.d_h, config.encoder_hidden());
        let src_embed = Matrix::uniform(config.src_vocab, d, INIT_SCALE, &mut rng);
        let tgt_embed = Matrix::uniform(config.tgt_vocab, d, INIT_SCALE, &mut rng);
        let mut encoder = Vec::new();
        let mut encoder_rev = Vec::new();
        for l in 0..config.layers {
            let input = if l == 0 { d } else { d_h };
            encoder.push(Lstm::new(input, eh, &mut rng));
            if config.bidirectional {
                encoder_rev.push(Lstm::new(input, eh, &mut rng));
            }
        }
        let decoder = (0..config.layers)
            .map(|l| Lstm::new(if l == 0 { d } else { d_h }, d_h, &mut rng))
            .collect();
        let attn_w = Matrix::uniform(d_h, d_h, INIT_SCALE, &mut rng);
        let concat_w = Matrix::uniform(2 * d_h, d_h, INIT_SCALE, &mut rng);
        let output = OutputLayer::new(config.variant, config.output_dims(), &mut rng)?;
        Ok(Seq2Seq {
            config,
            src_embed,
            tgt_embed,
            encoder,
            encoder_rev,
            decoder,
            attn_w,
            concat_w,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("src_embed".into(), &self.src_embed),
            ("tgt_embed".into(), &self.tgt_embed),
        ];
        let groups = [("enc", &self.encoder), ("enc_rev", &self.encoder_rev), ("dec", &self.decoder)];
        for (prefix, layers) in groups {
            for (l, cell) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{l}.w_x"), &cell.w_x));
                out.push((format!("{prefix}.{l}.w_h"), &cell.w_h));
                out.push((format!("{prefix}.{l}.b"), &cell.b));
            }
        }
        out.push(("attn.w_a".into(), &self.attn_w));
        out.push(("attn.w_c".into(), &self.concat_w));
        for (name, t) in self.output.tensors() {
            out.push((format!("out.{name}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("src_embed".into(), &mut self.src_embed),
            ("tgt_embed".into(), &mut self.tgt_embed),
        ];
        let groups = [
            ("enc", &mut self.encoder),
            ("enc_rev", &mut self.encoder_rev),
            ("dec", &mut self.decoder),
        ];
        for (prefix, layers) in groups {
            for (l, cell) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{l}.w_x"), &mut cell.w_x));
                out.push((format!("{prefix}.{l}.w_h"), &mut cell.w_h));
                out.push((format!("{prefix}.{l}.b"), &mut cell.b));
            }
        }
        out.push(("attn.w_a".into(), &mut self.attn_w));
        out.push(("attn.w_c".into(), &mut self.concat_w));
        for (name, t) in self.output.tensors_mut() {
            out.push((format!("out.{name}"), t));
        }
        out
    }

    /// Total allocated parameters, counted by enumerating tensors.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters outside the output layer (embeddings, LSTMs, attention).
    pub fn encoder_decoder_params(&self) -> usize {
        self.param_count() - self.output.allocated_params()
    }

    fn run_encoder(&self, src: &[Vec<usize>], mut rng: Option<&mut Rng>) -> Result<EncoderRun> {
        let cfg = &self.config;
        let batch = src.len();
        let steps = src.iter().map(Vec::len).max().unwrap_or(0);
        if steps == 0 || src.iter().any(Vec::is_empty) {
            return Err(Error::Argument("cannot encode an empty source sentence".into()));
        }
        if let Some(&bad) = src.iter().flatten().find(|&&x| x >= cfg.src_vocab) {
            return Err(Error::Argument(format!("source index {bad} out of range")));
        }
        let mask: Vec<Vec<f64>> = (0..steps)
            .map(|t| src.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect())
            .collect();
        let eh = cfg.encoder_hidden();
        let mut inputs: Vec<Matrix> = (0..steps)
            .map(|t| {
                let ids: Vec<usize> = src.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
                embed(&self.src_embed, &ids)
            })
            .collect();
        let mut finals = LayerStates {
            h: Vec::new(),
            c: Vec::new(),
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut cache = EncLayerCache::default();
            for x in inputs.iter_mut() {
                cache
                    .input_mask
                    .push(apply_dropout(x, cfg.dropout, rng.as_deref_mut()));
            }
            let mut h = Matrix::zeros(batch, eh);
            let mut c = Matrix::zeros(batch, eh);
            let mut fwd_out = Vec::with_capacity(steps);
            for t in 0..steps {
                let (hn, cn, sc) = self.encoder[l].step(&inputs[t], &h, &c, &mask[t])?;
                h = hn;
                c = cn;
                fwd_out.push(h.clone());
                cache.fwd.push(sc);
            }
            let (mut fh, mut fc) = (h, c);
            let outputs: Vec<Matrix> = if cfg.bidirectional {
                let mut h = Matrix::zeros(batch, eh);
                let mut c = Matrix::zeros(batch, eh);
                let mut rev_out = vec![Matrix::zeros(0, 0); steps];
                let mut rev_caches = Vec::with_capacity(steps);
                for t in (0..steps).rev() {
                    let (hn, cn, sc) = self.encoder_rev[l].step(&inputs[t], &h, &c, &mask[t])?;
                    h = hn;
                    c = cn;
                    rev_out[t] = h.clone();
                    rev_caches.push(sc);
                }
                rev_caches.reverse();
                cache.rev = rev_caches;
                fh = Matrix::hcat(&fh, &h)?;
                fc = Matrix::hcat(&fc, &c)?;
                fwd_out
                    .iter()
                    .zip(&rev_out)
                    .map(|(a, b)| Matrix::hcat(a, b))
                    .collect::<Result<_>>()?
            } else {
                fwd_out
            };
            finals.h.push(fh);
            finals.c.push(fc);
            layers.push(cache);
            inputs = outputs;
        }
        Ok(EncoderRun {
            top: inputs,
            finals,
            layers,
            mask,
        })
    }

    fn enc_by_sentence(top: &[Matrix], batch: usize) -> Vec<Matrix> {
        let steps = top.len();
        let width = top.first().map_or(0, Matrix::cols);
        (0..batch)
            .map(|b| {
                let mut m = Matrix::zeros(steps, width);
                for (t, out) in top.iter().enumerate() {
                    m.row_mut(t).copy_from_slice(out.row(b));
                }
                m
            })
            .collect()
    }

    /// Encoder outputs and final states for one sentence.
    pub fn encode(&self, src: &[usize]) -> Result<Encoded> {
        let run = self.run_encoder(&[src.to_vec()], None)?;
        let outputs = Self::enc_by_sentence(&run.top, 1).pop().expect("one sentence");
        Ok(Encoded {
            outputs,
            finals: run.finals,
        })
    }

    /// Global attention plus the concat layer for one decoder step.
    fn attend(&self, h_top: &Matrix, enc: &[Matrix], src_lens: &[usize]) -> Result<AttnCache> {
        let batch = h_top.rows();
        let d_h = self.config.d_h;
        let q = matmul_nt(h_top, &self.attn_w)?;
        let mut ctx = Matrix::zeros(batch, d_h);
        let mut alpha = Vec::with_capacity(batch);
        for b in 0..batch {
            let e = &enc[b];
            let qb = q.row(b);
            let mut scores: Vec<f64> = (0..e.rows())
                .map(|s| {
                    if s < src_lens[b] {
                        e.row(s).iter().zip(qb).map(|(x, y)| x * y).sum()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            softmax_inplace(&mut scores);
            let cb = ctx.row_mut(b);
            for (s, &a) in scores.iter().enumerate().take(src_lens[b]) {
                for (c, x) in cb.iter_mut().zip(e.row(s)) {
                    *c += a * x;
                }
            }
            alpha.push(scores);
        }
        let concat_in = Matrix::hcat(&ctx, h_top)?;
        let mut htilde = Matrix::zeros(batch, d_h);
        matmul_into(&mut htilde, &concat_in, &self.concat_w, false)?;
        htilde.map_inplace(f64::tanh);
        Ok(AttnCache {
            h_top: h_top.clone(),
            q,
            alpha,
            concat_in,
            htilde,
        })
    }

    /// Backward through [`Seq2Seq::attend`]; accumulates into `grad`, adds
    /// encoder-output gradients into `denc`, returns the gradient on `h_top`.
    fn attend_backward(
        &self,
        cache: &AttnCache,
        dhtilde: &Matrix,
        enc: &[Matrix],
        src_lens: &[usize],
        grad: &mut Seq2Seq,
        denc: &mut [Matrix],
    ) -> Result<Matrix> {
        let d_h = self.config.d_h;
        let mut dpre = dhtilde.clone();
        for (g, &y) in dpre.data_mut().iter_mut().zip(cache.htilde.data()) {
            *g *= 1.0 - y * y;
        }
        matmul_tn_into(&mut grad.concat_w, &cache.concat_in, &dpre, true)?;
        let dconcat = matmul_nt(&dpre, &self.concat_w)?;
        let (dctx, mut dh_top) = dconcat.hsplit(d_h);
        let batch = dhtilde.rows();
        let mut dq = Matrix::zeros(batch, d_h);
        for b in 0..batch {
            let e = &enc[b];
            let a = &cache.alpha[b];
            let dc = dctx.row(b);
            let qb = cache.q.row(b);
            let len = src_lens[b];
            let dalpha: Vec<f64> = (0..len)
                .map(|s| e.row(s).iter().zip(dc).map(|(x, y)| x * y).sum())
                .collect();
            let mean: f64 = (0..len).map(|s| a[s] * dalpha[s]).sum();
            let de = &mut denc[b];
            for s in 0..len {
                let ds = a[s] * (dalpha[s] - mean);
                let row = de.row_mut(s);
                for k in 0..d_h {
                    row[k] += a[s] * dc[k] + ds * qb[k];
                }
                let dqb = dq.row_mut(b);
                for (g, x) in dqb.iter_mut().zip(e.row(s)) {
                    *g += ds * x;
                }
            }
        }
        // q = h W_a^T
        matmul_tn_into(&mut grad.attn_w, &dq, &cache.h_top, true)?;
        matmul_into(&mut dh_top, &dq, &self.attn_w, true)?;
        Ok(dh_top)
    }

    /// Decoder state for a batch of sources: encoder outputs plus the bridged
    /// initial recurrent state.
    pub fn init_decoder(&self, srcs: &[Vec<usize>]) -> Result<DecoderState> {
        let run = self.run_encoder(srcs, None)?;
        Ok(DecoderState {
            enc: Self::enc_by_sentence(&run.top, srcs.len()),
            src_lens: srcs.iter().map(Vec::len).collect(),
            layers: run.finals,
        })
    }

    /// One decoding step from previous target tokens `prev` (one per sentence).
    pub fn decode_step(&self, prev: &[usize], state: &mut DecoderState) -> Result<DecodeStep> {
        if prev.len() != state.enc.len() {
            return Err(Error::Argument(format!(
                "decode_step got {} previous tokens for {} sentences",
                prev.len(),
                state.enc.len()
            )));
        }
        if let Some(&bad) = prev.iter().find(|&&y| y >= self.config.tgt_vocab) {
            return Err(Error::Argument(format!("target index {bad} out of range")));
        }
        let ones = vec![1.0; prev.len()];
        let mut x = embed(&self.tgt_embed, prev);
        for (l, cell) in self.decoder.iter().enumerate() {
            let (h, c, _) = cell.step(&x, &state.layers.h[l], &state.layers.c[l], &ones)?;
            state.layers.h[l] = h.clone();
            state.layers.c[l] = c;
            x = h;
        }
        let attn = self.attend(&x, &state.enc, &state.src_lens)?;
        Ok(DecodeStep {
            context: attn.htilde,
            attention: attn.alpha,
        })
    }

    /// Greedy decoding of a single sentence.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(&[src.to_vec()], max_len)?
            .pop()
            .unwrap_or_default())
    }

    /// Greedy decoding: per step the argmax of the full softmax (lowest index
    /// on ties), stopping at EOS or after `max_len` tokens. EOS is not emitted.
    pub fn greedy_decode_batch(&self, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); srcs.len()];
        if max_len == 0 || srcs.is_empty() {
            return Ok(out);
        }
        let mut state = self.init_decoder(srcs)?;
        let proj = self.output.project_outputs(&self.tgt_embed)?;
        let mut prev = vec![BOS; srcs.len()];
        let mut done = vec![false; srcs.len()];
        for _ in 0..max_len {
            let step = self.decode_step(&prev, &mut state)?;
            let logits = self.output.logits(&self.tgt_embed, &proj, &step.context)?;
            for b in 0..srcs.len() {
                if done[b] {
                    continue;
                }
                let y = argmax(logits.row(b));
                if y == EOS {
                    done[b] = true;
                } else {
                    out[b].push(y);
                }
                prev[b] = y;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Mean token NLL without dropout, on the full softmax.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let out = self.forward_backward(batch, None, None)?;
        Ok(out.loss_sum / out.tokens as f64)
    }

    /// Teacher-forced forward pass and backprop through time.
    ///
    /// `rng` enables dropout; `subset` restricts the softmax to a sampled
    /// vocabulary subset. Gradients are of the summed loss.
    pub fn forward_backward(
        &self,
        batch: &Batch,
        mut rng: Option<&mut Rng>,
        subset: Option<&SampledSubset>,
    ) -> Result<PassOutput> {
        batch.validate(&self.config)?;
        let cfg = &self.config;
        let bsz = batch.len();
        let d_h = cfg.d_h;
        let p = cfg.dropout;

        // ---- encoder
        let enc_run = self.run_encoder(&batch.src, rng.as_deref_mut())?;
        let src_lens: Vec<usize> = batch.src.iter().map(Vec::len).collect();
        let enc = Self::enc_by_sentence(&enc_run.top, bsz);

        // ---- decoder
        let steps = batch.max_tgt();
        let tgt_in: Vec<Vec<usize>> = (0..steps)
            .map(|t| {
                batch
                    .tgt
                    .iter()
                    .map(|y| match t {
                        0 => BOS,
                        _ if t <= y.len() => y[t - 1],
                        _ => PAD,
                    })
                    .collect()
            })
            .collect();
        let tgt_mask: Vec<Vec<f64>> = (0..steps)
            .map(|t| batch.tgt.iter().map(|y| if t <= y.len() { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut h = enc_run.finals.h.clone();
        let mut c = enc_run.finals.c.clone();
        let mut dec_caches = Vec::with_capacity(steps);
        let mut positions = Vec::new();
        let mut gold = Vec::new();
        let mut contexts: Vec<Matrix> = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = embed(&self.tgt_embed, &tgt_in[t]);
            let mut input_mask = Vec::with_capacity(cfg.layers);
            let mut lstm = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                input_mask.push(apply_dropout(&mut x, p, rng.as_deref_mut()));
                let (hn, cn, sc) = self.decoder[l].step(&x, &h[l], &c[l], &tgt_mask[t])?;
                h[l] = hn.clone();
                c[l] = cn;
                lstm.push(sc);
                x = hn;
            }
            let attn = self.attend(&x, &enc, &src_lens)?;
            let mut ctx = attn.htilde.clone();
            let out_mask = apply_dropout(&mut ctx, p, rng.as_deref_mut());
            for (b, y) in batch.tgt.iter().enumerate() {
                if t <= y.len() {
                    positions.push((t, b));
                    gold.push(if t < y.len() { y[t] } else { EOS });
                }
            }
            contexts.push(ctx);
            dec_caches.push(DecStepCache {
                input_mask,
                lstm,
                attn,
                out_mask,
            });
        }

        // ---- output layer over every real target position at once
        let mut h_all = Matrix::zeros(positions.len(), d_h);
        for (row, &(t, b)) in positions.iter().enumerate() {
            h_all.row_mut(row).copy_from_slice(contexts[t].row(b));
        }
        let lg = match subset {
            Some(s) => sampled_loss_and_grad(&self.output, &self.tgt_embed, &h_all, &gold, s)?,
            None => full_loss_and_grad(&self.output, &self.tgt_embed, &h_all, &gold)?,
        };
        if !lg.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lg.loss)));
        }
        let mut grads = self.zeros_like();
        grads.output = lg.grad;
        if cfg.variant.uses_embedding() {
            grads.tgt_embed.add_assign(&lg.grad_emb)?;
        }
        let mut dctx: Vec<Matrix> = (0..steps).map(|_| Matrix::zeros(bsz, d_h)).collect();
        for (row, &(t, b)) in positions.iter().enumerate() {
            dctx[t].row_mut(b).copy_from_slice(lg.dh.row(row));
        }

        // ---- decoder backward
        let mut denc: Vec<Matrix> = enc.iter().map(|e| Matrix::zeros(e.rows(), e.cols())).collect();
        let mut dh_state: Vec<Matrix> = (0..cfg.layers).map(|_| Matrix::zeros(bsz, d_h)).collect();
        let mut dc_state = dh_state.clone();
        for t in (0..steps).rev() {
            let cache = &dec_caches[t];
            let mut dht = std::mem::replace(&mut dctx[t], Matrix::zeros(0, 0));
            undo_dropout(&mut dht, &cache.out_mask);
            let mut dx =
                self.attend_backward(&cache.attn, &dht, &enc, &src_lens, &mut grads, &mut denc)?;
            for l in (0..cfg.layers).rev() {
                dx.add_assign(&dh_state[l])?;
                let (dxl, dhp, dcp) =
                    self.decoder[l].step_backward(&cache.lstm[l], &dx, &dc_state[l], &mut grads.decoder[l])?;
                dh_state[l] = dhp;
                dc_state[l] = dcp;
                dx = dxl;
                undo_dropout(&mut dx, &cache.input_mask[l]);
            }
            for (b, &id) in tgt_in[t].iter().enumerate() {
                if tgt_mask[t][b] > 0.0 {
                    grads.tgt_embed.scatter_add_rows(&[id], &dx.slice_rows(b, b + 1));
                }
            }
        }

        // ---- encoder backward
        let src_steps = enc_run.top.len();
        let mut dtop: Vec<Matrix> = (0..src_steps)
            .map(|t| {
                let mut m = Matrix::zeros(bsz, d_h);
                for b in 0..bsz {
                    m.row_mut(b).copy_from_slice(denc[b].row(t));
                }
                m
            })
            .collect();
        let eh = cfg.encoder_hidden();
        for l in (0..cfg.layers).rev() {
            let cache = &enc_run.layers[l];
            let (dfin_h, dfin_c) = (&dh_state[l], &dc_state[l]);
            let (mut dh_f, mut dh_r, mut dc_f, mut dc_r);
            if cfg.bidirectional {
                (dh_f, dh_r) = dfin_h.hsplit(eh);
                (dc_f, dc_r) = dfin_c.hsplit(eh);
            } else {
                dh_f = dfin_h.clone();
                dc_f = dfin_c.clone();
                dh_r = Matrix::zeros(0, 0);
                dc_r = Matrix::zeros(0, 0);
            }
            let input_w = self.encoder[l].input();
            let mut dinputs: Vec<Matrix> = (0..src_steps).map(|_| Matrix::zeros(bsz, input_w)).collect();
            let mut dout_f = Vec::with_capacity(src_steps);
            let mut dout_r = Vec::with_capacity(src_steps);
            for d in &dtop {
                if cfg.bidirectional {
                    let (a, b) = d.hsplit(eh);
                    dout_f.push(a);
                    dout_r.push(b);
                } else {
                    dout_f.push(d.clone());
                }
            }
            for t in (0..src_steps).rev() {
                dh_f.add_assign(&dout_f[t])?;
                let (dx, dhp, dcp) =
                    self.encoder[l].step_backward(&cache.fwd[t], &dh_f, &dc_f, &mut grads.encoder[l])?;
                dinputs[t].add_assign(&dx)?;
                dh_f = dhp;
                dc_f = dcp;
            }
            if cfg.bidirectional {
                for t in 0..src_steps {
                    dh_r.add_assign(&dout_r[t])?;
                    let (dx, dhp, dcp) = self.encoder_rev[l].step_backward(
                        &cache.rev[t],
                        &dh_r,
                        &dc_r,
                        &mut grads.encoder_rev[l],
                    )?;
                    dinputs[t].add_assign(&dx)?;
                    dh_r = dhp;
                    dc_r = dcp;
                }
            }
            for (t, dx) in dinputs.iter_mut().enumerate() {
                undo_dropout(dx, &cache.input_mask[t]);
            }
            dtop = dinputs;
        }
        for (t, dx) in dtop.iter().enumerate() {
            for b in 0..bsz {
                if enc_run.mask[t][b] > 0.0 {
                    let id = batch.src[b][t];
                    grads.src_embed.scatter_add_rows(&[id], &dx.slice_rows(b, b + 1));
                }
            }
        }

        Ok(PassOutput {
            loss_sum: lg.loss,
            tokens: positions.len(),
            grads,
        })
    }
}
