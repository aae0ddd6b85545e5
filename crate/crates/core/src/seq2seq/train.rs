use super::{Batch, Seq2Seq};
use crate::error::{Error, Result};
use crate::eval::token_accuracy;
use crate::ndmath::{stream, AdamConfig, AdamState, Rng};
use crate::sampler::{sample_subset, SamplerConfig};

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Seq2Seq, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .map(|(_, t)| t.sum_squares())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.scale_inplace(s);
        }
    }
    norm
}

/// Optimizer state that survives a checkpoint round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// Completed update steps; also indexes the per-step random streams.
    pub step: u64,
    /// One entry per model tensor, in [`Seq2Seq::tensors`] order.
    pub adam: Vec<AdamState>,
}

/// Result of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean token NLL of the batch before the update.
    pub loss: f64,
    pub tokens: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Adam training loop with gradient clipping.
///
/// Dropout and negative sampling draw from streams derived from
/// `(seed, step)`, so a run resumed from a [`TrainerState`] replays the same
/// updates as an uninterrupted one.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub adam: AdamConfig,
    pub clip: f64,
    /// Sampling setup; `None` trains on the full softmax.
    pub sampler: Option<SamplerConfig>,
    state: TrainerState,
}

impl Trainer {
    pub const DEFAULT_CLIP: f64 = 5.0;

    pub fn new(model: Seq2Seq, adam: AdamConfig) -> Self {
        let adam_states = model
            .tensors()
            .iter()
            .map(|(_, t)| AdamState::for_param(adam, t))
            .collect();
        let rate = model.config().sample_rate;
        Trainer {
            model,
            adam,
            clip: Self::DEFAULT_CLIP,
            sampler: (rate < 1.0).then(|| SamplerConfig::uniform(rate)),
            state: TrainerState {
                step: 0,
                adam: adam_states,
            },
        }
    }

    /// Resumes from saved optimizer state.
    pub fn resume(model: Seq2Seq, adam: AdamConfig, state: TrainerState) -> Result<Self> {
        let mut t = Trainer::new(model, adam);
        let shapes: Vec<_> = t.model.tensors().iter().map(|(_, m)| m.shape()).collect();
        if state.adam.len() != shapes.len()
            || state.adam.iter().zip(&shapes).any(|(a, s)| a.m.shape() != *s)
        {
            return Err(Error::format("optimizer state", "does not match the model tensors"));
        }
        t.state = state;
        Ok(t)
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// One forward/backward pass and Adam update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let cfg = self.model.config().clone();
        let step = self.state.step;
        let mut dropout_rng = Rng::derive(cfg.seed, stream::DROPOUT, step);
        let subset = match &self.sampler {
            Some(sc) => {
                let mut rng = Rng::derive(cfg.seed, stream::SAMPLING, step);
                let mut positives = batch.gold_tokens();
                positives.sort_unstable();
                positives.dedup();
                // A batch whose gold types alone exceed the budget keeps exactly its golds.
                let mut sc = sc.clone();
                sc.rate = sc.rate.max(positives.len() as f64 / cfg.tgt_vocab as f64).min(1.0);
                Some(sample_subset(&positives, cfg.tgt_vocab, &sc, &mut rng)?)
            }
            None => None,
        };
        let mut out = self
            .model
            .forward_backward(batch, Some(&mut dropout_rng), subset.as_ref())?;
        let tokens = out.tokens;
        for (_, g) in out.grads.tensors_mut() {
            g.scale_inplace(1.0 / tokens as f64);
        }
        let grad_norm = clip_grad_norm(&mut out.grads, self.clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        let grads = out.grads.tensors();
        for ((state, (_, p)), (_, g)) in self
            .state
            .adam
            .iter_mut()
            .zip(self.model.tensors_mut())
            .zip(grads)
        {
            state.step(p, g)?;
        }
        self.state.step += 1;
        Ok(StepReport {
            loss: out.loss_sum / tokens as f64,
            tokens,
            grad_norm,
        })
    }
}

/// Aggregate of one pass over the training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    /// Token-weighted mean NLL.
    pub loss: f64,
    pub tokens: usize,
    pub steps: usize,
    pub seconds: f64,
}

impl EpochReport {
    pub fn tokens_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.tokens as f64 / self.seconds
        } else {
            0.0
        }
    }
}

/// Batches for one epoch: pairs shuffled by `Rng::derive(seed, SHUFFLE,
/// epoch)`, grouped into length-sorted pools of 20 batches to limit padding,
/// then batch order shuffled again.
pub fn make_batches(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let mut rng = Rng::derive(seed, stream::SHUFFLE, epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * 20) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (pairs[i].0.len(), pairs[i].1.len()));
        for chunk in pool.chunks(batch_size) {
            let src = chunk.iter().map(|&i| pairs[i].0.clone()).collect();
            let tgt = chunk.iter().map(|&i| pairs[i].1.clone()).collect();
            batches.push(Batch::new(src, tgt)?);
        }
    }
    rng.shuffle(&mut batches);
    Ok(batches)
}

impl Trainer {
    /// One epoch over `pairs`; epoch `e` uses shuffle stream index `e`.
    pub fn train_epoch(
        &mut self,
        pairs: &[(Vec<usize>, Vec<usize>)],
        batch_size: usize,
        epoch: u64,
    ) -> Result<EpochReport> {
        let batches = make_batches(pairs, batch_size, self.model.config().seed, epoch)?;
        let start = std::time::Instant::now();
        let (mut loss, mut tokens) = (0.0, 0);
        for b in &batches {
            let r = self.train_step(b)?;
            loss += r.loss * r.tokens as f64;
            tokens += r.tokens;
        }
        Ok(EpochReport {
            loss: loss / tokens.max(1) as f64,
            tokens,
            steps: batches.len(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Greedy decodes of every source, in input order, decoding `batch_size` at a time.
pub fn decode_all(
    model: &Seq2Seq,
    sources: &[Vec<usize>],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch_size.max(1)) {
        out.extend(model.greedy_decode_batch(chunk, max_len)?);
    }
    Ok(out)
}

/// Greedy positional token accuracy on `pairs` plus the hypotheses.
pub fn greedy_accuracy(
    model: &Seq2Seq,
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    let hyps = decode_all(model, &sources, batch_size, model.config().max_len)?;
    Ok((token_accuracy(&hyps, &refs)?, hyps))
}
