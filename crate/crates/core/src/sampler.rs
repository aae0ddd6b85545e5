//! Negative-sampling training of the output layer: the softmax and its
//! gradient are restricted to a subset of the vocabulary that always holds
//! every gold token of the mini-batch.

use crate::error::{Error, Result};
use crate::ndmath::{Matrix, Rng};
use crate::outlayer::{cross_entropy, OutputLayer};

/// Proposal distribution for negatives.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum NegativeDistribution {
    #[default]
    Uniform,
    /// Frequency-weighted: weight `count^0.75`, drawn without replacement.
    Unigram(Vec<f64>),
}

impl NegativeDistribution {
    pub fn unigram_from_counts(counts: &[u64]) -> Self {
        NegativeDistribution::Unigram(counts.iter().map(|&c| (c as f64).powf(0.75)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Fraction of the vocabulary kept per mini-batch, in `(0, 1]`.
    pub rate: f64,
    pub distribution: NegativeDistribution,
    /// Subtract `ln q(i)` from sampled negatives' logits.
    pub log_q_correction: bool,
}

impl SamplerConfig {
    pub fn uniform(rate: f64) -> Self {
        SamplerConfig {
            rate,
            distribution: NegativeDistribution::Uniform,
            log_q_correction: false,
        }
    }
}

/// Sorted, duplicate-free vocabulary subset for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSubset {
    indices: Vec<usize>,
    positive_count: usize,
    sample_rate: f64,
    /// Per-index share added to the logit under log-q correction (0 for positives).
    log_q: Vec<f64>,
}

impl SampledSubset {
    /// The whole vocabulary; equivalent to no sampling.
    pub fn full(vocab_size: usize) -> Self {
        SampledSubset {
            indices: (0..vocab_size).collect(),
            positive_count: vocab_size,
            sample_rate: 1.0,
            log_q: vec![0.0; vocab_size],
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.positive_count
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Position of `index` within the subset.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.indices.binary_search(&index).ok()
    }
}

fn unique_sorted(positives: &[usize]) -> Vec<usize> {
    let mut p = positives.to_vec();
    p.sort_unstable();
    p.dedup();
    p
}

/// Subset of `round(rate * vocab_size)` indices: all positives plus
/// uniformly drawn negatives (without replacement).
pub fn sample_negatives(
    positives: &[usize],
    vocab_size: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<SampledSubset> {
    sample_subset(positives, vocab_size, &SamplerConfig::uniform(rate), rng)
}

/// [`sample_negatives`] with an explicit proposal distribution.
pub fn sample_subset(
    positives: &[usize],
    vocab_size: usize,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<SampledSubset> {
    let rate = config.rate;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Argument(format!("sampling rate must be in (0, 1], got {rate}")));
    }
    if positives.is_empty() {
        return Err(Error::Argument("negative sampling needs at least one positive".into()));
    }
    let pos = unique_sorted(positives);
    if let Some(&bad) = pos.last().filter(|&&i| i >= vocab_size) {
        return Err(Error::Argument(format!(
            "positive index {bad} out of range for vocabulary {vocab_size}"
        )));
    }
    let target = (rate * vocab_size as f64).round() as usize;
    if target < pos.len() {
        return Err(Error::Argument(format!(
            "rate {rate} keeps {target} of {vocab_size} classes, fewer than the {} positives",
            pos.len()
        )));
    }
    let mut pool: Vec<usize> = Vec::with_capacity(vocab_size - pos.len());
    let mut next_pos = pos.iter().peekable();
    for i in 0..vocab_size {
        if next_pos.peek() == Some(&&i) {
            next_pos.next();
        } else {
            pool.push(i);
        }
    }
    let k = target - pos.len();
    let negatives: Vec<usize> = match &config.distribution {
        NegativeDistribution::Uniform => {
            // partial Fisher-Yates
            for i in 0..k {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
            }
            pool.truncate(k);
            pool
        }
        NegativeDistribution::Unigram(weights) => {
            if weights.len() != vocab_size {
                return Err(Error::dims(
                    "unigram weights",
                    (weights.len(), 1),
                    (vocab_size, 1),
                ));
            }
            // Efraimidis-Spirakis: keep the k smallest -ln(u) / w
            let mut keyed: Vec<(f64, usize)> = pool
                .iter()
                .map(|&i| {
                    let w = weights[i].max(1e-12);
                    let u = 1.0 - rng.next_f64();
                    (-u.ln() / w, i)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.truncate(k);
            keyed.into_iter().map(|(_, i)| i).collect()
        }
    };
    let pool_size = vocab_size - pos.len();
    let mut indices = pos.clone();
    indices.extend_from_slice(&negatives);
    indices.sort_unstable();

    let log_q = if config.log_q_correction && k > 0 {
        let weight_total: f64 = match &config.distribution {
            NegativeDistribution::Uniform => 0.0,
            NegativeDistribution::Unigram(w) => {
                (0..vocab_size).filter(|i| pos.binary_search(i).is_err()).map(|i| w[i]).sum()
            }
        };
        indices
            .iter()
            .map(|&i| {
                if pos.binary_search(&i).is_ok() {
                    return 0.0;
                }
                let q = match &config.distribution {
                    NegativeDistribution::Uniform => k as f64 / pool_size as f64,
                    NegativeDistribution::Unigram(w) => {
                        let p = w[i] / weight_total;
                        1.0 - (1.0 - p).powi(k as i32)
                    }
                };
                -q.max(1e-300).ln()
            })
            .collect()
    } else {
        vec![0.0; indices.len()]
    };
    Ok(SampledSubset {
        indices,
        positive_count: pos.len(),
        sample_rate: rate,
        log_q,
    })
}

/// Loss and full-shape gradients of the output layer on a batch.
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    /// Summed (not averaged) cross-entropy.
    pub loss: f64,
    pub grad: OutputLayer,
    /// Gradient on the shared embedding; all zeros for the full variant.
    pub grad_emb: Matrix,
    /// Gradient on the contexts.
    pub dh: Matrix,
}

/// Cross-entropy of the softmax over the full vocabulary.
pub fn full_loss_and_grad(
    layer: &OutputLayer,
    emb: &Matrix,
    h: &Matrix,
    gold: &[usize],
) -> Result<LossAndGrad> {
    let (logits, cache) = layer.forward_batch(emb, h)?;
    let (loss, dlogits) = cross_entropy(&logits, gold)?;
    let mut grad = layer.zeros_like();
    let mut grad_emb = Matrix::zeros(emb.rows(), emb.cols());
    let dh = layer.backward_batch(emb, &cache, &dlogits, &mut grad, &mut grad_emb)?;
    Ok(LossAndGrad {
        loss,
        grad,
        grad_emb,
        dh,
    })
}

/// Cross-entropy of the softmax restricted to `subset`. Gradient rows of
/// `E`, `b` (and columns of `W`) outside the subset are exactly zero; the
/// shared joint projections receive dense gradients.
pub fn sampled_loss_and_grad(
    layer: &OutputLayer,
    emb: &Matrix,
    h: &Matrix,
    gold: &[usize],
    subset: &SampledSubset,
) -> Result<LossAndGrad> {
    let local_gold = gold
        .iter()
        .map(|&g| {
            subset.position(g).ok_or_else(|| {
                Error::Contract(format!("gold index {g} is not in the sampled subset"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (sub, sub_emb) = layer.restrict(emb, subset.indices())?;
    let (mut logits, cache) = sub.forward_batch(&sub_emb, h)?;
    if subset.log_q.iter().any(|&c| c != 0.0) {
        logits.add_row_broadcast(&Matrix::row_vector(&subset.log_q))?;
    }
    let (loss, dlogits) = cross_entropy(&logits, &local_gold)?;
    let mut sub_grad = sub.zeros_like();
    let mut sub_grad_emb = Matrix::zeros(sub_emb.rows(), sub_emb.cols());
    let dh = sub.backward_batch(&sub_emb, &cache, &dlogits, &mut sub_grad, &mut sub_grad_emb)?;
    let mut grad = layer.zeros_like();
    let mut grad_emb = Matrix::zeros(emb.rows(), emb.cols());
    layer.scatter_restricted_grads(
        subset.indices(),
        &sub_grad,
        &sub_grad_emb,
        &mut grad,
        &mut grad_emb,
    )?;
    Ok(LossAndGrad {
        loss,
        grad,
        grad_emb,
        dh,
    })
}
