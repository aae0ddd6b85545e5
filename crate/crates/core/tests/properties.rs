use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use saol::bpe::{apply_bpe, build_vocab, detokenize, frequency_bins, learn_bpe, Vocabulary, SPECIALS};
use saol::cli::RunConfig;
use saol::eval::{binned_scores, corpus_bleu, paired_bootstrap};
use saol::ndmath::{matmul, softmax, AdamConfig, AdamState, Matrix, Rng};
use saol::outlayer::{argmax, param_count, LayerDims, LayerVariant, OutputLayer};
use saol::sampler::{full_loss_and_grad, sample_negatives, sampled_loss_and_grad};

fn variant() -> impl Strategy<Value = LayerVariant> {
    prop::sample::select(LayerVariant::ALL.to_vec())
}

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::uniform(rows, cols, 1.0, &mut Rng::new(seed))
}

// ---------------------------------------------------------------- ndmath

proptest! {
    #[test]
    fn identity_products_are_exact(r in 1usize..6, k in 1usize..6, c in 1usize..6, seed: u64) {
        let a = matrix(r, k, seed);
        let b = matrix(k, c, seed ^ 1);
        let i = Matrix::identity(k);
        let ab = matmul(&a, &b).unwrap();
        prop_assert_eq!(&matmul(&matmul(&a, &i).unwrap(), &b).unwrap(), &ab);
        prop_assert_eq!(&matmul(&a, &matmul(&i, &b).unwrap()).unwrap(), &ab);
        // repeated evaluation is bit-identical
        prop_assert_eq!(matmul(&a, &b).unwrap(), ab);
    }

    #[test]
    fn matrix_length_must_match_shape(r in 0usize..5, c in 0usize..5, extra in 1usize..3) {
        prop_assert!(Matrix::new(r, c, vec![0.0; r * c]).is_ok());
        prop_assert!(Matrix::new(r, c, vec![0.0; r * c + extra]).is_err());
    }

    #[test]
    fn softmax_ignores_a_constant_shift(v in prop::collection::vec(-30.0f64..30.0, 1..20), c in -50.0f64..50.0) {
        let p = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(argmax(&v), argmax(&shifted));
    }

    #[test]
    fn rng_streams_are_reproducible(seed: u64, stream in 0u64..8, index: u64) {
        let mut a = Rng::derive(seed, stream, index);
        let mut b = Rng::derive(seed, stream, index);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn adam_state_mirrors_parameter_shape(r in 1usize..5, c in 1usize..5, seed: u64) {
        let mut p = matrix(r, c, seed);
        let mut s = AdamState::for_param(AdamConfig::default(), &p);
        for k in 0..3 {
            let g = matrix(r, c, seed.wrapping_add(k));
            s.step(&mut p, &g).unwrap();
        }
        prop_assert_eq!(s.m.shape(), (r, c));
        prop_assert_eq!(s.v.shape(), (r, c));
        prop_assert_eq!(s.step, 3);
        prop_assert!(p.all_finite());
        prop_assert!(s.step(&mut p, &Matrix::zeros(c + 1, r)).is_err());
    }
}

// -------------------------------------------------------------- outlayer

fn expected_tensors(v: LayerVariant) -> &'static [&'static str] {
    match v {
        LayerVariant::Full => &["w", "b"],
        LayerVariant::Tied => &["b"],
        LayerVariant::Bilinear | LayerVariant::NonlinOut | LayerVariant::NonlinCtx => &["mid", "b"],
        LayerVariant::Joint => &["u", "b_u", "v", "b_v", "b"],
    }
}

proptest! {
    #[test]
    fn layers_hold_exactly_their_tensors(v in variant(), vocab in 2usize..30, d in 1usize..8, d_h in 1usize..8, d_j in 1usize..8) {
        let d_h = if v == LayerVariant::Tied { d } else { d_h };
        let dims = LayerDims { vocab, d, d_h, d_j };
        let layer = OutputLayer::zeros(v, dims).unwrap();
        let names: Vec<&str> = layer.tensors().iter().map(|(n, _)| *n).collect();
        prop_assert_eq!(names, expected_tensors(v).to_vec());
        // element enumeration against the closed form
        let enumerated: usize = layer.tensors().iter().map(|(_, t)| t.len()).sum();
        let rep = param_count(v, vocab, d, d_h, d_j).unwrap();
        prop_assert_eq!(enumerated, rep.allocated());
        prop_assert_eq!(rep.breakdown.iter().map(|(_, n)| n).sum::<usize>(), rep.effective_param_count);
        let closed = match v {
            LayerVariant::Full => vocab * d_h + vocab,
            LayerVariant::Tied => vocab,
            LayerVariant::Bilinear | LayerVariant::NonlinOut | LayerVariant::NonlinCtx => d * d_h + vocab,
            LayerVariant::Joint => d * d_j + d_j * d_h + vocab,
        };
        prop_assert_eq!(rep.effective_param_count, closed);
    }

    #[test]
    fn tying_needs_equal_widths(vocab in 2usize..30, d in 1usize..8, delta in 1usize..4) {
        prop_assert!(param_count(LayerVariant::Tied, vocab, d, d + delta, 1).is_err());
        let dims = LayerDims { vocab, d, d_h: d + delta, d_j: 1 };
        prop_assert!(OutputLayer::zeros(LayerVariant::Tied, dims).is_err());
    }

    #[test]
    fn logit_shift_keeps_predictions(v in variant(), seed: u64, c in -20.0f64..20.0) {
        let dims = LayerDims { vocab: 9, d: 4, d_h: 4, d_j: 5 };
        let mut rng = Rng::new(seed);
        let layer = OutputLayer::new(v, dims, &mut rng).unwrap();
        let emb = Matrix::uniform(9, 4, 0.5, &mut rng);
        let h = Matrix::uniform(3, 4, 0.5, &mut rng);
        let (logits, _) = layer.forward_batch(&emb, &h).unwrap();
        for r in 0..3 {
            let row = logits.row(r);
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            prop_assert_eq!(argmax(row), argmax(&shifted));
            for (a, b) in softmax(row).unwrap().iter().zip(&softmax(&shifted).unwrap()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

// --------------------------------------------------------------- sampler

proptest! {
    #[test]
    fn subsets_keep_positives(vocab in 2usize..300, positives in prop::collection::vec(0usize..300, 1..20), rate in 0.01f64..=1.0, seed: u64) {
        let positives: Vec<usize> = positives.into_iter().map(|p| p % vocab).collect();
        let mut uniq = positives.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let target = (rate * vocab as f64).round() as usize;
        match sample_negatives(&positives, vocab, rate, &mut Rng::new(seed)) {
            Err(_) => prop_assert!(target < uniq.len()),
            Ok(s) => {
                let idx = s.indices();
                prop_assert_eq!(idx.len(), target);
                prop_assert!(idx.len() >= uniq.len());
                prop_assert!(uniq.iter().all(|p| s.contains(*p)));
                prop_assert!(idx.iter().all(|&i| i < vocab));
                let mut sorted = idx.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), idx.len());
                for (k, &i) in idx.iter().enumerate() {
                    prop_assert_eq!(s.position(i), Some(k));
                }
            }
        }
    }

    #[test]
    fn gradients_vanish_outside_the_subset(v in variant(), seed: u64, rate in 0.2f64..0.8) {
        let vocab = 12;
        let dims = LayerDims { vocab, d: 4, d_h: 4, d_j: 3 };
        let mut rng = Rng::new(seed);
        let layer = OutputLayer::new(v, dims, &mut rng).unwrap();
        let emb = Matrix::uniform(vocab, 4, 0.5, &mut rng);
        let h = Matrix::uniform(2, 4, 0.5, &mut rng);
        let gold = [1, 5];
        let subset = sample_negatives(&gold, vocab, rate, &mut rng).unwrap();
        let g = sampled_loss_and_grad(&layer, &emb, &h, &gold, &subset).unwrap();
        for i in (0..vocab).filter(|&i| !subset.contains(i)) {
            prop_assert_eq!(g.grad.b.get(0, i), 0.0);
            prop_assert!(g.grad_emb.row(i).iter().all(|&x| x == 0.0));
            if let Some(w) = &g.grad.w {
                prop_assert!((0..w.rows()).all(|r| w.get(r, i) == 0.0));
            }
        }
        prop_assert!(g.loss.is_finite());
        let full = full_loss_and_grad(&layer, &emb, &h, &gold).unwrap();
        // fewer competitors can only lower the loss
        prop_assert!(g.loss <= full.loss + 1e-12);
    }
}

// ------------------------------------------------------------------- bpe

/// Learning by full recount every round.
fn naive_bpe(lines: &[String], ops: usize) -> Vec<(String, String)> {
    let mut freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for w in lines.iter().flat_map(|l| l.split_whitespace()) {
        let mut syms: Vec<String> = w.chars().map(String::from).collect();
        syms.last_mut().unwrap().push_str("</w>");
        *freq.entry(syms).or_default() += 1;
    }
    let mut out = Vec::new();
    for _ in 0..ops {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, f) in &freq {
            for p in syms.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_default() += f;
            }
        }
        let Some(best) = counts.values().copied().max().filter(|&c| c >= 2) else { break };
        // BTreeMap order: first hit is the lexicographically smallest pair
        let pair = counts.into_iter().find(|(_, c)| *c == best).unwrap().0;
        let mut next = BTreeMap::new();
        for (syms, f) in freq {
            let mut merged = Vec::new();
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    merged.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    merged.push(syms[i].clone());
                    i += 1;
                }
            }
            *next.entry(merged).or_default() += f;
        }
        freq = next;
        out.push(pair);
    }
    out
}

fn small_corpus() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec("[abcde]{1,5}", 1..6).prop_map(|w| w.join(" ")), 1..12)
}

fn normalized(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

proptest! {
    #[test]
    fn learning_matches_a_full_recount(lines in small_corpus(), ops in 0usize..30) {
        let m = learn_bpe(&lines, ops).unwrap();
        prop_assert_eq!(m.merges().to_vec(), naive_bpe(&lines, ops));
    }

    #[test]
    fn bpe_is_lossless_and_deterministic(lines in prop::collection::vec("\\PC{0,24}", 1..8), ops in 0usize..40) {
        prop_assume!(lines.iter().any(|l| !l.trim().is_empty()));
        let a = learn_bpe(&lines, ops).unwrap();
        let b = learn_bpe(&lines, ops).unwrap();
        prop_assert_eq!(&a, &b);
        for l in &lines {
            let toks = apply_bpe(&a, l);
            prop_assert_eq!(&toks, &apply_bpe(&b, l));
            prop_assert_eq!(detokenize(&toks), normalized(l));
            prop_assert!(toks.iter().all(|t| !SPECIALS.contains(&t.as_str())));
        }
    }

    #[test]
    fn inventory_grows_with_operations(lines in small_corpus(), ops in 0usize..20) {
        let small = learn_bpe(&lines, ops).unwrap().symbol_inventory(&lines);
        let large = learn_bpe(&lines, ops + 1).unwrap().symbol_inventory(&lines);
        prop_assert!(large.len() >= small.len());
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn vocabulary_is_a_dense_bijection(lines in small_corpus()) {
        let toks: Vec<Vec<String>> = lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect();
        let v = build_vocab(&toks, None);
        for (i, s) in SPECIALS.iter().enumerate() {
            prop_assert_eq!(v.index_of(s), Some(i));
        }
        for i in 0..v.len() {
            prop_assert_eq!(v.index_of(v.token(i).unwrap()), Some(i));
        }
        prop_assert!(v.token(v.len()).is_none());
        prop_assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn frequency_bins_partition_the_vocabulary(freqs in prop::collection::vec(1u64..50, 3..40)) {
        let v = Vocabulary::from_entries(freqs.iter().enumerate().map(|(i, &f)| (format!("t{i}"), f)).collect()).unwrap();
        let bins = frequency_bins(&v).unwrap();
        let mut all: Vec<usize> = bins.bins().iter().flat_map(|b| b.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (SPECIALS.len()..v.len()).collect::<Vec<_>>());
        let n = freqs.len();
        prop_assert_eq!((bins.medium.len(), bins.low.len()), (n / 3, n / 3));
        let f = |b: &[usize]| b.iter().map(|&i| v.frequency(i)).collect::<Vec<_>>();
        let (hi, mid, lo) = (f(&bins.high), f(&bins.medium), f(&bins.low));
        prop_assert!(hi.iter().min() >= mid.iter().max().or(Some(&0)));
        if !lo.is_empty() {
            prop_assert!(mid.iter().min() >= lo.iter().max());
        }
    }
}

// ------------------------------------------------------------------ eval

fn count(s: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in s {
        *m.entry(t.as_str()).or_default() += 1;
    }
    m
}

fn parallel() -> impl Strategy<Value = Vec<(String, String)>> {
    let sent = || prop::collection::vec("[a-f]", 0..9).prop_map(|w| w.join(" "));
    prop::collection::vec((sent(), sent()), 1..12)
}

proptest! {
    #[test]
    fn bleu_ignores_sentence_order(pairs in parallel().prop_flat_map(|p| (Just(p.clone()), Just(p).prop_shuffle()))) {
        let (orig, shuffled) = pairs;
        let split = |p: &[(String, String)]| -> (Vec<String>, Vec<String>) { p.iter().cloned().unzip() };
        let (h1, r1) = split(&orig);
        let (h2, r2) = split(&shuffled);
        let a = corpus_bleu(&h1, &r1).unwrap();
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert_eq!(a.bleu.to_bits(), b.bleu.to_bits());
        prop_assert!((0.0..=100.0).contains(&a.bleu));
        prop_assert!(a.brevity_penalty <= 1.0);
        prop_assert!(a.precisions.iter().all(|p| (0.0..=1.0).contains(p)));
        if a.precisions.iter().all(|&p| p > 0.0) {
            let geo = (a.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
            prop_assert!((a.bleu - 100.0 * a.brevity_penalty * geo).abs() < 1e-9);
        }
    }

    #[test]
    fn self_bleu_is_perfect(pairs in parallel()) {
        let refs: Vec<String> = pairs.into_iter().map(|(_, r)| r).collect();
        let has_4gram = refs.iter().any(|r| r.split_whitespace().count() >= 4);
        let b = corpus_bleu(&refs, &refs).unwrap().bleu;
        if has_4gram {
            prop_assert_eq!(b, 100.0);
        }
    }

    #[test]
    fn improving_a_system_never_raises_its_p_value(
        pairs in parallel(),
        other in prop::collection::vec("[a-f]{1}", 12),
        fix in prop::collection::vec(any::<bool>(), 12),
        seed in 0u64..1000,
    ) {
        // hypotheses no longer than their references
        let refs: Vec<String> = pairs.iter().map(|(_, r)| r.clone()).collect();
        let hyp_a: Vec<String> = refs.iter().zip(&pairs).map(|(r, (h, _))| {
            let n = r.split_whitespace().count();
            h.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
        }).collect();
        let hyp_b: Vec<String> = (0..refs.len()).map(|i| other[i].clone()).collect();
        let better: Vec<String> = hyp_a.iter().zip(&refs).zip(&fix)
            .map(|((h, r), &f)| if f { r.clone() } else { h.clone() })
            .collect();
        let before = paired_bootstrap(&hyp_a, &hyp_b, &refs, 100, seed).unwrap();
        let after = paired_bootstrap(&better, &hyp_b, &refs, 100, seed).unwrap();
        prop_assert!(after.p_a <= before.p_a);
        prop_assert!(before.wins_a + before.wins_b <= before.resamples);
        prop_assert!((0.0..=1.0).contains(&before.p_value));
        let own = paired_bootstrap(&hyp_a, &hyp_a, &refs, 100, seed).unwrap();
        prop_assert_eq!(own.p_value, 1.0);
    }

    #[test]
    fn binned_counts_match_brute_force(
        sents in prop::collection::vec((prop::collection::vec(0usize..14, 0..8), prop::collection::vec(0usize..14, 0..8)), 1..15),
        freqs in prop::collection::vec(1u64..20, 9),
    ) {
        // t0..t8 in vocabulary, t9..t11 out of it, 12/13 stand for specials
        let v = Vocabulary::from_entries(freqs.iter().enumerate().map(|(i, &f)| (format!("t{i}"), f)).collect()).unwrap();
        let bins = frequency_bins(&v).unwrap();
        let name = |k: usize| match k { 12 => SPECIALS[0].to_string(), 13 => SPECIALS[3].to_string(), k => format!("t{k}") };
        let hyps: Vec<Vec<String>> = sents.iter().map(|(h, _)| h.iter().map(|&k| name(k)).collect()).collect();
        let refs: Vec<Vec<String>> = sents.iter().map(|(_, r)| r.iter().map(|&k| name(k)).collect()).collect();
        let rep = binned_scores(&hyps, &refs, &v, &bins).unwrap();

        let bin_of = |t: &str| -> Option<usize> {
            if SPECIALS.contains(&t) { return None; }
            Some(match v.index_of(t) {
                None => 2,
                Some(i) => (0..3).find(|&k| bins.bins()[k].contains(&i)).unwrap(),
            })
        };
        let mut support = [0usize; 3];
        let mut hyp_count = [0usize; 3];
        let mut matched = [0usize; 3];
        for (h, r) in hyps.iter().zip(&refs) {
            let (ch, cr) = (count(h), count(r));
            for (t, &n) in &cr {
                if let Some(k) = bin_of(t) { support[k] += n; }
            }
            for (t, &n) in &ch {
                if let Some(k) = bin_of(t) {
                    hyp_count[k] += n;
                    matched[k] += n.min(cr.get(t).copied().unwrap_or(0));
                }
            }
        }
        let total: usize = refs.iter().flatten().filter(|t| !SPECIALS.contains(&t.as_str())).count();
        prop_assert_eq!(rep.bins.iter().map(|b| b.support).sum::<usize>(), total);
        for (k, b) in rep.bins.iter().enumerate() {
            prop_assert_eq!((b.support, b.hyp_count, b.matched), (support[k], hyp_count[k], matched[k]));
            for m in [b.precision, b.recall, b.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }
}

// ------------------------------------------------------------------- cli

proptest! {
    #[test]
    fn run_config_text_round_trips(
        d in 1usize..2048, d_j in 1usize..8192, dropout in 0.0f64..0.9, rate in 0.01f64..=1.0,
        seed: u64, v in variant(), bi: bool, grid in prop::collection::vec(1usize..5000, 0..4),
    ) {
        let mut c = RunConfig::default();
        c.d = d;
        c.d_j = d_j;
        c.dropout = dropout;
        c.sample_rate = rate;
        c.seed = seed;
        c.variant = v;
        c.bidirectional = bi;
        c.dj_grid = grid;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
