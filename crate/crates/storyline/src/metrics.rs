//! Text metrics and evaluation drivers.
//!
//! All metrics work on token ids and ignore the structural reserved ids
//! (padding, sentence start, sentence end); the unknown id counts as an
//! ordinary — wrong — word. Pairs are `(hypothesis, reference)`.

use crate::data::corpus::Corpus;
use crate::data::synth::SyntheticMeta;
use crate::data::vocab::Vocabulary;
use crate::decode::{generate_story, interpolate_story, DEFAULT_BEAM_WIDTH};
use crate::error::{Error, Result};
use crate::model::{MaskPattern, StoryExample, StoryModel, BOS, EOS, PAD};
use crate::scalar::Scalar;

/// Highest n-gram order of the headline score.
pub const BLEU_MAX_ORDER: usize = 4;
/// Recall weight of the longest-common-subsequence F-measure.
pub const ROUGE_BETA: f64 = 1.2;

fn content_tokens(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD && t != BOS && t != EOS)
        .collect()
}

fn ngram_counts(tokens: &[u32], n: usize) -> std::collections::HashMap<&[u32], usize> {
    let mut counts = std::collections::HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level geometric-mean n-gram precision up to `max_order`, with
/// clipped counts pooled over all pairs and the usual brevity penalty
/// `min(1, e^(1 - r/c))`. Returns 0 when any order has no match at all.
pub fn corpus_bleu_n(pairs: &[(Vec<u32>, Vec<u32>)], max_order: usize) -> Result<f64> {
    bleu_impl(pairs, max_order, false)
}

/// [`corpus_bleu_n`] at the standard order 4.
pub fn corpus_bleu(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    corpus_bleu_n(pairs, BLEU_MAX_ORDER)
}

/// Add-one smoothed BLEU for tiny corpora: every order above 1 scores
/// `(matched+1)/(total+1)`, so a missing higher-order match dampens the score
/// instead of zeroing it. Unigrams stay unsmoothed — no overlap at all is
/// still 0.
pub fn corpus_bleu_smoothed(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    bleu_impl(pairs, BLEU_MAX_ORDER, true)
}

fn bleu_impl(pairs: &[(Vec<u32>, Vec<u32>)], max_order: usize, smooth: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("corpus-level score of no pairs".into()));
    }
    if max_order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_order];
    let mut total = vec![0usize; max_order];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        let h = content_tokens(hyp);
        let r = content_tokens(reference);
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let ref_counts = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&h, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..max_order {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_precision += (m as f64 / t as f64).ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * (log_precision / max_order as f64).exp())
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean longest-common-subsequence F-measure with recall weighted by
/// [`ROUGE_BETA`]: `F = (1 + b^2) P R / (R + b^2 P)`.
pub fn rouge_l(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("corpus-level score of no pairs".into()));
    }
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut sum = 0.0;
    for (hyp, reference) in pairs {
        let h = content_tokens(hyp);
        let r = content_tokens(reference);
        if h.is_empty() || r.is_empty() {
            continue; // F is 0 with no overlap possible
        }
        let lcs = lcs_len(&h, &r) as f64;
        let p = lcs / h.len() as f64;
        let rec = lcs / r.len() as f64;
        if p + rec > 0.0 {
            sum += (1.0 + beta2) * p * rec / (rec + beta2 * p);
        }
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean fraction of a reference's distinct content tokens that the
/// hypothesis reproduces; the imagination score for hidden slots. Tokens in
/// `exclude` do not count as content — scoring a templated corpus passes its
/// template words there, so only the informative words are compared. `None`
/// when there is nothing to score.
pub fn masked_slot_accuracy(
    pairs: &[(Vec<u32>, Vec<u32>)],
    exclude: &std::collections::HashSet<u32>,
) -> Option<f64> {
    let content = |tokens: &[u32]| -> std::collections::HashSet<u32> {
        content_tokens(tokens)
            .into_iter()
            .filter(|t| !exclude.contains(t))
            .collect()
    };
    let mut scored = 0usize;
    let mut sum = 0.0;
    for (hyp, reference) in pairs {
        let r = content(reference);
        if r.is_empty() {
            continue;
        }
        let h = content(hyp);
        sum += r.intersection(&h).count() as f64 / r.len() as f64;
        scored += 1;
    }
    (scored > 0).then(|| sum / scored as f64)
}

/// Fraction of predictions that name the expected topic. `None` when empty.
pub fn topic_accuracy(predicted: &[Option<usize>], expected: &[usize]) -> Option<f64> {
    if predicted.len() != expected.len() || predicted.is_empty() {
        return None;
    }
    let hits = predicted
        .iter()
        .zip(expected)
        .filter(|(p, e)| **p == Some(**e))
        .count();
    Some(hits as f64 / predicted.len() as f64)
}

/// Interpolation score: an inserted slot earns one half for agreeing with
/// each of its two neighbours' topics, so chance level is `1/k` and a
/// locally consistent model scores one half. `None` when empty.
pub fn neighbor_consistency(
    predicted: &[Option<usize>],
    left: &[usize],
    right: &[usize],
) -> Option<f64> {
    if predicted.is_empty() || predicted.len() != left.len() || predicted.len() != right.len() {
        return None;
    }
    let mut sum = 0.0;
    for ((p, l), r) in predicted.iter().zip(left).zip(right) {
        if let Some(p) = p {
            sum += 0.5 * (p == l) as usize as f64 + 0.5 * (p == r) as usize as f64;
        }
    }
    Some(sum / predicted.len() as f64)
}

/// Which slots to hide while evaluating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HidePolicy {
    /// Full visibility: measures plain telling quality.
    None,
    /// Story `i` hides slot `i mod slots`, covering every position evenly;
    /// measures telling under one blind spot per story.
    Rotate,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub beam_width: usize,
    pub hide: HidePolicy,
    /// Score with [`corpus_bleu_smoothed`] instead of plain BLEU; meant for
    /// corpora too small to share many 4-grams.
    pub smooth_bleu: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam_width: DEFAULT_BEAM_WIDTH,
            hide: HidePolicy::Rotate,
            smooth_bleu: false,
        }
    }
}

/// Text-metric evaluation over a corpus.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub n_stories: usize,
    /// Corpus 4-gram precision score over every slot of every story.
    pub bleu: f64,
    /// Mean subsequence F-measure over the same pairs.
    pub rouge_l: f64,
    /// Reference-token recovery on hidden slots only; absent without hiding.
    pub masked_slot_accuracy: Option<f64>,
}

/// Decode every story (hiding slots per the policy) and score the output
/// against the reference sentences.
pub fn evaluate<R: Scalar>(
    model: &StoryModel<R>,
    stories: &[StoryExample<R>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if stories.is_empty() {
        return Err(Error::Degenerate("evaluation corpus is empty".into()));
    }
    let mut all_pairs = Vec::new();
    let mut hidden_pairs = Vec::new();
    for (i, story) in stories.iter().enumerate() {
        let n_slots = story.features.shape()[0];
        let mask = match opts.hide {
            HidePolicy::None => None,
            HidePolicy::Rotate => Some(MaskPattern::from_hidden(n_slots, &[i % n_slots])?),
        };
        let results = generate_story(model, &story.features, mask.as_ref(), opts.beam_width)?;
        for (slot, result) in results.into_iter().enumerate() {
            let pair = (result.tokens, story.sentences[slot].clone());
            if mask.as_ref().is_some_and(|m| !m.is_visible(slot)) {
                hidden_pairs.push(pair.clone());
            }
            all_pairs.push(pair);
        }
    }
    Ok(EvalReport {
        n_stories: stories.len(),
        bleu: if opts.smooth_bleu {
            corpus_bleu_smoothed(&all_pairs)?
        } else {
            corpus_bleu(&all_pairs)?
        },
        rouge_l: rouge_l(&all_pairs)?,
        masked_slot_accuracy: masked_slot_accuracy(&hidden_pairs, &Default::default()),
    })
}

/// Topic-level evaluation against the synthetic benchmark's generative
/// structure.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SyntheticReport {
    pub n_stories: usize,
    /// Informative-token recovery on hidden slots: template words are
    /// excluded, so each slot scores the four topic words alone and guessing
    /// a topic uniformly at random converges to `1/k_topics`.
    pub masked_slot_accuracy: f64,
    /// How often the sentence decoded for a hidden slot names that slot's
    /// true topic (rotating one hidden slot per story).
    pub masked_topic_accuracy: f64,
    /// Neighbour agreement of inserted-slot topics under interpolation.
    pub interpolation_consistency: f64,
}

/// Run both synthetic probes: topic recovery on hidden slots and neighbour
/// consistency of interpolated slots.
pub fn evaluate_synthetic<R: Scalar>(
    model: &StoryModel<R>,
    eval: &Corpus<R>,
    vocab: &Vocabulary,
    meta: &SyntheticMeta,
    beam_width: usize,
) -> Result<SyntheticReport> {
    if eval.is_empty() {
        return Err(Error::Degenerate("evaluation corpus is empty".into()));
    }
    let shared = meta.shared_ids(vocab);
    let mut hidden_pairs = Vec::new();
    let mut predicted = Vec::new();
    let mut expected = Vec::new();
    let mut interp_pred = Vec::new();
    let mut interp_left = Vec::new();
    let mut interp_right = Vec::new();
    for (i, story) in eval.stories.iter().enumerate() {
        let n_slots = story.features.shape()[0];
        let ref_topics: Vec<usize> = story
            .sentences
            .iter()
            .enumerate()
            .map(|(slot, s)| {
                meta.topic_of(vocab, s).ok_or_else(|| {
                    Error::Degenerate(format!(
                        "reference sentence of story {i} slot {slot} names no topic"
                    ))
                })
            })
            .collect::<Result<_>>()?;

        let hidden = i % n_slots;
        let mask = MaskPattern::from_hidden(n_slots, &[hidden])?;
        let results = generate_story(model, &story.features, Some(&mask), beam_width)?;
        hidden_pairs.push((
            results[hidden].tokens.clone(),
            story.sentences[hidden].clone(),
        ));
        predicted.push(meta.topic_of(vocab, &results[hidden].tokens));
        expected.push(ref_topics[hidden]);

        let interp = interpolate_story(model, &story.features, beam_width)?;
        for inserted in (1..interp.len()).step_by(2) {
            let left = (inserted - 1) / 2;
            interp_pred.push(meta.topic_of(vocab, &interp[inserted].tokens));
            interp_left.push(ref_topics[left]);
            interp_right.push(ref_topics[left + 1]);
        }
    }
    Ok(SyntheticReport {
        n_stories: eval.len(),
        masked_slot_accuracy: masked_slot_accuracy(&hidden_pairs, &shared)
            .expect("at least one story scored"),
        masked_topic_accuracy: topic_accuracy(&predicted, &expected)
            .expect("at least one story scored"),
        interpolation_consistency: neighbor_consistency(&interp_pred, &interp_left, &interp_right)
            .expect("at least one inserted slot"),
    })
}
