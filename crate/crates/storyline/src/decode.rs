//! Sentence decoding: greedy search and length-synchronous beam search over
//! the decoder's word distributions, plus the whole-story generation and
//! slot-interpolation drivers.
//!
//! Scores are raw sums of per-token natural-log probabilities with no length
//! normalization; exact ties resolve to the lexicographically smaller token
//! sequence so decoding is fully deterministic. No token is special-cased
//! except the end token, which terminates a hypothesis.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{argmax, MaskPattern, StoryModel, BOS, EOS};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Beam width used when no override is given.
pub const DEFAULT_BEAM_WIDTH: usize = 3;

/// One decoded sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Emitted token ids, including the terminal end token when `finished`.
    pub tokens: Vec<u32>,
    /// Sum of the emitted tokens' natural-log probabilities.
    pub log_prob: f64,
    /// Whether the end token arrived before the length cap.
    pub finished: bool,
}

/// Log-probabilities of a logits vector, computed in `f64` with the usual
/// max-shift so scores are stable in either precision.
fn log_probs<R: Scalar>(logits: &Tensor<R>) -> Vec<f64> {
    let xs: Vec<f64> = logits.data().iter().map(|&v| v.to_f64()).collect();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    xs.iter().map(|x| x - lse).collect()
}

/// Best-first candidate order: higher log-probability wins, exact ties go to
/// the lexicographically smaller token sequence.
fn preferred(lp_a: f64, toks_a: &[u32], lp_b: f64, toks_b: &[u32]) -> Ordering {
    lp_b.total_cmp(&lp_a).then_with(|| toks_a.cmp(toks_b))
}

/// Decode one sentence by taking the single most probable word at every step
/// until the end token or the length cap.
pub fn greedy_decode<R: Scalar>(
    model: &StoryModel<R>,
    slot_feature: &Tensor<R>,
) -> Result<DecodeResult> {
    let mut tape = Tape::inference();
    let feat = slot_feature.detached();
    let vocab = model.config.vocab_size;
    let mut h = Tensor::zeros(&[model.config.decoder_hidden]);
    let mut prev = BOS as usize;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut finished = false;
    for _ in 0..model.config.max_len {
        let one_hot = Tensor::one_hot(vocab, prev)?;
        let (h_next, logits) = model.decode_step(&mut tape, &h, &feat, &one_hot)?;
        h = h_next;
        let best = argmax(logits.data());
        log_prob += log_probs(&logits)[best];
        tokens.push(best as u32);
        if best == EOS as usize {
            finished = true;
            break;
        }
        prev = best;
    }
    Ok(DecodeResult {
        tokens,
        log_prob,
        finished,
    })
}

struct Hypothesis<R: Scalar> {
    tokens: Vec<u32>,
    log_prob: f64,
    h: Tensor<R>,
}

/// Length-synchronous beam search for one sentence. Every surviving
/// hypothesis is extended by one word per step; extensions that emit the end
/// token move to a finished pool and stop competing for beam slots. The
/// result is the best-scoring sequence across the finished pool and whatever
/// is still unfinished when the length cap lands.
///
/// A width of 1 reproduces [`greedy_decode`]; a width at least as large as
/// the number of reachable prefixes makes the search exhaustive.
pub fn beam_search<R: Scalar>(
    model: &StoryModel<R>,
    slot_feature: &Tensor<R>,
    beam_width: usize,
) -> Result<DecodeResult> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut tape = Tape::inference();
    let feat = slot_feature.detached();
    let vocab = model.config.vocab_size;
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        h: Tensor::zeros(&[model.config.decoder_hidden]),
    }];
    let mut finished: Vec<(f64, Vec<u32>)> = Vec::new();

    for _ in 0..model.config.max_len {
        let mut candidates: Vec<(f64, Vec<u32>, Tensor<R>)> =
            Vec::with_capacity(active.len() * vocab);
        for hyp in &active {
            let prev = hyp
                .tokens
                .last()
                .map(|&t| t as usize)
                .unwrap_or(BOS as usize);
            let one_hot = Tensor::one_hot(vocab, prev)?;
            let (h_next, logits) = model.decode_step(&mut tape, &hyp.h, &feat, &one_hot)?;
            for (word, &lp) in log_probs(&logits).iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(word as u32);
                candidates.push((hyp.log_prob + lp, tokens, h_next.clone()));
            }
        }
        candidates.sort_by(|a, b| preferred(a.0, &a.1, b.0, &b.1));
        candidates.truncate(beam_width);
        active = Vec::new();
        for (log_prob, tokens, h) in candidates {
            if *tokens.last().expect("extension is non-empty") == EOS {
                finished.push((log_prob, tokens));
            } else {
                active.push(Hypothesis {
                    tokens,
                    log_prob,
                    h,
                });
            }
        }
        if active.is_empty() {
            break;
        }
    }

    let mut best: Option<DecodeResult> = None;
    let mut consider = |log_prob: f64, tokens: Vec<u32>, fin: bool| {
        let replace = match &best {
            None => true,
            Some(b) => preferred(log_prob, &tokens, b.log_prob, &b.tokens) == Ordering::Less,
        };
        if replace {
            best = Some(DecodeResult {
                tokens,
                log_prob,
                finished: fin,
            });
        }
    };
    for (lp, toks) in finished {
        consider(lp, toks, true);
    }
    for hyp in active {
        consider(hyp.log_prob, hyp.tokens, false);
    }
    best.ok_or_else(|| Error::Degenerate("beam search produced no hypothesis".into()))
}

/// Run the context stages once and beam-decode a sentence for every slot.
/// `mask` hides slots before the imagining stage, exactly as during training.
pub fn generate_story<R: Scalar>(
    model: &StoryModel<R>,
    features: &Tensor<R>,
    mask: Option<&MaskPattern>,
    beam_width: usize,
) -> Result<Vec<DecodeResult>> {
    if features.rank() != 2 || features.shape()[1] != model.config.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "generate_story",
            lhs: features.shape().to_vec(),
            rhs: vec![model.config.feature_dim],
        });
    }
    if let Some(m) = mask {
        if m.n_slots() != features.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "generate_story",
                lhs: vec![features.shape()[0]],
                rhs: vec![m.n_slots()],
            });
        }
    }
    let variant = model.variant()?;
    let mut tape = Tape::inference();
    let (_, _, f_tell) = model.contextualize(&mut tape, variant.as_ref(), features, mask)?;
    (0..features.shape()[0])
        .map(|slot| {
            let feat = tape.row(&f_tell, slot)?;
            beam_search(model, &feat, beam_width)
        })
        .collect()
}

/// Interleave a zero feature row between every adjacent pair of slots,
/// turning `N` photos into `2N-1` slots whose odd indices are blanks for the
/// imagining stage to fill.
pub fn interleave_with_blanks<R: Scalar>(features: &Tensor<R>) -> Result<Tensor<R>> {
    if features.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "interleave_with_blanks",
            lhs: features.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let n = features.shape()[0];
    if n < 2 {
        return Err(Error::Degenerate(
            "interpolation needs at least two photo slots".into(),
        ));
    }
    let width = features.shape()[1];
    let mut rows = Vec::with_capacity(2 * n - 1);
    for i in 0..n {
        rows.push(features.row_slice(i).to_vec());
        if i + 1 < n {
            rows.push(vec![R::zero(); width]);
        }
    }
    Tensor::from_rows(&rows)
}

/// Tell an expanded story: blanks are inserted between the given slots (see
/// [`interleave_with_blanks`]), the pipeline imagines their content, and all
/// `2N-1` slots are decoded. Odd result indices belong to inserted slots.
pub fn interpolate_story<R: Scalar>(
    model: &StoryModel<R>,
    features: &Tensor<R>,
    beam_width: usize,
) -> Result<Vec<DecodeResult>> {
    let expanded = interleave_with_blanks(features)?;
    generate_story(model, &expanded, None, beam_width)
}
