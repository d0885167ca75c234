//! The storytelling model: configuration, curriculum masking, the imagining
//! and telling stages (delegated to a [`crate::variant::Variant`]), the GRU
//! sentence decoder, and the pooled training loss.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{visit, BiGru, GruCell, LinearMap, NonLocalBlock, OutputHead};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::variant::{self, Variant};

/// Reserved token ids shared by the vocabulary, decoder and metrics.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Number of reserved ids preceding real vocabulary entries.
pub const RESERVED_TOKENS: usize = 4;

fn default_slots() -> usize {
    5
}
fn default_alpha() -> usize {
    50
}
fn default_beta() -> usize {
    80
}
fn default_max_len() -> usize {
    20
}
fn default_ablation() -> String {
    "full".into()
}

/// Model hyperparameters. `feature_dim` must equal twice `hidden_dim` so the
/// BiGRU stages can sit on residual paths over the feature sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Photo slots per story.
    #[serde(default = "default_slots")]
    pub slots: usize,
    /// Width `D` of one photo feature vector.
    pub feature_dim: usize,
    /// Per-direction GRU width `H` in the context stages; `2H = D`.
    pub hidden_dim: usize,
    /// Projection width inside the non-local blocks (default `D/2`).
    pub inner_dim: usize,
    /// Total vocabulary size including the 4 reserved ids.
    pub vocab_size: usize,
    /// Maximum decoded sentence length (including the terminal end token).
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Hidden width of the sentence decoder GRU.
    pub decoder_hidden: usize,
    /// Epoch at which the curriculum starts hiding one slot.
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    /// Epoch at which the curriculum starts hiding two slots.
    #[serde(default = "default_beta")]
    pub beta: usize,
    /// Registered pipeline variant name.
    #[serde(default = "default_ablation")]
    pub ablation: String,
    /// Optional dense word-embedding width; `None` feeds the decoder raw
    /// one-hot word vectors.
    #[serde(default)]
    pub embed_dim: Option<usize>,
}

impl ModelConfig {
    /// Defaults scaled around a feature width.
    pub fn for_features(feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            slots: default_slots(),
            feature_dim,
            hidden_dim: feature_dim / 2,
            inner_dim: (feature_dim / 2).max(1),
            vocab_size,
            max_len: default_max_len(),
            decoder_hidden: 2 * feature_dim,
            alpha: default_alpha(),
            beta: default_beta(),
            ablation: default_ablation(),
            embed_dim: None,
        }
    }

    /// Width of the decoder input `[slot feature ; word representation]`.
    pub fn decoder_input_dim(&self) -> usize {
        self.feature_dim + self.embed_dim.unwrap_or(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "feature and hidden widths must be positive".into(),
            ));
        }
        if self.feature_dim != 2 * self.hidden_dim {
            return Err(Error::Config(format!(
                "feature_dim must equal 2*hidden_dim for the residual context stages \
                 (got feature_dim {} with hidden_dim {})",
                self.feature_dim, self.hidden_dim
            )));
        }
        if self.inner_dim == 0 {
            return Err(Error::Config("inner_dim must be positive".into()));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room after {RESERVED_TOKENS} reserved ids",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(
                "max_len must allow at least one word plus the end token".into(),
            ));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::Config("decoder_hidden must be positive".into()));
        }
        if self.alpha > self.beta {
            return Err(Error::Config(format!(
                "curriculum transitions out of order: alpha {} > beta {}",
                self.alpha, self.beta
            )));
        }
        if self.slots == 0 {
            return Err(Error::Config("slots must be positive".into()));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("embed_dim must be positive when set".into()));
        }
        variant::lookup::<f64>(&self.ablation).map(|_| ())
    }
}

/// How many slots the curriculum hides at `epoch`: 0 before `alpha`, 1 before
/// `beta`, 2 afterwards.
pub fn curriculum_level(epoch: usize, alpha: usize, beta: usize) -> usize {
    if epoch < alpha {
        0
    } else if epoch < beta {
        1
    } else {
        2
    }
}

/// Visibility pattern over the slots of one story.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    visible: Vec<bool>,
}

impl MaskPattern {
    pub fn all_visible(n_slots: usize) -> Self {
        MaskPattern {
            visible: vec![true; n_slots],
        }
    }

    /// Pattern hiding exactly the given slot indices.
    pub fn from_hidden(n_slots: usize, hidden: &[usize]) -> Result<Self> {
        let mut visible = vec![true; n_slots];
        for &i in hidden {
            if i >= n_slots {
                return Err(Error::IndexOutOfRange {
                    op: "mask_from_hidden",
                    index: i,
                    bound: n_slots,
                });
            }
            visible[i] = false;
        }
        Ok(MaskPattern { visible })
    }

    pub fn n_slots(&self) -> usize {
        self.visible.len()
    }

    pub fn is_visible(&self, slot: usize) -> bool {
        self.visible[slot]
    }

    pub fn hidden_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }

    pub fn hidden_indices(&self) -> Vec<usize> {
        self.visible
            .iter()
            .enumerate()
            .filter_map(|(i, v)| (!v).then_some(i))
            .collect()
    }
}

/// Draw a mask hiding `b_total` distinct slots uniformly at random.
/// `b_total = 0` returns the all-visible pattern without consuming any
/// randomness, so schedules below the first transition stay bit-identical
/// across variants that never mask.
pub fn sample_mask(n_slots: usize, b_total: usize, rng: &mut ChaCha20Rng) -> Result<MaskPattern> {
    if b_total == 0 {
        return Ok(MaskPattern::all_visible(n_slots));
    }
    if b_total > 2 {
        return Err(Error::Config(format!(
            "curriculum hides at most 2 slots, asked for {b_total}"
        )));
    }
    if b_total >= n_slots {
        return Err(Error::Config(format!(
            "cannot hide {b_total} of {n_slots} slots and keep any context"
        )));
    }
    let hidden = sample(rng, n_slots, b_total).into_vec();
    MaskPattern::from_hidden(n_slots, &hidden)
}

/// Zero out the feature rows of hidden slots. Visible rows are copied
/// bit-identically; hidden rows are written as exact zeros.
pub fn hide<R: Scalar>(features: &Tensor<R>, mask: &MaskPattern) -> Result<Tensor<R>> {
    if features.rank() != 2 || features.shape()[0] != mask.n_slots() {
        return Err(Error::ShapeMismatch {
            op: "hide",
            lhs: features.shape().to_vec(),
            rhs: vec![mask.n_slots()],
        });
    }
    let width = features.shape()[1];
    let mut data = features.data().to_vec();
    for slot in 0..mask.n_slots() {
        if !mask.is_visible(slot) {
            for v in &mut data[slot * width..(slot + 1) * width] {
                *v = R::zero();
            }
        }
    }
    Tensor::new(features.shape(), data)
}

/// The full parameter set of the storytelling network.
#[derive(Debug, Clone)]
pub struct StoryModel<R: Scalar> {
    pub config: ModelConfig,
    pub imagine_rnn: BiGru<R>,
    pub imagine_attn: NonLocalBlock<R>,
    pub tell_rnn: BiGru<R>,
    pub tell_attn: NonLocalBlock<R>,
    pub decoder: GruCell<R>,
    pub embed: Option<LinearMap<R>>,
    pub head: OutputHead<R>,
}

impl<R: Scalar> StoryModel<R> {
    /// Initialize all parameters from the given generator.
    pub fn init(config: ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let h = config.hidden_dim;
        let imagine_rnn = BiGru::init(rng, h, d);
        let imagine_attn = NonLocalBlock::init(rng, d, config.inner_dim);
        let tell_rnn = BiGru::init(rng, h, d);
        let tell_attn = NonLocalBlock::init(rng, d, config.inner_dim);
        let decoder = GruCell::init(rng, config.decoder_hidden, config.decoder_input_dim());
        let embed = config.embed_dim.map(|e| {
            LinearMap::init(
                rng,
                e,
                config.vocab_size,
                crate::layers::InitKind::XavierUniform,
                false,
            )
        });
        let head = OutputHead::init(
            rng,
            config.decoder_hidden,
            config.decoder_hidden,
            config.vocab_size,
        );
        Ok(StoryModel {
            config,
            imagine_rnn,
            imagine_attn,
            tell_rnn,
            tell_attn,
            decoder,
            embed,
            head,
        })
    }

    /// The pipeline variant selected by the config.
    pub fn variant(&self) -> Result<Box<dyn Variant<R>>> {
        variant::lookup(&self.config.ablation)
    }

    /// Parameters in a fixed, name-keyed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out = Vec::new();
        visit::bigru(&self.imagine_rnn, "imagine_rnn", &mut out);
        visit::nonlocal_block(&self.imagine_attn, "imagine_attn", &mut out);
        visit::bigru(&self.tell_rnn, "tell_rnn", &mut out);
        visit::nonlocal_block(&self.tell_attn, "tell_attn", &mut out);
        visit::gru(&self.decoder, "decoder", &mut out);
        if let Some(e) = &self.embed {
            visit::linear(e, "embed", &mut out);
        }
        visit::head(&self.head, "head", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<R>)> {
        let mut out = Vec::new();
        visit::bigru_mut(&mut self.imagine_rnn, "imagine_rnn", &mut out);
        visit::nonlocal_mut(&mut self.imagine_attn, "imagine_attn", &mut out);
        visit::bigru_mut(&mut self.tell_rnn, "tell_rnn", &mut out);
        visit::nonlocal_mut(&mut self.tell_attn, "tell_attn", &mut out);
        visit::gru_mut(&mut self.decoder, "decoder", &mut out);
        if let Some(e) = &mut self.embed {
            visit::linear_mut(e, "embed", &mut out);
        }
        visit::head_mut(&mut self.head, "head", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuild a model from a parameter snapshot (checkpoint loading).
    pub fn from_named(config: ModelConfig, params: &[(String, Tensor<R>)]) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::STREAM_INIT);
        let mut model = StoryModel::init(config, &mut rng)?;
        let mut by_name: std::collections::HashMap<&str, &Tensor<R>> =
            params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in model.named_params_mut() {
            let loaded = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Config(format!("parameter {name} missing from snapshot")))?;
            if loaded.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "model_from_named",
                    lhs: slot.shape().to_vec(),
                    rhs: loaded.shape().to_vec(),
                });
            }
            *slot = loaded.detached().with_grad();
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!(
                "snapshot carries unknown parameter {extra}"
            )));
        }
        Ok(model)
    }

    /// Clone with every parameter watched on `tape` so gradients resolve.
    pub fn watch(&self, tape: &mut Tape<R>) -> Self {
        StoryModel {
            config: self.config.clone(),
            imagine_rnn: visit::bigru_watch(&self.imagine_rnn, tape),
            imagine_attn: visit::nonlocal_watch(&self.imagine_attn, tape),
            tell_rnn: visit::bigru_watch(&self.tell_rnn, tape),
            tell_attn: visit::nonlocal_watch(&self.tell_attn, tape),
            decoder: visit::gru_watch(&self.decoder, tape),
            embed: self.embed.as_ref().map(|e| visit::linear_watch(e, tape)),
            head: visit::head_watch(&self.head, tape),
        }
    }

    /// Word-input representation fed to the decoder: the raw one-hot vector,
    /// or its dense embedding when the config enables one.
    pub fn word_input(&self, tape: &mut Tape<R>, one_hot: &Tensor<R>) -> Result<Tensor<R>> {
        match &self.embed {
            Some(e) => e.apply(tape, one_hot),
            None => Ok(one_hot.clone()),
        }
    }

    /// One decoder step. `v_prev` must be a one-hot vocabulary vector (the
    /// previous word); returns the next state and the vocabulary logits.
    pub fn decode_step(
        &self,
        tape: &mut Tape<R>,
        h_prev: &Tensor<R>,
        slot_feature: &Tensor<R>,
        v_prev: &Tensor<R>,
    ) -> Result<(Tensor<R>, Tensor<R>)> {
        if v_prev.rank() != 1 || v_prev.numel() != self.config.vocab_size {
            return Err(Error::ShapeMismatch {
                op: "decode_step",
                lhs: v_prev.shape().to_vec(),
                rhs: vec![self.config.vocab_size],
            });
        }
        let ones = v_prev.data().iter().filter(|&&v| v == R::one()).count();
        let zeros = v_prev.data().iter().filter(|&&v| v == R::zero()).count();
        if ones != 1 || ones + zeros != v_prev.numel() {
            return Err(Error::Config(
                "decode_step expects a one-hot previous-word vector".into(),
            ));
        }
        if slot_feature.rank() != 1 || slot_feature.numel() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "decode_step",
                lhs: slot_feature.shape().to_vec(),
                rhs: vec![self.config.feature_dim],
            });
        }
        let word = self.word_input(tape, v_prev)?;
        let input = tape.concat(&[slot_feature, &word], 0)?;
        let h = self.decoder.step(tape, h_prev, &input)?;
        let logits = self.head.logits(tape, &h)?;
        Ok((h, logits))
    }

    /// Run the context stages: blinded, reminded and telling feature
    /// sequences for one story.
    pub fn contextualize(
        &self,
        tape: &mut Tape<R>,
        variant: &dyn Variant<R>,
        features: &Tensor<R>,
        mask: Option<&MaskPattern>,
    ) -> Result<(Tensor<R>, Tensor<R>, Tensor<R>)> {
        let f_blind = match mask {
            Some(m) => hide(features, m)?,
            None => features.clone(),
        };
        let f_reminded = variant.imagine(tape, self, &f_blind)?;
        let f_tell = variant.tell(tape, self, &f_reminded)?;
        Ok((f_blind, f_reminded, f_tell))
    }
}

/// One training story: slot features (`N×D`) and one end-token-terminated
/// token-id sentence per slot.
#[derive(Debug, Clone)]
pub struct StoryExample<R: Scalar> {
    pub features: Tensor<R>,
    pub sentences: Vec<Vec<u32>>,
}

/// Teacher-forced negative log-likelihood of one story, pooled over every
/// token of every slot sentence. The loss of slot `i` is conditioned on the
/// telling feature of slot `i` only, so stories never leak into each other.
pub fn story_loss<R: Scalar>(
    tape: &mut Tape<R>,
    model: &StoryModel<R>,
    variant: &dyn Variant<R>,
    story: &StoryExample<R>,
    mask: Option<&MaskPattern>,
    rng: &mut ChaCha20Rng,
    scheduled_sampling: f64,
) -> Result<Tensor<R>> {
    let n_slots = story.features.shape()[0];
    if story.sentences.len() != n_slots {
        return Err(Error::ShapeMismatch {
            op: "story_loss",
            lhs: vec![n_slots],
            rhs: vec![story.sentences.len()],
        });
    }
    if story.features.shape()[1] != model.config.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "story_loss",
            lhs: story.features.shape().to_vec(),
            rhs: vec![n_slots, model.config.feature_dim],
        });
    }
    let (_, _, f_tell) = model.contextualize(tape, variant, &story.features, mask)?;

    let vocab = model.config.vocab_size;
    let mut pooled: Option<Tensor<R>> = None;
    let mut total_tokens = 0usize;
    for (slot, sentence) in story.sentences.iter().enumerate() {
        if sentence.is_empty() {
            return Err(Error::Degenerate(format!(
                "slot {slot} has an empty sentence"
            )));
        }
        let mut targets: Vec<usize> = sentence.iter().map(|&t| t as usize).collect();
        if targets.len() > model.config.max_len {
            log::warn!(
                "sentence of {} tokens exceeds max_len {}, truncating",
                targets.len(),
                model.config.max_len
            );
            targets.truncate(model.config.max_len);
            *targets.last_mut().expect("max_len >= 2") = EOS as usize;
        }

        let slot_feature = tape.row(&f_tell, slot)?;
        let mut h = Tensor::zeros(&[model.config.decoder_hidden]);
        let mut prev = Tensor::one_hot(vocab, BOS as usize)?;
        let mut logit_rows = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            let (h_next, logits) = model.decode_step(tape, &h, &slot_feature, &prev)?;
            h = h_next;
            let next_id = if scheduled_sampling > 0.0 && rng.gen::<f64>() < scheduled_sampling {
                argmax(logits.data())
            } else {
                target
            };
            logit_rows.push(logits);
            if t + 1 < targets.len() {
                prev = Tensor::one_hot(vocab, next_id)?;
            }
        }
        let refs: Vec<&Tensor<R>> = logit_rows.iter().collect();
        let logit_mat = tape.stack_rows(&refs)?;
        let valid = vec![true; targets.len()];
        let mean_nll = tape.cross_entropy(&logit_mat, &targets, &valid)?;
        // Re-weight the per-sentence mean into a token-sum so the story loss
        // is the mean over every token in the story.
        let summed = tape.scale(&mean_nll, R::from_f64(targets.len() as f64))?;
        total_tokens += targets.len();
        pooled = Some(match pooled {
            Some(acc) => tape.add(&acc, &summed)?,
            None => summed,
        });
    }
    let pooled = pooled.expect("n_slots > 0 validated by shape check");
    tape.scale(&pooled, R::from_f64(1.0 / total_tokens as f64))
}

/// Mean [`story_loss`] over a batch, with curriculum masking drawn per story.
/// Variants that disable blinding skip masking entirely and consume no
/// randomness, as does any epoch below the first curriculum transition.
pub fn forward_loss<R: Scalar>(
    tape: &mut Tape<R>,
    model: &StoryModel<R>,
    variant: &dyn Variant<R>,
    batch: &[StoryExample<R>],
    epoch: usize,
    rng: &mut ChaCha20Rng,
    scheduled_sampling: f64,
) -> Result<Tensor<R>> {
    if batch.is_empty() {
        return Err(Error::Degenerate("forward_loss over an empty batch".into()));
    }
    let b_total = if variant.masks_input() {
        curriculum_level(epoch, model.config.alpha, model.config.beta)
    } else {
        0
    };
    let mut acc: Option<Tensor<R>> = None;
    for story in batch {
        let n_slots = story.features.shape()[0];
        let mask = if b_total > 0 {
            Some(sample_mask(n_slots, b_total, rng)?)
        } else {
            None
        };
        let loss = story_loss(
            tape,
            model,
            variant,
            story,
            mask.as_ref(),
            rng,
            scheduled_sampling,
        )?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &loss)?,
            None => loss,
        });
    }
    let total = acc.expect("non-empty batch");
    tape.scale(&total, R::from_f64(1.0 / batch.len() as f64))
}

/// Index of the largest value (first one wins ties).
pub fn argmax<R: Scalar>(values: &[R]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, STREAM_INIT, STREAM_TRAIN};
    use approx::assert_relative_eq;
    use rand::RngCore;

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::for_features(8, 12);
        cfg.slots = 3;
        cfg.max_len = 6;
        cfg.decoder_hidden = 6;
        cfg.inner_dim = 4;
        cfg.alpha = 2;
        cfg.beta = 4;
        cfg
    }

    pub(crate) fn tiny_story(rng: &mut ChaCha20Rng, slots: usize, d: usize) -> StoryExample<f64> {
        let rows: Vec<Vec<f64>> = (0..slots)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let sentences = (0..slots)
            .map(|_| {
                let len = rng.gen_range(2..5usize);
                let mut s: Vec<u32> = (0..len - 1)
                    .map(|_| rng.gen_range(RESERVED_TOKENS as u32..12))
                    .collect();
                s.push(EOS);
                s
            })
            .collect();
        StoryExample {
            features: Tensor::from_rows(&rows).unwrap(),
            sentences,
        }
    }

    #[test]
    fn curriculum_level_bands() {
        for epoch in 0..200 {
            let expected = if epoch < 50 {
                0
            } else if epoch < 80 {
                1
            } else {
                2
            };
            assert_eq!(curriculum_level(epoch, 50, 80), expected);
        }
        // Degenerate schedule: alpha == beta skips the single-mask band.
        assert_eq!(curriculum_level(10, 10, 10), 2);
    }

    #[test]
    fn sample_mask_counts_and_errors() {
        let mut rng = stream(9, STREAM_TRAIN);
        for b in 0..=2usize {
            let m = sample_mask(5, b, &mut rng).unwrap();
            assert_eq!(m.hidden_count(), b);
            assert_eq!(m.n_slots(), 5);
        }
        assert!(sample_mask(5, 3, &mut rng).is_err());
        assert!(sample_mask(2, 2, &mut rng).is_err());
        assert!(sample_mask(1, 1, &mut rng).is_err());
    }

    #[test]
    fn zero_level_consumes_no_randomness() {
        let mut rng = stream(11, STREAM_TRAIN);
        let before = rng.get_word_pos();
        let _ = sample_mask(5, 0, &mut rng).unwrap();
        assert_eq!(rng.get_word_pos(), before);
        let _ = sample_mask(5, 1, &mut rng).unwrap();
        assert_ne!(rng.get_word_pos(), before);
    }

    #[test]
    fn hide_zeroes_masked_rows_bitwise() {
        let features = Tensor::from_rows(&[
            vec![0.1f64, -0.2, 0.3],
            vec![1.5, 2.5, -3.5],
            vec![-0.7, 0.0, 0.9],
        ])
        .unwrap();
        let mask = MaskPattern::from_hidden(3, &[1]).unwrap();
        let blind = hide(&features, &mask).unwrap();
        assert_eq!(blind.row_slice(0), features.row_slice(0));
        assert_eq!(blind.row_slice(2), features.row_slice(2));
        for &v in blind.row_slice(1) {
            assert_eq!(
                v.to_bits(),
                0.0f64.to_bits(),
                "hidden rows must be exact +0"
            );
        }
        // Mask length must match the slot count.
        let short = MaskPattern::all_visible(2);
        assert!(hide(&features, &short).is_err());
    }

    #[test]
    fn config_validation_catches_bad_combinations() {
        let mut cfg = tiny_config();
        cfg.hidden_dim = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.alpha = 90;
        cfg.beta = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.ablation = "mystery".into();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.vocab_size = 4;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn context_stages_have_disjoint_parameters() {
        let mut rng = stream(5, STREAM_INIT);
        let mut model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let x = Tensor::from_rows(
            &(0..3)
                .map(|i| vec![0.1 * (i as f64 + 1.0); 8])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let variant = model.variant().unwrap();
        let mut tape = Tape::inference();
        let (_, reminded_before, _) = model
            .contextualize(&mut tape, variant.as_ref(), &x, None)
            .unwrap();
        // Shapes of the two stages match pairwise...
        assert_eq!(
            model.imagine_rnn.fwd.w_z.shape(),
            model.tell_rnn.fwd.w_z.shape()
        );
        assert_eq!(
            model.imagine_attn.theta.shape(),
            model.tell_attn.theta.shape()
        );
        // ...but storage is disjoint: rewriting the telling stage leaves the
        // imagining output untouched.
        model.tell_rnn = BiGru::init(&mut rng, 4, 8);
        model.tell_attn = NonLocalBlock::init(&mut rng, 8, 4);
        let (_, reminded_after, _) = model
            .contextualize(&mut tape, variant.as_ref(), &x, None)
            .unwrap();
        assert_eq!(reminded_before.data(), reminded_after.data());
    }

    #[test]
    fn decode_step_validates_one_hot() {
        let mut rng = stream(6, STREAM_INIT);
        let model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let mut tape = Tape::inference();
        let h = Tensor::zeros(&[6]);
        let f = Tensor::zeros(&[8]);
        let good = Tensor::one_hot(12, 3).unwrap();
        assert!(model.decode_step(&mut tape, &h, &f, &good).is_ok());
        let not_hot = Tensor::vector(vec![0.5; 12]);
        assert!(model.decode_step(&mut tape, &h, &f, &not_hot).is_err());
        let two_hot = {
            let mut v = vec![0.0; 12];
            v[1] = 1.0;
            v[2] = 1.0;
            Tensor::vector(v)
        };
        assert!(model.decode_step(&mut tape, &h, &f, &two_hot).is_err());
    }

    #[test]
    fn zeroed_model_scores_uniform_loss() {
        // With every parameter zero the logits vanish, so the loss is exactly
        // ln(vocab) per token regardless of targets.
        let mut rng = stream(7, STREAM_INIT);
        let mut model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        for (_, p) in model.named_params_mut() {
            let zero = Tensor::zeros(p.shape()).with_grad();
            *p = zero;
        }
        let mut data_rng = stream(8, STREAM_TRAIN);
        let story = tiny_story(&mut data_rng, 3, 8);
        let variant = model.variant().unwrap();
        let mut tape = Tape::inference();
        let loss = story_loss(
            &mut tape,
            &model,
            variant.as_ref(),
            &story,
            None,
            &mut data_rng,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(loss.item().unwrap(), (12.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_story_losses() {
        let mut rng = stream(21, STREAM_INIT);
        let model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let variant = model.variant().unwrap();
        let mut data_rng = stream(22, STREAM_TRAIN);
        let a = tiny_story(&mut data_rng, 3, 8);
        let b = tiny_story(&mut data_rng, 3, 8);

        let mut t1 = Tape::inference();
        let la = story_loss(
            &mut t1,
            &model,
            variant.as_ref(),
            &a,
            None,
            &mut data_rng,
            0.0,
        )
        .unwrap()
        .item()
        .unwrap();
        let lb = story_loss(
            &mut t1,
            &model,
            variant.as_ref(),
            &b,
            None,
            &mut data_rng,
            0.0,
        )
        .unwrap()
        .item()
        .unwrap();
        let mut t2 = Tape::inference();
        let mut rng2 = stream(23, STREAM_TRAIN);
        let batch = forward_loss(
            &mut t2,
            &model,
            variant.as_ref(),
            &[a, b],
            0,
            &mut rng2,
            0.0,
        )
        .unwrap()
        .item()
        .unwrap();
        assert_eq!(batch, (la + lb) * 0.5);
    }

    #[test]
    fn no_blinding_matches_full_below_first_transition() {
        let mut rng = stream(31, STREAM_INIT);
        let model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let mut data_rng = stream(32, STREAM_TRAIN);
        let batch = vec![
            tiny_story(&mut data_rng, 3, 8),
            tiny_story(&mut data_rng, 3, 8),
        ];

        let full = variant::lookup::<f64>("full").unwrap();
        let nb = variant::lookup::<f64>("no-blinding").unwrap();
        let mut rng_a = stream(33, STREAM_TRAIN);
        let mut rng_b = stream(33, STREAM_TRAIN);
        let mut ta = Tape::inference();
        let mut tb = Tape::inference();
        // Below alpha the full model hides nothing, so the two variants are
        // bit-identical computations.
        let la = forward_loss(&mut ta, &model, full.as_ref(), &batch, 0, &mut rng_a, 0.0)
            .unwrap()
            .item()
            .unwrap();
        let lb = forward_loss(&mut tb, &model, nb.as_ref(), &batch, 0, &mut rng_b, 0.0)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());

        // At a masking epoch they diverge (the full variant hides slots).
        let mut ta = Tape::inference();
        let mut tb = Tape::inference();
        let la = forward_loss(&mut ta, &model, full.as_ref(), &batch, 3, &mut rng_a, 0.0)
            .unwrap()
            .item()
            .unwrap();
        let lb = forward_loss(&mut tb, &model, nb.as_ref(), &batch, 3, &mut rng_b, 0.0)
            .unwrap()
            .item()
            .unwrap();
        assert_ne!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn no_nonlocal_never_touches_attention_parameters() {
        let mut rng = stream(41, STREAM_INIT);
        let mut cfg = tiny_config();
        cfg.ablation = "no-nonlocal".into();
        let mut model = StoryModel::<f64>::init(cfg, &mut rng).unwrap();
        // Poison both attention blocks: any op on them would error out as
        // non-finite, so a clean pass proves they are never invoked.
        for block in [&mut model.imagine_attn, &mut model.tell_attn] {
            for t in [&mut block.theta, &mut block.phi, &mut block.g, &mut block.z] {
                let poisoned = vec![f64::NAN; t.numel()];
                *t = Tensor::new(t.shape(), poisoned).unwrap().with_grad();
            }
        }
        let mut data_rng = stream(42, STREAM_TRAIN);
        let story = tiny_story(&mut data_rng, 3, 8);
        let variant = model.variant().unwrap();
        let mut tape = Tape::inference();
        assert!(story_loss(
            &mut tape,
            &model,
            variant.as_ref(),
            &story,
            None,
            &mut data_rng,
            0.0
        )
        .is_ok());

        // The full pipeline on the same poisoned model must fail fast.
        let full = variant::lookup::<f64>("full").unwrap();
        let mut tape = Tape::inference();
        assert!(matches!(
            story_loss(
                &mut tape,
                &model,
                full.as_ref(),
                &story,
                None,
                &mut data_rng,
                0.0
            ),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn no_telling_passes_reminded_features_through() {
        let mut rng = stream(51, STREAM_INIT);
        let mut cfg = tiny_config();
        cfg.ablation = "no-telling".into();
        let model = StoryModel::<f64>::init(cfg, &mut rng).unwrap();
        let variant = model.variant().unwrap();
        let x = Tensor::from_rows(
            &(0..3)
                .map(|i| vec![0.2 * (i as f64 - 1.0); 8])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut tape = Tape::inference();
        let (_, reminded, telling) = model
            .contextualize(&mut tape, variant.as_ref(), &x, None)
            .unwrap();
        assert_eq!(reminded.data(), telling.data());
    }

    #[test]
    fn masking_propagates_into_loss() {
        let mut rng = stream(61, STREAM_INIT);
        let model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let variant = model.variant().unwrap();
        let mut data_rng = stream(62, STREAM_TRAIN);
        let story = tiny_story(&mut data_rng, 3, 8);
        let mask = MaskPattern::from_hidden(3, &[1]).unwrap();
        let mut t1 = Tape::inference();
        let masked = story_loss(
            &mut t1,
            &model,
            variant.as_ref(),
            &story,
            Some(&mask),
            &mut data_rng,
            0.0,
        )
        .unwrap();
        let mut t2 = Tape::inference();
        let open = story_loss(
            &mut t2,
            &model,
            variant.as_ref(),
            &story,
            None,
            &mut data_rng,
            0.0,
        )
        .unwrap();
        assert_ne!(masked.item().unwrap(), open.item().unwrap());
    }

    #[test]
    fn selected_parameter_gradients_check_out() {
        use crate::gradcheck::{grad_check_multi, DEFAULT_EPS, TOLERANCE};
        let mut rng = stream(71, STREAM_INIT);
        let model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let mut data_rng = stream(72, STREAM_TRAIN);
        let story = tiny_story(&mut data_rng, 3, 8);
        let mask = MaskPattern::from_hidden(3, &[2]).unwrap();

        // Differentiate through a handful of parameters spanning the whole
        // pipeline; the acceptance suite covers every coordinate.
        let picks = [
            "imagine_rnn.fwd.w_z",
            "imagine_attn.z",
            "tell_rnn.bwd.u_h",
            "decoder.w_h",
            "head.out.weight",
        ];
        let inputs: Vec<Tensor<f64>> = {
            let named = model.named_params();
            picks
                .iter()
                .map(|want| {
                    named
                        .iter()
                        .find(|(n, _)| n == want)
                        .map(|(_, t)| (*t).detached())
                        .expect("parameter exists")
                })
                .collect()
        };
        let err = grad_check_multi(
            |tape, ins| {
                // The checked inputs arrive pre-watched; splicing them into a
                // cloned model routes gradients only through those tensors.
                let mut m = model.clone();
                for (want, replacement) in picks.iter().zip(ins) {
                    for (name, slot) in m.named_params_mut() {
                        if &name == want {
                            *slot = replacement.clone();
                        }
                    }
                }
                let variant = m.variant().unwrap();
                let mut step_rng = stream(73, STREAM_TRAIN);
                story_loss(
                    tape,
                    &m,
                    variant.as_ref(),
                    &story,
                    Some(&mask),
                    &mut step_rng,
                    0.0,
                )
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOLERANCE, "pipeline gradient error {err}");
    }

    #[test]
    fn from_named_round_trips() {
        let mut rng = stream(81, STREAM_INIT);
        let model = StoryModel::<f64>::init(tiny_config(), &mut rng).unwrap();
        let snapshot: Vec<(String, Tensor<f64>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.detached()))
            .collect();
        let rebuilt = StoryModel::from_named(model.config.clone(), &snapshot).unwrap();
        for ((n1, p1), (n2, p2)) in model
            .named_params()
            .iter()
            .zip(rebuilt.named_params().iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(p1.data(), p2.data());
        }
        // Missing parameter detected.
        let short = &snapshot[1..];
        assert!(StoryModel::from_named(model.config.clone(), short).is_err());
        let _ = rng.next_u64();
    }
}
