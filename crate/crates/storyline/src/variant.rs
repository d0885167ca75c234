//! Pipeline variants for ablation studies, registered by name and selected at
//! runtime (`--ablation` on the CLI, `ablation` in the model config). Each
//! variant owns the two context stages of the pipeline:
//!
//! * `imagine` — reconstruct context for hidden slots from the blinded
//!   feature sequence (residual around a BiGRU + non-local stage),
//! * `tell` — re-read the reminded sequence into per-slot decoding features.
//!
//! The `full` variant is the complete pipeline; the others each remove one
//! ingredient: input blinding, the non-local blocks, or the telling stage.

use crate::error::{Error, Result};
use crate::layers::{BiGru, NonLocalBlock};
use crate::model::StoryModel;
use crate::scalar::Scalar;
use crate::tape::{Activation, Tape};
use crate::tensor::Tensor;

/// One ablation variant of the pipeline. Objects are stateless; all
/// parameters live on the [`StoryModel`] passed into each call.
pub trait Variant<R: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether training applies curriculum masking to the input features.
    fn masks_input(&self) -> bool {
        true
    }

    /// Blinded `N×D` features to reminded `N×D` features.
    fn imagine(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_blind: &Tensor<R>,
    ) -> Result<Tensor<R>>;

    /// Reminded `N×D` features to per-slot telling features (`N×D`).
    fn tell(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_reminded: &Tensor<R>,
    ) -> Result<Tensor<R>>;
}

/// Registered variant names, in CLI display order.
pub const NAMES: &[&str] = &["full", "no-blinding", "no-nonlocal", "no-telling"];

/// Look up a variant by registered name.
pub fn lookup<R: Scalar>(name: &str) -> Result<Box<dyn Variant<R>>> {
    match name {
        "full" => Ok(Box::new(Full)),
        "no-blinding" => Ok(Box::new(NoBlinding)),
        "no-nonlocal" => Ok(Box::new(NoNonLocal)),
        "no-telling" => Ok(Box::new(NoTelling)),
        other => Err(Error::Config(format!(
            "unknown ablation {other:?}, expected one of {}",
            NAMES.join(", ")
        ))),
    }
}

/// Shared stage body: SELU over a BiGRU pass, optionally followed by the
/// non-local block.
fn stage<R: Scalar>(
    tape: &mut Tape<R>,
    rnn: &BiGru<R>,
    attn: Option<&NonLocalBlock<R>>,
    x: &Tensor<R>,
) -> Result<Tensor<R>> {
    let h = rnn.forward(tape, x)?;
    let h = tape.activation(Activation::Selu, &h)?;
    match attn {
        Some(block) => block.forward(tape, &h),
        None => Ok(h),
    }
}

/// The complete pipeline: blinding, both non-local stages, telling stage.
pub struct Full;

impl<R: Scalar> Variant<R> for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn imagine(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_blind: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let ctx = stage(tape, &model.imagine_rnn, Some(&model.imagine_attn), f_blind)?;
        tape.add(f_blind, &ctx)
    }

    fn tell(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_reminded: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        stage(tape, &model.tell_rnn, Some(&model.tell_attn), f_reminded)
    }
}

/// Same network as `full` but never hides input slots during training.
pub struct NoBlinding;

impl<R: Scalar> Variant<R> for NoBlinding {
    fn name(&self) -> &'static str {
        "no-blinding"
    }

    fn masks_input(&self) -> bool {
        false
    }

    fn imagine(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_blind: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        Full.imagine(tape, model, f_blind)
    }

    fn tell(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_reminded: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        Full.tell(tape, model, f_reminded)
    }
}

/// Both stages run without their non-local blocks.
pub struct NoNonLocal;

impl<R: Scalar> Variant<R> for NoNonLocal {
    fn name(&self) -> &'static str {
        "no-nonlocal"
    }

    fn imagine(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_blind: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let ctx = stage(tape, &model.imagine_rnn, None, f_blind)?;
        tape.add(f_blind, &ctx)
    }

    fn tell(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_reminded: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        stage(tape, &model.tell_rnn, None, f_reminded)
    }
}

/// Imagining only: the telling stage passes reminded features straight
/// through to the decoder.
pub struct NoTelling;

impl<R: Scalar> Variant<R> for NoTelling {
    fn name(&self) -> &'static str {
        "no-telling"
    }

    fn imagine(
        &self,
        tape: &mut Tape<R>,
        model: &StoryModel<R>,
        f_blind: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        Full.imagine(tape, model, f_blind)
    }

    fn tell(
        &self,
        _tape: &mut Tape<R>,
        _model: &StoryModel<R>,
        f_reminded: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        Ok(f_reminded.clone())
    }
}
