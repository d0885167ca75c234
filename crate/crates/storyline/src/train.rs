//! Training: Adam with bias correction, the learning-rate schedule that
//! halves at each curriculum transition, and the deterministic epoch loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{curriculum_level, forward_loss, StoryExample, StoryModel};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn default_base_lr() -> f64 {
    4e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_checkpoint_every() -> usize {
    25
}

/// Training hyperparameters. Curriculum transition epochs live on
/// [`crate::model::ModelConfig`]; the schedule reads them from there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = final epoch only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Optional global-norm gradient clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Probability of feeding the model's own previous prediction instead of
    /// the reference word during training (0 = pure teacher forcing).
    #[serde(default)]
    pub scheduled_sampling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: default_base_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
            grad_clip: None,
            scheduled_sampling: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling) {
            return Err(Error::Config(
                "scheduled_sampling must lie in [0, 1]".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: the base rate, halved once per curriculum
/// transition already passed (`alpha`, then `beta`).
pub fn lr_schedule(epoch: usize, base_lr: f64, alpha: usize, beta: usize) -> f64 {
    match curriculum_level(epoch, alpha, beta) {
        0 => base_lr,
        1 => base_lr / 2.0,
        _ => base_lr / 4.0,
    }
}

/// First and second moment estimates, parallel to the model's named
/// parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<R: Scalar> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Scalar> AdamState<R> {
    pub fn new(model: &StoryModel<R>) -> Self {
        let zeros: Vec<Tensor<R>> = model
            .named_params()
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update. `grads` is parallel to `model.named_params()`; a `None`
/// entry means the parameter was off the loss path this step and contributes
/// a zero gradient. Errors on any non-finite gradient or updated value,
/// leaving no partial update behind.
pub fn adam_step<R: Scalar>(
    model: &mut StoryModel<R>,
    state: &mut AdamState<R>,
    grads: &[Option<Tensor<R>>],
    lr: f64,
) -> Result<()> {
    let mut params = model.named_params_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::non_finite_detail(
                    "adam_step",
                    format!("gradient of {name}"),
                ));
            }
        }
    }

    state.step += 1;
    let t = state.step;
    let beta1 = R::from_f64(ADAM_BETA1);
    let beta2 = R::from_f64(ADAM_BETA2);
    let eps = R::from_f64(ADAM_EPS);
    let lr_r = R::from_f64(lr);
    let one = R::one();
    let corr1 = one - beta1.powi(t as i32);
    let corr2 = one - beta2.powi(t as i32);

    for (i, (name, p)) in params.iter_mut().enumerate() {
        let zero_grad: &[R] = &[];
        let g: &[R] = g_slice(grads, i, zero_grad);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = if g.is_empty() { R::zero() } else { g[j] };
            m[j] = beta1 * m[j] + (one - beta1) * gj;
            v[j] = beta2 * v[j] + (one - beta2) * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            pd[j] = pd[j] - lr_r * m_hat / (v_hat.sqrt() + eps);
        }
        if !pd.iter().all(|x| x.is_finite()) {
            return Err(Error::non_finite_detail(
                "adam_step",
                format!("updated value of {name}"),
            ));
        }
    }
    Ok(())
}

fn g_slice<'a, R: Scalar>(grads: &'a [Option<Tensor<R>>], i: usize, empty: &'a [R]) -> &'a [R] {
    grads[i].as_ref().map(|t| t.data()).unwrap_or(empty)
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
fn clip_gradients<R: Scalar>(grads: &mut [Option<Tensor<R>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        sq += g
            .data()
            .iter()
            .map(|&v| v.to_f64() * v.to_f64())
            .sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let factor = R::from_f64(max_norm / norm);
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v = *v * factor;
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub b_total: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Train from scratch: fresh optimizer state and a training stream seeded by
/// `cfg.seed`.
pub fn train<R: Scalar>(
    model: &mut StoryModel<R>,
    corpus: &[StoryExample<R>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let adam = AdamState::new(model);
    let rng = crate::rng::stream(cfg.seed, crate::rng::STREAM_TRAIN);
    train_from(model, adam, rng, 0, Vec::new(), corpus, cfg, out_dir)
}

/// Continue training from restored optimizer and generator state. Epochs
/// `start_epoch..cfg.epochs` are run; a resumed run reproduces the straight
/// run bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn train_from<R: Scalar>(
    model: &mut StoryModel<R>,
    mut adam: AdamState<R>,
    mut rng: ChaCha20Rng,
    start_epoch: usize,
    mut history: Vec<EpochRecord>,
    corpus: &[StoryExample<R>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Degenerate("training corpus is empty".into()));
    }
    let variant = model.variant()?;
    let mut checkpoint_path = None;
    let mut last_good: Option<usize> = (start_epoch > 0).then(|| start_epoch.saturating_sub(1));

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, model.config.alpha, model.config.beta);
        let b_total = if variant.masks_input() {
            curriculum_level(epoch, model.config.alpha, model.config.beta)
        } else {
            0
        };

        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<StoryExample<R>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut tape = Tape::new();
            let watched = model.watch(&mut tape);
            let loss = forward_loss(
                &mut tape,
                &watched,
                variant.as_ref(),
                &batch,
                epoch,
                &mut rng,
                cfg.scheduled_sampling,
            )
            .map_err(|e| diverged(e, epoch, last_good))?;
            tape.backward(&loss)?;
            let mut grads: Vec<Option<Tensor<R>>> = watched
                .named_params()
                .iter()
                .map(|(_, p)| tape.grad(p))
                .collect();
            let loss_value = loss.item()?.to_f64();
            drop(tape);
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            adam_step(model, &mut adam, &grads, lr).map_err(|e| diverged(e, epoch, last_good))?;
            loss_sum += loss_value * batch.len() as f64;
        }
        let epoch_loss = loss_sum / corpus.len() as f64;
        history.push(EpochRecord {
            epoch,
            b_total,
            lr,
            loss: epoch_loss,
        });
        log::info!("epoch {epoch}: masked {b_total}, lr {lr:.2e}, loss {epoch_loss:.6}");

        let last = epoch + 1 == cfg.epochs;
        let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
        if let Some(dir) = out_dir {
            if last || due {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("checkpoint.inck");
                crate::checkpoint::save(&path, model, cfg, epoch + 1, &adam, &rng, &history)?;
                write_loss_log(&dir.join("loss.txt"), &history)?;
                checkpoint_path = Some(path);
                last_good = Some(epoch);
            }
        }
    }
    Ok(TrainReport {
        history,
        checkpoint: checkpoint_path,
    })
}

fn diverged(e: Error, epoch: usize, last_good: Option<usize>) -> Error {
    match e {
        Error::NonFinite { op, detail } => {
            let at = match last_good {
                Some(g) => format!("last good checkpoint covers epoch {g}"),
                None => "no checkpoint written yet".to_string(),
            };
            Error::NonFinite {
                op,
                detail: Some(match detail {
                    Some(d) => format!("{d}; training diverged at epoch {epoch}, {at}"),
                    None => format!("training diverged at epoch {epoch}, {at}"),
                }),
            }
        }
        other => other,
    }
}

/// Write the per-epoch loss log: tab-separated epoch, masked-slot count,
/// learning rate and mean loss.
pub fn write_loss_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = String::from("epoch\tb_total\tlr\tloss\n");
    for rec in history {
        out.push_str(&format!(
            "{}\t{}\t{:e}\t{:.17e}\n",
            rec.epoch, rec.b_total, rec.lr, rec.loss
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
