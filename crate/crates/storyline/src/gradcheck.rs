//! Central-difference gradient checking. Always 64-bit: a correct backward
//! pass shows relative errors around 1e-7 at `eps = 1e-5`, far below the
//! acceptance threshold of 1e-4, while an incorrect one lands orders of
//! magnitude above it.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Perturbation step for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Maximum acceptable relative error between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-5)`, the symmetric relative error used for
/// every gradient comparison. The floor makes coordinates at or below the
/// differencing noise floor compare absolutely against `1e-5`: central
/// differences at `eps = 1e-5` carry rounding noise near `1e-11` on a
/// unit-scale loss, which a floored denominator keeps far under
/// [`TOLERANCE`], while a genuinely wrong backward rule disagrees by the
/// gradient's own magnitude and still overshoots by orders of magnitude.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Check the gradient of a scalar-valued function of several tensors.
///
/// `f` is re-run from scratch on a fresh tape for every evaluation; inputs
/// passed to it are already watched, so `tape.grad` resolves each of them.
/// Returns the maximum relative error over every coordinate of every input.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let watched: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&mut tape, &watched)?;
    if loss.numel() != 1 {
        return Err(Error::Tape(format!(
            "grad_check requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = watched
        .iter()
        .map(|t| {
            tape.grad(t)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Numeric gradients, coordinate by coordinate.
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let loss = f(&mut t, points)?;
        loss.item()
    };
    let mut max_err: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut pd = input.data().to_vec();
            pd[j] += eps;
            plus[i] = Tensor::new(input.shape(), pd)?;
            let mut md = input.data().to_vec();
            md[j] -= eps;
            minus[i] = Tensor::new(input.shape(), md)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::non_finite_detail(
                    "grad_check",
                    format!("numeric gradient at input {i} coordinate {j}"),
                ));
            }
            max_err = max_err.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(max_err)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_multi(
        |tape, inputs| f(tape, &inputs[0]),
        std::slice::from_ref(x),
        eps,
    )
}

/// One named gradient comparison: the worst relative error over `points`
/// compared coordinates, collected across randomized input draws.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub error: f64,
}

impl CheckResult {
    /// Whether the error clears [`TOLERANCE`].
    pub fn passed(&self) -> bool {
        self.error < TOLERANCE
    }
}

/// Run the named check battery: every differentiable operation, every layer
/// and the end-to-end loss of every pipeline variant, each compared against
/// central differences at 50+ randomized points. Deterministic in `seed`.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    suite::run(seed)
}

mod suite {
    use super::*;
    use crate::layers::{BiGru, GruCell, InitKind, LinearMap, NonLocalBlock, OutputHead};
    use crate::model::{
        forward_loss, story_loss, MaskPattern, ModelConfig, StoryExample, StoryModel, EOS,
    };
    use crate::rng::{stream, STREAM_INIT, STREAM_TRAIN};
    use crate::tape::Activation;
    use crate::variant;
    use rand::Rng;
    use rand_chacha::ChaCha20Rng;

    /// Fresh random draws per check for the operation and layer tiers.
    const ROUNDS: usize = 50;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    /// Random values bounded away from zero, for activations whose slope
    /// jumps there; the margin dwarfs the finite-difference step.
    fn rand_tensor_off_zero(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.05..1.5)
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    /// Reduce to a scalar through fixed, distinct per-coordinate weights so
    /// that transposed or permuted backward rules cannot cancel out.
    fn weighted_sum(tape: &mut Tape<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let weights: Vec<f64> = (0..x.numel()).map(|i| 0.25 + 0.13 * i as f64).collect();
        let w = Tensor::new(x.shape(), weights)?;
        let prod = tape.mul(x, &w)?;
        tape.sum(&prod)
    }

    /// Run one named check at `rounds` freshly drawn input points, recording
    /// the worst error and the total number of compared coordinates.
    fn run_check<G, F>(
        out: &mut Vec<CheckResult>,
        name: &str,
        rounds: usize,
        rng: &mut ChaCha20Rng,
        gen: G,
        f: F,
    ) -> Result<()>
    where
        G: Fn(&mut ChaCha20Rng) -> Vec<Tensor<f64>>,
        F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let mut error: f64 = 0.0;
        let mut points = 0usize;
        for _ in 0..rounds {
            let inputs = gen(rng);
            error = error.max(grad_check_multi(&f, &inputs, DEFAULT_EPS)?);
            points += inputs.iter().map(|t| t.numel()).sum::<usize>();
        }
        out.push(CheckResult {
            name: name.to_string(),
            points,
            error,
        });
        Ok(())
    }

    fn op_checks(out: &mut Vec<CheckResult>, rng: &mut ChaCha20Rng) -> Result<()> {
        run_check(
            out,
            "op.add",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])],
            |t, x| {
                let y = t.add(&x[0], &x[1])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.add_bias",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])],
            |t, x| {
                let y = t.add_bias(&x[0], &x[1])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.mul",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[2, 5]), rand_tensor(r, &[2, 5])],
            |t, x| {
                let y = t.mul(&x[0], &x[1])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.scale",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[7])],
            |t, x| {
                let y = t.scale(&x[0], -1.7)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.add_scalar",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[6])],
            |t, x| {
                let y = t.add_scalar(&x[0], 0.9)?;
                let y = t.mul(&y, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.matmul",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])],
            |t, x| {
                let y = t.matmul(&x[0], &x[1])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.matmul_nt",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 4])],
            |t, x| {
                let y = t.matmul_nt(&x[0], &x[1])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.reshape",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[2, 6])],
            |t, x| {
                let y = t.reshape(&x[0], &[3, 4])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.row",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[4, 5])],
            |t, x| {
                let y = t.row(&x[0], 2)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.stack_rows",
            ROUNDS,
            rng,
            |r| {
                vec![
                    rand_tensor(r, &[5]),
                    rand_tensor(r, &[5]),
                    rand_tensor(r, &[5]),
                ]
            },
            |t, x| {
                let y = t.stack_rows(&[&x[0], &x[1], &x[2]])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.concat_rows",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[1, 3])],
            |t, x| {
                let y = t.concat(&[&x[0], &x[1]], 0)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.concat_cols",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 2])],
            |t, x| {
                let y = t.concat(&[&x[0], &x[1]], 1)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.sigmoid",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 3])],
            |t, x| {
                let y = t.activation(Activation::Sigmoid, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.tanh",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[9])],
            |t, x| {
                let y = t.activation(Activation::Tanh, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.selu",
            ROUNDS,
            rng,
            |r| vec![rand_tensor_off_zero(r, &[8])],
            |t, x| {
                let y = t.activation(Activation::Selu, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.relu",
            ROUNDS,
            rng,
            |r| vec![rand_tensor_off_zero(r, &[8])],
            |t, x| {
                let y = t.activation(Activation::Relu, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.softmax_rows",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 5])],
            |t, x| {
                let y = t.softmax(&x[0], 1)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.softmax_cols",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[4, 3])],
            |t, x| {
                let y = t.softmax(&x[0], 0)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.cross_entropy",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[4, 6])],
            |t, x| t.cross_entropy(&x[0], &[1, 5, 0, 3], &[true, true, true, true]),
        )?;
        run_check(
            out,
            "op.cross_entropy_masked",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[4, 6])],
            |t, x| t.cross_entropy(&x[0], &[1, 5, 0, 3], &[true, false, true, false]),
        )?;
        run_check(
            out,
            "op.sum",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[5])],
            |t, x| t.sum(&x[0]),
        )?;
        run_check(
            out,
            "op.affine_tanh",
            ROUNDS,
            rng,
            |r| {
                vec![
                    rand_tensor(r, &[2, 3]),
                    rand_tensor(r, &[3, 4]),
                    rand_tensor(r, &[4]),
                ]
            },
            |t, x| {
                let y = t.matmul(&x[0], &x[1])?;
                let y = t.add_bias(&y, &x[2])?;
                let y = t.activation(Activation::Tanh, &y)?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "op.softmax_matmul",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])],
            |t, x| {
                let scores = t.matmul_nt(&x[0], &x[1])?;
                let attn = t.softmax(&scores, 1)?;
                let y = t.matmul(&attn, &x[1])?;
                weighted_sum(t, &y)
            },
        )?;
        Ok(())
    }

    fn layer_checks(out: &mut Vec<CheckResult>, rng: &mut ChaCha20Rng) -> Result<()> {
        // Parameters and their gradients are covered by the model tier; this
        // tier differences layer inputs across many random points.
        let linear = LinearMap::<f64>::init(rng, 3, 4, InitKind::XavierUniform, true);
        run_check(
            out,
            "layer.linear_vec",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[4])],
            |t, x| {
                let y = linear.apply(t, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "layer.linear_rows",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4])],
            |t, x| {
                let y = linear.apply(t, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;

        let gru = GruCell::<f64>::init(rng, 3, 4);
        run_check(
            out,
            "layer.gru_step",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3]), rand_tensor(r, &[4])],
            |t, x| {
                let h = gru.step(t, &x[0], &x[1])?;
                weighted_sum(t, &h)
            },
        )?;
        run_check(
            out,
            "layer.gru_chain",
            ROUNDS,
            rng,
            |r| {
                vec![
                    rand_tensor(r, &[3]),
                    rand_tensor(r, &[4]),
                    rand_tensor(r, &[4]),
                    rand_tensor(r, &[4]),
                ]
            },
            |t, x| {
                let mut h = x[0].clone();
                for step in &x[1..] {
                    h = gru.step(t, &h, step)?;
                }
                weighted_sum(t, &h)
            },
        )?;

        let bigru = BiGru::<f64>::init(rng, 2, 4);
        run_check(
            out,
            "layer.bigru",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4])],
            |t, x| {
                let y = bigru.forward(t, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;

        let block = NonLocalBlock::<f64>::init(rng, 4, 2);
        run_check(
            out,
            "layer.nonlocal_attention",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4])],
            |t, x| {
                let y = block.attention(t, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        run_check(
            out,
            "layer.nonlocal_residual",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[3, 4])],
            |t, x| {
                let y = block.forward(t, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;

        let head = OutputHead::<f64>::init(rng, 5, 4, 6);
        run_check(
            out,
            "layer.output_head",
            ROUNDS,
            rng,
            |r| vec![rand_tensor(r, &[5])],
            |t, x| {
                let y = head.logits(t, &x[0])?;
                weighted_sum(t, &y)
            },
        )?;
        Ok(())
    }

    /// Micro configuration small enough to difference every parameter.
    fn micro_model(rng: &mut ChaCha20Rng) -> Result<StoryModel<f64>> {
        let mut cfg = ModelConfig::for_features(4, 6);
        cfg.slots = 3;
        cfg.max_len = 4;
        cfg.inner_dim = 1;
        cfg.decoder_hidden = 4;
        cfg.alpha = 1;
        cfg.beta = 2;
        let mut model = StoryModel::init(cfg, rng)?;
        // Nudge every parameter off its initialization point; in particular
        // the residual projections start at zero, which would silence the
        // attention path entirely and leave its backward rules untested.
        for (_, t) in model.named_params_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        Ok(model)
    }

    fn micro_story(rng: &mut ChaCha20Rng) -> StoryExample<f64> {
        StoryExample {
            features: rand_tensor(rng, &[3, 4]),
            sentences: vec![vec![4, EOS], vec![5, 4, EOS], vec![3, EOS]],
        }
    }

    /// Clone of `base` with every parameter replaced by the corresponding
    /// watched tensor, so gradients resolve through the whole pipeline.
    fn with_params(base: &StoryModel<f64>, params: &[Tensor<f64>]) -> StoryModel<f64> {
        let mut model = base.clone();
        for ((_, slot), watched) in model.named_params_mut().into_iter().zip(params) {
            *slot = watched.clone();
        }
        model
    }

    fn model_checks(out: &mut Vec<CheckResult>, rng: &mut ChaCha20Rng) -> Result<()> {
        let base = micro_model(rng)?;
        let story = micro_story(rng);

        run_check(
            out,
            "model.decode_step",
            8,
            rng,
            |r| vec![rand_tensor(r, &[4]), rand_tensor(r, &[4])],
            |t, x| {
                let prev = Tensor::one_hot(6, 4)?;
                let (h, logits) = base.decode_step(t, &x[0], &x[1], &prev)?;
                let h_part = weighted_sum(t, &h)?;
                let l_part = weighted_sum(t, &logits)?;
                t.add(&h_part, &l_part)
            },
        )?;

        let full = variant::lookup::<f64>("full")?;
        run_check(
            out,
            "model.story_features",
            5,
            rng,
            |r| vec![rand_tensor(r, &[3, 4])],
            |t, x| {
                let example = StoryExample {
                    features: x[0].clone(),
                    sentences: story.sentences.clone(),
                };
                let mut r = stream(11, STREAM_TRAIN);
                story_loss(t, &base, full.as_ref(), &example, None, &mut r, 0.0)
            },
        )?;

        let params: Vec<Tensor<f64>> = base
            .named_params()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();

        let masked = MaskPattern::from_hidden(3, &[1])?;
        run_check(
            out,
            "model.story_params/full",
            1,
            rng,
            |_| params.clone(),
            |t, watched| {
                let model = with_params(&base, watched);
                let mut r = stream(12, STREAM_TRAIN);
                story_loss(t, &model, full.as_ref(), &story, Some(&masked), &mut r, 0.0)
            },
        )?;

        let batch = vec![micro_story(rng), micro_story(rng)];
        for name in ["no-blinding", "no-nonlocal", "no-telling"] {
            let v = variant::lookup::<f64>(name)?;
            run_check(
                out,
                &format!("model.batch_params/{name}"),
                1,
                rng,
                |_| params.clone(),
                |t, watched| {
                    let model = with_params(&base, watched);
                    let mut r = stream(13, STREAM_TRAIN);
                    forward_loss(t, &model, v.as_ref(), &batch, 0, &mut r, 0.0)
                },
            )?;
        }

        let batch = vec![micro_story(rng), micro_story(rng)];
        run_check(
            out,
            "model.batch_params/curriculum",
            1,
            rng,
            |_| params.clone(),
            |t, watched| {
                let model = with_params(&base, watched);
                // A fresh stream per evaluation keeps the sampled masks
                // identical across the differencing runs.
                let mut r = stream(14, STREAM_TRAIN);
                forward_loss(t, &model, full.as_ref(), &batch, 5, &mut r, 0.0)
            },
        )?;
        Ok(())
    }

    pub(super) fn run(seed: u64) -> Result<Vec<CheckResult>> {
        let mut rng = stream(seed, STREAM_INIT);
        let mut out = Vec::new();
        op_checks(&mut out, &mut rng)?;
        layer_checks(&mut out, &mut rng)?;
        model_checks(&mut out, &mut rng)?;
        Ok(out)
    }
}
