//! `storyline` — train and drive the masked-slot storytelling model.
//!
//! Subcommands: `synth` (write a synthetic benchmark), `train`, `generate`
//! (per-slot sentences, optionally with hidden slots), `interpolate`
//! (decode between slots), `evaluate` (corpus metrics) and `gradcheck`
//! (self-verify the backward pass). Results go to stdout, logs to stderr;
//! every failure is a single `error: ...` line and a nonzero exit code.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use storyline::checkpoint::{self, Checkpoint};
use storyline::data::corpus::{load_corpus, Corpus};
use storyline::data::features::read_features;
use storyline::data::synth::{self, SynthConfig, SyntheticMeta};
use storyline::data::vocab::Vocabulary;
use storyline::decode::{generate_story, interpolate_story, DecodeResult, DEFAULT_BEAM_WIDTH};
use storyline::metrics::{evaluate, evaluate_synthetic, EvalOptions, HidePolicy};
use storyline::model::{MaskPattern, ModelConfig, StoryModel};
use storyline::rng::{stream, STREAM_INIT};
use storyline::train::{train, train_from, TrainConfig, TrainReport};
use storyline::{Error, Precision, Result, Scalar};

use config::Settings;

#[derive(Parser)]
#[command(
    name = "storyline",
    version,
    about = "Curriculum-trained visual storytelling on photo-slot features",
    propagate_version = true
)]
struct Cli {
    /// Configuration file of `key = value` lines; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the fully resolved configuration and exit without running.
    #[arg(long, global = true)]
    print_config: bool,

    /// Master random seed; all randomness derives from it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Numeric precision, `f32` or `f64`. Commands reading a checkpoint
    /// take its precision; a value given here must then agree.
    #[arg(long, global = true, value_name = "P")]
    precision: Option<String>,

    /// Output location: a directory for `synth`/`train`, an optional
    /// transcript/report file for the decoding and evaluation commands.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic topic-chain benchmark (corpus, vocabulary, meta).
    Synth {
        /// Number of topics in the rotation (2..=8).
        #[arg(long, value_name = "K")]
        topics: Option<usize>,
        /// Photo slots per story.
        #[arg(long, value_name = "N")]
        slots: Option<usize>,
        /// Feature dimensionality.
        #[arg(long, value_name = "D")]
        feature_dim: Option<usize>,
        /// Feature noise level.
        #[arg(long, value_name = "S")]
        sigma: Option<f64>,
        /// Training stories.
        #[arg(long, value_name = "N")]
        stories: Option<usize>,
        /// Held-out stories.
        #[arg(long, value_name = "N")]
        eval_stories: Option<usize>,
    },
    /// Train a model on a story corpus.
    Train {
        /// Training corpus (JSON lines).
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Vocabulary file, one token per line.
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Pipeline variant: full, no-blinding, no-nonlocal or no-telling.
        #[arg(long, value_name = "NAME")]
        ablation: Option<String>,
        /// Context recurrent state size per direction (default: half the
        /// feature dimension, so both directions together match it).
        #[arg(long, value_name = "H")]
        hidden_dim: Option<usize>,
        /// Attention bottleneck width.
        #[arg(long, value_name = "C")]
        inner_dim: Option<usize>,
        /// Sentence decoder state size.
        #[arg(long, value_name = "H")]
        decoder_hidden: Option<usize>,
        /// Longest decoded sentence, in tokens.
        #[arg(long, value_name = "T")]
        max_len: Option<usize>,
        /// First curriculum transition epoch.
        #[arg(long, value_name = "EPOCH")]
        alpha: Option<usize>,
        /// Second curriculum transition epoch.
        #[arg(long, value_name = "EPOCH")]
        beta: Option<usize>,
        /// Base learning rate.
        #[arg(long, value_name = "LR")]
        lr: Option<f64>,
        /// Stories per optimizer step.
        #[arg(long, value_name = "N")]
        batch_size: Option<usize>,
        /// Training epochs.
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Write a checkpoint every N epochs (0: only at the end).
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<usize>,
        /// Clip gradients to this global norm.
        #[arg(long, value_name = "NORM")]
        grad_clip: Option<f64>,
        /// Probability of feeding back the model's own word during training.
        #[arg(long, value_name = "P")]
        scheduled_sampling: Option<f64>,
    },
    /// Decode one sentence per slot from a feature file.
    Generate {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Slot features (binary feature file).
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Hide these slots (1-indexed; repeatable) before decoding.
        #[arg(long, value_name = "SLOT")]
        hide: Vec<usize>,
        /// Beam width (1 = greedy).
        #[arg(long, value_name = "W")]
        beam: Option<usize>,
    },
    /// Decode a story with imagined slots inserted between the given ones.
    Interpolate {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        #[arg(long, value_name = "W")]
        beam: Option<usize>,
    },
    /// Score a model against a reference corpus.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Benchmark metadata; enables the topic-level scores.
        #[arg(long, value_name = "FILE")]
        meta: Option<PathBuf>,
        /// Which slots to hide: `rotate` (one per story) or `none`.
        #[arg(long, value_name = "POLICY")]
        hide_policy: Option<String>,
        #[arg(long, value_name = "W")]
        beam: Option<usize>,
        /// Smooth BLEU n-gram precisions (add-one); for tiny corpora.
        #[arg(long)]
        smooth_bleu: bool,
        /// Emit one JSON object instead of key: value lines.
        #[arg(long)]
        json: bool,
    },
    /// Run the finite-difference gradient checks and report each one.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            topics,
            slots,
            feature_dim,
            sigma,
            stories,
            eval_stories,
        } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                k_topics: settings.get("topics", topics, defaults.k_topics)?,
                feature_dim: settings.get("feature_dim", feature_dim, defaults.feature_dim)?,
                slots: settings.get("slots", slots, defaults.slots)?,
                sigma: settings.get("sigma", sigma, defaults.sigma)?,
                n_train: settings.get("stories", stories, defaults.n_train)?,
                n_eval: settings.get("eval_stories", eval_stories, defaults.n_eval)?,
                seed: settings.get("seed", cli.seed, defaults.seed)?,
            };
            let out = settings.get_path_or("out", cli.out, "data")?;
            if cli.print_config {
                settings.print_resolved();
                return Ok(());
            }
            cmd_synth(&cfg, &out)
        }
        Command::Train {
            corpus,
            vocab,
            resume,
            ablation,
            hidden_dim,
            inner_dim,
            decoder_hidden,
            max_len,
            alpha,
            beta,
            lr,
            batch_size,
            epochs,
            checkpoint_every,
            grad_clip,
            scheduled_sampling,
        } => {
            let corpus_path = settings.require_path("corpus", corpus)?;
            let vocab_path = settings.require_path("vocab", vocab)?;
            let resume_path = settings.get_path("resume", resume)?;
            let out = settings.get_path_or("out", cli.out, "run")?;
            let precision = settings.get("precision", cli.precision, "f64".to_string())?;
            let precision = parse_precision(&precision)?;
            let shape = ShapeOverrides {
                ablation: settings.get_opt("ablation", ablation)?,
                hidden_dim: settings.get_opt("hidden_dim", hidden_dim)?,
                inner_dim: settings.get_opt("inner_dim", inner_dim)?,
                decoder_hidden: settings.get_opt("decoder_hidden", decoder_hidden)?,
                max_len: settings.get_opt("max_len", max_len)?,
                alpha: settings.get_opt("alpha", alpha)?,
                beta: settings.get_opt("beta", beta)?,
            };
            let trainer = TrainerOverrides {
                seed: settings.get_opt("seed", cli.seed)?,
                lr: settings.get_opt("lr", lr)?,
                batch_size: settings.get_opt("batch_size", batch_size)?,
                epochs: settings.get_opt("epochs", epochs)?,
                checkpoint_every: settings.get_opt("checkpoint_every", checkpoint_every)?,
                grad_clip: settings.get_opt("grad_clip", grad_clip)?,
                scheduled_sampling: settings.get_opt("scheduled_sampling", scheduled_sampling)?,
            };
            if cli.print_config {
                settings.print_resolved();
                return Ok(());
            }
            match precision {
                Precision::F32 => cmd_train::<f32>(
                    &corpus_path,
                    &vocab_path,
                    resume_path.as_deref(),
                    &shape,
                    &trainer,
                    &out,
                ),
                Precision::F64 => cmd_train::<f64>(
                    &corpus_path,
                    &vocab_path,
                    resume_path.as_deref(),
                    &shape,
                    &trainer,
                    &out,
                ),
            }
        }
        Command::Generate {
            checkpoint,
            features,
            vocab,
            hide,
            beam,
        } => {
            let paths = DecodePaths::resolve(&mut settings, checkpoint, features, vocab)?;
            let beam = settings.get("beam", beam, DEFAULT_BEAM_WIDTH)?;
            let precision = resolved_precision(&mut settings, cli.precision, &paths.checkpoint)?;
            if cli.print_config {
                settings.print_resolved();
                return Ok(());
            }
            match precision {
                Precision::F32 => cmd_generate::<f32>(&paths, &hide, beam, cli.out.as_deref()),
                Precision::F64 => cmd_generate::<f64>(&paths, &hide, beam, cli.out.as_deref()),
            }
        }
        Command::Interpolate {
            checkpoint,
            features,
            vocab,
            beam,
        } => {
            let paths = DecodePaths::resolve(&mut settings, checkpoint, features, vocab)?;
            let beam = settings.get("beam", beam, DEFAULT_BEAM_WIDTH)?;
            let precision = resolved_precision(&mut settings, cli.precision, &paths.checkpoint)?;
            if cli.print_config {
                settings.print_resolved();
                return Ok(());
            }
            match precision {
                Precision::F32 => cmd_interpolate::<f32>(&paths, beam, cli.out.as_deref()),
                Precision::F64 => cmd_interpolate::<f64>(&paths, beam, cli.out.as_deref()),
            }
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            vocab,
            meta,
            hide_policy,
            beam,
            smooth_bleu,
            json,
        } => {
            let checkpoint_path = settings.require_path("checkpoint", checkpoint)?;
            let corpus_path = settings.require_path("corpus", corpus)?;
            let vocab_path = settings.require_path("vocab", vocab)?;
            let meta_path = settings.get_path("meta", meta)?;
            let beam = settings.get("beam", beam, DEFAULT_BEAM_WIDTH)?;
            let smooth_bleu = settings.get("smooth_bleu", smooth_bleu.then_some(true), false)?;
            let policy = settings.get("hide_policy", hide_policy, "rotate".to_string())?;
            let policy = match policy.as_str() {
                "none" => HidePolicy::None,
                "rotate" => HidePolicy::Rotate,
                other => {
                    return Err(Error::Config(format!(
                        "unknown hide_policy {other:?}, expected rotate or none"
                    )))
                }
            };
            let precision = resolved_precision(&mut settings, cli.precision, &checkpoint_path)?;
            if cli.print_config {
                settings.print_resolved();
                return Ok(());
            }
            let args = EvaluateArgs {
                checkpoint: checkpoint_path,
                corpus: corpus_path,
                vocab: vocab_path,
                meta: meta_path,
                policy,
                beam,
                smooth_bleu,
                json,
                out: cli.out,
            };
            match precision {
                Precision::F32 => cmd_evaluate::<f32>(&args),
                Precision::F64 => cmd_evaluate::<f64>(&args),
            }
        }
        Command::Gradcheck => {
            let seed = settings.get("seed", cli.seed, 0)?;
            if cli.print_config {
                settings.print_resolved();
                return Ok(());
            }
            cmd_gradcheck(seed)
        }
    }
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!(
            "unknown precision {other:?}, expected f32 or f64"
        ))),
    }
}

/// Dispatch precision from the checkpoint header; an explicitly configured
/// precision must agree with it.
fn resolved_precision(
    settings: &mut Settings,
    flag: Option<String>,
    checkpoint: &Path,
) -> Result<Precision> {
    let requested = settings
        .get_opt("precision", flag)?
        .map(|s| parse_precision(&s))
        .transpose()?;
    let actual = checkpoint::peek_meta(checkpoint)?.precision;
    if let Some(requested) = requested {
        if requested != actual {
            return Err(Error::Config(format!(
                "requested precision {} but {} stores {}",
                requested.as_str(),
                checkpoint.display(),
                actual.as_str()
            )));
        }
    }
    Ok(actual)
}

fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let data = synth::generate::<f64>(cfg)?;
    synth::write_dataset(out, &data)?;
    println!("out: {}", out.display());
    println!("train_stories: {}", data.train.len());
    println!("eval_stories: {}", data.eval.len());
    println!("vocab_size: {}", data.vocab.size());
    println!(
        "wrote: {} {} {} {} {}",
        synth::TRAIN_FILE,
        synth::EVAL_FILE,
        synth::VOCAB_FILE,
        synth::META_FILE,
        synth::SAMPLE_FILE
    );
    Ok(())
}

/// Model-shape settings; only valid when initializing a fresh model.
struct ShapeOverrides {
    ablation: Option<String>,
    hidden_dim: Option<usize>,
    inner_dim: Option<usize>,
    decoder_hidden: Option<usize>,
    max_len: Option<usize>,
    alpha: Option<usize>,
    beta: Option<usize>,
}

impl ShapeOverrides {
    fn any(&self) -> bool {
        self.ablation.is_some()
            || self.hidden_dim.is_some()
            || self.inner_dim.is_some()
            || self.decoder_hidden.is_some()
            || self.max_len.is_some()
            || self.alpha.is_some()
            || self.beta.is_some()
    }

    fn apply(&self, cfg: &mut ModelConfig) {
        if let Some(v) = &self.ablation {
            cfg.ablation = v.clone();
        }
        if let Some(v) = self.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.inner_dim {
            cfg.inner_dim = v;
        }
        if let Some(v) = self.decoder_hidden {
            cfg.decoder_hidden = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
    }
}

struct TrainerOverrides {
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    checkpoint_every: Option<usize>,
    grad_clip: Option<f64>,
    scheduled_sampling: Option<f64>,
}

impl TrainerOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        if let Some(v) = self.scheduled_sampling {
            cfg.scheduled_sampling = v;
        }
    }
}

fn cmd_train<R: Scalar>(
    corpus_path: &Path,
    vocab_path: &Path,
    resume: Option<&Path>,
    shape: &ShapeOverrides,
    trainer: &TrainerOverrides,
    out: &Path,
) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path)?;
    let corpus: Corpus<R> = load_corpus(corpus_path, &vocab)?;
    if corpus.is_empty() {
        return Err(Error::Degenerate(format!(
            "training corpus {} holds no stories",
            corpus_path.display()
        )));
    }

    let report: TrainReport;
    let mut model: StoryModel<R>;
    match resume {
        Some(path) => {
            if shape.any() {
                return Err(Error::Config(
                    "model-shape settings cannot be combined with resume; \
                     the checkpoint fixes the architecture"
                        .into(),
                ));
            }
            let ck: Checkpoint<R> = checkpoint::load(path)?;
            let mut cfg = ck.meta.train.clone();
            trainer.apply(&mut cfg);
            model = ck.model;
            report = train_from(
                &mut model,
                ck.adam,
                ck.rng,
                ck.meta.epoch,
                ck.meta.history,
                &corpus.stories,
                &cfg,
                Some(out),
            )?;
        }
        None => {
            let feature_dim = corpus.stories[0].features.shape()[1];
            let mut mcfg = ModelConfig::for_features(feature_dim, vocab.size());
            mcfg.slots = corpus.stories[0].features.shape()[0];
            shape.apply(&mut mcfg);
            let mut cfg = TrainConfig::default();
            trainer.apply(&mut cfg);
            let mut rng = stream(cfg.seed, STREAM_INIT);
            model = StoryModel::init(mcfg, &mut rng)?;
            report = train(&mut model, &corpus.stories, &cfg, Some(out))?;
        }
    }

    println!("stories: {}", corpus.len());
    println!("parameters: {}", model.num_params());
    println!("epochs: {}", report.history.len());
    if let Some(last) = report.history.last() {
        println!("final_loss: {:.6}", last.loss);
    }
    if let Some(path) = &report.checkpoint {
        println!("checkpoint: {}", path.display());
    }
    println!("loss_log: {}", out.join("loss.txt").display());
    Ok(())
}

/// Checkpoint + features + vocabulary, shared by the decoding commands.
struct DecodePaths {
    checkpoint: PathBuf,
    features: PathBuf,
    vocab: PathBuf,
}

impl DecodePaths {
    fn resolve(
        settings: &mut Settings,
        checkpoint: Option<PathBuf>,
        features: Option<PathBuf>,
        vocab: Option<PathBuf>,
    ) -> Result<Self> {
        Ok(DecodePaths {
            checkpoint: settings.require_path("checkpoint", checkpoint)?,
            features: settings.require_path("features", features)?,
            vocab: settings.require_path("vocab", vocab)?,
        })
    }

    fn load<R: Scalar>(&self) -> Result<(StoryModel<R>, storyline::Tensor<R>, Vocabulary)> {
        let ck: Checkpoint<R> = checkpoint::load(&self.checkpoint)?;
        let vocab = Vocabulary::load(&self.vocab)?;
        if vocab.size() != ck.model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary {} holds {} tokens but the checkpoint was trained with {}",
                self.vocab.display(),
                vocab.size(),
                ck.model.config.vocab_size
            )));
        }
        let features = read_features(&self.features)?;
        Ok((ck.model, features, vocab))
    }
}

/// Print the decoded story and optionally mirror it into a file.
fn emit_story(lines: &[String], out: Option<&Path>) -> Result<()> {
    for line in lines {
        println!("{line}");
    }
    if let Some(path) = out {
        std::fs::write(path, format!("{}\n", lines.join("\n")))?;
    }
    Ok(())
}

fn cmd_generate<R: Scalar>(
    paths: &DecodePaths,
    hide: &[usize],
    beam: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (model, features, vocab) = paths.load::<R>()?;
    let n_slots = features.shape()[0];
    let mut hidden = Vec::new();
    for &slot in hide {
        if slot == 0 || slot > n_slots {
            return Err(Error::Config(format!(
                "cannot hide slot {slot}: the story has slots 1..={n_slots}"
            )));
        }
        hidden.push(slot - 1);
    }
    let mask = if hidden.is_empty() {
        None
    } else {
        Some(MaskPattern::from_hidden(n_slots, &hidden)?)
    };
    let results = generate_story(&model, &features, mask.as_ref(), beam)?;
    let lines = numbered(&results, &vocab, |slot| {
        mask.as_ref()
            .is_some_and(|m| !m.is_visible(slot))
            .then_some(" [hidden]")
    });
    emit_story(&lines, out)
}

fn cmd_interpolate<R: Scalar>(paths: &DecodePaths, beam: usize, out: Option<&Path>) -> Result<()> {
    let (model, features, vocab) = paths.load::<R>()?;
    let results = interpolate_story(&model, &features, beam)?;
    let lines = numbered(&results, &vocab, |slot| {
        (slot % 2 == 1).then_some(" (inserted)")
    });
    emit_story(&lines, out)
}

fn numbered<F>(results: &[DecodeResult], vocab: &Vocabulary, marker: F) -> Vec<String>
where
    F: Fn(usize) -> Option<&'static str>,
{
    results
        .iter()
        .enumerate()
        .map(|(slot, r)| {
            format!(
                "{}{}: {}",
                slot + 1,
                marker(slot).unwrap_or(""),
                vocab.render(&r.tokens)
            )
        })
        .collect()
}

struct EvaluateArgs {
    checkpoint: PathBuf,
    corpus: PathBuf,
    vocab: PathBuf,
    meta: Option<PathBuf>,
    policy: HidePolicy,
    beam: usize,
    smooth_bleu: bool,
    json: bool,
    out: Option<PathBuf>,
}

fn cmd_evaluate<R: Scalar>(args: &EvaluateArgs) -> Result<()> {
    let ck: Checkpoint<R> = checkpoint::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    if vocab.size() != ck.model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary {} holds {} tokens but the checkpoint was trained with {}",
            args.vocab.display(),
            vocab.size(),
            ck.model.config.vocab_size
        )));
    }
    let corpus: Corpus<R> = load_corpus(&args.corpus, &vocab)?;
    let opts = EvalOptions {
        beam_width: args.beam,
        hide: args.policy,
        smooth_bleu: args.smooth_bleu,
    };
    let report = evaluate(&ck.model, &corpus.stories, &opts)?;
    let synthetic = args
        .meta
        .as_deref()
        .map(|path| {
            let meta = SyntheticMeta::load(path)?;
            evaluate_synthetic(&ck.model, &corpus, &vocab, &meta, args.beam)
        })
        .transpose()?;

    let mut text = String::new();
    if args.json {
        let mut value = serde_json::to_value(&report)?;
        value["synthetic"] = match &synthetic {
            Some(s) => serde_json::to_value(s)?,
            None => serde_json::Value::Null,
        };
        let _ = writeln!(text, "{value}");
    } else {
        let _ = writeln!(text, "n_stories: {}", report.n_stories);
        let _ = writeln!(text, "bleu: {:.6}", report.bleu);
        let _ = writeln!(text, "rouge_l: {:.6}", report.rouge_l);
        match report.masked_slot_accuracy {
            Some(v) => {
                let _ = writeln!(text, "masked_slot_accuracy: {v:.6}");
            }
            None => {
                let _ = writeln!(text, "masked_slot_accuracy: none");
            }
        }
        if let Some(s) = &synthetic {
            let _ = writeln!(
                text,
                "synthetic.masked_slot_accuracy: {:.6}",
                s.masked_slot_accuracy
            );
            let _ = writeln!(
                text,
                "synthetic.masked_topic_accuracy: {:.6}",
                s.masked_topic_accuracy
            );
            let _ = writeln!(
                text,
                "synthetic.interpolation_consistency: {:.6}",
                s.interpolation_consistency
            );
        }
    }
    print!("{text}");
    if let Some(path) = &args.out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let results = storyline::gradcheck::suite(seed)?;
    let mut failed = 0usize;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {name} points={points} err={err:.3e}",
            name = r.name,
            points = r.points,
            err = r.error
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!(
        "summary: {} checks, {} passed, {} failed, tolerance {:.1e}",
        results.len(),
        results.len() - failed,
        failed,
        storyline::gradcheck::TOLERANCE
    );
    if failed > 0 {
        return Err(Error::Degenerate(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        )));
    }
    Ok(())
}
