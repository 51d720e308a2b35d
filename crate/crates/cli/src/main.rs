use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vitr_core::fusion::{FuseVariant, SummaryState};
use vitr_core::loss::TrainConfig;
use vitr_core::model::{Mode, ModelConfig};
use vitr_core::pipeline::{self, CHECKPOINT_FILE, CORPUS_FILE};
use vitr_core::retrieval::Direction;
use vitr_core::synth::SynthConfig;
use vitr_core::Error;

/// Relation-aware image-text retrieval: synthetic corpora, training,
/// two-stage retrieval, evaluation, ablations and attention heat maps.
#[derive(Parser, Debug)]
#[command(name = "vitr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Feature file (default: <out>/corpus.vitr).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Checkpoint file (default: <out>/model.ckpt).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seeds corpus generation, weight initialization and batch shuffling.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// First epoch (1-based) trained at the decayed learning rate.
    #[arg(long, global = true)]
    decay_epoch: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    d3: Option<usize>,
    #[arg(long, global = true)]
    d4: Option<usize>,
    /// Rank of the description term matrix reduction.
    #[arg(long, global = true)]
    d5: Option<usize>,
    /// Inverse temperature of the region-word attention.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Reasoning passes.
    #[arg(long, global = true)]
    g1: Option<usize>,
    /// Fusion passes.
    #[arg(long, global = true)]
    g2: Option<usize>,
    #[arg(long, global = true, value_enum)]
    variant: Option<Variant>,
    #[arg(long, global = true, value_enum)]
    summary: Option<Summary>,
    /// Separate weights for every reasoning and fusion pass.
    #[arg(long, global = true)]
    unshared: bool,
    #[arg(long, global = true, value_enum, default_value = "full")]
    mode: ModeArg,

    /// Turbo shortlist size; repeat for several.
    #[arg(long = "turbo-n", global = true)]
    turbo_n: Vec<usize>,
    /// Both directions when omitted.
    #[arg(long, global = true, value_enum)]
    direction: Option<DirectionArg>,
    /// Evaluate only the first queries.
    #[arg(long, global = true)]
    max_queries: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted synthetic feature file.
    Synth {
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 2)]
        descriptions_per_image: usize,
        #[arg(long, default_value_t = 32)]
        d1: usize,
        #[arg(long, default_value_t = 64)]
        d2: usize,
        /// Regions per image.
        #[arg(long, default_value_t = 9)]
        k: usize,
        /// Words per description.
        #[arg(long, default_value_t = 5)]
        words: usize,
        /// Also write a held-out corpus of this many images.
        #[arg(long, default_value_t = 0)]
        test_images: usize,
    },
    /// Train a model; writes the checkpoint and loss history.
    Train,
    /// Rank every query; writes one results file per direction and setting.
    Retrieve,
    /// Recall and timing tables.
    Eval,
    /// Train and evaluate full, no_vit and no_rel with one configuration.
    Ablate {
        /// Evaluate on this feature file instead of the training corpus.
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
    },
    /// Region heat map for one image-description pair.
    Heatmap {
        #[arg(long)]
        image: Option<u64>,
        #[arg(long)]
        description: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    Literal,
    MessagePassing,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Summary {
    First,
    Last,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "no_vit")]
    NoVit,
    #[value(name = "no_rel")]
    NoRel,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    I2t,
    T2i,
}

impl Cli {
    fn corpus(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.out.join(CORPUS_FILE))
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }

    fn direction(&self) -> Option<Direction> {
        self.direction.map(|d| match d {
            DirectionArg::I2t => Direction::ImageToText,
            DirectionArg::T2i => Direction::TextToImage,
        })
    }

    fn model_config(&self) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            d3: self.d3.unwrap_or(d.d3),
            d4: self.d4.unwrap_or(d.d4),
            gamma: self.gamma.unwrap_or(d.gamma),
            g1: self.g1.unwrap_or(d.g1),
            g2: self.g2.unwrap_or(d.g2),
            shared_weights: !self.unshared,
            fuse_variant: match self.variant {
                Some(Variant::MessagePassing) => FuseVariant::MessagePassing,
                Some(Variant::Literal) | None => FuseVariant::Literal,
            },
            summary: match self.summary {
                Some(Summary::Last) => SummaryState::Last,
                Some(Summary::First) | None => SummaryState::First,
            },
            mode: match self.mode {
                ModeArg::Full => Mode::Full,
                ModeArg::NoVit => Mode::NoVit,
                ModeArg::NoRel => Mode::NoRel,
            },
            seed: self.seed,
            ..d
        }
    }

    fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            lambda: self.lambda.unwrap_or(d.lambda),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            decay_epoch: self.decay_epoch.unwrap_or(d.decay_epoch),
            d5: self.d5.unwrap_or(d.d5),
            seed: self.seed,
            ..d
        }
    }
}

fn run(cli: &Cli) -> vitr_core::Result<Vec<PathBuf>> {
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Synth {
            images,
            descriptions_per_image,
            d1,
            d2,
            k,
            words,
            test_images,
        } => {
            let config = SynthConfig {
                num_images: *images,
                descriptions_per_image: *descriptions_per_image,
                d1: *d1,
                d2: *d2,
                k: *k,
                n: *words,
                seed: cli.seed,
            };
            pipeline::cmd_synth(&config, *test_images, out)
        }
        Command::Train => {
            let (model, train) = (cli.model_config(), cli.train_config());
            model.validate()?;
            train.validate()?;
            pipeline::cmd_train(&cli.corpus(), &model, &train, out)
        }
        Command::Retrieve => pipeline::cmd_retrieve(&cli.corpus(), &cli.checkpoint(), cli.direction(), &cli.turbo_n, out),
        Command::Eval => pipeline::cmd_eval(
            &cli.corpus(),
            &cli.checkpoint(),
            &cli.turbo_n,
            cli.direction(),
            cli.max_queries,
            out,
        ),
        Command::Ablate { eval_corpus } => {
            let (model, train) = (cli.model_config(), cli.train_config());
            model.validate()?;
            train.validate()?;
            pipeline::cmd_ablate(&cli.corpus(), eval_corpus.as_deref(), &model, &train, out)
        }
        Command::Heatmap { image, description } => {
            pipeline::cmd_heatmap(&cli.corpus(), &cli.checkpoint(), *image, *description, out)
        }
    }
}

/// 2 configuration, 3 data, 4 numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_) | Error::Contract(_) => 2,
        Error::NonFinite { .. } => 4,
        Error::Shape { .. }
        | Error::Input(_)
        | Error::Load { .. }
        | Error::Format(_)
        | Error::Eval(_)
        | Error::Io { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(written) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vitr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
