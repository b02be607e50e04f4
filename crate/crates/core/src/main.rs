use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use styleseg::config::{load_config, RunConfig};
use styleseg::io;
use styleseg::metrics::evaluate_split;
use styleseg::phantom::generate_corpus;
use styleseg::pipeline::{samples_of, Pipeline, Stage};
use styleseg::postprocess::postprocess;
use styleseg::preprocess::{preprocess_manifest, resampled_pairs, Localizer};
use styleseg::segmenter::cascade::{ensemble_predict, stage_fit_config, CascadeModel, CurriculumStage};
use styleseg::seed::child_seed;
use styleseg::translator::{synthesize_dataset, train_translator, TranslatorModel};
use styleseg::{DatasetManifest, Modality, Split};
use styleseg_nn::Checkpoint;

#[derive(Parser)]
#[command(name = "styleseg", version, about = "Cross-modality cardiac segmentation via style-transfer synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic two-modality corpus.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Resampling, localization, cropping and normalization.
    Preprocess {
        #[command(subcommand)]
        cmd: PreprocessCmd,
    },
    /// Translator training and synthetic-set generation.
    Translate {
        #[command(subcommand)]
        cmd: TranslateCmd,
    },
    /// Cascade training and inference.
    Seg {
        #[command(subcommand)]
        cmd: SegCmd,
    },
    /// CRF and morphological refinement of saved probability maps.
    Postprocess {
        #[command(subcommand)]
        cmd: PostprocessCmd,
    },
    /// Dice and ASD of saved predictions.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// The whole experiment.
    Pipeline {
        #[command(subcommand)]
        cmd: PipelineCmd,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PreprocessCmd {
    /// Trains the localizer on the labelled source training split and
    /// preprocesses every record.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TranslateCmd {
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Preprocessed manifest; its translator-train records are used.
        #[arg(long)]
        manifest: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    Synth {
        #[arg(long)]
        model: PathBuf,
        /// Preprocessed manifest with labelled source training records.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Net {
    Unet1,
    Unet2,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Source,
    Target,
    SynthTarget,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Source => Modality::Source,
            ModalityArg::Target => Modality::Target,
            ModalityArg::SynthTarget => Modality::SynthTarget,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_enum)]
    net: Net,
    /// Labelled manifest to train on.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Cascade to continue from; a fresh one is initialized otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SegCmd {
    /// Pretraining of one U-net (learning rate `lr_initial`).
    Train(StageArgs),
    /// Fine-tuning of one U-net (learning rate `lr_finetune`).
    Finetune(StageArgs),
    /// Ensemble-averaged `p2` probabilities and labels for one split.
    Predict {
        #[arg(long, num_args = 1.., required = true)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "target")]
        modality: ModalityArg,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PostprocessCmd {
    /// Refines `<probs>/<case>.prob` into `<out>/<case>.raw`.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        probs: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "target")]
        modality: ModalityArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory with `<case>.raw` label maps.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "target")]
        modality: ModalityArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Runs every stage whose configuration changed since its last run.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recomputes the given stage and everything after it.
    Resume {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        from: Stage,
    },
}

fn load_manifest(p: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(p).with_context(|| format!("loading manifest {}", p.display()))
}

fn train_stage(a: &StageArgs, finetune: bool) -> Result<()> {
    let cfg = a.config.load()?;
    let stage = match (a.net, finetune) {
        (Net::Unet1, false) => CurriculumStage::Unet1Pretrain,
        (Net::Unet1, true) => CurriculumStage::Unet1Finetune,
        (Net::Unet2, false) => CurriculumStage::Unet2Pretrain,
        (Net::Unet2, true) => CurriculumStage::Unet2Finetune,
    };
    let mut model = match &a.model {
        Some(p) => CascadeModel::load(p)?,
        None => CascadeModel::new(&cfg.segmenter, child_seed(cfg.seed, "segment/member0")),
    };
    let m = load_manifest(&a.manifest)?;
    let samples = samples_of(&m, Split::Train, a.modality.into())?;
    if samples.is_empty() {
        bail!("no labelled training slices in {}", a.manifest.display());
    }
    let fit = stage_fit_config(&cfg.segmenter, &cfg.augment, stage, child_seed(cfg.seed, "segment/member0"));
    let curve = model.train_stage(stage, &samples, &fit)?;
    model.save(&a.out)?;
    let csv = a.out.with_extension("loss.csv");
    std::fs::write(&csv, curve.to_csv()).with_context(|| csv.display().to_string())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            cmd: PhantomCmd::Generate { config, out },
        } => {
            let cfg = config.load()?;
            let seed = cfg.phantom.seed.unwrap_or_else(|| child_seed(cfg.seed, "phantom"));
            let m = generate_corpus(&cfg.phantom, seed, &out)?;
            println!("wrote {} records to {}", m.records.len(), out.display());
        }
        Command::Preprocess {
            cmd: PreprocessCmd::Run { config, manifest, out },
        } => {
            let cfg = config.load()?;
            let raw = load_manifest(&manifest)?;
            let p = &cfg.preprocess;
            let pairs = resampled_pairs(&raw, Split::Train, Modality::Source, p.target_spacing)?;
            let (loc, _) = Localizer::train(&pairs, &p.localizer, &cfg.augment, child_seed(cfg.seed, "localizer"))?;
            loc.save(&out.join("localizer.ckpt"))?;
            let m = preprocess_manifest(&raw, &loc, p, &out.join("data"))?;
            println!("preprocessed {} records into {}", m.records.len(), out.join("data").display());
        }
        Command::Translate {
            cmd: TranslateCmd::Train { config, manifest, out },
        } => {
            let cfg = config.load()?;
            let m = load_manifest(&manifest)?;
            let pool = |modality| {
                m.select(Split::TranslatorTrain, modality)
                    .map(|r| m.load_image(r))
                    .collect::<styleseg::Result<Vec<_>>>()
            };
            let (model, log) = train_translator(&pool(Modality::Source)?, &pool(Modality::Target)?, &cfg.translator, child_seed(cfg.seed, "translator"))?;
            model.to_checkpoint().save(&out)?;
            let csv = out.with_extension("log.csv");
            std::fs::write(&csv, log.to_csv()).with_context(|| csv.display().to_string())?;
        }
        Command::Translate {
            cmd: TranslateCmd::Synth { model, manifest, k, seed, out },
        } => {
            let t = TranslatorModel::from_checkpoint(&Checkpoint::load(&model)?, None)?;
            let m = synthesize_dataset(&t, &load_manifest(&manifest)?, k, seed, &out)?;
            println!("synthesized {} volumes into {}", m.records.len(), out.display());
        }
        Command::Seg { cmd: SegCmd::Train(a) } => train_stage(&a, false)?,
        Command::Seg { cmd: SegCmd::Finetune(a) } => train_stage(&a, true)?,
        Command::Seg {
            cmd:
                SegCmd::Predict {
                    ensemble,
                    manifest,
                    split,
                    modality,
                    batch,
                    out,
                },
        } => {
            let models = ensemble.iter().map(|p| CascadeModel::load(p)).collect::<styleseg::Result<Vec<_>>>()?;
            let m = load_manifest(&manifest)?;
            for r in m.select(split.into(), modality.into()) {
                let v = m.load_image(r)?;
                let (probs, labels) = ensemble_predict(&models, &v, batch)?;
                io::save_probmap(&probs, &out.join(format!("{}.prob", r.case_id)))?;
                io::save_labelmap(&labels, &out.join(format!("{}.raw", r.case_id)))?;
            }
        }
        Command::Postprocess {
            cmd:
                PostprocessCmd::Run {
                    config,
                    manifest,
                    probs,
                    split,
                    modality,
                    out,
                },
        } => {
            let cfg = config.load()?;
            let m = load_manifest(&manifest)?;
            for r in m.select(split.into(), modality.into()) {
                let v = m.load_image(r)?;
                let p = io::load_probmap(&probs.join(format!("{}.prob", r.case_id)))?;
                let labels = postprocess(&p, &v, &cfg.crf, &cfg.morphology)?;
                io::save_labelmap(&labels, &out.join(format!("{}.raw", r.case_id)))?;
            }
        }
        Command::Eval {
            cmd:
                EvalCmd::Run {
                    config,
                    manifest,
                    pred,
                    split,
                    modality,
                    out,
                },
        } => {
            let cfg = config.load()?;
            let report = evaluate_split(&pred, &load_manifest(&manifest)?, split.into(), modality.into(), cfg.eval.surface)?;
            report.write(&out, "Evaluation")?;
            print!("{}", report.summary_csv());
        }
        Command::Pipeline {
            cmd: PipelineCmd::Run { config, out },
        } => Pipeline::new(config.load()?, out)?.run()?,
        Command::Pipeline {
            cmd: PipelineCmd::Resume { config, out, from },
        } => Pipeline::new(config.load()?, out)?.resume(from)?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
