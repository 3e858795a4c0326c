use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use audiocap_cli::commands;
use audiocap_cli::config::{effective_seed, load_train_config, read_json, train_config, train_defaults, PipelineConfig};
use audiocap_cli::pipeline::{self, Outcome, Stage};
use audiocap_cli::{CliError, Result};
use audiocap_core::audio::FrontendConfig;
use audiocap_core::ingest::SplitSpec;
use audiocap_core::synth::{make_synthetic_corpus, SynthSpec};
use audiocap_model::train::recipe;
use audiocap_model::{CropAveraging, Dataset, DecodeSettings, Profile, VariantName};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-task audio captioning: data preparation, training, ensemble decoding and evaluation.
///
/// Exit status: 0 success, 2 configuration or missing-prerequisite error, 3 data error, 1 other failure.
/// The AC_SEED environment variable overrides every seed.
#[derive(Parser)]
#[command(name = "audiocap", version)]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic corpus (WAVs, caption CSV, metadata CSV, lemma table).
    Synth(SynthArgs),
    /// Join caption and metadata CSVs with the audio directory and assign splits.
    Ingest(IngestArgs),
    /// Compute log-mel/HPSS features for a corpus or for WAV files and cache them.
    Featurize(FeaturizeArgs),
    /// Build word, keyword and co-occurrence tables from the training captions.
    BuildVocab(BuildVocabArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train several models (a named recipe or a list) and write an ensemble manifest.
    Sweep(SweepArgs),
    /// Caption WAV files with one checkpoint or an ensemble.
    Caption(CaptionArgs),
    /// Score captions against references (BLEU-1..4, ROUGE-L, CIDEr-D, optional SPICE/SPIDEr).
    Evaluate(EvaluateArgs),
    /// Run the pipeline stages from a pipeline config, skipping up-to-date stages.
    Run(RunArgs),
    /// Print the fully resolved training configuration of a profile.
    ShowConfig(ShowConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of clips.
    #[arg(long, default_value_t = 10)]
    items: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 6.0)]
    seconds: f64,
    /// Distinct caption templates per clip (1 to 5).
    #[arg(long, default_value_t = 5)]
    caption_variants: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    /// Caption CSV with file_name and caption_1..caption_5.
    #[arg(long)]
    captions: PathBuf,
    /// Metadata CSV with file_name and keywords (";"-separated).
    #[arg(long)]
    metadata: PathBuf,
    /// Directory holding the WAV files named in the CSVs.
    #[arg(long)]
    audio_dir: PathBuf,
    /// Output directory; receives corpus.json.
    #[arg(long)]
    cache: PathBuf,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of validation items.
    #[arg(long, default_value_t = 0)]
    valid_count: usize,
    /// Number of test items.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// A WAV file, a directory of WAVs, or a directory containing corpus.json.
    #[arg(long = "in")]
    input: PathBuf,
    /// Cache directory for the feature files and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Copy the log-mel channel into all three channels.
    #[arg(long)]
    single: bool,
    /// JSON file overriding front-end parameters.
    #[arg(long)]
    frontend: Option<PathBuf>,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Caption CSV (every row counts as training data unless --corpus is given).
    #[arg(long, required_unless_present = "corpus")]
    captions: Option<PathBuf>,
    /// Metadata CSV.
    #[arg(long, required_unless_present = "corpus")]
    metadata: Option<PathBuf>,
    /// corpus.json (or its directory); only its training split is used.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Lemma table CSV (surface,lemma).
    #[arg(long)]
    lemma_table: PathBuf,
    /// Output directory for vocab.json, keywords.json and cooccurrence.json.
    #[arg(long)]
    out: PathBuf,
    /// Training profile fixing sequence lengths.
    #[arg(long, value_enum, default_value_t = ProfileArg::Paper)]
    profile: ProfileArg,
    /// Keep words occurring more than this many times (profile default if unset).
    #[arg(long)]
    word_min_count: Option<u64>,
    /// Keep keywords occurring more than this many times (profile default if unset).
    #[arg(long)]
    keyword_min_count: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (needs "variant"; other keys override the profile defaults).
    #[arg(long)]
    config: PathBuf,
    /// Directory with corpus.json and the feature cache (manifest.json).
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary directory (default: <corpus>/vocab).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Named recipe (submission1..submission4).
    #[arg(long, conflicts_with = "variants")]
    recipe: Option<String>,
    /// Comma-separated variant names, e.g. Model1,Model3,Model4single.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<VariantName>,
    /// Base training config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory with corpus.json and the feature cache.
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary directory (default: <corpus>/vocab).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output directory for the checkpoints and ensemble.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
    Miniature,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Miniature => Profile::Miniature,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    LogProb,
    Prob,
}

#[derive(Args)]
struct CaptionArgs {
    /// Checkpoint directories or sweep directories (comma-separated or repeated).
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    /// A WAV file or a directory of WAVs.
    #[arg(long)]
    wav: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Block hypotheses repeating an n-gram of this order.
    #[arg(long, default_value_t = 2)]
    block_n: usize,
    /// Random crops averaged per model.
    #[arg(long, default_value_t = 5)]
    tta: usize,
    /// Crop averaging domain.
    #[arg(long, value_enum, default_value_t = AveragingArg::LogProb)]
    averaging: AveragingArg,
    /// Crop seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output of `caption` (an object or an array of {file, caption}).
    #[arg(long)]
    candidates: PathBuf,
    /// Caption CSV with the references.
    #[arg(long)]
    references: PathBuf,
    /// Externally computed SPICE on the 0-100 scale: a number or {file: score}.
    #[arg(long)]
    spice: Option<PathBuf>,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Run only this stage (ingest, featurize, build-vocab, train, caption, evaluate).
    #[arg(long)]
    stage: Option<Stage>,
    /// Re-run stages even when up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ShowConfigArgs {
    /// Profile whose defaults are printed.
    #[arg(long, value_enum, default_value_t = ProfileArg::Paper)]
    profile: ProfileArg,
    /// Network variant (Model1..Model6, optionally with a "single" or "param2" suffix).
    #[arg(long, default_value = "Model1")]
    variant: VariantName,
}

fn vocab_dir(corpus: &Path, vocab: Option<PathBuf>) -> PathBuf {
    vocab.unwrap_or_else(|| corpus.join("vocab"))
}

fn load_dataset(stage: &str, corpus: &Path, vocab: &Path) -> Result<(Dataset, audiocap_model::Vocabularies, FrontendConfig)> {
    let c = commands::load_corpus(corpus, stage)?;
    let store = commands::load_features(corpus, stage)?;
    let vocabs = commands::load_vocab(vocab, stage)?;
    let data = Dataset::build(&c, &store, &vocabs)?;
    Ok((data, vocabs, store.config))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let spec = SynthSpec {
                items: a.items,
                seconds: a.seconds,
                caption_variants: a.caption_variants,
                seed: effective_seed(a.seed)?,
            };
            let s = make_synthetic_corpus(&spec, &a.out)?;
            print_json(&serde_json::json!({
                "audio_dir": s.audio_dir,
                "captions": s.captions_csv,
                "metadata": s.metadata_csv,
                "lemma_table": s.lemma_table,
                "items": s.items.len(),
            }))
        }
        Command::Ingest(a) => {
            let split = SplitSpec {
                valid: a.valid_count,
                test: a.test_count,
            };
            commands::ingest(&a.captions, &a.metadata, &a.audio_dir, split, effective_seed(a.seed)?, &a.cache)?;
            Ok(())
        }
        Command::Featurize(a) => {
            let cfg = match &a.frontend {
                Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                None => FrontendConfig::default(),
            };
            commands::featurize_into(&a.input, &cfg, a.single, &a.out)?;
            Ok(())
        }
        Command::BuildVocab(a) => {
            let corpus = match (&a.corpus, &a.captions, &a.metadata) {
                (Some(c), _, _) => commands::load_corpus(c, "build-vocab")?,
                (None, Some(c), Some(m)) => commands::corpus_from_csv(c, m)?,
                _ => return Err(CliError::Config("give --corpus or both --captions and --metadata".into())),
            };
            let mut cfg = train_defaults("Model1".parse()?, a.profile.into());
            if let Some(n) = a.word_min_count {
                cfg.vocab.word_min_count = n;
            }
            if let Some(n) = a.keyword_min_count {
                cfg.vocab.keyword_min_count = n;
            }
            commands::build_vocab(&corpus, &a.lemma_table, &cfg, &a.out)?;
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = load_train_config(&a.config)?;
            cfg.seed = effective_seed(cfg.seed)?;
            let (data, vocabs, frontend) = load_dataset("train", &a.corpus, &vocab_dir(&a.corpus, a.vocab))?;
            std::fs::create_dir_all(&a.out)?;
            let mut log = std::fs::File::create(a.out.join("train_log.jsonl"))?;
            let outcome = audiocap_model::train(&data, &vocabs, &cfg, &mut log, Some(&a.out))?;
            outcome.best.save(&a.out, &vocabs)?;
            commands::write_json(&a.out.join(commands::FRONTEND_FILE), &frontend)?;
            log::info!(
                "trained {} for {} steps; checkpoint in {}",
                cfg.variant,
                outcome.last.meta.step,
                a.out.display()
            );
            Ok(())
        }
        Command::Sweep(a) => {
            let mut cfg = load_train_config(&a.config)?;
            cfg.seed = effective_seed(cfg.seed)?;
            let variants = match &a.recipe {
                Some(r) => recipe(r)?,
                None if a.variants.is_empty() => {
                    return Err(CliError::Config("give --recipe or --variants".into()));
                }
                None => a.variants.clone(),
            };
            let (data, vocabs, frontend) = load_dataset("sweep", &a.corpus, &vocab_dir(&a.corpus, a.vocab))?;
            let m = commands::train_variants(&variants, &cfg, &data, &vocabs, &frontend, &a.out)?;
            log::info!("{} checkpoints in {}", m.members.len(), a.out.display());
            Ok(())
        }
        Command::Caption(a) => {
            let dirs = commands::checkpoint_dirs(&a.checkpoints, "caption")?;
            let (models, vocabs, frontend) = commands::load_models(&dirs)?;
            let settings = DecodeSettings {
                beam: a.beam.max(1),
                block_n: a.block_n,
                tta: a.tta.max(1),
                averaging: match a.averaging {
                    AveragingArg::LogProb => CropAveraging::LogProb,
                    AveragingArg::Prob => CropAveraging::Prob,
                },
            };
            let wavs = commands::wav_inputs(&a.wav)?;
            let lines = commands::caption_wavs(&models, &vocabs, &frontend, &wavs, &settings, effective_seed(a.seed)?)?;
            let value = if a.wav.is_file() {
                serde_json::to_value(&lines[0])
            } else {
                serde_json::to_value(&lines)
            }
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            match &a.out {
                Some(p) => commands::write_json(p, &value),
                None => print_json(&value),
            }
        }
        Command::Evaluate(a) => {
            let candidates = commands::read_candidates(&a.candidates)?;
            let refs = commands::references_from_csv(&a.references)?;
            let spice = a.spice.as_deref().map(commands::read_spice).transpose()?;
            let report = commands::evaluate_candidates(&candidates, &refs, spice.as_ref(), &a.out)?;
            println!("{report}");
            Ok(())
        }
        Command::Run(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            for (stage, outcome) in pipeline::run(&cfg, a.stage, a.force)? {
                let word = match outcome {
                    Outcome::Ran => "ran",
                    Outcome::Skipped => "skipped (up to date)",
                };
                println!("{stage}: {word}");
            }
            Ok(())
        }
        Command::ShowConfig(a) => {
            let cfg = train_config(&serde_json::json!({
                "variant": a.variant.to_string(),
                "profile": serde_json::to_value(Profile::from(a.profile)).expect("profile"),
            }))?;
            print_json(&serde_json::json!({
                "train": cfg,
                "model": cfg.profile.model(cfg.variant),
                "frontend": FrontendConfig::default(),
                "decode": DecodeSettings::default(),
                "split": if matches!(a.profile, ProfileArg::Paper) { SplitSpec::FULL_DATA } else { SplitSpec::default() },
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
