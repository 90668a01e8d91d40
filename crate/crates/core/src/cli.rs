//! The `miipher` command-line tool.
//!
//! Every subcommand reads one optional TOML config file (`--config` or the
//! `MIIPHER_CONFIG` environment variable), applies command-line overrides and writes
//! the merged result as `effective_config.toml` next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, save_wav, Manifest, ManifestEntry};
use crate::cleaner::{CleanerConfig, CleanerModel};
use crate::error::{Error, Result};
use crate::features::{write_bundle, ExtractorSpec};
use crate::pipeline::experiment::{run_fixture_experiment, ExperimentConfig};
use crate::pipeline::{
    degrade_corpus, evaluate, parallel_map, prepare_pairs, stable_hash, train_cleaner,
    train_vocoder, write_fixture_corpus, CommandAsr, CorpusOptions, PairedManifest, PatternChoice,
    Restorer, TrainConfig, VocoderStage,
};
use crate::seed;
use crate::vocoder::{VocoderConfig, VocoderModel};

pub const CONFIG_ENV: &str = "MIIPHER_CONFIG";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "miipher",
    version,
    about = "Speech restoration by feature cleaning and re-synthesis"
)]
pub struct Cli {
    /// TOML config file with per-module sections.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for degradation, feature extraction and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic fixture corpus (clean speech and noise manifests).
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a clean manifest into a paired corpus with recorded recipes.
    DegradeCorpus {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        /// noise, reverb, codec, reverb+codec or mixed.
        #[arg(long)]
        pattern: Option<String>,
        /// surrogate, ffmpeg or ffmpeg:<path>.
        #[arg(long)]
        codec_backend: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute features for every clip and store them in the tensor exchange layout.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Appended to every utterance id in the output file names.
        #[arg(long, default_value = "")]
        id_suffix: String,
    },
    /// Train the feature cleaner on a paired manifest.
    TrainCleaner {
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Train the vocoder on clean features or on cleaner predictions.
    TrainVocoder {
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// pretrain_clean or finetune_predicted.
        #[arg(long, default_value = "pretrain_clean")]
        stage: String,
        /// Cleaner checkpoint, required by the finetune_predicted stage.
        #[arg(long)]
        cleaner: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Restore one file (`--in`, `--transcript`) or a whole manifest (`--manifest`).
    Restore {
        #[arg(long = "in", conflicts_with = "manifest", requires = "transcript")]
        input: Option<PathBuf>,
        /// Text file holding the transcript of `--in`.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long, required_unless_present = "input")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        cleaner: PathBuf,
        #[arg(long)]
        vocoder: PathBuf,
        /// Output WAV for `--in`, output directory for `--manifest`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score restored and degraded clips against the clean references.
    Evaluate {
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
        /// Command that prints a transcript for the audio path appended to it.
        #[arg(long)]
        asr_command: Option<String>,
        /// JSON report path; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline on the fixture corpus and report the scores.
    FixtureExperiment {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeSection {
    pub pattern: PatternChoice,
    pub codec_backend: String,
}

impl Default for DegradeSection {
    fn default() -> Self {
        DegradeSection {
            pattern: PatternChoice::Mixed,
            codec_backend: "surrogate".into(),
        }
    }
}

/// Contents of the config file. Every section is optional; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub workers: usize,
    pub degrade: DegradeSection,
    pub extractor: ExtractorSpec,
    pub cleaner: CleanerConfig,
    pub vocoder: VocoderConfig,
    pub train_cleaner: TrainConfig,
    pub train_vocoder: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            seed: 0,
            workers: 1,
            degrade: DegradeSection::default(),
            extractor: ExtractorSpec::desk_scale(),
            cleaner: CleanerConfig::desk_scale(),
            vocoder: VocoderConfig::desk_scale(),
            train_cleaner: TrainConfig::default(),
            train_vocoder: TrainConfig {
                steps: 200,
                batch_size: 2,
                lr: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit
/// code: 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            1
        }
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[miipher] {}", msg.as_ref());
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_effective(dir: &Path, cfg: &FileConfig) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(EFFECTIVE_CONFIG);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// Loads the config file and applies the global overrides.
pub fn resolve_config(cli: &Cli) -> Result<FileConfig> {
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cfg.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    log(format!(
        "config: {} seed: {} workers: {}",
        cli.config
            .as_ref()
            .map_or("<defaults>".to_string(), |p| p.display().to_string()),
        cfg.seed,
        cfg.workers
    ));
    match &cli.command {
        Command::MakeFixtures { out } => {
            write_effective(out, &cfg)?;
            let paths = write_fixture_corpus(out, cfg.seed)?;
            log(format!(
                "wrote {} and {}",
                paths.clean_manifest.display(),
                paths.noise_manifest.display()
            ));
        }
        Command::DegradeCorpus {
            manifest,
            noise,
            pattern,
            codec_backend,
            out,
        } => {
            if let Some(p) = pattern {
                cfg.degrade.pattern = p.parse()?;
            }
            if let Some(b) = codec_backend {
                cfg.degrade.codec_backend = b.clone();
            }
            write_effective(out, &cfg)?;
            let opts = CorpusOptions {
                pattern: cfg.degrade.pattern,
                seed: cfg.seed,
                codec_backend: cfg.degrade.codec_backend.clone(),
                workers: cfg.workers,
            };
            let result = degrade_corpus(
                &Manifest::load(manifest)?,
                &Manifest::load(noise)?,
                &opts,
                out,
            )?;
            log(format!(
                "degraded {} utterances ({}); paired manifest {}",
                result.paired.entries.len(),
                opts.pattern,
                result.paired_manifest.display()
            ));
        }
        Command::ExtractFeatures {
            manifest,
            out,
            id_suffix,
        } => {
            write_effective(out, &cfg)?;
            let m = Manifest::load(manifest)?;
            let fx = cfg.extractor.build()?;
            parallel_map(&m.entries, cfg.workers, |e| {
                let clip = m.load_clip(e)?;
                if clip.transcript.is_none() {
                    return Err(Error::Validation(format!(
                        "utterance '{}' has no transcript",
                        e.utt_id
                    )));
                }
                let bundle = fx.bundle(&clip, &clip)?;
                write_bundle(out, &format!("{}{id_suffix}", e.utt_id), &bundle)
            })?;
            log(format!(
                "wrote features for {} utterances to {}",
                m.len(),
                out.display()
            ));
        }
        Command::TrainCleaner {
            paired,
            out,
            init,
            train,
        } => {
            train.apply(&mut cfg.train_cleaner);
            cfg.train_cleaner.seed = cfg.seed;
            write_effective(out, &cfg)?;
            let fx = cfg.extractor.build()?;
            let pairs = prepare_pairs(&PairedManifest::load(paired)?, fx.as_ref(), cfg.workers)?;
            let mut model = match init {
                Some(p) => CleanerModel::load(p)?,
                None => CleanerModel::new(cfg.cleaner.clone())?,
            };
            let ckpt_dir = out.join("checkpoints");
            let log_ = train_cleaner(&mut model, &pairs, &cfg.train_cleaner, Some(&ckpt_dir))?;
            log_.save(&out.join("cleaner_loss.jsonl"))?;
            model.save(out.join("cleaner.ckpt"))?;
            let curve = log_.curve("cleaner_loss");
            log(format!(
                "cleaner loss {:.4} -> {:.4} over {} steps",
                curve[0],
                curve[curve.len() - 1],
                curve.len()
            ));
        }
        Command::TrainVocoder {
            paired,
            out,
            stage,
            cleaner,
            init,
            train,
        } => {
            let stage: VocoderStage = stage.parse()?;
            train.apply(&mut cfg.train_vocoder);
            cfg.train_vocoder.seed = cfg.seed;
            if stage == VocoderStage::FinetunePredicted && cleaner.is_none() {
                return Err(Error::Validation(
                    "--stage finetune_predicted needs --cleaner".into(),
                ));
            }
            write_effective(out, &cfg)?;
            let fx = cfg.extractor.build()?;
            let pairs = prepare_pairs(&PairedManifest::load(paired)?, fx.as_ref(), cfg.workers)?;
            let cleaner = cleaner.as_ref().map(CleanerModel::load).transpose()?;
            let mut model = match init {
                Some(p) => VocoderModel::load(p)?,
                None => VocoderModel::new(cfg.vocoder.clone())?,
            };
            let ckpt_dir = out.join("checkpoints");
            let log_ = train_vocoder(
                &mut model,
                &pairs,
                stage,
                cleaner.as_ref(),
                &cfg.train_vocoder,
                Some(&ckpt_dir),
            )?;
            log(format!("stage {stage}, input source {}", log_.input_source));
            log_.save(&out.join("vocoder_loss.jsonl"))?;
            model.save(out.join("vocoder.ckpt"))?;
        }
        Command::Restore {
            input,
            transcript,
            manifest,
            cleaner,
            vocoder,
            out,
        } => {
            let restorer =
                Restorer::new(CleanerModel::load(cleaner)?, VocoderModel::load(vocoder)?)?;
            let fx = cfg.extractor.build()?;
            match (input, manifest) {
                (Some(input), _) => {
                    let tpath = transcript.as_ref().expect("clap enforces --transcript");
                    let text = fs::read_to_string(tpath).map_err(|e| Error::io(tpath, e))?;
                    let mut clip = load_wav(input)?;
                    clip.utt_id = input
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let y = restorer.restore(&clip, text.trim(), fx.as_ref(), cfg.seed)?;
                    let dir = out
                        .parent()
                        .filter(|p| !p.as_os_str().is_empty())
                        .unwrap_or(Path::new("."));
                    write_effective(dir, &cfg)?;
                    save_wav(&y, out)?;
                    log(format!(
                        "wrote {} ({} samples at {} Hz)",
                        out.display(),
                        y.len(),
                        y.sample_rate
                    ));
                }
                (None, Some(manifest)) => {
                    write_effective(out, &cfg)?;
                    let m = Manifest::load(manifest)?;
                    let entries = parallel_map(&m.entries, cfg.workers, |e| {
                        let clip = m.load_clip(e)?;
                        let text = e.transcript.as_deref().ok_or_else(|| {
                            Error::Validation(format!("utterance '{}' has no transcript", e.utt_id))
                        })?;
                        let utt_seed = seed::derive_seed(cfg.seed, stable_hash(&e.utt_id));
                        let y = restorer.restore(&clip, text, fx.as_ref(), utt_seed)?;
                        let rel = PathBuf::from(format!("{}.wav", e.utt_id));
                        save_wav(&y, out.join(&rel))?;
                        Ok(ManifestEntry {
                            audio_path: rel,
                            ..e.clone()
                        })
                    })?;
                    Manifest::new(entries)?.save(out.join("restored.jsonl"))?;
                    log(format!(
                        "restored {} utterances into {}",
                        m.len(),
                        out.display()
                    ));
                }
                (None, None) => unreachable!("clap requires --in or --manifest"),
            }
        }
        Command::Evaluate {
            restored,
            clean,
            degraded,
            asr_command,
            out,
        } => {
            let fx = cfg.extractor.build()?;
            let asr = asr_command.as_ref().map(|cmd| {
                let mut parts = cmd.split_whitespace().map(str::to_string);
                CommandAsr {
                    program: parts.next().unwrap_or_default().into(),
                    args: parts.collect(),
                }
            });
            let report = evaluate(
                &Manifest::load(restored)?,
                &Manifest::load(clean)?,
                &Manifest::load(degraded)?,
                fx.as_ref(),
                asr.as_ref().map(|a| a as &dyn crate::pipeline::AsrHook),
                cfg.workers,
            )?;
            print!("{}", report.to_table());
            if let Some(out) = out {
                let dir = out
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                write_effective(dir, &cfg)?;
                fs::write(out, report.to_json()).map_err(|e| Error::io(out, e))?;
            }
        }
        Command::FixtureExperiment { out } => {
            write_effective(out, &cfg)?;
            let mut exp = ExperimentConfig::default();
            exp.corpus.workers = cfg.workers;
            exp.fixture_seed = cfg.seed;
            let outcome = run_fixture_experiment(out, &exp)?;
            let path = out.join("report.json");
            fs::write(&path, outcome.report.to_json()).map_err(|e| Error::io(&path, e))?;
            print!("{}", outcome.report.to_table());
        }
    }
    Ok(())
}
