//! Command-line entry point: six subcommands covering the whole pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use envfx::audio::{read_wav, resample, write_wav, TARGET_SAMPLE_RATE};
use envfx::config::RunConfig;
use envfx::dataset::{build_corpus, read_manifest, BuildOptions, EnvironmentLabel, Split};
use envfx::error::{Error, Result};
use envfx::evaluation::{evaluate_corpus, plot_comparison, write_report, PlotClip};
use envfx::features::{
    compute_energy, compute_mel, estimate_pitch, extract_features, load_features,
};
use envfx::inference::{convert, write_mel_file, ConversionRequest};
use envfx::model::{checkpoint, Model};
use envfx::training::{configs_from_checkpoint, train};

#[derive(Parser)]
#[command(
    name = "envfx",
    version,
    about = "Acoustic environment-effect conversion for speech"
)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for the invoked stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    /// Output directory for the invoked stage.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize room impulse responses and build the 5x labeled corpus.
    MakeDataset {
        /// Directory of clean mono WAV clips.
        #[arg(long)]
        clean_dir: PathBuf,
        /// Per-environment decay overrides, e.g.
        /// bathroom=0.5,classroom=0.7,gallery=1.5,cave=2.5
        #[arg(long)]
        rt60: Option<String>,
    },
    /// Compute and cache mel, pitch, and energy features for a corpus.
    ExtractFeatures {
        /// Corpus directory containing manifest.tsv.
        #[arg(long)]
        corpus_dir: PathBuf,
    },
    /// Train the conversion model on a feature cache.
    Train {
        /// Feature cache directory (from extract-features).
        #[arg(long)]
        features_dir: PathBuf,
        /// Override training.total_steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Override training.batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Convert a source clip into a reference clip's acoustic environment.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Effect strength in [0, 2].
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the converted mel spectrogram.
        #[arg(long)]
        save_mel: Option<PathBuf>,
    },
    /// Score converted clips against ground truth (per-environment MCD).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus manifest (manifest.tsv).
        #[arg(long)]
        manifest: PathBuf,
        /// A single target environment; all four when omitted.
        #[arg(long)]
        target_env: Option<String>,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
        /// Which split to score.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render a converted-vs-truth comparison figure (spectrum + contours).
    Plot {
        /// Converted audio (WAV).
        #[arg(long)]
        converted: PathBuf,
        /// Ground-truth audio (WAV), frame-aligned with the converted clip.
        #[arg(long)]
        truth: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = Some(dir.clone());
    }
    config.validate()?;
    info!("resolved configuration:\n{}", config.to_toml());

    let stft = config.stft.params();
    let seed = config.seed.unwrap_or(1234);
    let out_dir = |default: &str| -> PathBuf {
        config
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(default))
    };

    match cli.command {
        Command::MakeDataset { clean_dir, rt60 } => {
            let mut dataset_cfg = config.dataset.clone();
            if let Some(spec) = rt60 {
                for part in spec.split(',') {
                    let (name, value) = part.split_once('=').ok_or_else(|| {
                        Error::Config(format!("bad --rt60 entry '{part}'; expected name=seconds"))
                    })?;
                    let secs: f64 = value.trim().parse().map_err(|e| {
                        Error::Config(format!("bad rt60 value '{value}': {e}"))
                    })?;
                    dataset_cfg.rt60.insert(name.trim().to_string(), secs);
                }
            }
            let out = out_dir("dataset");
            let options = BuildOptions {
                seed,
                split_ratios: dataset_cfg.split_ratios,
                presets: dataset_cfg.presets()?,
                max_frames: config.model.max_frames,
                hop: stft.hop,
            };
            info!("building corpus from {} with seed {seed}", clean_dir.display());
            let manifest = build_corpus(&clean_dir, &out, &options)?;
            println!(
                "wrote {} entries ({} clips x 5 environments) under {}",
                manifest.len(),
                manifest.clip_ids().len(),
                out.display()
            );
            for (env, count) in manifest.counts_per_environment() {
                println!("  {env}: {count}");
            }
        }

        Command::ExtractFeatures { corpus_dir } => {
            let manifest = read_manifest(&corpus_dir.join("manifest.tsv"))?;
            let out = out_dir("features");
            let set =
                extract_features(&manifest, &corpus_dir, &out, &stft, config.model.max_frames)?;
            println!(
                "cached {} feature records under {} (train-split energy max {:.3})",
                set.len(),
                out.display(),
                set.energy_max
            );
        }

        Command::Train {
            features_dir,
            steps,
            batch_size,
            resume,
        } => {
            let features = load_features(&features_dir)?;
            let out = out_dir("train");

            let mut train_cfg = config.training.clone();
            if let Some(steps) = steps {
                train_cfg.total_steps = steps;
            }
            if let Some(bs) = batch_size {
                train_cfg.batch_size = bs;
            }
            if let Some(seed) = cli.seed.or(config.seed) {
                train_cfg.seed = seed;
            }

            let (model, resume_data) = match &resume {
                Some(path) => {
                    let data = checkpoint::load_checkpoint(path)?;
                    let (model_cfg, ck_train_cfg) = configs_from_checkpoint(&data)?;
                    if model_cfg != config.model {
                        warn!("resuming with the checkpoint's model configuration");
                    }
                    train_cfg = ck_train_cfg;
                    if let Some(steps) = steps {
                        train_cfg.total_steps = steps;
                    }
                    (Model::new(model_cfg)?, Some(data))
                }
                None => {
                    let mut model_cfg = config.model.clone();
                    // Energy bins span the training corpus range.
                    model_cfg.energy_max = features.energy_max;
                    (Model::new(model_cfg)?, None)
                }
            };

            info!(
                "training for {} steps (batch {}, seed {})",
                train_cfg.total_steps, train_cfg.batch_size, train_cfg.seed
            );
            let outcome = train(&model, &train_cfg, &features, &out, resume_data.as_ref())?;
            println!(
                "finished at step {}; final checkpoint {}",
                train_cfg.total_steps,
                outcome.final_checkpoint.display()
            );
            if let Some(v) = outcome.history.last() {
                println!(
                    "last losses: recon {:.4} pitch {:.4} energy {:.4} advC {:.4} advE {:.4}",
                    v.recon, v.pitch, v.energy, v.adv_content, v.adv_effect
                );
            }
        }

        Command::Convert {
            checkpoint: ckpt,
            source,
            reference,
            alpha,
            out,
            save_mel,
        } => {
            let (model, _) = load_model(&ckpt)?;
            let req = ConversionRequest {
                source: read_wav(&source)?,
                reference: read_wav(&reference)?,
                alpha,
                target_env: None,
            };
            let vocoder = config.vocoder.build(stft)?;
            let (mel, wave) = convert(&req, &model, &stft, vocoder.as_ref())?;
            write_wav(&out, &wave)?;
            if let Some(mel_path) = save_mel {
                write_mel_file(&mel_path, &mel)?;
            }
            println!(
                "converted {} -> {} ({} frames, alpha {alpha})",
                source.display(),
                out.display(),
                mel.valid_len()
            );
        }

        Command::Evaluate {
            checkpoint: ckpt,
            manifest,
            target_env,
            out,
            split,
        } => {
            let (model, _) = load_model(&ckpt)?;
            let corpus_root = manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let manifest = read_manifest(&manifest)?;
            let target = target_env
                .map(|s| s.parse::<EnvironmentLabel>())
                .transpose()?;
            let split: Split = split.parse()?;
            let report = evaluate_corpus(&model, &manifest, &corpus_root, target, split, &stft)?;
            write_report(&out, &report)?;
            println!("environment\tmcd_mean_db\tmcd_std_db\tcount");
            for row in &report.rows {
                println!(
                    "{}\t{:.4}\t{:.4}\t{}",
                    row.environment, row.mean, row.std, row.count
                );
            }
            println!("report written to {}", out.display());
        }

        Command::Plot {
            converted,
            truth,
            out,
        } => {
            let clip = |path: &Path, label: &str| -> Result<PlotClip> {
                let wave = resample(&read_wav(path)?, TARGET_SAMPLE_RATE)?;
                Ok(PlotClip {
                    mel: compute_mel(&wave, &stft)?,
                    pitch: estimate_pitch(&wave, &stft)?,
                    energy: compute_energy(&wave, &stft)?,
                    label: label.to_string(),
                })
            };
            plot_comparison(
                &clip(&converted, "converted")?,
                &clip(&truth, "ground truth")?,
                &out,
            )?;
            println!("figure written to {}", out.display());
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, checkpoint::CheckpointData)> {
    let data = checkpoint::load_checkpoint(path)?;
    let (model_cfg, _) = configs_from_checkpoint(&data)?;
    let model = Model::new(model_cfg)?;
    let registry = model.registry();
    checkpoint::restore_model(&model, &registry, &data)?;
    Ok((model, data))
}
