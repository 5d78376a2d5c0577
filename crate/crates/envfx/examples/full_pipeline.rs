//! The whole desk-scale workflow through the library API: corpus, features,
//! staged training, conversion, MCD report, and a comparison figure.
//!
//! ```bash
//! cargo run --release --example full_pipeline -- [steps]
//! ```
//!
//! Defaults to 600 training steps; more steps give a cleaner conversion.

use envfx::audio::{read_wav, synth_speech, write_wav, SynthSpec};
use envfx::dataset::{build_corpus, BuildOptions, EnvironmentLabel, Split};
use envfx::evaluation::{evaluate_corpus, plot_comparison, write_report, PlotClip};
use envfx::features::{
    compute_energy, compute_mel, estimate_pitch, extract_features, StftParams,
};
use envfx::inference::{convert, ConversionRequest, GriffinLim};
use envfx::model::{Model, ModelConfig};
use envfx::training::{train, TrainConfig};

fn main() -> envfx::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let root = std::path::Path::new("examples_out/full_pipeline");
    let params = StftParams::default();

    // 1. Clean clips.
    let clean = root.join("clean");
    std::fs::create_dir_all(&clean).expect("create clean directory");
    for i in 0..8u64 {
        let spec = SynthSpec {
            duration_secs: 0.62 + 0.04 * i as f64,
            base_f0: 130.0 + 15.0 * i as f64,
            ..SynthSpec::default()
        };
        write_wav(&clean.join(format!("clip{i}.wav")), &synth_speech(&spec, i))?;
    }

    // 2. Corpus and features.
    let manifest = build_corpus(
        &clean,
        &root.join("corpus"),
        &BuildOptions {
            seed: 77,
            split_ratios: (0.75, 0.0, 0.25),
            max_frames: 96,
            ..BuildOptions::default()
        },
    )?;
    println!("corpus: {} entries", manifest.len());
    let features = extract_features(
        &manifest,
        &root.join("corpus"),
        &root.join("features"),
        &params,
        96,
    )?;

    // 3. Staged training (10% / 10% / 80% phases).
    let model = Model::new(ModelConfig {
        energy_max: features.energy_max,
        ..ModelConfig::toy()
    })?;
    let cfg = TrainConfig {
        batch_size: 4,
        total_steps: steps,
        checkpoint_every: steps.max(1),
        seed: 42,
        ..TrainConfig::default()
    };
    println!("training {steps} steps ...");
    let outcome = train(&model, &cfg, &features, &root.join("train"), None)?;
    let last = outcome.history.last().unwrap();
    println!(
        "final losses: recon {:.4} pitch {:.4} energy {:.4} advC {:.4} advE {:.4}",
        last.recon, last.pitch, last.energy, last.adv_content, last.adv_effect
    );

    // 4. Convert a test clip's clean variant into the bathroom.
    let test_clip = manifest
        .entries
        .iter()
        .find(|e| e.split == Split::Test && e.environment == EnvironmentLabel::Clean)
        .expect("test split is nonempty");
    let reference_entry = manifest
        .entries
        .iter()
        .find(|e| e.split == Split::Test && e.environment == EnvironmentLabel::Bathroom)
        .unwrap();
    let source = read_wav(&root.join("corpus").join(&test_clip.audio_path))?;
    let reference = read_wav(&root.join("corpus").join(&reference_entry.audio_path))?;
    let vocoder = GriffinLim {
        iterations: 32,
        params,
    };
    let (_, converted) = convert(
        &ConversionRequest {
            source,
            reference,
            alpha: 1.0,
            target_env: Some(EnvironmentLabel::Bathroom),
        },
        &model,
        &params,
        &vocoder,
    )?;
    let converted_path = root.join("converted.wav");
    write_wav(&converted_path, &converted)?;
    println!("converted clip written to {}", converted_path.display());

    // 5. MCD report over the test split.
    let report = evaluate_corpus(&model, &manifest, &root.join("corpus"), None, Split::Test, &params)?;
    write_report(&root.join("report.tsv"), &report)?;
    for row in &report.rows {
        println!(
            "mcd[{}] = {:.3} +/- {:.3} dB over {} clips",
            row.environment, row.mean, row.std, row.count
        );
    }

    // 6. Comparison figure against the ground-truth bathroom variant.
    let truth_entry = manifest
        .find(&test_clip.clip_id, EnvironmentLabel::Bathroom)
        .unwrap();
    let truth = read_wav(&root.join("corpus").join(&truth_entry.audio_path))?;
    let clip = |wave: &envfx::audio::Waveform, label: &str| -> envfx::Result<PlotClip> {
        Ok(PlotClip {
            mel: compute_mel(wave, &params)?,
            pitch: estimate_pitch(wave, &params)?,
            energy: compute_energy(wave, &params)?,
            label: label.to_string(),
        })
    };
    plot_comparison(
        &clip(&converted, "converted")?,
        &clip(&truth, "ground truth")?,
        &root.join("comparison.png"),
    )?;
    println!("figure written to {}", root.join("comparison.png").display());
    Ok(())
}
