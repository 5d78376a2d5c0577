//! Overfit a tiny model on a tiny corpus and watch the losses fall.
//!
//! ```bash
//! cargo run --release --example train_overfit -- [steps]
//! ```
//!
//! Defaults to 400 joint-phase steps; pass a step count to train longer.

use envfx::audio::{synth_speech, write_wav, SynthSpec};
use envfx::dataset::{build_corpus, BuildOptions};
use envfx::features::{extract_features, StftParams};
use envfx::model::{Model, ModelConfig};
use envfx::training::{train, TrainConfig};

fn main() -> envfx::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400);

    let root = std::path::Path::new("examples_out/train_overfit");
    let clean = root.join("clean");
    std::fs::create_dir_all(&clean).expect("create clean directory");
    for i in 0..8u64 {
        let spec = SynthSpec {
            duration_secs: 0.65 + 0.04 * i as f64,
            base_f0: 130.0 + 15.0 * i as f64,
            ..SynthSpec::default()
        };
        write_wav(&clean.join(format!("clip{i}.wav")), &synth_speech(&spec, i))?;
    }
    let options = BuildOptions {
        seed: 77,
        split_ratios: (0.75, 0.0, 0.25),
        max_frames: 96,
        ..BuildOptions::default()
    };
    let manifest = build_corpus(&clean, &root.join("corpus"), &options)?;
    let features = extract_features(
        &manifest,
        &root.join("corpus"),
        &root.join("features"),
        &StftParams::default(),
        96,
    )?;

    let model = Model::new(ModelConfig {
        energy_max: features.energy_max,
        ..ModelConfig::toy()
    })?;
    let cfg = TrainConfig {
        batch_size: 4,
        total_steps: steps,
        checkpoint_every: steps.max(1),
        phase1_steps: Some(0),
        phase2_steps: Some(0),
        seed: 42,
        ..TrainConfig::default()
    };

    println!("training {steps} joint steps on 8 clips x 5 environments ...");
    let outcome = train(&model, &cfg, &features, &root.join("train"), None)?;
    for (i, v) in outcome.history.iter().enumerate() {
        if i % (steps as usize / 10).max(1) == 0 || i + 1 == outcome.history.len() {
            println!(
                "step {i:>5}  recon {:.4}  pitch {:.4}  energy {:.4}  advC {:.4}  advE {:.4}",
                v.recon, v.pitch, v.energy, v.adv_content, v.adv_effect
            );
        }
    }
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}
