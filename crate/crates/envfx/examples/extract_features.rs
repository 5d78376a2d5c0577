//! Corpus to feature cache: mel spectrograms, pitch, and energy.
//!
//! ```bash
//! cargo run --release --example extract_features
//! ```

use envfx::audio::{synth_speech, write_wav, SynthSpec};
use envfx::dataset::{build_corpus, BuildOptions};
use envfx::features::{extract_features, StftParams};

fn main() -> envfx::Result<()> {
    let root = std::path::Path::new("examples_out/features_demo");
    let clean = root.join("clean");
    std::fs::create_dir_all(&clean).expect("create clean directory");
    for i in 0..4u64 {
        let spec = SynthSpec {
            duration_secs: 0.8,
            ..SynthSpec::default()
        };
        write_wav(&clean.join(format!("clip{i}.wav")), &synth_speech(&spec, i))?;
    }
    let manifest = build_corpus(&clean, &root.join("corpus"), &BuildOptions::default())?;

    let set = extract_features(
        &manifest,
        &root.join("corpus"),
        &root.join("features"),
        &StftParams::default(),
        1200,
    )?;

    println!("cached {} records; train-split energy max {:.3}", set.len(), set.energy_max);
    for r in set.records.iter().take(5) {
        let voiced = r.prosody.pitch.iter().filter(|&&p| p > 0.0).count();
        println!(
            "  {:<18} {:>3} frames, {:>3} voiced, mel range [{:.2}, {:.2}]",
            r.record_id(),
            r.frames(),
            voiced,
            r.mel.frames().iter().cloned().fold(f64::INFINITY, f64::min),
            r.mel.frames().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok(())
}
