//! Build a small 5x-labeled corpus from synthetic speech clips.
//!
//! ```bash
//! cargo run --release --example build_demo_corpus
//! ```

use envfx::audio::{synth_speech, write_wav, SynthSpec};
use envfx::dataset::{build_corpus, BuildOptions};

fn main() -> envfx::Result<()> {
    let root = std::path::Path::new("examples_out/demo_corpus");
    let clean = root.join("clean");
    std::fs::create_dir_all(&clean).expect("create clean directory");

    for i in 0..6u64 {
        let spec = SynthSpec {
            duration_secs: 0.7 + 0.05 * i as f64,
            base_f0: 120.0 + 20.0 * i as f64,
            ..SynthSpec::default()
        };
        write_wav(&clean.join(format!("clip{i}.wav")), &synth_speech(&spec, i))?;
    }

    let options = BuildOptions {
        seed: 7,
        split_ratios: (0.8, 0.1, 0.1),
        ..BuildOptions::default()
    };
    let manifest = build_corpus(&clean, &root.join("corpus"), &options)?;

    println!(
        "{} clips became {} labeled entries:",
        manifest.clip_ids().len(),
        manifest.len()
    );
    for (env, count) in manifest.counts_per_environment() {
        println!("  {env:<10} {count}");
    }
    println!(
        "manifest at {}",
        root.join("corpus/manifest.tsv").display()
    );
    Ok(())
}
