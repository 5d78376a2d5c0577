//! Render a comparison figure: clean speech next to its reverberant
//! version, with pitch and energy contours overlaid.
//!
//! ```bash
//! cargo run --release --example plot_report
//! ```

use envfx::audio::{synth_speech, SynthSpec};
use envfx::dataset::{apply_rir, synthesize_rir, EnvironmentLabel};
use envfx::evaluation::{plot_comparison, PlotClip};
use envfx::features::{compute_energy, compute_mel, estimate_pitch, StftParams};

fn main() -> envfx::Result<()> {
    let out = std::path::Path::new("examples_out");
    std::fs::create_dir_all(out).expect("create output directory");
    let params = StftParams::default();

    let clean = synth_speech(
        &SynthSpec {
            duration_secs: 1.1,
            ..SynthSpec::default()
        },
        11,
    );
    let rir = synthesize_rir(EnvironmentLabel::Cave, 2.5, 0.15, 7)?;
    let wet = apply_rir(&clean, &rir)?;

    let clip = |wave: &envfx::audio::Waveform, label: &str| -> envfx::Result<PlotClip> {
        Ok(PlotClip {
            mel: compute_mel(wave, &params)?,
            pitch: estimate_pitch(wave, &params)?,
            energy: compute_energy(wave, &params)?,
            label: label.to_string(),
        })
    };

    let path = out.join("clean_vs_cave.png");
    plot_comparison(&clip(&clean, "clean")?, &clip(&wet, "cave")?, &path)?;
    println!("figure written to {}", path.display());
    Ok(())
}
