//! Generate the four environment impulse responses and report their decay
//! behavior.
//!
//! ```bash
//! cargo run --release --example synthesize_rirs
//! ```

use envfx::audio::{write_wav, Waveform, TARGET_SAMPLE_RATE};
use envfx::dataset::{synthesize_rir, EnvironmentPreset};

fn main() -> envfx::Result<()> {
    let out = std::path::Path::new("examples_out/rirs");
    std::fs::create_dir_all(out).expect("create output directory");

    println!("environment  rt60(s)  taps     tail>50ms  tail>rt60");
    for preset in EnvironmentPreset::defaults() {
        let rir = synthesize_rir(preset.environment, preset.rt60, preset.reverb_gain, 7)?;
        println!(
            "{:<12} {:<8} {:<8} {:<10.4} {:.2e}",
            preset.environment.to_string(),
            preset.rt60,
            rir.len(),
            rir.tail_energy_ratio(0.05),
            rir.tail_energy_ratio(preset.rt60),
        );
        let wave = Waveform::new(rir.taps.clone(), TARGET_SAMPLE_RATE)?;
        write_wav(&out.join(format!("{}.wav", preset.environment)), &wave)?;
    }
    println!("impulse responses written under {}", out.display());
    Ok(())
}
