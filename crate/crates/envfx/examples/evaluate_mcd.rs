//! Mel-cepstral distortion basics: the closed-form unit case, reverb
//! sensitivity, and gain invariance.
//!
//! ```bash
//! cargo run --release --example evaluate_mcd
//! ```

use envfx::audio::{synth_speech, SynthSpec, Waveform, TARGET_SAMPLE_RATE};
use envfx::dataset::{apply_rir, synthesize_rir, EnvironmentPreset};
use envfx::evaluation::{compute_mel_cepstra, mcd, mcd_constant};
use envfx::features::StftParams;

fn main() -> envfx::Result<()> {
    let params = StftParams::default();
    let clean = synth_speech(
        &SynthSpec {
            duration_secs: 1.0,
            ..SynthSpec::default()
        },
        3,
    );
    let clean_cep = compute_mel_cepstra(&clean, &params)?;

    println!("mcd constant: {:.6} dB per unit cepstral distance", mcd_constant());
    println!("mcd(clean, clean) = {:.3} dB", mcd(&clean_cep, &clean_cep)?);

    // Reverberation moves the cepstra; heavier rooms move them further.
    println!("\nenvironment  rt60(s)  mcd vs clean (dB)");
    for preset in EnvironmentPreset::defaults() {
        let rir = synthesize_rir(preset.environment, preset.rt60, preset.reverb_gain, 7)?;
        let wet = apply_rir(&clean, &rir)?;
        let wet_cep = compute_mel_cepstra(&wet, &params)?;
        println!(
            "{:<12} {:<8} {:.3}",
            preset.environment.to_string(),
            preset.rt60,
            mcd(&clean_cep, &wet_cep)?
        );
    }

    // Pure gain lives in c0, which the distortion excludes.
    let loud = Waveform::new(
        clean.samples().iter().map(|s| s * 1.3).collect(),
        TARGET_SAMPLE_RATE,
    )?;
    let loud_cep = compute_mel_cepstra(&loud, &params)?;
    println!("\nmcd(clean, 1.3x gain) = {:.4} dB", mcd(&clean_cep, &loud_cep)?);
    Ok(())
}
