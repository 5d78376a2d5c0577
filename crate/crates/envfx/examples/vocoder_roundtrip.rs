//! Mel -> Griffin-Lim -> mel round trip, with the reconstruction error as a
//! function of the iteration count.
//!
//! ```bash
//! cargo run --release --example vocoder_roundtrip
//! ```

use envfx::audio::{synth_speech, write_wav, SynthSpec};
use envfx::features::{compute_mel, StftParams, N_MELS};
use envfx::inference::{GriffinLim, Vocoder};

fn main() -> envfx::Result<()> {
    let out = std::path::Path::new("examples_out/vocoder");
    std::fs::create_dir_all(out).expect("create output directory");

    let wave = synth_speech(
        &SynthSpec {
            duration_secs: 1.2,
            ..SynthSpec::default()
        },
        5,
    );
    let params = StftParams::default();
    let mel = compute_mel(&wave, &params)?;
    write_wav(&out.join("original.wav"), &wave)?;

    println!("iterations  log-mel MAE");
    for iterations in [1, 4, 16, 64] {
        let gl = GriffinLim { iterations, params };
        let resynth = gl.vocode(&mel)?;
        let mel2 = compute_mel(&resynth, &params)?;
        let t = mel.valid_len().min(mel2.valid_len());
        let mae: f64 = (0..t)
            .flat_map(|f| (0..N_MELS).map(move |c| (f, c)))
            .map(|(f, c)| (mel.frames()[[f, c]] - mel2.frames()[[f, c]]).abs())
            .sum::<f64>()
            / (t * N_MELS) as f64;
        println!("{iterations:<11} {mae:.4}");
        write_wav(&out.join(format!("resynth_{iterations:02}.wav")), &resynth)?;
    }
    println!("audio written under {}", out.display());
    Ok(())
}
