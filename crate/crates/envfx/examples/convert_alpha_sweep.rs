//! Sweep the effect-strength factor and measure how the output moves.
//!
//! ```bash
//! cargo run --release --example convert_alpha_sweep -- [checkpoint.ckpt]
//! ```
//!
//! With a trained checkpoint the sweep shows real effect interpolation;
//! without one it runs a freshly initialized model, which still
//! demonstrates the continuity of the conversion in alpha.

use envfx::audio::{synth_speech, SynthSpec};
use envfx::features::StftParams;
use envfx::inference::{convert_mel, ConversionRequest};
use envfx::model::{checkpoint, Model, ModelConfig};
use envfx::training::configs_from_checkpoint;

fn main() -> envfx::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => {
            let data = checkpoint::load_checkpoint(std::path::Path::new(&path))?;
            let (cfg, _) = configs_from_checkpoint(&data)?;
            let model = Model::new(cfg)?;
            let registry = model.registry();
            checkpoint::restore_model(&model, &registry, &data)?;
            println!("loaded checkpoint {path}");
            model
        }
        None => {
            println!("no checkpoint given; using a freshly initialized toy model");
            Model::new(ModelConfig::toy())?
        }
    };

    let params = StftParams::default();
    let source = synth_speech(
        &SynthSpec {
            duration_secs: 0.8,
            ..SynthSpec::default()
        },
        1,
    );
    let reference = synth_speech(
        &SynthSpec {
            duration_secs: 0.9,
            base_f0: 220.0,
            ..SynthSpec::default()
        },
        2,
    );

    let convert_at = |alpha: f64| {
        convert_mel(
            &ConversionRequest {
                source: source.clone(),
                reference: reference.clone(),
                alpha,
                target_env: None,
            },
            &model,
            &params,
        )
    };

    let baseline = convert_at(0.0)?;
    println!("alpha   mean|mel - mel(alpha=0)|");
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0] {
        let mel = convert_at(alpha)?;
        let dist: f64 = mel
            .frames()
            .iter()
            .zip(baseline.frames().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / mel.frames().len() as f64;
        println!("{alpha:<7} {dist:.6}");
    }
    Ok(())
}
