//! Reference-conditioned conversion.
//!
//! Encode the source, extract the reference's effect spectrum, scale it by
//! the strength factor, fuse, decode, and (optionally) vocode. Stateless
//! given a loaded model; any number of conversions may run concurrently.

mod vocoder;

pub use vocoder::{read_mel_file, write_mel_file, ExternalVocoder, GriffinLim, Vocoder};

use ndarray::{Array2, Array3, Axis};

use crate::audio::{resample, Waveform, TARGET_SAMPLE_RATE};
use crate::dataset::EnvironmentLabel;
use crate::error::{Error, Result};
use crate::features::{compute_mel, MelSpectrogram, StftParams, N_MELS};
use crate::model::Model;
use crate::nn::{ops, Tensor};

/// One conversion job.
#[derive(Debug, Clone)]
pub struct ConversionRequest {
    pub source: Waveform,
    pub reference: Waveform,
    /// Effect strength in `[0, 2]`; 1 reproduces the reference's effect,
    /// 0 applies no effect condition at all.
    pub alpha: f64,
    /// Metadata only; carried into reports.
    pub target_env: Option<EnvironmentLabel>,
}

/// Convert and return the un-padded output mel (source frame count).
pub fn convert_mel(req: &ConversionRequest, model: &Model, params: &StftParams) -> Result<MelSpectrogram> {
    if !(0.0..=2.0).contains(&req.alpha) {
        return Err(Error::Inference(format!(
            "alpha = {} outside [0, 2]",
            req.alpha
        )));
    }
    let max_frames = model.config.max_frames;

    let source = resample(&req.source, TARGET_SAMPLE_RATE)?;
    let reference = resample(&req.reference, TARGET_SAMPLE_RATE)?;

    let src_mel = compute_mel(&source, params)?;
    let t_src = src_mel.valid_len();
    if t_src > max_frames {
        return Err(Error::Inference(format!(
            "source is {t_src} frames, over the {max_frames} maximum; \
             split it into shorter clips and convert them separately"
        )));
    }

    // Long references are center neighborhoods; effect statistics are global.
    let ref_mel = center_crop(&compute_mel(&reference, params)?, max_frames);

    let (x, x_mask) = to_batch(&src_mel.pad_to(max_frames)?);
    let (y, y_mask) = to_batch(&ref_mel.pad_to(max_frames)?);
    let xt = Tensor::constant(x.into_dyn());
    let yt = Tensor::constant(y.into_dyn());

    let enc = model.encode(&xt, &x_mask)?;
    let effect = model.extract_effect(&yt, &y_mask, false)?;
    let cond = model.encode_effect(&effect, req.alpha, &y_mask)?;
    let var = model.variance_forward(&enc, &x_mask, None);
    let z = ops::add(&ops::add(&enc, &cond), &var.embedding);
    let out = model.decode(&z, &x_mask);

    let full = out.value();
    let full = full.index_axis(Axis(0), 0);
    let mut frames = Array2::<f64>::zeros((t_src, N_MELS));
    frames.assign(&full.slice(ndarray::s![..t_src, ..]));
    MelSpectrogram::from_frames(frames)
}

/// Convert and synthesize a waveform through the given vocoder.
pub fn convert(
    req: &ConversionRequest,
    model: &Model,
    params: &StftParams,
    vocoder: &dyn Vocoder,
) -> Result<(MelSpectrogram, Waveform)> {
    let mel = convert_mel(req, model, params)?;
    let wave = vocoder.vocode(&mel)?;
    Ok((mel, wave))
}

fn center_crop(mel: &MelSpectrogram, max_frames: usize) -> MelSpectrogram {
    let t = mel.valid_len();
    if t <= max_frames {
        return mel.clone();
    }
    let start = (t - max_frames) / 2;
    let frames = mel
        .frames()
        .slice(ndarray::s![start..start + max_frames, ..])
        .to_owned();
    MelSpectrogram::from_frames(frames).expect("crop preserves validity")
}

fn to_batch(mel: &MelSpectrogram) -> (Array3<f64>, Array2<bool>) {
    let stored = mel.stored_len();
    let mut x = Array3::<f64>::zeros((1, stored, N_MELS));
    x.index_axis_mut(Axis(0), 0).assign(mel.frames());
    let mut mask = Array2::from_elem((1, stored), false);
    for ti in 0..mel.valid_len() {
        mask[[0, ti]] = true;
    }
    (x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_speech, SynthSpec};
    use crate::model::ModelConfig;

    fn toy_model() -> Model {
        Model::new(ModelConfig::toy()).unwrap()
    }

    fn short_clip(seed: u64) -> Waveform {
        synth_speech(
            &SynthSpec {
                duration_secs: 0.8,
                ..SynthSpec::default()
            },
            seed,
        )
    }

    #[test]
    fn output_frame_count_matches_source() {
        let model = toy_model();
        let req = ConversionRequest {
            source: short_clip(1),
            reference: short_clip(2),
            alpha: 1.0,
            target_env: None,
        };
        let p = StftParams::default();
        let mel = convert_mel(&req, &model, &p).unwrap();
        let src_mel = compute_mel(&resample(&req.source, TARGET_SAMPLE_RATE).unwrap(), &p).unwrap();
        assert_eq!(mel.valid_len(), src_mel.valid_len());
    }

    #[test]
    fn alpha_zero_ignores_reference_content() {
        let model = toy_model();
        let p = StftParams::default();
        let source = short_clip(3);
        let a = convert_mel(
            &ConversionRequest {
                source: source.clone(),
                reference: short_clip(4),
                alpha: 0.0,
                target_env: None,
            },
            &model,
            &p,
        )
        .unwrap();
        let b = convert_mel(
            &ConversionRequest {
                source,
                reference: short_clip(5),
                alpha: 0.0,
                target_env: None,
            },
            &model,
            &p,
        )
        .unwrap();
        assert_eq!(a.frames(), b.frames(), "alpha = 0 must be reference-independent");
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let model = toy_model();
        let req = ConversionRequest {
            source: short_clip(1),
            reference: short_clip(2),
            alpha: 2.5,
            target_env: None,
        };
        assert!(convert_mel(&req, &model, &StftParams::default()).is_err());
    }

    #[test]
    fn overlong_source_rejected_with_guidance() {
        let model = toy_model(); // max_frames = 96
        let long = synth_speech(
            &SynthSpec {
                duration_secs: 1.5,
                ..SynthSpec::default()
            },
            9,
        );
        let req = ConversionRequest {
            source: long.clone(),
            reference: short_clip(2),
            alpha: 1.0,
            target_env: None,
        };
        let err = convert_mel(&req, &model, &StftParams::default()).unwrap_err();
        assert!(format!("{err}").contains("shorter clips"));
    }

    #[test]
    fn long_reference_is_center_cropped_not_rejected() {
        let model = toy_model();
        let req = ConversionRequest {
            source: short_clip(1),
            reference: synth_speech(
                &SynthSpec {
                    duration_secs: 2.0,
                    ..SynthSpec::default()
                },
                10,
            ),
            alpha: 1.0,
            target_env: None,
        };
        assert!(convert_mel(&req, &model, &StftParams::default()).is_ok());
    }

    #[test]
    fn conversion_is_deterministic() {
        let model = toy_model();
        let p = StftParams::default();
        let req = ConversionRequest {
            source: short_clip(12),
            reference: short_clip(13),
            alpha: 1.0,
            target_env: None,
        };
        let a = convert_mel(&req, &model, &p).unwrap();
        let b = convert_mel(&req, &model, &p).unwrap();
        assert_eq!(a.frames(), b.frames());
    }

    #[test]
    fn alpha_continuity_near_one() {
        let model = toy_model();
        let p = StftParams::default();
        let source = short_clip(20);
        let reference = short_clip(21);
        let at = |alpha: f64| {
            convert_mel(
                &ConversionRequest {
                    source: source.clone(),
                    reference: reference.clone(),
                    alpha,
                    target_env: None,
                },
                &model,
                &p,
            )
            .unwrap()
        };
        let base = at(1.0);
        let half = at(0.5);
        let near = at(1.0 - 1e-3);
        let max_diff = |a: &MelSpectrogram, b: &MelSpectrogram| {
            a.frames()
                .iter()
                .zip(b.frames().iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let far = max_diff(&base, &half);
        let close = max_diff(&base, &near);
        // An empirical Lipschitz bound from the 0.5-step controls the
        // 1e-3-step: the output must move proportionally less.
        let lipschitz = far / 0.5;
        assert!(
            close <= (lipschitz * 1e-3).max(1e-9) * 10.0,
            "output jumps at alpha=1: {close} vs bound {}",
            lipschitz * 1e-3
        );
    }
}
