//! Deterministic audio front-end: mel spectrograms, pitch and energy
//! contours, fixed-length padding, and the on-disk feature cache.
//!
//! All operations are pure functions of their inputs and safe to call from
//! any number of threads.

mod cache;
mod mel;
mod prosody;
pub mod stft;

pub use cache::{extract_features, load_features, read_record, write_record, FeatureRecord,
                FeatureSet, FEATURES_MANIFEST};
pub use mel::{compute_mel, log_floor, mel_band_range, mel_filterbank, MelSpectrogram,
              MEL_FLOOR, MEL_FMAX, N_MELS};
pub use prosody::{compute_energy, estimate_pitch, ProsodyTrack, PITCH_MAX_HZ, PITCH_MIN_HZ};
pub use stft::StftParams;

use crate::error::Result;

/// Pad a mel/prosody pair to `max_frames`, keeping the validity mask.
///
/// Mel rows are padded at the log floor, prosody with zeros. Returns an
/// error when the clip is longer than `max_frames`.
pub fn pad_to_max(
    mel: &MelSpectrogram,
    prosody: &ProsodyTrack,
    max_frames: usize,
) -> Result<(MelSpectrogram, ProsodyTrack)> {
    let padded_mel = mel.pad_to(max_frames)?;
    let padded_prosody = prosody.pad_to(max_frames)?;
    Ok((padded_mel, padded_prosody))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{Waveform, TARGET_SAMPLE_RATE};
    use proptest::prelude::*;

    #[test]
    fn pad_to_max_pads_both_tracks() {
        let w = Waveform::new(
            (0..11025)
                .map(|i| (i as f64 * 0.08).sin() * 0.4)
                .collect(),
            TARGET_SAMPLE_RATE,
        )
        .unwrap();
        let p = StftParams::default();
        let mel = compute_mel(&w, &p).unwrap();
        let pitch = estimate_pitch(&w, &p).unwrap();
        let energy = compute_energy(&w, &p).unwrap();
        let t = mel.valid_len();
        let prosody = ProsodyTrack::new(pitch, energy).unwrap();
        let (pm, pp) = pad_to_max(&mel, &prosody, 1200).unwrap();
        assert_eq!(pm.stored_len(), 1200);
        assert_eq!(pm.valid_len(), t);
        assert_eq!(pp.len(), 1200);
        assert_eq!(pm.pad_mask().iter().filter(|&&b| b).count(), t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // Mel, pitch, and energy always agree on the frame count, and
        // padding round-trips exactly.
        #[test]
        fn frame_alignment_and_pad_roundtrip(len in 512usize..40000, freq in 80.0f64..900.0) {
            let samples: Vec<f64> = (0..len)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin() * 0.5)
                .collect();
            let w = Waveform::new(samples, TARGET_SAMPLE_RATE).unwrap();
            let p = StftParams::default();
            let mel = compute_mel(&w, &p).unwrap();
            let pitch = estimate_pitch(&w, &p).unwrap();
            let energy = compute_energy(&w, &p).unwrap();
            prop_assert_eq!(mel.valid_len(), len.div_ceil(p.hop));
            prop_assert_eq!(pitch.len(), mel.valid_len());
            prop_assert_eq!(energy.len(), mel.valid_len());

            let padded = mel.pad_to(1200).unwrap();
            let unpadded = padded.unpadded();
            prop_assert_eq!(unpadded.frames(), mel.frames());
        }

        // Positive homogeneity of the energy contour.
        #[test]
        fn energy_homogeneity(scale in 0.1f64..4.0) {
            let samples: Vec<f64> = (0..6000).map(|i| (i as f64 * 0.11).sin() * 0.2).collect();
            let scaled: Vec<f64> = samples.iter().map(|v| v * scale).collect();
            let p = StftParams::default();
            let a = compute_energy(&Waveform::new(samples, TARGET_SAMPLE_RATE).unwrap(), &p).unwrap();
            let b = compute_energy(&Waveform::new(scaled, TARGET_SAMPLE_RATE).unwrap(), &p).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                if *x > 1e-12 {
                    prop_assert!((y / (x * scale) - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
