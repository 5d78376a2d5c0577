//! Log-mel spectrogram extraction.

use ndarray::Array2;

use super::stft::{stft_magnitudes, StftParams};
use crate::audio::{Waveform, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Mel channel count; fixed across the whole pipeline.
pub const N_MELS: usize = 80;

/// Clamp applied to mel energies before the natural log.
pub const MEL_FLOOR: f64 = 1e-5;

/// `ln(MEL_FLOOR)`, the value silent cells take.
pub fn log_floor() -> f64 {
    MEL_FLOOR.ln()
}

/// Upper edge of the mel filterbank in Hz.
pub const MEL_FMAX: f64 = 8000.0;

/// A `frames x 80` log-mel matrix with a validity count for padding.
///
/// `valid` is the real frame count; rows at and past it are padding at the
/// log floor (only present after [`MelSpectrogram::pad_to`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f64>,
    valid: usize,
}

impl MelSpectrogram {
    pub fn from_frames(frames: Array2<f64>) -> Result<Self> {
        if frames.ncols() != N_MELS {
            return Err(Error::Feature(format!(
                "expected {} mel channels, got {}",
                N_MELS,
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Feature("mel spectrogram contains non-finite values".into()));
        }
        let valid = frames.nrows();
        Ok(Self { frames, valid })
    }

    /// Full stored matrix, padding included.
    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    /// Stored length (equals `valid` until padded).
    pub fn stored_len(&self) -> usize {
        self.frames.nrows()
    }

    /// Real (pre-padding) frame count.
    pub fn valid_len(&self) -> usize {
        self.valid
    }

    /// Per-stored-frame validity flags.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.stored_len()).map(|i| i < self.valid).collect()
    }

    /// Pad to `max_frames` rows with log-floor values.
    pub fn pad_to(&self, max_frames: usize) -> Result<MelSpectrogram> {
        if self.valid > max_frames {
            return Err(Error::Feature(format!(
                "clip has {} frames, over the {} maximum; truncate or reject it",
                self.valid, max_frames
            )));
        }
        let mut padded = Array2::from_elem((max_frames, N_MELS), log_floor());
        padded
            .slice_mut(ndarray::s![..self.valid, ..])
            .assign(&self.frames.slice(ndarray::s![..self.valid, ..]));
        Ok(MelSpectrogram {
            frames: padded,
            valid: self.valid,
        })
    }

    /// Drop padding, recovering the original `valid x 80` matrix.
    pub fn unpadded(&self) -> MelSpectrogram {
        MelSpectrogram {
            frames: self.frames.slice(ndarray::s![..self.valid, ..]).to_owned(),
            valid: self.valid,
        }
    }
}

/// Triangular mel filterbank, `n_mels x n_bins`, HTK mel scale, band edges
/// from 0 Hz to `fmax`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmax: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f < center {
                (f - lo) / (center - lo)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Frequency extent `[lo, hi]` of mel band `m`.
pub fn mel_band_range(m: usize, n_mels: usize, fmax: f64) -> (f64, f64) {
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(fmax);
    let edge = |i: usize| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64);
    (edge(m), edge(m + 2))
}

/// Compute the log-mel spectrogram of a 22.05 kHz waveform.
///
/// Mel energies come from the magnitude STFT, are clamped at [`MEL_FLOOR`],
/// and stored as natural logs.
pub fn compute_mel(wave: &Waveform, params: &StftParams) -> Result<MelSpectrogram> {
    check_rate(wave)?;
    let mags = stft_magnitudes(wave.samples(), params);
    let fb = mel_filterbank(N_MELS, params.n_fft, wave.sample_rate(), MEL_FMAX);
    let mel = mags.dot(&fb.t()); // frames x n_mels
    let logged = mel.mapv(|v| v.max(MEL_FLOOR).ln());
    MelSpectrogram::from_frames(logged)
}

pub(crate) fn check_rate(wave: &Waveform) -> Result<()> {
    if wave.sample_rate() != TARGET_SAMPLE_RATE {
        return Err(Error::Feature(format!(
            "expected {} Hz input, got {} Hz; resample first",
            TARGET_SAMPLE_RATE,
            wave.sample_rate()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64) -> Waveform {
        let n = (TARGET_SAMPLE_RATE as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / TARGET_SAMPLE_RATE as f64).sin() * 0.5)
            .collect();
        Waveform::new(s, TARGET_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_87_frames() {
        let mel = compute_mel(&tone(440.0, 1.0), &StftParams::default()).unwrap();
        assert_eq!(mel.valid_len(), 87);
        assert_eq!(mel.frames().ncols(), N_MELS);
    }

    #[test]
    fn silence_sits_at_log_floor() {
        let w = Waveform::new(vec![0.0; 22050], TARGET_SAMPLE_RATE).unwrap();
        let mel = compute_mel(&w, &StftParams::default()).unwrap();
        for &v in mel.frames() {
            assert_eq!(v, log_floor());
        }
    }

    #[test]
    fn tone_energy_lands_in_band_containing_frequency() {
        let mel = compute_mel(&tone(1000.0, 1.0), &StftParams::default()).unwrap();
        let t = mel.valid_len();
        // Interior frames only; edge frames see zero padding.
        for f in 3..t - 3 {
            let row = mel.frames().row(f);
            let (argmax, _) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            let (lo, hi) = mel_band_range(argmax, N_MELS, MEL_FMAX);
            assert!(
                lo <= 1000.0 && 1000.0 <= hi,
                "frame {f}: argmax band {argmax} spans [{lo:.1}, {hi:.1}] Hz"
            );
        }
    }

    #[test]
    fn wrong_sample_rate_rejected() {
        let w = Waveform::new(vec![0.1; 16000], 16000).unwrap();
        assert!(compute_mel(&w, &StftParams::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let w = tone(523.0, 0.7);
        let a = compute_mel(&w, &StftParams::default()).unwrap();
        let b = compute_mel(&w, &StftParams::default()).unwrap();
        assert_eq!(a.frames(), b.frames());
    }

    #[test]
    fn gain_never_decreases_unfloored_cells() {
        let quiet = tone(700.0, 0.5);
        let loud = {
            let s = quiet.samples().iter().map(|v| v * 1.8).collect();
            Waveform::new(s, TARGET_SAMPLE_RATE).unwrap()
        };
        let a = compute_mel(&quiet, &StftParams::default()).unwrap();
        let b = compute_mel(&loud, &StftParams::default()).unwrap();
        for (x, y) in a.frames().iter().zip(b.frames().iter()) {
            if *x > log_floor() {
                assert!(y >= x, "gain decreased a cell: {x} -> {y}");
            }
        }
    }

    #[test]
    fn padding_roundtrip_exact() {
        let mel = compute_mel(&tone(440.0, 1.0), &StftParams::default()).unwrap();
        let padded = mel.pad_to(1200).unwrap();
        assert_eq!(padded.stored_len(), 1200);
        assert_eq!(padded.valid_len(), 87);
        assert_eq!(padded.pad_mask().iter().filter(|&&b| b).count(), 87);
        let back = padded.unpadded();
        assert_eq!(back.frames(), mel.frames());
    }

    #[test]
    fn pad_rejects_overlong_clip() {
        let frames = Array2::from_elem((1201, N_MELS), log_floor());
        let mel = MelSpectrogram::from_frames(frames).unwrap();
        assert!(mel.pad_to(1200).is_err());
        let ok = MelSpectrogram::from_frames(Array2::from_elem((1200, N_MELS), log_floor()))
            .unwrap();
        assert!(ok.pad_to(1200).is_ok());
    }
}
