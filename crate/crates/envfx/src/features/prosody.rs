//! Per-frame pitch and energy contours.

use super::mel::check_rate;
use super::stft::{stft_magnitudes, StftParams};
use crate::audio::Waveform;
use crate::error::{Error, Result};

/// F0 search range in Hz.
pub const PITCH_MIN_HZ: f64 = 50.0;
pub const PITCH_MAX_HZ: f64 = 800.0;

/// Normalized-autocorrelation voicing threshold.
const VOICING_THRESHOLD: f64 = 0.3;

/// Frames whose windowed energy falls below this are unvoiced outright.
const SILENCE_GATE: f64 = 1e-9;

/// Pitch (Hz, 0 = unvoiced) and energy contours, frame-aligned with the
/// mel spectrogram of the same waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack {
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl ProsodyTrack {
    pub fn new(pitch: Vec<f64>, energy: Vec<f64>) -> Result<Self> {
        if pitch.len() != energy.len() {
            return Err(Error::Feature(format!(
                "pitch/energy length mismatch: {} vs {}",
                pitch.len(),
                energy.len()
            )));
        }
        for &p in &pitch {
            if !(p == 0.0 || (PITCH_MIN_HZ..=PITCH_MAX_HZ).contains(&p)) {
                return Err(Error::Feature(format!("pitch value {p} out of range")));
            }
        }
        if energy.iter().any(|&e| !e.is_finite() || e < 0.0) {
            return Err(Error::Feature("energy must be finite and non-negative".into()));
        }
        Ok(Self { pitch, energy })
    }

    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }

    /// Extend both contours to `max_frames` with zeros.
    pub fn pad_to(&self, max_frames: usize) -> Result<ProsodyTrack> {
        if self.len() > max_frames {
            return Err(Error::Feature(format!(
                "prosody track has {} frames, over the {} maximum",
                self.len(),
                max_frames
            )));
        }
        let mut pitch = self.pitch.clone();
        let mut energy = self.energy.clone();
        pitch.resize(max_frames, 0.0);
        energy.resize(max_frames, 0.0);
        Ok(ProsodyTrack { pitch, energy })
    }
}

/// Estimate F0 per frame by normalized autocorrelation.
///
/// Frames follow the mel hop grid (window centered on `i * hop`). Lags in
/// the 50-800 Hz range compete; a normalized correlation under the voicing
/// threshold, or a near-silent window, marks the frame unvoiced (0 Hz).
pub fn estimate_pitch(wave: &Waveform, params: &StftParams) -> Result<Vec<f64>> {
    check_rate(wave)?;
    let sr = wave.sample_rate() as f64;
    let n_frames = params.frame_count(wave.len());
    let win = params.n_fft;
    let half = win / 2;
    let lag_min = (sr / PITCH_MAX_HZ).ceil() as usize;
    let lag_max = (sr / PITCH_MIN_HZ).floor() as usize;

    let samples = wave.samples();
    let mut out = Vec::with_capacity(n_frames);
    let mut frame = vec![0.0f64; win];
    for f in 0..n_frames {
        let center = f * params.hop;
        for (j, slot) in frame.iter_mut().enumerate() {
            let idx = center as i64 + j as i64 - half as i64;
            *slot = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
        }
        out.push(frame_f0(&frame, sr, lag_min, lag_max));
    }
    Ok(out)
}

fn frame_f0(frame: &[f64], sr: f64, lag_min: usize, lag_max: usize) -> f64 {
    let win = frame.len();
    let total: f64 = frame.iter().map(|v| v * v).sum();
    if total < SILENCE_GATE {
        return 0.0;
    }

    // Cumulative squares make the per-lag normalization O(1).
    let mut csq = vec![0.0f64; win + 1];
    for (i, &v) in frame.iter().enumerate() {
        csq[i + 1] = csq[i] + v * v;
    }

    let corr = |lag: usize| -> f64 {
        let n = win - lag;
        let mut num = 0.0;
        for i in 0..n {
            num += frame[i] * frame[i + lag];
        }
        let e0 = csq[n];
        let e1 = csq[win] - csq[lag];
        let denom = (e0 * e1).sqrt();
        if denom < SILENCE_GATE {
            0.0
        } else {
            num / denom
        }
    };

    let lag_max = lag_max.min(win - 1);
    let rs: Vec<f64> = (lag_min..=lag_max).map(corr).collect();
    let r_max = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if r_max < VOICING_THRESHOLD {
        return 0.0;
    }

    // Integer multiples of the true period correlate almost as well as the
    // period itself, and grid effects can even rank them higher. Take the
    // shortest local peak that comes within a hair of the best.
    let near_best = (r_max - 0.01).max(VOICING_THRESHOLD);
    let mut best_lag = 0usize;
    for (i, &r) in rs.iter().enumerate() {
        let is_peak = (i == 0 || r >= rs[i - 1]) && (i + 1 == rs.len() || r >= rs[i + 1]);
        if is_peak && r >= near_best {
            best_lag = lag_min + i;
            break;
        }
    }
    if best_lag == 0 {
        return 0.0;
    }

    // Parabolic refinement around the winning lag.
    let refined = if best_lag > lag_min && best_lag < lag_max {
        let (a, b, c) = (corr(best_lag - 1), corr(best_lag), corr(best_lag + 1));
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            best_lag as f64 + 0.5 * (a - c) / denom
        } else {
            best_lag as f64
        }
    } else {
        best_lag as f64
    };

    (sr / refined).clamp(PITCH_MIN_HZ, PITCH_MAX_HZ)
}

/// Per-frame energy: L2 norm of the magnitude STFT frame.
pub fn compute_energy(wave: &Waveform, params: &StftParams) -> Result<Vec<f64>> {
    check_rate(wave)?;
    let mags = stft_magnitudes(wave.samples(), params);
    Ok(mags
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::TARGET_SAMPLE_RATE;
    use crate::features::compute_mel;
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64) -> Waveform {
        let n = (TARGET_SAMPLE_RATE as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / TARGET_SAMPLE_RATE as f64).sin() * 0.5)
            .collect();
        Waveform::new(s, TARGET_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn sine_220_median_within_5hz() {
        let p = StftParams::default();
        let pitch = estimate_pitch(&tone(220.0, 1.0), &p).unwrap();
        let mut voiced: Vec<f64> = pitch.iter().copied().filter(|&v| v > 0.0).collect();
        assert!(!voiced.is_empty());
        voiced.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = voiced[voiced.len() / 2];
        assert!(
            (215.0..=225.0).contains(&median),
            "median voiced F0 = {median}"
        );
    }

    #[test]
    fn silence_is_all_unvoiced() {
        let w = Waveform::new(vec![0.0; 22050], TARGET_SAMPLE_RATE).unwrap();
        let pitch = estimate_pitch(&w, &StftParams::default()).unwrap();
        assert!(pitch.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voicing_boundary_tracks_tone_segment() {
        let p = StftParams::default();
        let half = 11025usize;
        let mut s: Vec<f64> = (0..half)
            .map(|i| (2.0 * PI * 220.0 * i as f64 / 22050.0).sin() * 0.5)
            .collect();
        s.extend(std::iter::repeat_n(0.0, half));
        let w = Waveform::new(s, TARGET_SAMPLE_RATE).unwrap();
        let pitch = estimate_pitch(&w, &p).unwrap();
        let boundary_frame = half / p.hop; // 43
        for (i, &v) in pitch.iter().enumerate() {
            if i + 2 < boundary_frame {
                assert!(v > 0.0, "frame {i} should be voiced");
            }
            if i > boundary_frame + 2 {
                assert_eq!(v, 0.0, "frame {i} should be unvoiced");
            }
        }
    }

    #[test]
    fn energy_of_silence_is_zero() {
        let w = Waveform::new(vec![0.0; 8192], TARGET_SAMPLE_RATE).unwrap();
        let e = compute_energy(&w, &StftParams::default()).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_scales_linearly_with_gain() {
        let p = StftParams::default();
        let w = tone(330.0, 0.5);
        let w2 = Waveform::new(
            w.samples().iter().map(|v| v * 2.0).collect(),
            TARGET_SAMPLE_RATE,
        )
        .unwrap();
        let a = compute_energy(&w, &p).unwrap();
        let b = compute_energy(&w2, &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            if *x > 0.0 {
                assert!((y / x - 2.0).abs() < 1e-6, "{x} vs {y}");
            } else {
                assert_eq!(*y, 0.0);
            }
        }
    }

    #[test]
    fn impulse_energy_confined_to_covering_frames() {
        let p = StftParams::default();
        let mut s = vec![0.0f64; 22050];
        s[0] = 1.0;
        let w = Waveform::new(s, TARGET_SAMPLE_RATE).unwrap();
        let e = compute_energy(&w, &p).unwrap();
        // Frame f sees sample 0 at window index 512 - f*hop, where the Hann
        // window is nonzero only for strictly positive indices.
        for (f, &v) in e.iter().enumerate() {
            if f * p.hop < p.n_fft / 2 {
                assert!(v > 0.0, "frame {f} covers the impulse");
            } else {
                assert_eq!(v, 0.0, "frame {f} does not cover the impulse");
            }
        }
    }

    #[test]
    fn frame_counts_align_across_features() {
        let p = StftParams::default();
        let w = tone(250.0, 0.73);
        let mel = compute_mel(&w, &p).unwrap();
        let pitch = estimate_pitch(&w, &p).unwrap();
        let energy = compute_energy(&w, &p).unwrap();
        assert_eq!(mel.valid_len(), pitch.len());
        assert_eq!(mel.valid_len(), energy.len());
    }

    #[test]
    fn prosody_pad_roundtrip() {
        let t = ProsodyTrack::new(vec![220.0, 0.0, 230.0], vec![1.0, 0.0, 2.0]).unwrap();
        let padded = t.pad_to(8).unwrap();
        assert_eq!(padded.len(), 8);
        assert_eq!(&padded.pitch[..3], &t.pitch[..]);
        assert_eq!(&padded.pitch[3..], &[0.0; 5]);
        assert!(t.pad_to(2).is_err());
    }
}
