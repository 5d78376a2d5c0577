//! Band-limited sample-rate conversion.

use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Half-width of the sinc kernel in zero crossings.
const SINC_ZEROS: usize = 32;

/// Resample with a Hann-windowed sinc kernel.
///
/// The kernel cutoff tracks the lower of the two Nyquist frequencies, so
/// downsampling is anti-aliased. Output length is `round(len * to / from)`,
/// which keeps the duration within one sample period of the input.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wave.is_empty() {
        return Err(Error::Audio("cannot resample an empty waveform".into()));
    }
    if target_rate == 0 {
        return Err(Error::Audio("target sample rate must be positive".into()));
    }
    if target_rate == wave.sample_rate() {
        return Ok(wave.clone());
    }

    let from = wave.sample_rate() as f64;
    let to = target_rate as f64;
    let ratio = to / from;
    let out_len = (wave.len() as f64 * ratio).round() as usize;

    // Cutoff relative to the input rate; < 1 only when downsampling.
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZEROS as f64 / cutoff;

    let x = wave.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio; // position in input samples
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(x.len().saturating_sub(1));
        let mut acc = 0.0;
        for (m, &xm) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - m as f64;
            acc += xm * windowed_sinc(d, cutoff, half_width);
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

fn windowed_sinc(d: f64, cutoff: f64, half_width: f64) -> f64 {
    let u = d / half_width;
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * u).cos());
    cutoff * sinc(cutoff * d) * window
}

fn sinc(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        1.0
    } else {
        (PI * v).sin() / (PI * v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::TARGET_SAMPLE_RATE;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn sine(freq: f64, rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    /// Frequency of the strongest FFT bin.
    fn dominant_freq(wave: &Waveform) -> f64 {
        let n = wave.len();
        let mut buf: Vec<Complex<f64>> = wave
            .samples()
            .iter()
            .map(|&s| Complex::new(s, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (idx, _) = buf
            .iter()
            .take(n / 2)
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
            .unwrap();
        idx as f64 * wave.sample_rate() as f64 / n as f64
    }

    #[test]
    fn identity_rate_returns_identical_samples() {
        let w = sine(440.0, TARGET_SAMPLE_RATE, 1.0);
        let r = resample(&w, TARGET_SAMPLE_RATE).unwrap();
        assert_eq!(w.samples(), r.samples());
    }

    #[test]
    fn downsample_preserves_tone_frequency() {
        let w = sine(440.0, 44100, 1.0);
        let r = resample(&w, 22050).unwrap();
        assert_eq!(r.sample_rate(), 22050);
        assert_eq!(r.len(), 22050);
        let f = dominant_freq(&r);
        assert!((f - 440.0).abs() < 2.0, "dominant bin at {f} Hz");
    }

    #[test]
    fn upsample_length_arithmetic() {
        let w = sine(200.0, 16000, 0.5);
        let r = resample(&w, 22050).unwrap();
        let expect = (0.5_f64 * 22050.0).round() as usize;
        assert!((r.len() as i64 - expect as i64).abs() <= 1);
    }

    #[test]
    fn rejects_empty_input() {
        let w = Waveform::new(vec![], 16000).unwrap();
        assert!(resample(&w, 22050).is_err());
    }

    #[test]
    fn downsample_removes_out_of_band_tone() {
        // 15 kHz is above the 11.025 kHz output Nyquist; the anti-alias
        // filter must suppress it rather than let it fold back.
        let w = sine(15000.0, 44100, 0.5);
        let r = resample(&w, 22050).unwrap();
        let rms: f64 =
            (r.samples().iter().map(|s| s * s).sum::<f64>() / r.len() as f64).sqrt();
        assert!(rms < 0.02, "aliased energy rms = {rms}");
    }
}
