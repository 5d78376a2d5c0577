//! Short-time Fourier analysis shared by the mel, energy, and vocoder paths.
//!
//! Framing is centered: frame `i` is the window around sample `i * hop`,
//! with zero padding past the signal edges, giving `ceil(len / hop)` frames.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;

/// Analysis parameters. `win_length == n_fft` throughout this crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { n_fft: 1024, hop: 256 }
    }
}

impl StftParams {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Centered-framing frame count: `ceil(len / hop)`.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Complex STFT, `frames x n_bins` (one-sided).
pub fn stft(samples: &[f64], params: &StftParams) -> Array2<Complex<f64>> {
    let n_fft = params.n_fft;
    let half = n_fft / 2;
    let n_frames = params.frame_count(samples.len());
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let mut out = Array2::zeros((n_frames, params.n_bins()));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..n_frames {
        let center = f * params.hop;
        for (j, b) in buf.iter_mut().enumerate() {
            let idx = center as i64 + j as i64 - half as i64;
            let s = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *b = Complex::new(s * window[j], 0.0);
        }
        fft.process(&mut buf);
        for (k, &v) in buf.iter().take(params.n_bins()).enumerate() {
            out[[f, k]] = v;
        }
    }
    out
}

/// Magnitude STFT, `frames x n_bins`.
pub fn stft_magnitudes(samples: &[f64], params: &StftParams) -> Array2<f64> {
    stft(samples, params).mapv(|c| c.norm())
}

/// Inverse STFT by weighted overlap-add, undoing the centered framing.
///
/// Output length is `frames * hop`.
pub fn istft(spec: &Array2<Complex<f64>>, params: &StftParams) -> Vec<f64> {
    let n_fft = params.n_fft;
    let half = n_fft / 2;
    let n_bins = params.n_bins();
    assert_eq!(spec.ncols(), n_bins, "spectrum width must be n_fft/2+1");
    let n_frames = spec.nrows();
    let window = hann(n_fft);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);

    let padded_len = (n_frames.saturating_sub(1)) * params.hop + n_fft;
    let mut acc = vec![0.0f64; padded_len];
    let mut wsum = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    for f in 0..n_frames {
        // Rebuild the full spectrum from the one-sided half.
        for k in 0..n_bins {
            buf[k] = spec[[f, k]];
        }
        for k in n_bins..n_fft {
            buf[k] = spec[[f, n_fft - k]].conj();
        }
        ifft.process(&mut buf);
        let start = f * params.hop;
        for j in 0..n_fft {
            let v = buf[j].re / n_fft as f64;
            acc[start + j] += v * window[j];
            wsum[start + j] += window[j] * window[j];
        }
    }

    // Trim the half-window of center padding and normalize.
    let out_len = n_frames * params.hop;
    let mut out = vec![0.0f64; out_len];
    for (i, o) in out.iter_mut().enumerate() {
        let j = i + half;
        if j < padded_len && wsum[j] > 1e-9 {
            *o = acc[j] / wsum[j];
        }
    }
    out
}
