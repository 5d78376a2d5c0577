//! Parametric room impulse responses and reverb application.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use super::EnvironmentLabel;
use crate::audio::{Waveform, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Samples between the direct path and the start of the reverberant tail.
pub const PRE_DELAY_SAMPLES: usize = 20;

/// Amplitude decay exponent: exp(-6.9 * t / rt60) is -60 dB at t = rt60.
const DECAY_EXPONENT: f64 = 6.9;

/// Peak level applied after convolution.
const WET_PEAK: f64 = 0.95;

/// A synthesized or imported impulse response with environment metadata.
#[derive(Debug, Clone)]
pub struct RoomImpulseResponse {
    pub taps: Vec<f64>,
    pub environment: EnvironmentLabel,
    pub rt60: f64,
    pub sample_rate: u32,
}

impl RoomImpulseResponse {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Fraction of total tap energy that arrives after `secs`.
    pub fn tail_energy_ratio(&self, secs: f64) -> f64 {
        let cut = ((secs * self.sample_rate as f64) as usize).min(self.taps.len());
        let total: f64 = self.taps.iter().map(|t| t * t).sum();
        if total == 0.0 {
            return 0.0;
        }
        let tail: f64 = self.taps[cut..].iter().map(|t| t * t).sum();
        tail / total
    }
}

/// Acoustic presets for the four reverberant environments.
#[derive(Debug, Clone, Copy)]
pub struct EnvironmentPreset {
    pub environment: EnvironmentLabel,
    pub rt60: f64,
    /// Direct-to-reverberant gain of the noise tail.
    pub reverb_gain: f64,
}

impl EnvironmentPreset {
    /// Default presets: distinct decay times, livelier gain for the small
    /// hard-walled room.
    pub fn defaults() -> [EnvironmentPreset; 4] {
        [
            EnvironmentPreset {
                environment: EnvironmentLabel::Bathroom,
                rt60: 0.5,
                reverb_gain: 0.35,
            },
            EnvironmentPreset {
                environment: EnvironmentLabel::Classroom,
                rt60: 0.7,
                reverb_gain: 0.22,
            },
            EnvironmentPreset {
                environment: EnvironmentLabel::Gallery,
                rt60: 1.5,
                reverb_gain: 0.18,
            },
            EnvironmentPreset {
                environment: EnvironmentLabel::Cave,
                rt60: 2.5,
                reverb_gain: 0.15,
            },
        ]
    }

    pub fn default_for(env: EnvironmentLabel) -> Option<EnvironmentPreset> {
        EnvironmentPreset::defaults()
            .into_iter()
            .find(|p| p.environment == env)
    }
}

/// Synthesize an exponentially decaying Gaussian-noise impulse response.
///
/// Tap 0 is the unit direct path; after a short pre-delay the tail follows
/// `gain * xi_n * exp(-6.9 * n / (rt60 * fs))` with `xi_n` standard normal
/// from the seeded generator. Deterministic for a fixed
/// (environment, rt60, gain, seed). If an unlucky draw would push a tail
/// tap above the direct path, the whole tail is rescaled to keep tap 0 the
/// global maximum; the decay slope is unaffected.
pub fn synthesize_rir(
    environment: EnvironmentLabel,
    rt60: f64,
    reverb_gain: f64,
    seed: u64,
) -> Result<RoomImpulseResponse> {
    if environment == EnvironmentLabel::Clean {
        return Err(Error::Dataset(
            "the clean environment has no impulse response".into(),
        ));
    }
    if !(rt60 > 0.05 && rt60 <= 5.0) {
        return Err(Error::Dataset(format!(
            "rt60 {rt60} s outside the supported (0.05, 5.0] range"
        )));
    }
    if !(reverb_gain > 0.0 && reverb_gain < 1.0) {
        return Err(Error::Dataset(format!(
            "reverb gain {reverb_gain} outside (0, 1)"
        )));
    }

    let fs = TARGET_SAMPLE_RATE as f64;
    // 1.25 * rt60 leaves the post-rt60 tail energy around e^-13.8 of total.
    let len = ((1.25 * rt60 * fs).ceil() as usize).max(PRE_DELAY_SAMPLES + 1);

    // Seed folds in the environment so equal user seeds still give each
    // room its own noise.
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (environment.index() as u64) << 56);
    let mut taps = vec![0.0f64; len];
    taps[0] = 1.0;
    let mut tail_peak = 0.0f64;
    for (n, tap) in taps.iter_mut().enumerate().skip(PRE_DELAY_SAMPLES) {
        let xi = gaussian(&mut rng);
        let envelope = (-DECAY_EXPONENT * n as f64 / (rt60 * fs)).exp();
        *tap = reverb_gain * xi * envelope;
        tail_peak = tail_peak.max(tap.abs());
    }
    if tail_peak >= 1.0 {
        let scale = 0.99 / tail_peak;
        for tap in taps.iter_mut().skip(PRE_DELAY_SAMPLES) {
            *tap *= scale;
        }
    }

    Ok(RoomImpulseResponse {
        taps,
        environment,
        rt60,
        sample_rate: TARGET_SAMPLE_RATE,
    })
}

/// Box-Muller standard normal. Two uniform draws per sample keeps the
/// stream position deterministic.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Convolve a waveform with an impulse response.
///
/// Full linear convolution, truncated back to the input length, then
/// peak-normalized to 0.95 so every labeled variant stays frame-aligned
/// with the clean original and clipping-free.
pub fn apply_rir(wave: &Waveform, rir: &RoomImpulseResponse) -> Result<Waveform> {
    if wave.sample_rate() != rir.sample_rate {
        return Err(Error::Dataset(format!(
            "sample-rate mismatch: waveform {} Hz vs impulse response {} Hz",
            wave.sample_rate(),
            rir.sample_rate
        )));
    }
    let mut wet = convolve(wave.samples(), &rir.taps);
    wet.truncate(wave.len());
    let mut out = Waveform::new(wet, wave.sample_rate())?;
    out.peak_normalize(WET_PEAK);
    Ok(out)
}

/// FFT-based linear convolution of `a` and `b` (length `a + b - 1`).
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut fa: Vec<Complex<f64>> = a
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    let mut fb: Vec<Complex<f64>> = b
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    ifft.process(&mut fa);
    fa.iter()
        .take(out_len)
        .map(|c| c.re / n as f64)
        .collect()
}
