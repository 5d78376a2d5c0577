//! Audio primitives: waveforms, WAV I/O, resampling, and synthetic test
//! signals.

mod resample;
mod synth;
mod wav;

pub use resample::resample;
pub use synth::{synth_speech, SynthSpec};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Sample rate every pipeline stage operates at.
pub const TARGET_SAMPLE_RATE: u32 = 22050;

/// Mono audio samples plus their sample rate.
///
/// Samples are kept as `f64` internally; disk I/O converts to/from 16-bit
/// PCM at the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Build a waveform, validating that every sample is finite.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Rescale so the peak magnitude equals `target`. Silence is left as-is.
    pub fn peak_normalize(&mut self, target: f64) {
        let peak = self.peak();
        if peak > 0.0 {
            let g = target / peak;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}
