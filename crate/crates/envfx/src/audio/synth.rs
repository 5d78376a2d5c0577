//! Seeded speech-like test signals.
//!
//! Examples, smoke tests, and demo corpora need voiced audio with a moving
//! pitch, formant-like coloration, and pauses. A glottal-pulse-plus-filter
//! toy synthesizer is enough for that; it makes no attempt at naturalness.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::Waveform;

/// Parameters for one synthetic utterance.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub duration_secs: f64,
    /// Base fundamental in Hz; the contour wanders around it.
    pub base_f0: f64,
    /// Depth of the slow F0 modulation, in Hz.
    pub f0_swing: f64,
    /// Number of voiced segments separated by short silences.
    pub segments: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sample_rate: super::TARGET_SAMPLE_RATE,
            duration_secs: 1.0,
            base_f0: 160.0,
            f0_swing: 40.0,
            segments: 2,
        }
    }
}

/// Generate a deterministic speech-like waveform for the given seed.
pub fn synth_speech(spec: &SynthSpec, seed: u64) -> Waveform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sr = spec.sample_rate as f64;
    let n = (sr * spec.duration_secs) as usize;

    // Two wandering formant-ish resonances per utterance.
    let f1 = rng.random_range(350.0..900.0);
    let f2 = rng.random_range(1200.0..2600.0);
    let f0_phase = rng.random_range(0.0..2.0 * PI);
    let f0_rate = rng.random_range(1.5..3.5);

    // Voiced/silent segmentation.
    let seg_len = n / spec.segments.max(1);
    let gap = seg_len / 8;

    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let in_seg = i % seg_len.max(1) < seg_len.saturating_sub(gap);
        let f0 = spec.base_f0 + spec.f0_swing * (2.0 * PI * f0_rate * t + f0_phase).sin();
        phase += 2.0 * PI * f0 / sr;

        // Harmonic stack shaped by the two resonances.
        let mut s = 0.0;
        for h in 1..=12 {
            let fh = f0 * h as f64;
            if fh >= sr / 2.0 {
                break;
            }
            let res = resonance(fh, f1) + 0.7 * resonance(fh, f2);
            s += res * (phase * h as f64).sin() / h as f64;
        }
        // A touch of aspiration noise keeps the spectrum broadband.
        s += 0.02 * (rng.random::<f64>() * 2.0 - 1.0);

        // Segment envelope with 10 ms fades.
        let fade = (sr * 0.01) as usize;
        let pos = i % seg_len.max(1);
        let voiced_len = seg_len.saturating_sub(gap);
        let env = if !in_seg {
            0.0
        } else if pos < fade {
            pos as f64 / fade as f64
        } else if pos + fade > voiced_len {
            voiced_len.saturating_sub(pos) as f64 / fade as f64
        } else {
            1.0
        };
        samples.push(s * env);
    }

    let mut wave = Waveform::new(samples, spec.sample_rate).expect("synthesized samples finite");
    wave.peak_normalize(0.7);
    wave
}

fn resonance(f: f64, center: f64) -> f64 {
    let bw = 250.0;
    1.0 / (1.0 + ((f - center) / bw).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SynthSpec::default();
        let a = synth_speech(&spec, 7);
        let b = synth_speech(&spec, 7);
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn different_seeds_differ() {
        let spec = SynthSpec::default();
        let a = synth_speech(&spec, 1);
        let b = synth_speech(&spec, 2);
        assert_ne!(a.samples(), b.samples());
    }

    #[test]
    fn peak_is_bounded() {
        let w = synth_speech(&SynthSpec::default(), 3);
        assert!(w.peak() <= 0.7 + 1e-12);
    }
}
