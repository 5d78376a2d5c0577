//! Objective evaluation: mel-cepstral distortion and comparison plots.

mod plot;

pub use plot::{plot_comparison, PlotClip};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::audio::{read_wav, resample, Waveform, TARGET_SAMPLE_RATE};
use crate::dataset::{CorpusManifest, EnvironmentLabel, Split, REVERB_ENVIRONMENTS};
use crate::error::{Error, Result};
use crate::features::{compute_mel, MelSpectrogram, StftParams, N_MELS};
use crate::inference::{convert_mel, ConversionRequest};
use crate::model::Model;

/// Cepstral orders kept (c1..c13; c0 carries gain and is excluded).
pub const N_CEPSTRA: usize = 13;

/// dB scaling constant of the mel-cepstral distortion.
pub fn mcd_constant() -> f64 {
    10.0 * 2.0f64.sqrt() / 10.0f64.ln()
}

/// Frame-wise mel-cepstral coefficients, `T x 13`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelCepstra {
    pub frames: Array2<f64>,
}

impl MelCepstra {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// DCT-II of each log-mel frame, keeping coefficients 1..=13.
pub fn cepstra_from_mel(mel: &MelSpectrogram) -> MelCepstra {
    let frames = mel.frames();
    let t = mel.valid_len();
    let n = N_MELS as f64;
    let mut out = Array2::<f64>::zeros((t, N_CEPSTRA));
    for f in 0..t {
        for k in 1..=N_CEPSTRA {
            let mut acc = 0.0;
            for (j, &m) in frames.row(f).iter().enumerate() {
                acc += m * (PI * k as f64 * (j as f64 + 0.5) / n).cos();
            }
            out[[f, k - 1]] = acc;
        }
    }
    MelCepstra { frames: out }
}

/// Mel cepstra straight from a 22.05 kHz waveform, frame-aligned with
/// [`compute_mel`].
pub fn compute_mel_cepstra(wave: &Waveform, params: &StftParams) -> Result<MelCepstra> {
    Ok(cepstra_from_mel(&compute_mel(wave, params)?))
}

/// Mel-cepstral distortion in dB: `(10 sqrt(2) / ln 10)` times the mean
/// per-frame Euclidean distance. Sequences must be frame-aligned already;
/// a length mismatch is an error, never a silent truncation.
pub fn mcd(a: &MelCepstra, b: &MelCepstra) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!(
            "frame count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Evaluation("cannot score empty cepstra".into()));
    }
    let mut total = 0.0;
    for f in 0..a.len() {
        let mut d2 = 0.0;
        for k in 0..N_CEPSTRA {
            let d = a.frames[[f, k]] - b.frames[[f, k]];
            d2 += d * d;
        }
        total += d2.sqrt();
    }
    Ok(mcd_constant() * total / a.len() as f64)
}

/// Per-environment MCD summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentScore {
    pub environment: EnvironmentLabel,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EnvironmentScore>,
}

/// Convert every test clip toward each target environment and score against
/// the ground-truth convolved variant.
///
/// The source is the clip's clean variant; the reference is the target-
/// environment variant of a different test clip (cyclic pick, falling back
/// to the same clip when the split has one utterance). Output and truth
/// share the frame grid by construction, so no time warping is applied.
pub fn evaluate_corpus(
    model: &Model,
    manifest: &CorpusManifest,
    corpus_root: &Path,
    target_env: Option<EnvironmentLabel>,
    split: Split,
    params: &StftParams,
) -> Result<EvalReport> {
    let clip_ids: Vec<String> = {
        let mut seen = std::collections::HashSet::new();
        manifest
            .entries
            .iter()
            .filter(|e| e.split == split)
            .filter(|e| seen.insert(e.clip_id.clone()))
            .map(|e| e.clip_id.clone())
            .collect()
    };
    if clip_ids.is_empty() {
        return Err(Error::Evaluation(format!("split {split} is empty")));
    }

    let targets: Vec<EnvironmentLabel> = match target_env {
        Some(EnvironmentLabel::Clean) => {
            return Err(Error::Evaluation(
                "clean is the identity target; pick a reverberant environment".into(),
            ))
        }
        Some(env) => vec![env],
        None => REVERB_ENVIRONMENTS.to_vec(),
    };

    let load = |clip: &str, env: EnvironmentLabel| -> Result<Waveform> {
        let entry = manifest.find(clip, env).ok_or_else(|| {
            Error::Evaluation(format!("manifest lacks {clip} under {env}"))
        })?;
        let w = read_wav(&corpus_root.join(&entry.audio_path))?;
        resample(&w, TARGET_SAMPLE_RATE)
    };

    let mut rows = Vec::new();
    for env in targets {
        let mut scores = Vec::new();
        for (i, clip) in clip_ids.iter().enumerate() {
            let source = load(clip, EnvironmentLabel::Clean)?;
            let ref_clip = &clip_ids[(i + 1) % clip_ids.len()];
            let reference = load(ref_clip, env)?;
            let truth = load(clip, env)?;

            let converted = convert_mel(
                &ConversionRequest {
                    source,
                    reference,
                    alpha: 1.0,
                    target_env: Some(env),
                },
                model,
                params,
            )?;
            let truth_cep = cepstra_from_mel(&compute_mel(&truth, params)?);
            let conv_cep = cepstra_from_mel(&converted);
            scores.push(mcd(&conv_cep, &truth_cep)?);
        }
        let count = scores.len();
        let mean = scores.iter().sum::<f64>() / count as f64;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / count as f64;
        rows.push(EnvironmentScore {
            environment: env,
            mean,
            std: var.sqrt(),
            count,
        });
    }
    Ok(EvalReport { rows })
}

/// Write the report as a tab-separated table.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "environment\tmcd_mean_db\tmcd_std_db\tcount").map_err(|e| Error::io(path, e))?;
    for r in &report.rows {
        writeln!(
            f,
            "{}\t{:.4}\t{:.4}\t{}",
            r.environment, r.mean, r.std, r.count
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Counts per environment, for report footers.
pub fn split_counts(manifest: &CorpusManifest, split: Split) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        *counts.entry(e.environment.name()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_speech, SynthSpec};
    use proptest::prelude::*;

    fn speech(seed: u64) -> Waveform {
        synth_speech(
            &SynthSpec {
                duration_secs: 0.6,
                ..SynthSpec::default()
            },
            seed,
        )
    }

    #[test]
    fn cepstra_align_with_mel_frames() {
        let p = StftParams::default();
        let w = speech(1);
        let mel = compute_mel(&w, &p).unwrap();
        let cep = compute_mel_cepstra(&w, &p).unwrap();
        assert_eq!(cep.len(), mel.valid_len());
        assert_eq!(cep.frames.ncols(), N_CEPSTRA);
    }

    #[test]
    fn constant_spectrum_has_near_zero_cepstra() {
        // A frame that is flat across mel bands lives entirely in c0.
        let mel = MelSpectrogram::from_frames(Array2::from_elem((4, N_MELS), -1.25)).unwrap();
        let cep = cepstra_from_mel(&mel);
        for v in cep.frames.iter() {
            assert!(v.abs() < 1e-9, "coefficient {v} should vanish");
        }
    }

    #[test]
    fn gain_lives_in_c0_only() {
        // Scaling the waveform shifts every un-floored log-mel cell by a
        // constant, which the k >= 1 DCT basis rows cannot see. Use a
        // broadband signal so no cell sits at the floor.
        let p = StftParams::default();
        let w = speech(7);
        let loud = Waveform::new(
            w.samples().iter().map(|v| v * 1.4142).collect(),
            TARGET_SAMPLE_RATE,
        )
        .unwrap();
        let mel_a = compute_mel(&w, &p).unwrap();
        let mel_b = compute_mel(&loud, &p).unwrap();
        let floor = crate::features::log_floor();
        let a = cepstra_from_mel(&mel_a);
        let b = cepstra_from_mel(&mel_b);
        for f in 0..a.len() {
            let unfloored = mel_a.frames().row(f).iter().all(|&v| v > floor)
                && mel_b.frames().row(f).iter().all(|&v| v > floor);
            if !unfloored {
                continue;
            }
            for k in 0..N_CEPSTRA {
                assert!(
                    (a.frames[[f, k]] - b.frames[[f, k]]).abs() < 1e-6,
                    "frame {f} c{} moved under gain",
                    k + 1
                );
            }
        }
    }

    #[test]
    fn mcd_of_identical_is_zero() {
        let p = StftParams::default();
        let cep = compute_mel_cepstra(&speech(2), &p).unwrap();
        assert_eq!(mcd(&cep, &cep).unwrap(), 0.0);
    }

    #[test]
    fn unit_vector_difference_hits_the_constant() {
        let mut a = Array2::<f64>::zeros((1, N_CEPSTRA));
        let b = Array2::<f64>::zeros((1, N_CEPSTRA));
        a[[0, 4]] = 1.0;
        let d = mcd(&MelCepstra { frames: a }, &MelCepstra { frames: b }).unwrap();
        assert!((d - mcd_constant()).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn mismatched_lengths_error() {
        let a = MelCepstra {
            frames: Array2::zeros((3, N_CEPSTRA)),
        };
        let b = MelCepstra {
            frames: Array2::zeros((4, N_CEPSTRA)),
        };
        assert!(mcd(&a, &b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // Symmetry and interpolation monotonicity of the distortion.
        #[test]
        fn mcd_symmetry_and_interpolation(seed in 0u64..1000) {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let a = MelCepstra {
                frames: Array2::from_shape_fn((5, N_CEPSTRA), |_| rng.random_range(-2.0..2.0)),
            };
            let b = MelCepstra {
                frames: Array2::from_shape_fn((5, N_CEPSTRA), |_| rng.random_range(-2.0..2.0)),
            };
            let ab = mcd(&a, &b).unwrap();
            let ba = mcd(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);

            // mcd(a, a + t(b-a)) is non-decreasing in t.
            let mut prev = 0.0;
            for i in 0..=4 {
                let t = i as f64 / 4.0;
                let mix = MelCepstra {
                    frames: &a.frames * (1.0 - t) + &b.frames * t,
                };
                let d = mcd(&a, &mix).unwrap();
                prop_assert!(d + 1e-12 >= prev, "not monotone at t = {t}");
                prev = d;
            }
        }
    }
}
