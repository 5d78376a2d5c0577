//! Mel-to-waveform synthesis.
//!
//! The default vocoder is Griffin-Lim phase reconstruction over the
//! pseudo-inverted mel filterbank: self-contained, deterministic for a
//! fixed iteration count, and good enough for objective checks. An
//! external-command hook accepts any higher-fidelity neural vocoder.

use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use rustfft::num_complex::Complex;

use crate::audio::{Waveform, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::stft::{istft, stft, StftParams};
use crate::features::{mel_filterbank, MelSpectrogram, MEL_FMAX, N_MELS};

/// Anything that can turn an (unpadded) mel spectrogram into audio.
pub trait Vocoder {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform>;
}

/// Griffin-Lim phase reconstruction with zero-phase initialization.
pub struct GriffinLim {
    pub iterations: usize,
    pub params: StftParams,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self {
            iterations: 64,
            params: StftParams::default(),
        }
    }
}

impl GriffinLim {
    /// Invert log-mel energies to a linear magnitude spectrogram through the
    /// filterbank pseudo-inverse (negative leakage clamped to zero).
    pub fn mel_to_linear(&self, mel: &MelSpectrogram) -> Array2<f64> {
        let fb = mel_filterbank(N_MELS, self.params.n_fft, TARGET_SAMPLE_RATE, MEL_FMAX);
        let pinv = right_pseudo_inverse(&fb); // n_bins x n_mels
        let energies = mel.frames().mapv(f64::exp); // T x n_mels
        let mut mags = energies.dot(&pinv.t()); // T x n_bins
        mags.mapv_inplace(|v| v.max(0.0));
        mags
    }

    fn reconstruct(&self, mags: &Array2<f64>) -> Vec<f64> {
        let (t, n_bins) = mags.dim();
        // Zero-phase start: spectrum is the real magnitude itself.
        let mut spec = Array2::<Complex<f64>>::zeros((t, n_bins));
        for f in 0..t {
            for k in 0..n_bins {
                spec[[f, k]] = Complex::new(mags[[f, k]], 0.0);
            }
        }
        for _ in 0..self.iterations {
            let wave = istft(&spec, &self.params);
            let est = stft(&wave, &self.params);
            for f in 0..t {
                for k in 0..n_bins {
                    let phase = est[[f, k]].arg();
                    spec[[f, k]] = Complex::from_polar(mags[[f, k]], phase);
                }
            }
        }
        istft(&spec, &self.params)
    }
}

impl Vocoder for GriffinLim {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        if mel.stored_len() != mel.valid_len() {
            return Err(Error::Inference(
                "vocode expects an unpadded mel; call unpadded() first".into(),
            ));
        }
        let mags = self.mel_to_linear(mel);
        let samples = self.reconstruct(&mags);
        Waveform::new(samples, TARGET_SAMPLE_RATE)
    }
}

/// `B^T (B B^T)^{-1}` for a full-row-rank `m x n` matrix (m <= n).
fn right_pseudo_inverse(b: &Array2<f64>) -> Array2<f64> {
    let gram = b.dot(&b.t()); // m x m
    let inv = invert(&gram);
    b.t().dot(&inv)
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap())
            .unwrap();
        if m[[pivot, col]].abs() < 1e-12 {
            panic!("singular matrix in mel filterbank inversion");
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let d = m[[col, col]];
        for k in 0..n {
            m[[col, k]] /= d;
            inv[[col, k]] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = m[[row, col]];
                if f != 0.0 {
                    for k in 0..n {
                        m[[row, k]] -= f * m[[col, k]];
                        inv[[row, k]] -= f * inv[[col, k]];
                    }
                }
            }
        }
    }
    inv
}

/// Runs a user-supplied command to synthesize audio.
///
/// The command string may contain `{mel}` and `{out}` placeholders, replaced
/// by the mel-file path (see [`write_mel_file`]) and the expected output WAV
/// path. The command runs under `sh -c`.
pub struct ExternalVocoder {
    pub command: String,
}

impl Vocoder for ExternalVocoder {
    fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        let dir = std::env::temp_dir().join(format!("envfx-vocoder-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mel_path = dir.join("input.mel");
        let out_path = dir.join("output.wav");
        write_mel_file(&mel_path, mel)?;

        let cmd = self
            .command
            .replace("{mel}", &mel_path.to_string_lossy())
            .replace("{out}", &out_path.to_string_lossy());
        let status = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .status()
            .map_err(|e| Error::Inference(format!("vocoder command failed to start: {e}")))?;
        if !status.success() {
            return Err(Error::Inference(format!(
                "vocoder command exited with {status}"
            )));
        }
        let wave = crate::audio::read_wav(&out_path)?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok(wave)
    }
}

const MEL_MAGIC: &[u8; 8] = b"EFXMEL01";

/// Write a mel spectrogram: magic, frame count (u32), channel count (u32),
/// then row-major f32 log-mel values.
pub fn write_mel_file(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let frames = mel.frames();
    let mut buf = Vec::with_capacity(16 + frames.len() * 4);
    buf.extend_from_slice(MEL_MAGIC);
    buf.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for &v in frames.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mel_file(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Inference(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MEL_MAGIC {
        return Err(bad("not a mel file"));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n != N_MELS {
        return Err(bad("unexpected mel channel count"));
    }
    if bytes.len() != 16 + t * n * 4 {
        return Err(bad("truncated mel data"));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    MelSpectrogram::from_frames(Array2::from_shape_vec((t, n), data).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_speech, SynthSpec};
    use crate::features::compute_mel;

    #[test]
    fn pseudo_inverse_is_right_inverse() {
        let fb = mel_filterbank(N_MELS, 1024, TARGET_SAMPLE_RATE, MEL_FMAX);
        let pinv = right_pseudo_inverse(&fb);
        let ident = fb.dot(&pinv);
        for i in 0..N_MELS {
            for j in 0..N_MELS {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (ident[[i, j]] - expect).abs() < 1e-8,
                    "({i},{j}) = {}",
                    ident[[i, j]]
                );
            }
        }
    }

    #[test]
    fn floor_mel_vocodes_to_near_silence() {
        let mel = MelSpectrogram::from_frames(Array2::from_elem(
            (40, N_MELS),
            crate::features::log_floor(),
        ))
        .unwrap();
        let gl = GriffinLim::default();
        let wave = gl.vocode(&mel).unwrap();
        assert!(wave.peak() < 1e-2, "peak = {}", wave.peak());
    }

    #[test]
    fn output_length_is_frames_times_hop() {
        let mel = MelSpectrogram::from_frames(Array2::from_elem((25, N_MELS), -3.0)).unwrap();
        let gl = GriffinLim {
            iterations: 2,
            ..GriffinLim::default()
        };
        let wave = gl.vocode(&mel).unwrap();
        assert_eq!(wave.len(), 25 * gl.params.hop);
    }

    #[test]
    fn roundtrip_log_mel_error_is_small_on_speech() {
        let spec = SynthSpec {
            duration_secs: 0.8,
            ..SynthSpec::default()
        };
        let wave = synth_speech(&spec, 11);
        let p = StftParams::default();
        let mel = compute_mel(&wave, &p).unwrap();
        let gl = GriffinLim::default();
        let resynth = gl.vocode(&mel).unwrap();
        let mel2 = compute_mel(&resynth, &p).unwrap();

        let t = mel.valid_len().min(mel2.valid_len());
        let mut mae = 0.0;
        for f in 0..t {
            for c in 0..N_MELS {
                mae += (mel.frames()[[f, c]] - mel2.frames()[[f, c]]).abs();
            }
        }
        mae /= (t * N_MELS) as f64;
        assert!(mae <= 0.5, "round-trip log-mel MAE = {mae}");
    }

    #[test]
    fn vocode_is_deterministic() {
        let spec = SynthSpec::default();
        let wave = synth_speech(&spec, 3);
        let mel = compute_mel(&wave, &StftParams::default()).unwrap();
        let gl = GriffinLim {
            iterations: 8,
            ..GriffinLim::default()
        };
        let a = gl.vocode(&mel).unwrap();
        let b = gl.vocode(&mel).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn mel_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mel");
        let mel = MelSpectrogram::from_frames(Array2::from_shape_fn((9, N_MELS), |(i, j)| {
            -(i as f64) - j as f64 * 0.01
        }))
        .unwrap();
        write_mel_file(&path, &mel).unwrap();
        let back = read_mel_file(&path).unwrap();
        assert_eq!(back.valid_len(), 9);
        for (a, b) in mel.frames().iter().zip(back.frames().iter()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn external_vocoder_runs_command() {
        let dir = tempfile::tempdir().unwrap();
        let canned = dir.path().join("canned.wav");
        let wave = synth_speech(&SynthSpec::default(), 5);
        crate::audio::write_wav(&canned, &wave).unwrap();

        let voc = ExternalVocoder {
            command: format!("cp {} {{out}}", canned.display()),
        };
        let mel = MelSpectrogram::from_frames(Array2::from_elem((10, N_MELS), -2.0)).unwrap();
        let out = voc.vocode(&mel).unwrap();
        assert_eq!(out.len(), wave.len());
    }
}
