//! Corpus assembly: every clean clip is emitted under all five environment
//! labels, splits are assigned per underlying utterance, and a line-oriented
//! manifest records the result.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::rir::{apply_rir, synthesize_rir, EnvironmentPreset, RoomImpulseResponse};
use super::{EnvironmentLabel, Split};
use crate::audio::{read_wav, resample, write_wav, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const REJECTS_FILE: &str = "rejects.txt";

/// One corpus clip variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub environment: EnvironmentLabel,
    /// Path relative to the manifest's directory.
    pub audio_path: String,
    pub duration_s: f64,
    pub split: Split,
}

/// The corpus manifest: 5 entries per clean clip.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unique clip ids in manifest order.
    pub fn clip_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.clip_id.as_str()))
            .map(|e| e.clip_id.as_str())
            .collect()
    }

    pub fn counts_per_environment(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.environment.name()).or_insert(0) += 1;
        }
        counts
    }

    pub fn entries_for_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn find(&self, clip_id: &str, env: EnvironmentLabel) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.clip_id == clip_id && e.environment == env)
    }
}

/// Options for [`build_corpus`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub seed: u64,
    pub split_ratios: (f64, f64, f64),
    pub presets: Vec<EnvironmentPreset>,
    /// Clips whose mel frame count would exceed this are rejected.
    pub max_frames: usize,
    pub hop: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 1234,
            split_ratios: (0.98, 0.01, 0.01),
            presets: EnvironmentPreset::defaults().to_vec(),
            max_frames: 1200,
            hop: 256,
        }
    }
}

/// Convolve every readable clip in `clean_dir` with the four environment
/// impulse responses and emit the labeled corpus under `out_dir`.
///
/// Unreadable or over-length clips are skipped with a warning and listed in
/// `rejects.txt`. Splits are assigned per clip id from the seed, so all five
/// variants of an utterance land in the same split.
pub fn build_corpus(
    clean_dir: &Path,
    out_dir: &Path,
    options: &BuildOptions,
) -> Result<CorpusManifest> {
    let (tr, va, te) = options.split_ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr < 0.0 || va < 0.0 || te < 0.0 {
        return Err(Error::Dataset(format!(
            "split ratios ({tr}, {va}, {te}) must be non-negative and sum to 1"
        )));
    }
    if options.presets.len() != 4 {
        return Err(Error::Dataset(format!(
            "expected 4 environment presets, got {}",
            options.presets.len()
        )));
    }

    let mut clip_paths: Vec<PathBuf> = fs::read_dir(clean_dir)
        .map_err(|e| Error::io(clean_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "wav"))
        .collect();
    clip_paths.sort();
    if clip_paths.is_empty() {
        return Err(Error::Dataset(format!(
            "empty corpus: no .wav files in {}",
            clean_dir.display()
        )));
    }

    let rirs: Vec<RoomImpulseResponse> = options
        .presets
        .iter()
        .map(|p| synthesize_rir(p.environment, p.rt60, p.reverb_gain, options.seed))
        .collect::<Result<_>>()?;

    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    // Load and validate clips first so splits are assigned over survivors.
    let mut rejects: Vec<String> = Vec::new();
    let mut clips = Vec::new();
    for path in &clip_paths {
        let clip_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let wave = match read_wav(path) {
            Ok(w) if !w.is_empty() => w,
            Ok(_) => {
                warn!("skipping empty clip {}", path.display());
                rejects.push(format!("{clip_id}\tempty"));
                continue;
            }
            Err(e) => {
                warn!("skipping unreadable clip {}: {e}", path.display());
                rejects.push(format!("{clip_id}\tunreadable: {e}"));
                continue;
            }
        };
        let wave = resample(&wave, TARGET_SAMPLE_RATE)?;
        let frames = wave.len().div_ceil(options.hop);
        if frames > options.max_frames {
            warn!(
                "skipping over-length clip {} ({} frames > {})",
                path.display(),
                frames,
                options.max_frames
            );
            rejects.push(format!("{clip_id}\tover-length: {frames} frames"));
            continue;
        }
        clips.push((clip_id, wave));
    }
    if clips.is_empty() {
        return Err(Error::Dataset("empty corpus: every clip was rejected".into()));
    }

    let splits = assign_splits(clips.len(), options.split_ratios, options.seed);

    let mut entries = Vec::with_capacity(clips.len() * 5);
    for (i, (clip_id, clean)) in clips.iter().enumerate() {
        let split = splits[i];
        let duration = clean.duration_secs();

        let mut emit = |env: EnvironmentLabel, wave: &crate::audio::Waveform| -> Result<()> {
            let rel = format!("audio/{clip_id}__{env}.wav");
            write_wav(&out_dir.join(&rel), wave)?;
            entries.push(ManifestEntry {
                clip_id: clip_id.clone(),
                environment: env,
                audio_path: rel,
                duration_s: duration,
                split,
            });
            Ok(())
        };

        emit(EnvironmentLabel::Clean, clean)?;
        for rir in &rirs {
            let wet = apply_rir(clean, rir)?;
            emit(rir.environment, &wet)?;
        }
    }

    let manifest = CorpusManifest { entries };
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;

    if !rejects.is_empty() {
        let path = out_dir.join(REJECTS_FILE);
        fs::write(&path, rejects.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(manifest)
}

/// Deterministic per-clip split assignment: seeded shuffle, then largest
/// residual rounding of the ratio counts.
fn assign_splits(n: usize, ratios: (f64, f64, f64), seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    order.shuffle(&mut rng);

    let n_train = (ratios.0 * n as f64).round() as usize;
    let n_val = ((ratios.1 * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Write the manifest as a tab-separated table with a header row.
pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "clip_id\tenvironment\taudio_path\tduration_s\tsplit")
        .map_err(|e| Error::io(path, e))?;
    for e in &manifest.entries {
        writeln!(
            f,
            "{}\t{}\t{}\t{:.6}\t{}",
            e.clip_id, e.environment, e.audio_path, e.duration_s, e.split
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Dataset("manifest is empty".into()))?;
    if header != "clip_id\tenvironment\taudio_path\tduration_s\tsplit" {
        return Err(Error::Dataset(format!("unrecognized manifest header: {header}")));
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Dataset(format!(
                "manifest line {} has {} fields, expected 5",
                lineno + 2,
                fields.len()
            )));
        }
        entries.push(ManifestEntry {
            clip_id: fields[0].to_string(),
            environment: fields[1].parse()?,
            audio_path: fields[2].to_string(),
            duration_s: fields[3]
                .parse()
                .map_err(|e| Error::Dataset(format!("bad duration: {e}")))?,
            split: fields[4].parse()?,
        });
    }
    Ok(CorpusManifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_speech, SynthSpec};

    fn make_clean_dir(dir: &Path, n: usize) {
        fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let spec = SynthSpec {
                duration_secs: 0.4,
                ..SynthSpec::default()
            };
            let w = synth_speech(&spec, i as u64);
            write_wav(&dir.join(format!("clip{i:03}.wav")), &w).unwrap();
        }
    }

    #[test]
    fn five_entries_per_clip_with_balanced_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        make_clean_dir(&clean, 10);
        let out = tmp.path().join("corpus");
        let options = BuildOptions {
            split_ratios: (0.8, 0.1, 0.1),
            ..BuildOptions::default()
        };
        let manifest = build_corpus(&clean, &out, &options).unwrap();
        assert_eq!(manifest.len(), 50);
        for (_, count) in manifest.counts_per_environment() {
            assert_eq!(count, 10);
        }
        // Each clip's 5 variants share one split.
        for clip in manifest.clip_ids() {
            let splits: Vec<Split> = manifest
                .entries
                .iter()
                .filter(|e| e.clip_id == clip)
                .map(|e| e.split)
                .collect();
            assert_eq!(splits.len(), 5);
            assert!(splits.iter().all(|s| *s == splits[0]));
        }
    }

    #[test]
    fn split_counts_follow_ratios() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        make_clean_dir(&clean, 10);
        let out = tmp.path().join("corpus");
        let options = BuildOptions {
            split_ratios: (0.8, 0.1, 0.1),
            ..BuildOptions::default()
        };
        let manifest = build_corpus(&clean, &out, &options).unwrap();
        assert_eq!(manifest.entries_for_split(Split::Train).len(), 40);
        assert_eq!(manifest.entries_for_split(Split::Val).len(), 5);
        assert_eq!(manifest.entries_for_split(Split::Test).len(), 5);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        fs::create_dir_all(&clean).unwrap();
        let out = tmp.path().join("corpus");
        let err = build_corpus(&clean, &out, &BuildOptions::default());
        assert!(err.is_err());
        assert!(format!("{}", err.unwrap_err()).contains("empty corpus"));
    }

    #[test]
    fn unreadable_clip_lands_in_rejects() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        make_clean_dir(&clean, 3);
        fs::write(clean.join("broken.wav"), b"not audio").unwrap();
        let out = tmp.path().join("corpus");
        let manifest = build_corpus(&clean, &out, &BuildOptions::default()).unwrap();
        assert_eq!(manifest.len(), 15);
        let rejects = fs::read_to_string(out.join(REJECTS_FILE)).unwrap();
        assert!(rejects.contains("broken"));
    }

    #[test]
    fn manifest_roundtrip_and_closure() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        make_clean_dir(&clean, 4);
        let out = tmp.path().join("corpus");
        let manifest = build_corpus(&clean, &out, &BuildOptions::default()).unwrap();
        let back = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.entries, back.entries);
        // Every listed file exists and decodes to the stated duration.
        for e in &back.entries {
            let w = read_wav(&out.join(&e.audio_path)).unwrap();
            assert!((w.duration_secs() - e.duration_s).abs() < 0.010);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        make_clean_dir(&clean, 5);
        let a = build_corpus(&clean, &tmp.path().join("c1"), &BuildOptions::default()).unwrap();
        let b = build_corpus(&clean, &tmp.path().join("c2"), &BuildOptions::default()).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.clip_id, y.clip_id);
            assert_eq!(x.split, y.split);
        }
    }
}
