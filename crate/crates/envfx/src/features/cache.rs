//! On-disk feature cache.
//!
//! One binary record per corpus entry plus a human-readable manifest.
//!
//! Record format (`.feat`, version 1, little-endian):
//!
//! ```text
//! magic     8 bytes  "EFXFEAT1"
//! id_len    u32      followed by that many UTF-8 bytes (record id)
//! env       u8       environment index
//! split     u8       0 train / 1 val / 2 test
//! frames    u32      real frame count T
//! n_mels    u32      always 80
//! mel       T*80 f32 row-major log-mel values
//! pitch     T f32    Hz, 0 = unvoiced
//! energy    T f32
//! ```
//!
//! The manifest (`features.tsv`) lists every record with a `#`-prefixed
//! header carrying the cache version and the training-split energy maximum
//! (used to place the energy embedding bins).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::mel::{MelSpectrogram, N_MELS};
use super::prosody::ProsodyTrack;
use super::stft::StftParams;
use crate::audio::{read_wav, resample, TARGET_SAMPLE_RATE};
use crate::dataset::{CorpusManifest, EnvironmentLabel, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EFXFEAT1";
pub const FEATURES_MANIFEST: &str = "features.tsv";

/// Features for one corpus entry (one clip under one environment label).
#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub clip_id: String,
    pub environment: EnvironmentLabel,
    pub split: Split,
    /// Unpadded log-mel, `T x 80`.
    pub mel: MelSpectrogram,
    pub prosody: ProsodyTrack,
}

impl FeatureRecord {
    pub fn record_id(&self) -> String {
        format!("{}__{}", self.clip_id, self.environment)
    }

    pub fn frames(&self) -> usize {
        self.mel.valid_len()
    }
}

/// A loaded feature cache.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub records: Vec<FeatureRecord>,
    /// Maximum per-frame energy over the training split.
    pub energy_max: f64,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records in `split`, grouped by environment.
    pub fn by_environment(&self, split: Split) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); crate::dataset::N_ENVIRONMENTS];
        for (i, r) in self.records.iter().enumerate() {
            if r.split == split {
                groups[r.environment.index()].push(i);
            }
        }
        groups
    }

    pub fn indices_for_split(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Extract features for every manifest entry into `out_dir`.
///
/// `corpus_root` is the directory the manifest's audio paths are relative
/// to. Clips longer than `max_frames` were already rejected at corpus build
/// time, so hitting one here is an error, not a skip.
pub fn extract_features(
    manifest: &CorpusManifest,
    corpus_root: &Path,
    out_dir: &Path,
    params: &StftParams,
    max_frames: usize,
) -> Result<FeatureSet> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let wave = read_wav(&corpus_root.join(&entry.audio_path))?;
        let wave = resample(&wave, TARGET_SAMPLE_RATE)?;
        let mel = super::mel::compute_mel(&wave, params)?;
        if mel.valid_len() > max_frames {
            return Err(Error::Feature(format!(
                "{}: {} frames exceed the {} maximum; rebuild the corpus",
                entry.clip_id,
                mel.valid_len(),
                max_frames
            )));
        }
        let pitch = super::prosody::estimate_pitch(&wave, params)?;
        let energy = super::prosody::compute_energy(&wave, params)?;
        let record = FeatureRecord {
            clip_id: entry.clip_id.clone(),
            environment: entry.environment,
            split: entry.split,
            mel,
            prosody: ProsodyTrack::new(pitch, energy)?,
        };
        write_record(&record_path(out_dir, &record), &record)?;
        records.push(record);
    }

    let energy_max = train_energy_max(&records);
    let set = FeatureSet {
        records,
        energy_max,
    };
    write_feature_manifest(out_dir, &set)?;
    Ok(set)
}

fn train_energy_max(records: &[FeatureRecord]) -> f64 {
    let mut m = 0.0f64;
    for r in records.iter().filter(|r| r.split == Split::Train) {
        for &e in &r.prosody.energy {
            m = m.max(e);
        }
    }
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn record_path(dir: &Path, record: &FeatureRecord) -> PathBuf {
    dir.join(format!("{}.feat", record.record_id()))
}

fn write_feature_manifest(dir: &Path, set: &FeatureSet) -> Result<()> {
    let path = dir.join(FEATURES_MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "# envfx feature cache v1").map_err(|e| Error::io(&path, e))?;
    writeln!(f, "# energy_max {:e}", set.energy_max).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "record_id\tclip_id\tenvironment\tsplit\tframes\tpath")
        .map_err(|e| Error::io(&path, e))?;
    for r in &set.records {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}.feat",
            r.record_id(),
            r.clip_id,
            r.environment,
            r.split,
            r.frames(),
            r.record_id()
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Load a feature cache written by [`extract_features`].
pub fn load_features(dir: &Path) -> Result<FeatureSet> {
    let path = dir.join(FEATURES_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut energy_max = None;
    let mut records = Vec::new();
    let mut seen_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# energy_max ") {
            energy_max = Some(
                rest.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Feature(format!("bad energy_max: {e}")))?,
            );
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            seen_header = true; // column header row
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Feature(format!(
                "feature manifest line has {} fields, expected 6",
                fields.len()
            )));
        }
        records.push(read_record(&dir.join(fields[5]))?);
    }
    let energy_max =
        energy_max.ok_or_else(|| Error::Feature("feature manifest lacks energy_max".into()))?;
    if records.is_empty() {
        return Err(Error::Feature("feature cache is empty".into()));
    }
    Ok(FeatureSet {
        records,
        energy_max,
    })
}

pub fn write_record(path: &Path, record: &FeatureRecord) -> Result<()> {
    let t = record.frames();
    let mel = record.mel.frames();
    debug_assert_eq!(mel.nrows(), t, "cache stores unpadded mels");

    let mut buf = Vec::with_capacity(24 + t * (N_MELS + 2) * 4);
    buf.extend_from_slice(MAGIC);
    let id = record.record_id();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id.as_bytes());
    buf.push(record.environment.index() as u8);
    buf.push(match record.split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    });
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    for v in mel.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &v in &record.prosody.pitch {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in &record.prosody.energy {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<FeatureRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Feature(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated record"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(bad("bad magic; not a v1 feature record"));
    }
    let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
        .map_err(|_| bad("record id is not UTF-8"))?;
    let env = EnvironmentLabel::from_index(take(&mut pos, 1)?[0] as usize)?;
    let split = match take(&mut pos, 1)?[0] {
        0 => Split::Train,
        1 => Split::Val,
        2 => Split::Test,
        _ => return Err(bad("bad split byte")),
    };
    let t = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if n_mels != N_MELS {
        return Err(bad("unexpected mel channel count"));
    }

    let read_f32s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
        let raw = take(pos, n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let mel_flat = read_f32s(&mut pos, t * N_MELS)?;
    let pitch = read_f32s(&mut pos, t)?;
    let energy = read_f32s(&mut pos, t)?;

    let mel = MelSpectrogram::from_frames(
        Array2::from_shape_vec((t, N_MELS), mel_flat)
            .map_err(|e| bad(&format!("mel shape: {e}")))?,
    )?;
    let clip_id = id
        .rsplit_once("__")
        .map(|(c, _)| c.to_string())
        .unwrap_or_else(|| id.clone());
    Ok(FeatureRecord {
        clip_id,
        environment: env,
        split,
        mel,
        prosody: ProsodyTrack::new(pitch, energy)?,
    })
}
