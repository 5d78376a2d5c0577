//! Run configuration: one TOML file covering every stage, merged with
//! command-line overrides before any work starts.
//!
//! Unknown keys are errors, not warnings. Command-line flags take
//! precedence over file values, which take precedence over defaults; the
//! resolved configuration is echoed at startup.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::EnvironmentPreset;
use crate::error::{Error, Result};
use crate::features::StftParams;
use crate::inference::{ExternalVocoder, GriffinLim, Vocoder};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; individual stages derive theirs from it unless
    /// overridden per stage.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub vocoder: VocoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub clean_dir: Option<PathBuf>,
    /// RT60 seconds per reverberant environment.
    pub rt60: BTreeMap<String, f64>,
    /// Direct-to-reverberant gain per environment.
    pub reverb_gain: BTreeMap<String, f64>,
    pub split_ratios: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let mut rt60 = BTreeMap::new();
        let mut gain = BTreeMap::new();
        for p in EnvironmentPreset::defaults() {
            rt60.insert(p.environment.name().to_string(), p.rt60);
            gain.insert(p.environment.name().to_string(), p.reverb_gain);
        }
        Self {
            clean_dir: None,
            rt60,
            reverb_gain: gain,
            split_ratios: (0.98, 0.01, 0.01),
        }
    }
}

impl DatasetConfig {
    /// Materialize presets, applying any rt60/gain overrides.
    pub fn presets(&self) -> Result<Vec<EnvironmentPreset>> {
        let mut presets = EnvironmentPreset::defaults().to_vec();
        for (name, &rt60) in &self.rt60 {
            let preset = presets
                .iter_mut()
                .find(|p| p.environment.name() == name.as_str())
                .ok_or_else(|| Error::Config(format!("unknown environment '{name}' in rt60")))?;
            preset.rt60 = rt60;
        }
        for (name, &gain) in &self.reverb_gain {
            let preset = presets
                .iter_mut()
                .find(|p| p.environment.name() == name.as_str())
                .ok_or_else(|| {
                    Error::Config(format!("unknown environment '{name}' in reverb_gain"))
                })?;
            preset.reverb_gain = gain;
        }
        Ok(presets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 1024, hop: 256 }
    }
}

impl StftConfig {
    pub fn params(&self) -> StftParams {
        StftParams {
            n_fft: self.n_fft,
            hop: self.hop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderConfig {
    /// "griffin-lim" or "external".
    pub kind: String,
    pub iterations: usize,
    /// Command template for the external vocoder; `{mel}` and `{out}` are
    /// replaced with file paths.
    pub command: Option<String>,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            kind: "griffin-lim".into(),
            iterations: 64,
            command: None,
        }
    }
}

impl VocoderConfig {
    pub fn build(&self, params: StftParams) -> Result<Box<dyn Vocoder>> {
        match self.kind.as_str() {
            "griffin-lim" => Ok(Box::new(GriffinLim {
                iterations: self.iterations,
                params,
            })),
            "external" => {
                let command = self.command.clone().ok_or_else(|| {
                    Error::Config("vocoder.kind = \"external\" requires vocoder.command".into())
                })?;
                Ok(Box::new(ExternalVocoder { command }))
            }
            other => Err(Error::Config(format!(
                "unknown vocoder kind '{other}' (expected \"griffin-lim\" or \"external\")"
            ))),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        let (a, b, c) = self.dataset.split_ratios;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("dataset.split_ratios must sum to 1".into()));
        }
        self.dataset.presets()?;
        if self.stft.n_fft == 0 || self.stft.hop == 0 {
            return Err(Error::Config("stft.n_fft and stft.hop must be positive".into()));
        }
        self.vocoder.build(self.stft.params()).map(|_| ())
    }

    /// The resolved config as TOML, for startup echoing.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("<unserializable: {e}>"))
    }
}
