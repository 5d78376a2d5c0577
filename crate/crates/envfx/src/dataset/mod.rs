//! Reverberant-corpus construction: parametric room impulse responses,
//! convolution of clean speech, and the 5x enlarged labeled manifest.

mod corpus;
mod rir;

pub use corpus::{build_corpus, read_manifest, write_manifest, BuildOptions, CorpusManifest,
                 ManifestEntry};
pub use rir::{apply_rir, convolve, synthesize_rir, EnvironmentPreset, RoomImpulseResponse,
              PRE_DELAY_SAMPLES};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The five environment classes. `Clean` is the un-convolved original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvironmentLabel {
    Clean,
    Bathroom,
    Cave,
    Classroom,
    Gallery,
}

pub const N_ENVIRONMENTS: usize = 5;

/// The four reverberant classes, in manifest order.
pub const REVERB_ENVIRONMENTS: [EnvironmentLabel; 4] = [
    EnvironmentLabel::Bathroom,
    EnvironmentLabel::Cave,
    EnvironmentLabel::Classroom,
    EnvironmentLabel::Gallery,
];

impl EnvironmentLabel {
    pub const ALL: [EnvironmentLabel; N_ENVIRONMENTS] = [
        EnvironmentLabel::Clean,
        EnvironmentLabel::Bathroom,
        EnvironmentLabel::Cave,
        EnvironmentLabel::Classroom,
        EnvironmentLabel::Gallery,
    ];

    pub fn index(self) -> usize {
        match self {
            EnvironmentLabel::Clean => 0,
            EnvironmentLabel::Bathroom => 1,
            EnvironmentLabel::Cave => 2,
            EnvironmentLabel::Classroom => 3,
            EnvironmentLabel::Gallery => 4,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("environment index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvironmentLabel::Clean => "clean",
            EnvironmentLabel::Bathroom => "bathroom",
            EnvironmentLabel::Cave => "cave",
            EnvironmentLabel::Classroom => "classroom",
            EnvironmentLabel::Gallery => "gallery",
        }
    }
}

impl std::fmt::Display for EnvironmentLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnvironmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clean" => Ok(EnvironmentLabel::Clean),
            "bathroom" => Ok(EnvironmentLabel::Bathroom),
            "cave" => Ok(EnvironmentLabel::Cave),
            "classroom" => Ok(EnvironmentLabel::Classroom),
            "gallery" => Ok(EnvironmentLabel::Gallery),
            other => Err(Error::Dataset(format!("unknown environment '{other}'"))),
        }
    }
}

/// Dataset split assignment, fixed per underlying utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split '{other}'"))),
        }
    }
}
