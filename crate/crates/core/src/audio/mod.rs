//! Waveforms, WAV I/O and the mel-feature pipeline behind the audio metrics.

mod features;
mod wav;

use serde::{Deserialize, Serialize};

pub use features::{
    audio_distance, audio_distance_with_grad, extract_features, mel_scale, FeatureCache,
    FeatureExtractor, FeatureFrame, FeatureParams,
};
pub use wav::{read_clip, write_clip, WAV_SAMPLE_RATE};

use crate::error::{Error, Result};

pub const DEFAULT_CLIP_LEN: usize = 16384;
pub const DEFAULT_SAMPLE_RATE: u32 = 16000;

/// Fixed-length mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Checks the amplitude contract: finite samples within `[−1, 1]`.
    pub fn validate(&self) -> Result<()> {
        match self
            .samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            Some(i) => Err(Error::Domain(format!(
                "sample {i} = {} outside [-1, 1]",
                self.samples[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Which distance the target audio space is equipped with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioMetric {
    /// Euclidean distance between raw waveforms.
    L2,
    /// Squared Frobenius distance between mel feature frames.
    Mfcc,
}

impl AudioMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            AudioMetric::L2 => "l2",
            AudioMetric::Mfcc => "mfcc",
        }
    }
}

impl std::fmt::Display for AudioMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AudioMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(AudioMetric::L2),
            "mfcc" => Ok(AudioMetric::Mfcc),
            other => Err(Error::Config(format!(
                "unknown audio metric '{other}' (l2|mfcc)"
            ))),
        }
    }
}
