//! Run configuration: one TOML file, overridden by flags, echoed to every
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use jointwatch::encoder::ReferenceEncoderConfig;
use jointwatch::fusion::FusionConfig;
use jointwatch::synthgen::SynthConfig;
use jointwatch::trainer::{TrainConfig, TrainMode};
use jointwatch::{Error, Result};

/// File name of the resolved-config echo.
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Single source of randomness. Copied into the synthetic, split, encoder
    /// and training seeds.
    pub seed: u64,
    /// Training repetitions, seeds `seed, seed + 1, ...`.
    pub runs: usize,
    pub paths: Paths,
    pub segmenter: SegmenterOptions,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub output: OutputOptions,
    pub timeline: TimelineOptions,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 5,
            paths: Paths::default(),
            segmenter: SegmenterOptions::default(),
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            output: OutputOptions::default(),
            timeline: TimelineOptions::default(),
        }
    }
}

/// Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory: written by `synth`, read by `preprocess` and `timeline`.
    pub data: PathBuf,
    /// Written by `preprocess`, read by `train` and `eval`.
    pub preprocessed: PathBuf,
    /// Results of `train`, `eval` and `timeline`.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            preprocessed: "preprocessed".into(),
            out: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterOptions {
    pub stride_s: f64,
    pub n_test: usize,
    /// Training subjects set aside for early stopping.
    pub n_validation: usize,
}

impl Default for SegmenterOptions {
    fn default() -> Self {
        Self {
            stride_s: 5.0,
            n_test: 2,
            n_validation: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub backend: Backend,
    pub encoder: ReferenceEncoderConfig,
    pub head: FusionConfig,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Reference,
            encoder: ReferenceEncoderConfig::default(),
            head: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    /// `synth` also writes every frame as PNG instead of relying on `scene.json`.
    pub png_frames: bool,
    /// `preprocess` writes the clip archive (raw crops, about 18 MB per segment).
    pub archive: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            png_frames: false,
            archive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimelineOptions {
    pub stride_s: f64,
}

impl Default for TimelineOptions {
    fn default() -> Self {
        Self { stride_s: 1.0 }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub mode: Option<TrainMode>,
    pub stride_s: Option<f64>,
    pub data: Option<PathBuf>,
    pub preprocessed: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.to_string().trim_end())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text, p)
            }
        }
    }

    /// Applies flags, propagates the run seed and checks the result.
    /// `stride_timeline` selects which stride `--stride-s` sets.
    pub fn resolve(mut self, o: &Overrides, stride_timeline: bool) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = o.runs {
            self.runs = r;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(s) = o.stride_s {
            if stride_timeline {
                self.timeline.stride_s = s;
            } else {
                self.segmenter.stride_s = s;
            }
        }
        if let Some(p) = &o.data {
            self.paths.data = p.clone();
        }
        if let Some(p) = &o.preprocessed {
            self.paths.preprocessed = p.clone();
        }
        if let Some(p) = &o.out {
            self.paths.out = p.clone();
        }
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        for (name, s) in [("segmenter.stride_s", self.segmenter.stride_s), ("timeline.stride_s", self.timeline.stride_s)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {s}")));
            }
        }
        if self.model.encoder.d != self.model.head.d {
            return Err(Error::Config(format!(
                "model.head.d = {} must equal model.encoder.d = {}",
                self.model.head.d, self.model.encoder.d
            )));
        }
        self.model.head.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config echo: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
