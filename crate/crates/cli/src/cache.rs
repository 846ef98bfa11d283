//! Optional on-disk cache of frozen-encoder tokens, keyed by dataset content,
//! stride and encoder configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use jointwatch::cropper::PositionalTensor;
use jointwatch::encoder::ReferenceEncoderConfig;
use jointwatch::tensor::Matrix;
use jointwatch::trainer::{EncodedInput, Sample, SegmentKey};
use jointwatch::{Error, Result};

use crate::manifest::bytes_digest;

pub const CACHE_ENV: &str = "JOINTWATCH_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct CachedSample {
    video_id: String,
    start_s: f64,
    subject_id: String,
    label: bool,
    rows: usize,
    cols: usize,
    tokens: Vec<f64>,
    pos_joints: usize,
    pos_frames: usize,
    pos: Vec<[f64; 3]>,
    missing_joints: Vec<usize>,
}

#[derive(Serialize)]
struct Key<'a> {
    format: u32,
    dataset_sha256: &'a str,
    stride_s: f64,
    encoder: &'a ReferenceEncoderConfig,
    encoder_seed: u64,
}

pub struct TokenCache {
    path: PathBuf,
}

impl TokenCache {
    /// `None` unless the cache variable names a directory.
    pub fn from_env(
        dataset_sha256: &str,
        stride_s: f64,
        encoder: &ReferenceEncoderConfig,
        encoder_seed: u64,
    ) -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => {
                Self::in_dir(Path::new(&dir), dataset_sha256, stride_s, encoder, encoder_seed).map(Some)
            }
            _ => Ok(None),
        }
    }

    pub fn in_dir(
        dir: &Path,
        dataset_sha256: &str,
        stride_s: f64,
        encoder: &ReferenceEncoderConfig,
        encoder_seed: u64,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let key = Key {
            format: 1,
            dataset_sha256,
            stride_s,
            encoder,
            encoder_seed,
        };
        let digest = bytes_digest(serde_json::to_string(&key)?.as_bytes());
        Ok(Self {
            path: dir.join(format!("tokens-{}.json", &digest[..24])),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<Option<Vec<Sample<f32>>>> {
        if !self.path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let cached: Vec<CachedSample> = serde_json::from_str(&text)?;
        cached
            .into_iter()
            .map(|c| {
                let tokens = Matrix::from_vec(c.rows, c.cols, c.tokens.into_iter().map(|v| v as f32).collect())?;
                let mut pos = PositionalTensor::from_values(c.pos_joints, c.pos_frames, c.pos)?;
                pos.missing_joints = c.missing_joints;
                Ok(Sample {
                    key: SegmentKey {
                        video_id: c.video_id,
                        start_s: c.start_s,
                    },
                    subject_id: c.subject_id,
                    label: c.label,
                    input: EncodedInput::Tokens(tokens),
                    pos,
                })
            })
            .collect::<Result<_>>()
            .map(Some)
    }

    /// Stores token samples; stem samples are not cached.
    pub fn store(&self, samples: &[Sample<f32>]) -> Result<()> {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let EncodedInput::Tokens(t) = &s.input else {
                return Ok(());
            };
            let (joints, frames, _) = s.pos.shape();
            out.push(CachedSample {
                video_id: s.key.video_id.clone(),
                start_s: s.key.start_s,
                subject_id: s.subject_id.clone(),
                label: s.label,
                rows: t.rows(),
                cols: t.cols(),
                tokens: t.data().iter().map(|&v| f64::from(v)).collect(),
                pos_joints: joints,
                pos_frames: frames,
                pos: (0..joints).flat_map(|j| (0..frames).map(move |f| (j, f))).map(|(j, f)| s.pos.get(j, f)).collect(),
                missing_joints: s.pos.missing_joints.clone(),
            });
        }
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(&out)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}
