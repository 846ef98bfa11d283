//! A dataset on disk or in memory: annotations, keypoints and a frame source
//! per video, plus the segment plan and encoding into training samples.
//!
//! On-disk layout:
//!
//! ```text
//! annotations.json
//! keypoints/<video_id>.jsonl
//! frames/<video_id>/000000.png ...     (or)
//! scene.json                            procedural frames from a synthetic config
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cropper::{extract_clip_set, JointClipSet};
use crate::encoder::ReferenceEncoder;
use crate::error::{Error, Result};
use crate::ingestion::{
    read_annotations, read_keypoints, FrameSource, ImageDirSource, KeypointFrame, OnsetAnnotation,
    DEFAULT_CONFIDENCE_THRESHOLD,
};
use crate::scalar::Scalar;
use crate::segmenter::{build_segments, label_segment, SegmentLabel, SegmentSpec, SplitManifest, SplitRole};
use crate::synthgen::{
    generate_dataset, keypoint_file_name, SynthConfig, SyntheticSubject, ANNOTATION_FILE, FRAME_DIR,
    KEYPOINT_DIR, SCENE_FILE,
};
use crate::trainer::{encode_sample, Sample, SegmentKey, TrainMode};

pub struct VideoData {
    pub annotation: OnsetAnnotation,
    pub keypoints: Arc<Vec<KeypointFrame>>,
    pub source: Arc<dyn FrameSource>,
}

/// One planned segment with its label and origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub video_id: String,
    pub subject_id: String,
    pub start_s: f64,
    pub label: SegmentLabel,
}

pub struct Dataset {
    pub videos: Vec<VideoData>,
}

impl Dataset {
    /// Opens a dataset directory. Frames come from `frames/<video_id>/` when
    /// present, otherwise from the synthetic config in `scene.json`.
    pub fn open(root: &Path) -> Result<Self> {
        let anns = read_annotations(&root.join(ANNOTATION_FILE))?;
        let scene_path = root.join(SCENE_FILE);
        let mut scenes: BTreeMap<String, Arc<dyn FrameSource>> = BTreeMap::new();
        if scene_path.exists() {
            let text = std::fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
            let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("{}: {e}", scene_path.display()))
            })?;
            for s in generate_dataset(&cfg)? {
                for v in s.videos {
                    scenes.insert(v.annotation.video_id.clone(), Arc::new(v.scene));
                }
            }
        }
        let mut videos = Vec::with_capacity(anns.len());
        for ann in anns {
            let id = ann.video_id.clone();
            let kp_path = root.join(KEYPOINT_DIR).join(keypoint_file_name(&id));
            if !kp_path.exists() {
                return Err(Error::Data(format!("missing keypoints for video {id}")));
            }
            let keypoints = read_keypoints(&kp_path, DEFAULT_CONFIDENCE_THRESHOLD)?;
            let frame_dir = root.join(FRAME_DIR).join(&id);
            let source: Arc<dyn FrameSource> = if frame_dir.is_dir() {
                Arc::new(ImageDirSource::open(id.clone(), &frame_dir)?)
            } else if let Some(s) = scenes.remove(&id) {
                s
            } else {
                return Err(Error::Data(format!("no frames for video {id}")));
            };
            videos.push(VideoData {
                annotation: ann,
                keypoints: Arc::new(keypoints),
                source,
            });
        }
        Ok(Self { videos })
    }

    pub fn from_synthetic(subjects: &[SyntheticSubject]) -> Self {
        Self {
            videos: subjects
                .iter()
                .flat_map(|s| &s.videos)
                .map(|v| VideoData {
                    annotation: v.annotation.clone(),
                    keypoints: v.keypoints.clone(),
                    source: Arc::new(v.scene.clone()),
                })
                .collect(),
        }
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoData> {
        self.videos.iter().find(|v| v.annotation.video_id == video_id)
    }

    pub fn subjects(&self) -> Vec<String> {
        let s: BTreeSet<String> = self
            .videos
            .iter()
            .map(|v| v.annotation.subject_id.clone())
            .collect();
        s.into_iter().collect()
    }

    /// Every segment of every video, excluded ones included.
    pub fn plan(&self, stride_s: f64) -> Result<Vec<SegmentEntry>> {
        let mut out = Vec::new();
        for v in &self.videos {
            let a = &v.annotation;
            for seg in build_segments(a, stride_s)? {
                out.push(SegmentEntry {
                    video_id: a.video_id.clone(),
                    subject_id: a.subject_id.clone(),
                    start_s: seg.start_s,
                    label: label_segment(&seg, a),
                });
            }
        }
        Ok(out)
    }

    pub fn clip_set(&self, entry: &SegmentEntry) -> Result<JointClipSet> {
        let v = self
            .video(&entry.video_id)
            .ok_or_else(|| Error::Data(format!("unknown video {}", entry.video_id)))?;
        let spec = SegmentSpec::new(&entry.video_id, entry.start_s, v.annotation.fps_native);
        extract_clip_set(v.source.as_ref(), &spec, &v.keypoints)
    }

    /// Crops and encodes the labelled entries; excluded entries are skipped.
    pub fn encode<F: Scalar>(
        &self,
        encoder: &ReferenceEncoder<F>,
        mode: TrainMode,
        entries: &[SegmentEntry],
    ) -> Result<Vec<Sample<F>>> {
        let labelled: Vec<&SegmentEntry> = entries
            .iter()
            .filter(|e| e.label != SegmentLabel::Excluded)
            .collect();
        labelled
            .par_iter()
            .map(|e| {
                let clips = self.clip_set(e)?;
                encode_sample(
                    encoder,
                    mode,
                    SegmentKey {
                        video_id: e.video_id.clone(),
                        start_s: e.start_s,
                    },
                    &e.subject_id,
                    e.label == SegmentLabel::Ictal,
                    &clips,
                )
            })
            .collect()
    }
}

/// Labelled entries of the subjects holding `role` in `split`.
pub fn entries_for(entries: &[SegmentEntry], split: &SplitManifest, role: SplitRole) -> Vec<SegmentEntry> {
    entries
        .iter()
        .filter(|e| e.label != SegmentLabel::Excluded && split.role_of(&e.subject_id) == Some(role))
        .cloned()
        .collect()
}
