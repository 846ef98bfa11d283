//! Fixed-length segments, onset-based labels and subject-wise splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::OnsetAnnotation;

pub const SEGMENT_LENGTH_S: f64 = 5.0;
pub const TARGET_FPS: f64 = 6.0;
/// Frames per segment after downsampling.
pub const SEGMENT_FRAMES: usize = 30;
/// Seconds after clinical onset during which a segment start counts as ictal.
pub const ICTAL_WINDOW_S: f64 = 40.0;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub video_id: String,
    pub start_s: f64,
    pub length_s: f64,
    pub native_fps: f64,
    pub target_fps: f64,
    /// Native-rate frame indices kept after downsampling.
    pub frame_indices: Vec<u64>,
}

impl SegmentSpec {
    pub fn new(video_id: impl Into<String>, start_s: f64, native_fps: f64) -> Self {
        let first = (start_s * native_fps).round() as u64;
        let stride = (native_fps / TARGET_FPS).round() as u64;
        Self {
            video_id: video_id.into(),
            start_s,
            length_s: SEGMENT_LENGTH_S,
            native_fps,
            target_fps: TARGET_FPS,
            frame_indices: (0..SEGMENT_FRAMES as u64)
                .map(|i| first + i * stride)
                .collect(),
        }
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.length_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Interictal,
    Ictal,
    Excluded,
}

impl SegmentLabel {
    /// Binary target, `None` for excluded segments.
    pub fn target(self) -> Option<bool> {
        match self {
            SegmentLabel::Interictal => Some(false),
            SegmentLabel::Ictal => Some(true),
            SegmentLabel::Excluded => None,
        }
    }
}

/// Windows of five seconds starting at `0, stride, 2·stride, …` that fit inside the video.
pub fn build_segments(ann: &OnsetAnnotation, stride_s: f64) -> Result<Vec<SegmentSpec>> {
    if !(stride_s > 0.0) {
        return Err(Error::Config(format!("stride must be positive, got {stride_s}")));
    }
    if ann.duration_s < SEGMENT_LENGTH_S {
        return Ok(Vec::new());
    }
    let n = ((ann.duration_s - SEGMENT_LENGTH_S) / stride_s + TIME_EPS).floor() as usize + 1;
    Ok((0..n)
        .map(|k| SegmentSpec::new(ann.video_id.clone(), k as f64 * stride_s, ann.fps_native))
        .collect())
}

/// Interictal when the segment ends by EEG onset; ictal when it starts within
/// the window following clinical onset; excluded otherwise.
pub fn label_segment(seg: &SegmentSpec, ann: &OnsetAnnotation) -> SegmentLabel {
    debug_assert_eq!(seg.video_id, ann.video_id);
    label_window(
        seg.start_s,
        seg.end_s(),
        ann.eeg_onset_s,
        ann.clinical_onset_s,
    )
}

pub fn label_window(start_s: f64, end_s: f64, eeg_onset_s: f64, clinical_onset_s: f64) -> SegmentLabel {
    if end_s <= eeg_onset_s {
        SegmentLabel::Interictal
    } else if clinical_onset_s <= start_s && start_s < clinical_onset_s + ICTAL_WINDOW_S {
        SegmentLabel::Ictal
    } else {
        SegmentLabel::Excluded
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub interictal: usize,
    pub ictal: usize,
    pub excluded: usize,
}

impl LabelCounts {
    pub fn add(&mut self, label: SegmentLabel) {
        match label {
            SegmentLabel::Interictal => self.interictal += 1,
            SegmentLabel::Ictal => self.ictal += 1,
            SegmentLabel::Excluded => self.excluded += 1,
        }
    }

    pub fn labeled(&self) -> usize {
        self.interictal + self.ictal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_subjects: BTreeSet<String>,
    /// Subset of `train_subjects` held out for model selection.
    pub validation_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    #[serde(default)]
    pub counts: BTreeMap<String, LabelCounts>,
}

impl SplitManifest {
    /// Subjects used for fitting: train minus validation.
    pub fn fit_subjects(&self) -> BTreeSet<String> {
        self.train_subjects
            .difference(&self.validation_subjects)
            .cloned()
            .collect()
    }

    pub fn role_of(&self, subject: &str) -> Option<SplitRole> {
        if self.test_subjects.contains(subject) {
            Some(SplitRole::Test)
        } else if self.validation_subjects.contains(subject) {
            Some(SplitRole::Validation)
        } else if self.train_subjects.contains(subject) {
            Some(SplitRole::Train)
        } else {
            None
        }
    }

    /// Fills per-role label counts from labeled segments `(subject_id, label)`.
    pub fn with_counts<'a>(
        mut self,
        labeled: impl IntoIterator<Item = (&'a str, SegmentLabel)>,
    ) -> Self {
        let mut counts: BTreeMap<String, LabelCounts> = BTreeMap::new();
        for (subject, label) in labeled {
            if let Some(role) = self.role_of(subject) {
                counts.entry(role.as_str().to_string()).or_default().add(label);
            }
        }
        self.counts = counts;
        self
    }

    pub fn check_disjoint(&self) -> Result<()> {
        if let Some(s) = self.train_subjects.intersection(&self.test_subjects).next() {
            return Err(Error::Data(format!(
                "subject {s} appears in both train and test pools"
            )));
        }
        if !self.validation_subjects.is_subset(&self.train_subjects) {
            return Err(Error::Data(
                "validation subjects must come from the training pool".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        }
    }
}

/// Seeded subject-wise split. `n_validation` subjects of the training pool are
/// set aside for model selection.
pub fn make_split(
    subjects: &[String],
    n_test: usize,
    n_validation: usize,
    seed: u64,
) -> Result<SplitManifest> {
    let unique: BTreeSet<String> = subjects.iter().cloned().collect();
    if n_test >= unique.len() {
        return Err(Error::Config(format!(
            "n_test = {n_test} must be smaller than the {} available subjects",
            unique.len()
        )));
    }
    if n_validation >= unique.len() - n_test {
        return Err(Error::Config(format!(
            "n_validation = {n_validation} leaves no subject to train on"
        )));
    }
    let mut order: Vec<String> = unique.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test_subjects: BTreeSet<String> = order[..n_test].iter().cloned().collect();
    let train: Vec<String> = order[n_test..].to_vec();
    let validation_subjects: BTreeSet<String> = train[..n_validation].iter().cloned().collect();
    Ok(SplitManifest {
        seed,
        train_subjects: train.into_iter().collect(),
        validation_subjects,
        test_subjects,
        counts: BTreeMap::new(),
    })
}
