//! Pose keypoints, onset annotations and frame sources.
//!
//! Keypoint files are JSON lines, one frame per line:
//!
//! ```text
//! {"frame": 0, "joints": [{"id": 0, "x": 812.5, "y": 240.0, "c": 0.93}, ...]}
//! ```
//!
//! Each line carries all fourteen joints. Frames must start at 0 and increase
//! by one. Joints whose confidence falls below the reader's threshold are kept
//! with their coordinates but marked absent; the cropper decides how to fill
//! them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 14;
pub const NATIVE_FPS: f64 = 30.0;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "head",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

/// Skeleton edges between joint ids.
pub const LIMBS: [(usize, usize); 13] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointObservation {
    pub joint_id: usize,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub present: bool,
}

/// All joints of one native frame, ordered by joint id.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub frame_index: u64,
    pub joints: [JointObservation; NUM_JOINTS],
}

#[derive(Deserialize, Serialize)]
struct JointRecord {
    id: i64,
    x: f64,
    y: f64,
    c: f64,
}

#[derive(Deserialize, Serialize)]
struct FrameRecord {
    frame: i64,
    joints: Vec<JointRecord>,
}

pub fn read_keypoints(path: &Path, confidence_threshold: f64) -> Result<Vec<KeypointFrame>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(BufReader::new(file), path, confidence_threshold)
}

/// Parses keypoint lines from any reader; `origin` only labels errors.
pub fn parse_keypoints<R: BufRead>(
    reader: R,
    origin: &Path,
    confidence_threshold: f64,
) -> Result<Vec<KeypointFrame>> {
    let mut frames: Vec<KeypointFrame> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let schema = |msg: String| Error::Schema {
            path: origin.to_path_buf(),
            line: line_no,
            msg,
        };
        if rec.frame < 0 {
            return Err(schema(format!("negative frame index {}", rec.frame)));
        }
        let frame_index = rec.frame as u64;
        let expected = frames.last().map_or(0, |f| f.frame_index + 1);
        if frame_index != expected {
            return Err(Error::Ordering {
                path: origin.to_path_buf(),
                previous: frames.last().map_or(0, |f| f.frame_index),
                found: frame_index,
            });
        }
        if rec.joints.len() != NUM_JOINTS {
            return Err(schema(format!(
                "frame {} has {} joints, expected {NUM_JOINTS}",
                frame_index,
                rec.joints.len()
            )));
        }
        let mut slots: [Option<JointObservation>; NUM_JOINTS] = [None; NUM_JOINTS];
        for j in &rec.joints {
            if j.id < 0 || j.id >= NUM_JOINTS as i64 {
                return Err(schema(format!("joint id {} out of range", j.id)));
            }
            if !(0.0..=1.0).contains(&j.c) {
                return Err(schema(format!("confidence {} outside [0, 1]", j.c)));
            }
            if !j.x.is_finite() || !j.y.is_finite() {
                return Err(schema(format!("joint {} has non-finite coordinates", j.id)));
            }
            let id = j.id as usize;
            if slots[id].is_some() {
                return Err(schema(format!("joint id {id} repeated")));
            }
            slots[id] = Some(JointObservation {
                joint_id: id,
                x: j.x,
                y: j.y,
                confidence: j.c,
                present: j.c >= confidence_threshold,
            });
        }
        let joints = slots.map(|s| s.expect("fourteen distinct ids fill every slot"));
        frames.push(KeypointFrame {
            frame_index,
            joints,
        });
    }
    Ok(frames)
}

pub fn write_keypoints(path: &Path, frames: &[KeypointFrame]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in frames {
        let rec = FrameRecord {
            frame: f.frame_index as i64,
            joints: f
                .joints
                .iter()
                .map(|j| JointRecord {
                    id: j.joint_id as i64,
                    x: j.x,
                    y: j.y,
                    c: j.confidence,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnsetAnnotation {
    pub video_id: String,
    pub subject_id: String,
    #[serde(rename = "fps")]
    pub fps_native: f64,
    pub eeg_onset_s: f64,
    pub clinical_onset_s: f64,
    pub duration_s: f64,
}

impl OnsetAnnotation {
    pub fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(format!("{}: {msg}", self.video_id)));
        let all = [self.eeg_onset_s, self.clinical_onset_s, self.duration_s];
        if all.iter().any(|t| !t.is_finite()) {
            return v("non-finite timing".into());
        }
        if self.fps_native <= 0.0 {
            return v(format!("fps must be positive, got {}", self.fps_native));
        }
        if self.eeg_onset_s < 0.0 {
            return v(format!("eeg onset {} is negative", self.eeg_onset_s));
        }
        if self.clinical_onset_s < self.eeg_onset_s {
            return v(format!(
                "clinical onset {} precedes eeg onset {}",
                self.clinical_onset_s, self.eeg_onset_s
            ));
        }
        if self.duration_s < self.clinical_onset_s {
            return v(format!(
                "duration {} ends before clinical onset {}",
                self.duration_s, self.clinical_onset_s
            ));
        }
        Ok(())
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<OnsetAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let anns: Vec<OnsetAnnotation> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut seen = std::collections::HashSet::new();
    for a in &anns {
        a.validate()?;
        if !seen.insert(a.video_id.as_str()) {
            return Err(Error::Validation(format!(
                "video {} annotated twice",
                a.video_id
            )));
        }
    }
    Ok(anns)
}

pub fn write_annotations(path: &Path, anns: &[OnsetAnnotation]) -> Result<()> {
    let text = serde_json::to_string_pretty(anns)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One decoded RGB frame, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let o = (row * self.width + col) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Random access to the native-rate frames of one video.
///
/// Implementations must allow concurrent reads of distinct indices.
pub trait FrameSource: Send + Sync {
    fn video_id(&self) -> &str;
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    /// Number of native frames; valid indices are `0..frame_count()`.
    fn frame_count(&self) -> u64;
    fn frame(&self, index: u64) -> Result<Frame>;
}

/// Frames stored as `000000.png`, `000001.png`, ... in one directory.
#[derive(Debug, Clone)]
pub struct ImageDirSource {
    video_id: String,
    dir: PathBuf,
    height: usize,
    width: usize,
    count: u64,
}

pub fn frame_file_name(index: u64) -> String {
    format!("{index:06}.png")
}

impl ImageDirSource {
    pub fn open(video_id: impl Into<String>, dir: &Path) -> Result<Self> {
        let mut indices = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".png") {
                if let Ok(i) = stem.parse::<u64>() {
                    indices.push(i);
                }
            }
        }
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::Data(format!("{} holds no frames", dir.display())));
        }
        if let Some((k, &i)) = indices.iter().enumerate().find(|(k, &i)| *k as u64 != i) {
            return Err(Error::Data(format!(
                "{}: frame indices are not dense, expected {k} found {i}",
                dir.display()
            )));
        }
        let first = image::open(dir.join(frame_file_name(0)))?;
        Ok(Self {
            video_id: video_id.into(),
            dir: dir.to_path_buf(),
            height: first.height() as usize,
            width: first.width() as usize,
            count: indices.len() as u64,
        })
    }
}

impl FrameSource for ImageDirSource {
    fn video_id(&self) -> &str {
        &self.video_id
    }

    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn frame_count(&self) -> u64 {
        self.count
    }

    fn frame(&self, index: u64) -> Result<Frame> {
        if index >= self.count {
            return Err(Error::Data(format!(
                "{}: frame {index} beyond {} frames",
                self.video_id, self.count
            )));
        }
        let img = image::open(self.dir.join(frame_file_name(index)))?.to_rgb8();
        if img.height() as usize != self.height || img.width() as usize != self.width {
            return Err(Error::Data(format!(
                "{}: frame {index} has size {}x{}, expected {}x{}",
                self.video_id,
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        Ok(Frame {
            height: self.height,
            width: self.width,
            data: img.into_raw(),
        })
    }
}

pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    image::save_buffer(
        path,
        &frame.data,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// In-memory frames, mostly for tests and small fixtures.
#[derive(Debug, Clone)]
pub struct MemorySource {
    pub video_id: String,
    pub frames: Vec<Frame>,
}

impl FrameSource for MemorySource {
    fn video_id(&self) -> &str {
        &self.video_id
    }

    fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    fn frame_count(&self) -> u64 {
        self.frames.len() as u64
    }

    fn frame(&self, index: u64) -> Result<Frame> {
        self.frames.get(index as usize).cloned().ok_or_else(|| {
            Error::Data(format!(
                "{}: frame {index} beyond {} frames",
                self.video_id,
                self.frames.len()
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(frame: i64, conf: impl Fn(usize) -> f64) -> String {
        let joints: Vec<String> = (0..NUM_JOINTS)
            .map(|j| {
                format!(
                    r#"{{"id": {j}, "x": {}, "y": {}, "c": {}}}"#,
                    100.0 + j as f64,
                    50.0 + j as f64,
                    conf(j)
                )
            })
            .collect();
        format!(r#"{{"frame": {frame}, "joints": [{}]}}"#, joints.join(", "))
    }

    fn parse(text: &str) -> Result<Vec<KeypointFrame>> {
        parse_keypoints(text.as_bytes(), Path::new("kp.jsonl"), 0.3)
    }

    #[test]
    fn confident_frame_is_fully_present() {
        let frames = parse(&line(0, |_| 0.9)).unwrap();
        assert_eq!(frames.len(), 1);
        assert!(frames[0].joints.iter().all(|j| j.present));
        assert_eq!(frames[0].joints[4].x, 104.0);
    }

    #[test]
    fn low_confidence_joint_is_absent_but_keeps_coordinates() {
        let frames = parse(&line(0, |j| if j == 6 { 0.1 } else { 0.9 })).unwrap();
        let j = frames[0].joints[6];
        assert!(!j.present);
        assert_eq!((j.x, j.y), (106.0, 56.0));
        assert_eq!(frames[0].joints.iter().filter(|j| j.present).count(), 13);
    }

    #[test]
    fn decreasing_frame_index_is_an_ordering_error() {
        let text = format!("{}\n{}\n", line(0, |_| 0.9), line(0, |_| 0.9));
        assert!(matches!(parse(&text), Err(Error::Ordering { .. })));
        let text = format!("{}\n{}\n{}\n", line(0, |_| 0.9), line(1, |_| 0.9), line(0, |_| 0.9));
        assert!(matches!(
            parse(&text),
            Err(Error::Ordering { previous: 1, found: 0, .. })
        ));
    }

    #[test]
    fn gap_is_an_ordering_error() {
        let text = format!("{}\n{}\n", line(0, |_| 0.9), line(2, |_| 0.9));
        assert!(matches!(parse(&text), Err(Error::Ordering { .. })));
    }

    #[test]
    fn wrong_joint_count_is_a_schema_error() {
        let text = r#"{"frame": 0, "joints": [{"id": 0, "x": 1, "y": 1, "c": 1}]}"#;
        assert!(matches!(parse(text), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn malformed_line_names_the_line() {
        let text = format!("{}\nnot json\n", line(0, |_| 0.9));
        match parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_joint_id_is_rejected() {
        let text = line(0, |_| 0.9).replace(r#""id": 3,"#, r#""id": 2,"#);
        assert!(matches!(parse(&text), Err(Error::Schema { .. })));
    }

    #[test]
    fn parsing_is_deterministic() {
        let text = format!("{}\n{}\n", line(0, |j| j as f64 / 14.0), line(1, |_| 0.5));
        assert_eq!(parse(&text).unwrap(), parse(&text).unwrap());
    }

    fn ann(eeg: f64, clinical: f64, duration: f64) -> OnsetAnnotation {
        OnsetAnnotation {
            video_id: "v".into(),
            subject_id: "s".into(),
            fps_native: 30.0,
            eeg_onset_s: eeg,
            clinical_onset_s: clinical,
            duration_s: duration,
        }
    }

    #[test]
    fn annotation_ordering_rules() {
        assert!(ann(50.0, 60.0, 120.0).validate().is_ok());
        assert!(matches!(
            ann(60.0, 50.0, 120.0).validate(),
            Err(Error::Validation(_))
        ));
        assert!(ann(0.0, 0.0, 30.0).validate().is_ok());
        assert!(ann(10.0, 40.0, 30.0).validate().is_err());
    }

    #[test]
    fn annotation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        let anns = vec![ann(50.0, 60.0, 120.0)];
        write_annotations(&path, &anns).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), anns);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"fps\""));
    }

    #[test]
    fn image_dir_source_reads_lazily_and_bounds_checks() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3u64 {
            let f = Frame::filled(4, 6, [i as u8 * 10, 1, 2]);
            write_frame_png(&dir.path().join(frame_file_name(i)), &f).unwrap();
        }
        let src = ImageDirSource::open("v", dir.path()).unwrap();
        assert_eq!((src.height(), src.width(), src.frame_count()), (4, 6, 3));
        assert_eq!(src.frame(2).unwrap().pixel(3, 5), [20, 1, 2]);
        assert!(matches!(src.frame(3), Err(Error::Data(_))));
    }
}
