//! Joint-centred clip extraction and the positional tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::{Frame, FrameSource, KeypointFrame, NUM_JOINTS};
use crate::scalar::Scalar;
use crate::segmenter::{SegmentLabel, SegmentSpec};
use crate::tensor::Matrix;

/// Side length of every joint crop in pixels.
pub const CROP_SIZE: usize = 120;

/// `frames × size × size × 3` bytes, frame-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Clip {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0; frames * height * width * 3],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn pixel(&self, t: usize, row: usize, col: usize) -> [u8; 3] {
        let o = ((t * self.height + row) * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointClip {
    pub clip: Clip,
    /// Crop centres in original-frame pixels after the hold-fill policy.
    pub coords: Vec<(f64, f64)>,
    pub present: Vec<bool>,
    /// Set when the joint was absent in every frame of the segment.
    pub never_present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointClipSet {
    pub clips: Vec<Clip>,
    /// `coords[j][t]`, original-frame pixels.
    pub coords: Vec<Vec<(f64, f64)>>,
    pub present: Vec<Vec<bool>>,
    pub frame_height: usize,
    pub frame_width: usize,
}

impl JointClipSet {
    pub fn joints(&self) -> usize {
        self.clips.len()
    }

    pub fn frames(&self) -> usize {
        self.clips.first().map_or(0, |c| c.frames)
    }

    /// Joints absent in every frame.
    pub fn missing_joints(&self) -> Vec<usize> {
        self.present
            .iter()
            .enumerate()
            .filter(|(_, p)| p.iter().all(|&x| !x))
            .map(|(j, _)| j)
            .collect()
    }
}

/// Copies a `size × size` window centred on `(cx, cy)`; outside pixels are zero.
/// The window spans columns `[cx − size/2, cx + size/2)`.
pub fn crop_window(frame: &Frame, cx: i64, cy: i64, size: usize, out: &mut [u8]) {
    debug_assert_eq!(out.len(), size * size * 3);
    out.fill(0);
    let half = (size / 2) as i64;
    let (x0, y0) = (cx - half, cy - half);
    let col_lo = x0.max(0);
    let col_hi = (x0 + size as i64).min(frame.width as i64);
    if col_lo >= col_hi {
        return;
    }
    for r in 0..size as i64 {
        let fy = y0 + r;
        if fy < 0 || fy >= frame.height as i64 {
            continue;
        }
        let src = ((fy as usize) * frame.width + col_lo as usize) * 3;
        let dst = ((r as usize) * size + (col_lo - x0) as usize) * 3;
        let n = (col_hi - col_lo) as usize * 3;
        out[dst..dst + n].copy_from_slice(&frame.data[src..src + n]);
    }
}

/// Per-frame crop centres for one joint with temporal hold for absent frames.
fn held_track(
    kps: &[&KeypointFrame],
    joint_id: usize,
    height: usize,
    width: usize,
) -> (Vec<(f64, f64)>, Vec<bool>, bool) {
    let present: Vec<bool> = kps.iter().map(|k| k.joints[joint_id].present).collect();
    let first = present.iter().position(|&p| p);
    let Some(first) = first else {
        let centre = (width as f64 / 2.0, height as f64 / 2.0);
        return (vec![centre; kps.len()], present, true);
    };
    let mut last = (kps[first].joints[joint_id].x, kps[first].joints[joint_id].y);
    let coords = kps
        .iter()
        .zip(&present)
        .map(|(k, &p)| {
            if p {
                last = (k.joints[joint_id].x, k.joints[joint_id].y);
            }
            last
        })
        .collect();
    (coords, present, false)
}

fn segment_keypoints<'a>(
    seg: &SegmentSpec,
    keypoints: &'a [KeypointFrame],
) -> Result<Vec<&'a KeypointFrame>> {
    seg.frame_indices
        .iter()
        .map(|&i| {
            keypoints
                .get(i as usize)
                .filter(|k| k.frame_index == i)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{}: keypoints do not cover frame {i}",
                        seg.video_id
                    ))
                })
        })
        .collect()
}

fn load_frames(source: &dyn FrameSource, seg: &SegmentSpec) -> Result<Vec<Frame>> {
    seg.frame_indices
        .iter()
        .map(|&i| {
            if i >= source.frame_count() {
                return Err(Error::Data(format!(
                    "{}: frame {i} beyond the {} frames of the source",
                    seg.video_id,
                    source.frame_count()
                )));
            }
            source.frame(i)
        })
        .collect()
}

fn crop_track(frames: &[Frame], coords: &[(f64, f64)]) -> Clip {
    let mut clip = Clip::zeros(frames.len(), CROP_SIZE, CROP_SIZE);
    let n = clip.frame_len();
    for (t, (frame, &(x, y))) in frames.iter().zip(coords).enumerate() {
        let out = &mut clip.data[t * n..(t + 1) * n];
        crop_window(frame, x.round() as i64, y.round() as i64, CROP_SIZE, out);
    }
    clip
}

pub fn extract_joint_clip(
    source: &dyn FrameSource,
    seg: &SegmentSpec,
    keypoints: &[KeypointFrame],
    joint_id: usize,
) -> Result<JointClip> {
    if joint_id >= NUM_JOINTS {
        return Err(Error::Data(format!("joint id {joint_id} out of range")));
    }
    let kps = segment_keypoints(seg, keypoints)?;
    let frames = load_frames(source, seg)?;
    let (coords, present, never_present) =
        held_track(&kps, joint_id, source.height(), source.width());
    Ok(JointClip {
        clip: crop_track(&frames, &coords),
        coords,
        present,
        never_present,
    })
}

/// Crops all joints of a segment, reading each frame once.
pub fn extract_clip_set(
    source: &dyn FrameSource,
    seg: &SegmentSpec,
    keypoints: &[KeypointFrame],
) -> Result<JointClipSet> {
    let kps = segment_keypoints(seg, keypoints)?;
    let frames = load_frames(source, seg)?;
    let mut set = JointClipSet {
        clips: Vec::with_capacity(NUM_JOINTS),
        coords: Vec::with_capacity(NUM_JOINTS),
        present: Vec::with_capacity(NUM_JOINTS),
        frame_height: source.height(),
        frame_width: source.width(),
    };
    for j in 0..NUM_JOINTS {
        let (coords, present, _) = held_track(&kps, j, source.height(), source.width());
        set.clips.push(crop_track(&frames, &coords));
        set.coords.push(coords);
        set.present.push(present);
    }
    Ok(set)
}

/// `(J, T, 3)` positional values: normalized x, normalized y, joint identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTensor {
    pub joints: usize,
    pub frames: usize,
    values: Vec<[f64; 3]>,
    /// Joints absent for the whole segment; their coordinates are the frame centre.
    pub missing_joints: Vec<usize>,
}

impl PositionalTensor {
    pub fn from_values(joints: usize, frames: usize, values: Vec<[f64; 3]>) -> Result<Self> {
        if values.len() != joints * frames {
            return Err(Error::Shape(format!(
                "positional tensor needs {} entries, got {}",
                joints * frames,
                values.len()
            )));
        }
        Ok(Self {
            joints,
            frames,
            values,
            missing_joints: Vec::new(),
        })
    }

    pub fn get(&self, j: usize, t: usize) -> [f64; 3] {
        self.values[j * self.frames + t]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.joints, self.frames, 3)
    }

    /// The `(T, 3)` slice of one joint, flattened time-major.
    pub fn joint_slice(&self, j: usize) -> Vec<f64> {
        self.values[j * self.frames..(j + 1) * self.frames]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    /// `J × 3T` matrix of flattened joint slices.
    pub fn to_matrix<F: Scalar>(&self) -> Matrix<F> {
        let w = self.frames * 3;
        Matrix::from_fn(self.joints, w, |j, k| {
            F::of(self.values[j * self.frames + k / 3][k % 3])
        })
    }

    /// Reorders joints: output joint `i` is input joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for &j in perm {
            values.extend_from_slice(&self.values[j * self.frames..(j + 1) * self.frames]);
        }
        Self {
            joints: self.joints,
            frames: self.frames,
            values,
            missing_joints: Vec::new(),
        }
    }
}

pub fn build_positional_tensor(
    clipset: &JointClipSet,
    height: usize,
    width: usize,
) -> PositionalTensor {
    let joints = clipset.joints();
    let frames = clipset.frames();
    let missing = clipset.missing_joints();
    let id_den = (joints.max(2) - 1) as f64;
    let mut values = Vec::with_capacity(joints * frames);
    for j in 0..joints {
        let never = missing.contains(&j);
        for t in 0..frames {
            let (x, y) = if never {
                (0.5, 0.5)
            } else {
                let (x, y) = clipset.coords[j][t];
                (
                    (x / width as f64).clamp(0.0, 1.0),
                    (y / height as f64).clamp(0.0, 1.0),
                )
            };
            values.push([x, y, j as f64 / id_den]);
        }
    }
    PositionalTensor {
        joints,
        frames,
        values,
        missing_joints: missing,
    }
}

/// One cached segment: crops plus the metadata needed to train without the sources.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub video_id: String,
    pub start_s: f64,
    pub label: SegmentLabel,
    pub clips: JointClipSet,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    video_id: String,
    start_s: f64,
    label: SegmentLabel,
    joints: usize,
    frames: usize,
    crop: usize,
    frame_height: usize,
    frame_width: usize,
}

const ARCHIVE_MAGIC: &[u8; 8] = b"JWCLIPS1";

/// Streams records into an archive laid out as
/// `magic, (u32 header length, JSON header, coords f64, presence, pixels)*`,
/// all integers little-endian.
pub struct ArchiveWriter {
    path: PathBuf,
    w: BufWriter<File>,
    records: usize,
}

impl ArchiveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(ARCHIVE_MAGIC).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            w,
            records: 0,
        })
    }

    pub fn append(&mut self, r: &ArchiveRecord) -> Result<()> {
        append_record(&mut self.w, r).map_err(|e| Error::io(&self.path, e))?;
        self.records += 1;
        Ok(())
    }

    /// Flushes and returns the number of records written.
    pub fn finish(mut self) -> Result<usize> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.records)
    }
}

pub fn write_archive(path: &Path, records: &[ArchiveRecord]) -> Result<()> {
    let mut w = ArchiveWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.finish().map(|_| ())
}

fn append_record<W: Write>(w: &mut W, r: &ArchiveRecord) -> std::io::Result<()> {
    let header = RecordHeader {
        video_id: r.video_id.clone(),
        start_s: r.start_s,
        label: r.label,
        joints: r.clips.joints(),
        frames: r.clips.frames(),
        crop: r.clips.clips.first().map_or(CROP_SIZE, |c| c.height),
        frame_height: r.clips.frame_height,
        frame_width: r.clips.frame_width,
    };
    let bytes = serde_json::to_vec(&header)?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(&bytes)?;
    for track in &r.clips.coords {
        for &(x, y) in track {
            w.write_all(&x.to_le_bytes())?;
            w.write_all(&y.to_le_bytes())?;
        }
    }
    for track in &r.clips.present {
        let flags: Vec<u8> = track.iter().map(|&p| p as u8).collect();
        w.write_all(&flags)?;
    }
    for clip in &r.clips.clips {
        w.write_all(&clip.data)?;
    }
    Ok(())
}

/// Reads archive records one at a time.
pub struct ArchiveReader {
    path: PathBuf,
    r: BufReader<File>,
}

impl ArchiveReader {
    pub fn open(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Data(format!("{} is not a clip archive", path.display())));
        }
        Ok(Self {
            path: path.to_path_buf(),
            r,
        })
    }

    fn read_record(&mut self) -> Result<Option<ArchiveRecord>> {
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        let r = &mut self.r;
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(io(e)),
        }
        let mut hbuf = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut hbuf).map_err(io)?;
        let h: RecordHeader = serde_json::from_slice(&hbuf)?;
        let mut f8 = [0u8; 8];
        let mut coords = Vec::with_capacity(h.joints);
        for _ in 0..h.joints {
            let mut track = Vec::with_capacity(h.frames);
            for _ in 0..h.frames {
                r.read_exact(&mut f8).map_err(io)?;
                let x = f64::from_le_bytes(f8);
                r.read_exact(&mut f8).map_err(io)?;
                track.push((x, f64::from_le_bytes(f8)));
            }
            coords.push(track);
        }
        let mut present = Vec::with_capacity(h.joints);
        for _ in 0..h.joints {
            let mut flags = vec![0u8; h.frames];
            r.read_exact(&mut flags).map_err(io)?;
            present.push(flags.into_iter().map(|b| b != 0).collect());
        }
        let mut clips = Vec::with_capacity(h.joints);
        for _ in 0..h.joints {
            let mut clip = Clip::zeros(h.frames, h.crop, h.crop);
            r.read_exact(&mut clip.data).map_err(io)?;
            clips.push(clip);
        }
        Ok(Some(ArchiveRecord {
            video_id: h.video_id,
            start_s: h.start_s,
            label: h.label,
            clips: JointClipSet {
                clips,
                coords,
                present,
                frame_height: h.frame_height,
                frame_width: h.frame_width,
            },
        }))
    }
}

impl Iterator for ArchiveReader {
    type Item = Result<ArchiveRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_record().transpose()
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>> {
    ArchiveReader::open(path)?.collect()
}
