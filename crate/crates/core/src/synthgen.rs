//! Synthetic subjects: a 14-joint stick figure on a textured background, quiet
//! before EEG onset and oscillating rhythmically from clinical onset on.
//!
//! Frames are rendered on demand by [`SyntheticScene`], so a dataset only has
//! to store keypoints, annotations and the generating config.

use std::f64::consts::TAU;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cropper::CROP_SIZE;
use crate::error::{Error, Result};
use crate::ingestion::{
    write_annotations, write_frame_png, write_keypoints, Frame, FrameSource, JointObservation,
    KeypointFrame, OnsetAnnotation, LIMBS, NATIVE_FPS, NUM_JOINTS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub videos_per_subject: usize,
    pub duration_s: f64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub fps: f64,
    /// Ictal oscillation band in Hz.
    pub freq_band_hz: [f64; 2],
    pub ictal_amplitude_px: f64,
    pub jitter_px: f64,
    /// Keep every joint at least half a crop away from the frame border.
    pub in_bounds: bool,
    /// Earliest clinical onset as a fraction of the video length.
    pub min_onset_frac: f64,
    /// Largest EEG-to-clinical lead in seconds.
    pub max_eeg_lead_s: f64,
    /// Moving objects in the room, away from the patient and unrelated to
    /// the labels.
    pub background_activity: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            videos_per_subject: 2,
            duration_s: 80.0,
            frame_height: 240,
            frame_width: 480,
            fps: NATIVE_FPS,
            freq_band_hz: [1.0, 2.5],
            ictal_amplitude_px: 12.0,
            jitter_px: 1.5,
            in_bounds: true,
            min_onset_frac: 0.3,
            max_eeg_lead_s: 4.0,
            background_activity: true,
            seed: 0,
        }
    }
}

/// Joint offsets of the lying figure, in pixels at scale 1 (x right, y down).
const TEMPLATE: [(f64, f64); NUM_JOINTS] = [
    (-85.0, 0.0),
    (-65.0, 0.0),
    (-60.0, -18.0),
    (-30.0, -28.0),
    (0.0, -32.0),
    (-60.0, 18.0),
    (-30.0, 28.0),
    (0.0, 32.0),
    (0.0, -12.0),
    (40.0, -15.0),
    (80.0, -16.0),
    (0.0, 12.0),
    (40.0, 15.0),
    (80.0, 16.0),
];

const JOINT_COLORS: [[u8; 3]; NUM_JOINTS] = [
    [255, 230, 40],
    [255, 160, 20],
    [240, 40, 40],
    [255, 90, 150],
    [250, 20, 230],
    [40, 230, 60],
    [20, 255, 170],
    [40, 250, 250],
    [60, 120, 255],
    [150, 80, 255],
    [255, 255, 255],
    [190, 255, 40],
    [255, 200, 140],
    [120, 220, 255],
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.videos_per_subject == 0 {
            return bad("synthetic dataset needs at least one subject and one video".into());
        }
        if !(self.duration_s >= 20.0) {
            return bad(format!("duration_s = {} is below 20 s", self.duration_s));
        }
        if !(self.ictal_amplitude_px > self.jitter_px) || self.jitter_px < 0.0 {
            return bad(format!(
                "ictal amplitude {} must exceed jitter {} (and jitter must be non-negative)",
                self.ictal_amplitude_px, self.jitter_px
            ));
        }
        let [lo, hi] = self.freq_band_hz;
        if !(lo > 0.0 && lo <= hi && hi < self.fps / 2.0) {
            return bad(format!(
                "frequency band [{lo}, {hi}] Hz must be positive, ordered and below {} Hz",
                self.fps / 2.0
            ));
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.min_onset_frac) || self.max_eeg_lead_s < 0.0 {
            return bad("onset placement parameters out of range".into());
        }
        let margin = CROP_SIZE / 2;
        if self.in_bounds && (self.frame_height <= 2 * margin || self.frame_width <= 2 * margin) {
            return bad(format!(
                "in-bounds mode needs frames larger than {}x{}",
                2 * margin,
                2 * margin
            ));
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return bad("frame size must be positive".into());
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps).round() as u64
    }
}

/// Generator-side motion regime of one native frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionState {
    Quiet,
    /// Between EEG and clinical onset: still quiet, but not claimed by either class.
    Transition,
    Rhythmic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureStyle {
    pub limb_color: [u8; 3],
    pub limb_radius: f64,
    pub blob_radius: f64,
}

/// A block that sits in the room and now and then swings back and forth.
/// It is only ever drawn at columns left of `clear.0` or right of `clear.1`,
/// which no crop window reaches.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundActivity {
    pub centre: (f64, f64),
    pub half_size: (f64, f64),
    pub color: [u8; 3],
    pub direction: (f64, f64),
    pub amplitude_px: f64,
    pub frequency_hz: f64,
    /// Active intervals in seconds.
    pub episodes: Vec<(f64, f64)>,
    pub clear: (i64, i64),
}

impl BackgroundActivity {
    fn offset(&self, t: f64) -> f64 {
        self.episodes
            .iter()
            .find(|&&(a, b)| t >= a && t < b)
            .map_or(0.0, |&(a, _)| self.amplitude_px * (TAU * self.frequency_hz * (t - a)).sin())
    }

    fn draw(&self, frame: &mut Frame, t: f64) {
        let d = self.offset(t);
        let cx = self.centre.0 + d * self.direction.0;
        let cy = self.centre.1 + d * self.direction.1;
        let (h, w) = (frame.height as i64, frame.width as i64);
        let y0 = ((cy - self.half_size.1).round() as i64).max(0);
        let y1 = ((cy + self.half_size.1).round() as i64).min(h - 1);
        let x0 = ((cx - self.half_size.0).round() as i64).max(0);
        let x1 = ((cx + self.half_size.0).round() as i64).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if x < self.clear.0 || x > self.clear.1 {
                    frame.set_pixel(y as usize, x as usize, self.color);
                }
            }
        }
    }
}

/// Procedural frames: a fixed background, optional room activity, and the
/// figure drawn at the generating keypoints of each frame.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    video_id: String,
    fps: f64,
    background: Arc<Frame>,
    activity: Option<BackgroundActivity>,
    keypoints: Arc<Vec<KeypointFrame>>,
    style: FigureStyle,
}

impl SyntheticScene {
    pub fn background(&self) -> &Frame {
        &self.background
    }

    pub fn activity(&self) -> Option<&BackgroundActivity> {
        self.activity.as_ref()
    }

    /// The same scene without room activity.
    pub fn without_activity(&self) -> Self {
        Self {
            activity: None,
            ..self.clone()
        }
    }

    /// The same scene over a different background, figure unchanged.
    pub fn with_background(&self, background: Frame) -> Self {
        Self {
            background: Arc::new(background),
            ..self.clone()
        }
    }
}

fn stamp_disc(frame: &mut Frame, cx: f64, cy: f64, r: f64, rgb: [u8; 3]) {
    let (h, w) = (frame.height as i64, frame.width as i64);
    let y0 = ((cy - r).floor() as i64).max(0);
    let y1 = ((cy + r).ceil() as i64).min(h - 1);
    let x0 = ((cx - r).floor() as i64).max(0);
    let x1 = ((cx + r).ceil() as i64).min(w - 1);
    let r2 = r * r;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                frame.set_pixel(y as usize, x as usize, rgb);
            }
        }
    }
}

fn draw_figure(frame: &mut Frame, kp: &KeypointFrame, style: &FigureStyle) {
    for &(a, b) in &LIMBS {
        let (pa, pb) = (&kp.joints[a], &kp.joints[b]);
        let len = ((pb.x - pa.x).powi(2) + (pb.y - pa.y).powi(2)).sqrt();
        let steps = (len / (style.limb_radius * 0.7)).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            stamp_disc(
                frame,
                pa.x + (pb.x - pa.x) * t,
                pa.y + (pb.y - pa.y) * t,
                style.limb_radius,
                style.limb_color,
            );
        }
    }
    for (j, o) in kp.joints.iter().enumerate() {
        stamp_disc(frame, o.x, o.y, style.blob_radius, JOINT_COLORS[j]);
    }
}

impl FrameSource for SyntheticScene {
    fn video_id(&self) -> &str {
        &self.video_id
    }

    fn height(&self) -> usize {
        self.background.height
    }

    fn width(&self) -> usize {
        self.background.width
    }

    fn frame_count(&self) -> u64 {
        self.keypoints.len() as u64
    }

    fn frame(&self, index: u64) -> Result<Frame> {
        let kp = self.keypoints.get(index as usize).ok_or_else(|| {
            Error::Data(format!(
                "{}: frame {index} beyond {} frames",
                self.video_id,
                self.keypoints.len()
            ))
        })?;
        let mut f = (*self.background).clone();
        if let Some(a) = &self.activity {
            a.draw(&mut f, index as f64 / self.fps);
        }
        draw_figure(&mut f, kp, &self.style);
        Ok(f)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub annotation: OnsetAnnotation,
    pub keypoints: Arc<Vec<KeypointFrame>>,
    pub states: Vec<MotionState>,
    pub scene: SyntheticScene,
    pub frequency_hz: f64,
}

impl SyntheticVideo {
    /// The generator's own class for a window of native frames: `Some(false)`
    /// when every frame is quiet, `Some(true)` when every frame oscillates.
    pub fn intent(&self, first_frame: u64, last_frame: u64) -> Option<bool> {
        let states = self.states.get(first_frame as usize..=last_frame as usize)?;
        if states.iter().all(|&s| s == MotionState::Quiet) {
            Some(false)
        } else if states.iter().all(|&s| s == MotionState::Rhythmic) {
            Some(true)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub subject_id: String,
    /// Joints that oscillate in phase during this subject's seizures.
    pub coupled_joints: Vec<usize>,
    pub videos: Vec<SyntheticVideo>,
}

pub fn subject_id(index: usize) -> String {
    format!("synth{index:02}")
}

fn stream_seed(seed: u64, subject: usize, stream: u64) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed
        .wrapping_add((subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_direction(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a = rng.random_range(0.0..TAU);
    (a.cos(), a.sin())
}

struct Palette {
    colors: [[f64; 3]; 2],
    gratings: Vec<(f64, f64, f64)>,
}

fn subject_palette(rng: &mut ChaCha8Rng) -> Palette {
    let mut color = || std::array::from_fn(|_| rng.random_range(20.0..200.0));
    let colors = [color(), color()];
    let gratings = (0..3)
        .map(|_| {
            let (dx, dy) = unit_direction(rng);
            let f = rng.random_range(0.03..0.12);
            (dx * f, dy * f, rng.random_range(0.3..1.0))
        })
        .collect();
    Palette { colors, gratings }
}

fn render_background(p: &Palette, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Frame {
    let phases: Vec<f64> = p.gratings.iter().map(|_| rng.random_range(0.0..TAU)).collect();
    let norm: f64 = p.gratings.iter().map(|g| g.2).sum();
    let mut f = Frame::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for (g, ph) in p.gratings.iter().zip(&phases) {
                v += g.2 * (g.0 * x as f64 + g.1 * y as f64 + ph).sin();
            }
            let t = 0.5 + 0.5 * v / norm;
            let rgb = std::array::from_fn(|c| {
                (p.colors[0][c] * (1.0 - t) + p.colors[1][c] * t).round() as u8
            });
            f.set_pixel(y, x, rgb);
        }
    }
    f
}

/// Per-subject habits of the room: which side things happen on, how busy it is.
struct RoomHabits {
    left: bool,
    color: [u8; 3],
    busy: f64,
}

fn room_activity(
    cfg: &SynthConfig,
    room: &RoomHabits,
    keypoints: &[KeypointFrame],
    rng: &mut ChaCha8Rng,
) -> Option<BackgroundActivity> {
    // Columns any crop window can touch, with a pixel of slack for rounding.
    let reach = (CROP_SIZE / 2) as i64 + 2;
    let xs = keypoints.iter().flat_map(|k| k.joints.iter().map(|o| o.x.round() as i64));
    let (lo, hi) = xs.fold((i64::MAX, i64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    let clear = (lo - reach, hi + reach);
    let w = cfg.frame_width as i64;
    let strip = if room.left { (0, clear.0) } else { (clear.1 + 1, w) };
    if strip.1 - strip.0 < 8 {
        return None;
    }
    let h = cfg.frame_height as f64;
    let centre = (
        (strip.0 + strip.1) as f64 / 2.0,
        rng.random_range(0.3..0.7) * h,
    );
    let half_size = (rng.random_range(10.0..18.0), rng.random_range(18.0..40.0));
    let mut episodes = Vec::new();
    let mut t = rng.random_range(0.0..10.0);
    while t < cfg.duration_s {
        let len = rng.random_range(3.0..12.0);
        if rng.random_bool(room.busy) {
            episodes.push((t, (t + len).min(cfg.duration_s)));
        }
        t += len + rng.random_range(1.0..8.0);
    }
    let [lo_f, hi_f] = cfg.freq_band_hz;
    Some(BackgroundActivity {
        centre,
        half_size,
        color: room.color,
        direction: unit_direction(rng),
        amplitude_px: rng.random_range(10.0..25.0),
        frequency_hz: rng.random_range(0.5 * lo_f..=1.25 * hi_f),
        episodes,
        clear,
    })
}

/// Generates every video of one subject; deterministic in `(cfg.seed, index)`.
pub fn generate_subject(cfg: &SynthConfig, index: usize) -> Result<SyntheticSubject> {
    cfg.validate()?;
    let mut srng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, index, u64::MAX));
    let (h, w) = (cfg.frame_height as f64, cfg.frame_width as f64);
    let scale = srng.random_range(0.9..1.05);
    let centre = (
        w / 2.0 + srng.random_range(-0.025..0.025) * w,
        h / 2.0 + srng.random_range(-0.03..0.03) * h,
    );
    let palette = subject_palette(&mut srng);
    let style = FigureStyle {
        limb_color: std::array::from_fn(|_| srng.random_range(40..=255)),
        limb_radius: 2.5,
        blob_radius: 5.0,
    };
    let n_coupled = srng.random_range(3..=6);
    let mut coupled: Vec<usize> = sample(&mut srng, NUM_JOINTS, n_coupled).into_vec();
    coupled.sort_unstable();
    let coupled_dir = unit_direction(&mut srng);
    let sid = subject_id(index);
    let room = RoomHabits {
        left: srng.random_bool(0.5),
        color: std::array::from_fn(|_| srng.random_range(0..=255)),
        busy: srng.random_range(0.2..0.8),
    };

    let mut videos = Vec::with_capacity(cfg.videos_per_subject);
    for v in 0..cfg.videos_per_subject {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, index, v as u64));
        let video_id = format!("{sid}_v{v}");
        let latest = (cfg.duration_s - 40.0).max(cfg.duration_s * cfg.min_onset_frac);
        let clinical = rng.random_range(cfg.duration_s * cfg.min_onset_frac..=latest);
        let eeg = (clinical - rng.random_range(0.0..=cfg.max_eeg_lead_s)).max(0.0);
        let annotation = OnsetAnnotation {
            video_id: video_id.clone(),
            subject_id: sid.clone(),
            fps_native: cfg.fps,
            eeg_onset_s: eeg,
            clinical_onset_s: clinical,
            duration_s: cfg.duration_s,
        };
        let [lo, hi] = cfg.freq_band_hz;
        let freq = rng.random_range(lo..=hi);
        let phase = rng.random_range(0.0..TAU);
        let joint_motion: Vec<((f64, f64), f64, f64, (f64, f64), f64)> = (0..NUM_JOINTS)
            .map(|j| {
                let coupled_here = coupled.contains(&j);
                let dir = if coupled_here {
                    coupled_dir
                } else {
                    unit_direction(&mut rng)
                };
                let amp = cfg.ictal_amplitude_px * if coupled_here { 1.0 } else { 0.5 };
                let ph = if coupled_here {
                    phase
                } else {
                    rng.random_range(0.0..TAU)
                };
                let wander_dir = unit_direction(&mut rng);
                let wander_f = rng.random_range(0.05..0.2);
                (dir, amp, ph, wander_dir, wander_f)
            })
            .collect();
        let wander_phase: Vec<f64> = (0..NUM_JOINTS).map(|_| rng.random_range(0.0..TAU)).collect();

        let n = cfg.frame_count();
        let margin = (CROP_SIZE / 2) as f64;
        let mut keypoints = Vec::with_capacity(n as usize);
        let mut states = Vec::with_capacity(n as usize);
        for i in 0..n {
            let t = i as f64 / cfg.fps;
            let state = if t >= clinical {
                MotionState::Rhythmic
            } else if t >= eeg {
                MotionState::Transition
            } else {
                MotionState::Quiet
            };
            states.push(state);
            let joints = std::array::from_fn(|j| {
                let (dir, amp, ph, wdir, wf) = joint_motion[j];
                let mut x = centre.0 + scale * TEMPLATE[j].0;
                let mut y = centre.1 + scale * TEMPLATE[j].1;
                if cfg.jitter_px > 0.0 {
                    let s = (TAU * wf * t + wander_phase[j]).sin();
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    x += cfg.jitter_px * (s * wdir.0 + 0.3 * nx);
                    y += cfg.jitter_px * (s * wdir.1 + 0.3 * ny);
                }
                if state == MotionState::Rhythmic {
                    let ramp = ((t - clinical) / 0.5).min(1.0);
                    let d = amp * ramp * (TAU * freq * (t - clinical) + ph).sin();
                    x += d * dir.0;
                    y += d * dir.1;
                }
                if cfg.in_bounds {
                    x = x.clamp(margin, w - margin);
                    y = y.clamp(margin, h - margin);
                }
                JointObservation {
                    joint_id: j,
                    x,
                    y,
                    confidence: 1.0,
                    present: true,
                }
            });
            keypoints.push(KeypointFrame {
                frame_index: i,
                joints,
            });
        }
        let keypoints = Arc::new(keypoints);
        let background = render_background(&palette, cfg.frame_height, cfg.frame_width, &mut rng);
        let activity = if cfg.background_activity {
            let mut arng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, index, (1 << 32) + v as u64));
            room_activity(cfg, &room, &keypoints, &mut arng)
        } else {
            None
        };
        videos.push(SyntheticVideo {
            annotation,
            keypoints: keypoints.clone(),
            states,
            scene: SyntheticScene {
                video_id,
                fps: cfg.fps,
                background: Arc::new(background),
                activity,
                keypoints,
                style: style.clone(),
            },
            frequency_hz: freq,
        });
    }
    Ok(SyntheticSubject {
        subject_id: sid,
        coupled_joints: coupled,
        videos,
    })
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SyntheticSubject>> {
    cfg.validate()?;
    (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(cfg, i))
        .collect()
}

pub const SCENE_FILE: &str = "scene.json";
pub const ANNOTATION_FILE: &str = "annotations.json";
pub const KEYPOINT_DIR: &str = "keypoints";
pub const FRAME_DIR: &str = "frames";

pub fn keypoint_file_name(video_id: &str) -> String {
    format!("{video_id}.jsonl")
}

/// Writes annotations, keypoints and the generating config; with `png_frames`
/// every native frame is also written as an image.
pub fn write_dataset(cfg: &SynthConfig, subjects: &[SyntheticSubject], dir: &Path, png_frames: bool) -> Result<()> {
    let io = |p: &Path, e| Error::io(p, e);
    let kp_dir = dir.join(KEYPOINT_DIR);
    std::fs::create_dir_all(&kp_dir).map_err(|e| io(&kp_dir, e))?;
    let anns: Vec<OnsetAnnotation> = subjects
        .iter()
        .flat_map(|s| s.videos.iter().map(|v| v.annotation.clone()))
        .collect();
    write_annotations(&dir.join(ANNOTATION_FILE), &anns)?;
    for v in subjects.iter().flat_map(|s| &s.videos) {
        write_keypoints(&kp_dir.join(keypoint_file_name(&v.annotation.video_id)), &v.keypoints)?;
    }
    let scene = dir.join(SCENE_FILE);
    std::fs::write(&scene, serde_json::to_string_pretty(cfg)?).map_err(|e| io(&scene, e))?;
    if png_frames {
        for v in subjects.iter().flat_map(|s| &s.videos) {
            let fdir = dir.join(FRAME_DIR).join(&v.annotation.video_id);
            std::fs::create_dir_all(&fdir).map_err(|e| io(&fdir, e))?;
            (0..v.scene.frame_count()).into_par_iter().try_for_each(|i| {
                write_frame_png(&fdir.join(crate::ingestion::frame_file_name(i)), &v.scene.frame(i)?)
            })?;
        }
    }
    Ok(())
}

/// Magnitude-squared DFT of a mean-removed series at frequency bin `k`.
fn power_at(series: &[f64], k: usize) -> f64 {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in series.iter().enumerate() {
        let a = TAU * k as f64 * i as f64 / n;
        re += (v - mean) * a.cos();
        im -= (v - mean) * a.sin();
    }
    re * re + im * im
}

/// Frequency in Hz of the largest non-DC peak of the joint's combined x/y spectrum.
pub fn dominant_frequency(xs: &[f64], ys: &[f64], fps: f64) -> f64 {
    let n = xs.len();
    let best = (1..n / 2)
        .map(|k| (k, power_at(xs, k) + power_at(ys, k)))
        .fold((0, -1.0), |acc, kv| if kv.1 > acc.1 { kv } else { acc });
    best.0 as f64 * fps / n as f64
}
