//! The five subcommands. Each writes its outputs, a resolved-config echo and a
//! content manifest into one directory.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use jointwatch::cropper::{ArchiveReader, ArchiveRecord, ArchiveWriter};
use jointwatch::dataset::{Dataset, SegmentEntry};
use jointwatch::encoder::ReferenceEncoder;
use jointwatch::evaluator::{
    baseline_rows, compute_metrics, timeline, timeline_svg, BaselineRows, MetricsReport, ScoredSegment,
    DEFAULT_THRESHOLD,
};
use jointwatch::segmenter::{make_split, LabelCounts, SegmentLabel, SplitManifest, SplitRole};
use jointwatch::synthgen::{generate_dataset, write_dataset, ANNOTATION_FILE, FRAME_DIR, KEYPOINT_DIR, SCENE_FILE};
use jointwatch::trainer::{
    encode_sample, run_experiment, Checkpoint, ExperimentData, Model, Sample, SegmentKey, TrainMode,
};
use jointwatch::{Error, Result};

use crate::cache::TokenCache;
use crate::config::{RunConfigFile, ECHO_FILE};
use crate::manifest::{dataset_digest, ContentManifest};

pub const SEGMENTS_FILE: &str = "segments.json";
pub const SPLIT_FILE: &str = "split.json";
pub const ARCHIVE_FILE: &str = "clips.jwc";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "log.json";
pub const SCORES_FILE: &str = "scores.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMELINE_FILE: &str = "timeline.json";
pub const TIMELINE_SVG: &str = "timeline.svg";

/// Segments cropped at once while streaming the archive.
const CHUNK: usize = 16;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn remove_if_present(path: &Path) -> Result<()> {
    let r = if path.is_dir() {
        std::fs::remove_dir_all(path)
    } else if path.exists() {
        std::fs::remove_file(path)
    } else {
        Ok(())
    };
    r.map_err(|e| Error::io(path, e))
}

/// Echo plus manifest; returns the manifest digest.
fn finish(cfg: &RunConfigFile, command: &str, dir: &Path, entries: &[&str]) -> Result<String> {
    cfg.echo(dir)?;
    let mut all = entries.to_vec();
    all.push(ECHO_FILE);
    let digest = ContentManifest::collect(command, dir, &all)?.write(dir)?;
    info!("{command}: wrote {} (manifest sha256 {digest})", dir.display());
    Ok(digest)
}

pub fn synth(cfg: &RunConfigFile) -> Result<String> {
    let dir = &cfg.paths.data;
    create_dir(dir)?;
    for stale in [KEYPOINT_DIR, FRAME_DIR] {
        remove_if_present(&dir.join(stale))?;
    }
    let subjects = generate_dataset(&cfg.synth)?;
    write_dataset(&cfg.synth, &subjects, dir, cfg.output.png_frames)?;
    info!(
        "synth: {} subjects, {} videos",
        subjects.len(),
        subjects.iter().map(|s| s.videos.len()).sum::<usize>()
    );
    finish(cfg, "synth", dir, &[ANNOTATION_FILE, SCENE_FILE, KEYPOINT_DIR, FRAME_DIR])
}

/// One planned segment with its split role and archive slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub video_id: String,
    pub subject_id: String,
    pub start_s: f64,
    pub label: SegmentLabel,
    pub role: SplitRole,
    /// Position in the clip archive; excluded segments are not archived.
    pub archive_index: Option<usize>,
}

/// Output of `preprocess`, input of `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentManifest {
    pub data: PathBuf,
    pub dataset_sha256: String,
    pub stride_s: f64,
    pub archive: Option<String>,
    pub totals: LabelCounts,
    pub split: SplitManifest,
    pub segments: Vec<SegmentRecord>,
}

impl SegmentManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SEGMENTS_FILE);
        if !path.exists() {
            return Err(Error::Data(format!(
                "{}: no {SEGMENTS_FILE}; run preprocess first",
                dir.display()
            )));
        }
        read_json(&path)
    }

    fn entry(r: &SegmentRecord) -> SegmentEntry {
        SegmentEntry {
            video_id: r.video_id.clone(),
            subject_id: r.subject_id.clone(),
            start_s: r.start_s,
            label: r.label,
        }
    }
}

fn role_of(split: &SplitManifest, subject: &str) -> Result<SplitRole> {
    split
        .role_of(subject)
        .ok_or_else(|| Error::Internal(format!("subject {subject} has no split role")))
}

pub fn preprocess(cfg: &RunConfigFile) -> Result<SegmentManifest> {
    let data = &cfg.paths.data;
    let out = &cfg.paths.preprocessed;
    let ds = Dataset::open(data)?;
    let dataset_sha256 = dataset_digest(data)?;
    let plan = ds.plan(cfg.segmenter.stride_s)?;
    let split = make_split(
        &ds.subjects(),
        cfg.segmenter.n_test,
        cfg.segmenter.n_validation,
        cfg.seed,
    )?
    .with_counts(plan.iter().map(|e| (e.subject_id.as_str(), e.label)));

    let mut totals = LabelCounts::default();
    let mut segments = Vec::with_capacity(plan.len());
    let mut next = 0;
    for e in &plan {
        totals.add(e.label);
        let archive_index = (cfg.output.archive && e.label != SegmentLabel::Excluded).then(|| {
            next += 1;
            next - 1
        });
        segments.push(SegmentRecord {
            video_id: e.video_id.clone(),
            subject_id: e.subject_id.clone(),
            start_s: e.start_s,
            label: e.label,
            role: role_of(&split, &e.subject_id)?,
            archive_index,
        });
    }

    create_dir(out)?;
    let archive_path = out.join(ARCHIVE_FILE);
    remove_if_present(&archive_path)?;
    if cfg.output.archive {
        let mut writer = ArchiveWriter::create(&archive_path)?;
        let labelled: Vec<&SegmentEntry> = plan.iter().filter(|e| e.label != SegmentLabel::Excluded).collect();
        for chunk in labelled.chunks(CHUNK) {
            let records: Vec<ArchiveRecord> = chunk
                .par_iter()
                .map(|e| {
                    Ok(ArchiveRecord {
                        video_id: e.video_id.clone(),
                        start_s: e.start_s,
                        label: e.label,
                        clips: ds.clip_set(e)?,
                    })
                })
                .collect::<Result<_>>()?;
            for r in &records {
                writer.append(r)?;
            }
        }
        writer.finish()?;
    }
    let segments_len = segments.len();
    let manifest = SegmentManifest {
        data: data.clone(),
        dataset_sha256,
        stride_s: cfg.segmenter.stride_s,
        archive: cfg.output.archive.then(|| ARCHIVE_FILE.to_string()),
        totals: totals.clone(),
        split: split.clone(),
        segments,
    };
    write_json(&out.join(SEGMENTS_FILE), &manifest)?;
    write_json(&out.join(SPLIT_FILE), &split)?;
    info!(
        "preprocess: {} segments ({} interictal, {} ictal, {} excluded)",
        segments_len, totals.interictal, totals.ictal, totals.excluded
    );
    finish(cfg, "preprocess", out, &[SEGMENTS_FILE, SPLIT_FILE, ARCHIVE_FILE])?;
    Ok(manifest)
}

/// Encodes the labelled segments of `roles`, from the archive when present,
/// otherwise by cropping the dataset again.
fn encode_segments(
    prep_dir: &Path,
    manifest: &SegmentManifest,
    encoder: &ReferenceEncoder<f32>,
    mode: TrainMode,
    roles: &[SplitRole],
) -> Result<Vec<Sample<f32>>> {
    let wanted: Vec<&SegmentRecord> = manifest
        .segments
        .iter()
        .filter(|r| r.label != SegmentLabel::Excluded && roles.contains(&r.role))
        .collect();
    let archive = manifest.archive.as_ref().map(|a| prep_dir.join(a)).filter(|p| p.exists());
    let Some(path) = archive else {
        let digest = dataset_digest(&manifest.data)?;
        if digest != manifest.dataset_sha256 {
            return Err(Error::Data(format!(
                "{} changed since preprocess; rerun preprocess",
                manifest.data.display()
            )));
        }
        let ds = Dataset::open(&manifest.data)?;
        let entries: Vec<SegmentEntry> = wanted.iter().map(|r| SegmentManifest::entry(r)).collect();
        return ds.encode(encoder, mode, &entries);
    };
    let by_slot: std::collections::BTreeMap<usize, &SegmentRecord> = wanted
        .iter()
        .filter_map(|r| r.archive_index.map(|i| (i, *r)))
        .collect();
    if by_slot.len() != wanted.len() {
        return Err(Error::Data("segment manifest and archive disagree".into()));
    }
    let mut out = Vec::with_capacity(wanted.len());
    let mut pending: Vec<(&SegmentRecord, ArchiveRecord)> = Vec::with_capacity(CHUNK);
    let mut flush = |pending: &mut Vec<(&SegmentRecord, ArchiveRecord)>| -> Result<()> {
        let samples: Vec<Sample<f32>> = pending
            .par_iter()
            .map(|(r, a)| {
                encode_sample(
                    encoder,
                    mode,
                    SegmentKey {
                        video_id: r.video_id.clone(),
                        start_s: r.start_s,
                    },
                    &r.subject_id,
                    r.label == SegmentLabel::Ictal,
                    &a.clips,
                )
            })
            .collect::<Result<_>>()?;
        out.extend(samples);
        pending.clear();
        Ok(())
    };
    for (slot, record) in ArchiveReader::open(&path)?.enumerate() {
        let record = record?;
        let Some(r) = by_slot.get(&slot) else { continue };
        if record.video_id != r.video_id || record.start_s != r.start_s {
            return Err(Error::Data(format!(
                "archive slot {slot} holds {}@{}, manifest expects {}@{}",
                record.video_id, record.start_s, r.video_id, r.start_s
            )));
        }
        pending.push((r, record));
        if pending.len() == CHUNK {
            flush(&mut pending)?;
        }
    }
    flush(&mut pending)?;
    if out.len() != wanted.len() {
        return Err(Error::Data(format!(
            "archive {} is truncated: {} of {} segments",
            path.display(),
            out.len(),
            wanted.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub split: SplitManifest,
    pub pools: PoolSizes,
    pub experiment: jointwatch::trainer::ExperimentReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run-{run}"))
}

pub fn train(cfg: &RunConfigFile) -> Result<TrainReport> {
    let prep = &cfg.paths.preprocessed;
    let manifest = SegmentManifest::load(prep)?;
    manifest.split.check_disjoint()?;
    let base = ReferenceEncoder::<f32>::new(cfg.model.encoder.clone(), cfg.seed)?;
    let mode = cfg.train.mode;
    let roles = [SplitRole::Train, SplitRole::Validation, SplitRole::Test];
    let cache = match mode {
        TrainMode::Frozen => {
            TokenCache::from_env(&manifest.dataset_sha256, manifest.stride_s, &cfg.model.encoder, cfg.seed)?
        }
        TrainMode::Lora => None,
    };
    let cached = match &cache {
        Some(c) => c.load()?,
        None => None,
    };
    let samples = match cached {
        Some(s) => {
            info!("train: {} encoded segments from cache", s.len());
            s
        }
        None => {
            let s = encode_segments(prep, &manifest, &base, mode, &roles)?;
            if let Some(c) = &cache {
                c.store(&s)?;
                info!("train: cached tokens at {}", c.path().display());
            }
            s
        }
    };
    let mut data = ExperimentData {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for s in samples {
        match role_of(&manifest.split, &s.subject_id)? {
            SplitRole::Train => data.train.push(s),
            SplitRole::Validation => data.validation.push(s),
            SplitRole::Test => data.test.push(s),
        }
    }
    let pools = PoolSizes {
        train: data.train.len(),
        validation: data.validation.len(),
        test: data.test.len(),
    };
    info!(
        "train: {} fit / {} validation / {} test segments, {} run(s), {mode:?} mode",
        pools.train, pools.validation, pools.test, cfg.runs
    );
    let (experiment, outputs) = run_experiment(&cfg.train, &base, &cfg.model.head, &data, cfg.runs)?;

    let out = &cfg.paths.out;
    create_dir(out)?;
    let mut i = 0;
    while run_dir(out, i).exists() {
        remove_if_present(&run_dir(out, i))?;
        i += 1;
    }
    let mut entries = vec![REPORT_FILE.to_string(), SPLIT_FILE.to_string()];
    for (i, o) in outputs.iter().enumerate() {
        let dir = run_dir(out, i);
        create_dir(&dir)?;
        o.outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        write_json(&dir.join(LOG_FILE), &o.outcome.log)?;
        write_json(&dir.join(SCORES_FILE), &o.scored)?;
        entries.push(format!("run-{i}"));
    }
    let report = TrainReport {
        mode,
        split: manifest.split.clone(),
        pools,
        experiment,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(&out.join(SPLIT_FILE), &manifest.split)?;
    let a = &report.experiment.aggregate;
    info!(
        "train: test AUROC {} / AUPRC {}",
        fmt_summary(&a.auroc),
        fmt_summary(&a.auprc)
    );
    let refs: Vec<&str> = entries.iter().map(String::as_str).collect();
    finish(cfg, "train", out, &refs)?;
    Ok(report)
}

fn fmt_summary(s: &jointwatch::evaluator::Summary) -> String {
    if s.n == 0 {
        "n/a".into()
    } else {
        format!("{:.3} ± {:.3}", s.mean, s.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub segments: usize,
    pub negatives: usize,
    pub positives: usize,
    pub metrics: MetricsReport,
    /// Trivial predictors on the same pool; absent for a single-class pool.
    pub baselines: Option<BaselineRows>,
}

/// Where `eval` reads its scores from.
pub enum EvalInput {
    Scores(PathBuf),
    /// Score the test split of the preprocessed directory with a checkpoint.
    Checkpoint(PathBuf),
}

pub fn eval(cfg: &RunConfigFile, input: &EvalInput, out: &Path) -> Result<EvalReport> {
    let scored: Vec<ScoredSegment> = match input {
        EvalInput::Scores(p) => read_json(p)?,
        EvalInput::Checkpoint(p) => {
            let model = Model::<f32>::from_checkpoint(&Checkpoint::load(p)?)?;
            let prep = &cfg.paths.preprocessed;
            let manifest = SegmentManifest::load(prep)?;
            let samples = encode_segments(prep, &manifest, &model.encoder, model.mode, &[SplitRole::Test])?;
            model.score_segments(&samples)?
        }
    };
    if scored.is_empty() {
        return Err(Error::Data("no scored segments to evaluate".into()));
    }
    let metrics = compute_metrics(&scored, DEFAULT_THRESHOLD)?;
    let positives = scored.iter().filter(|s| s.positive()).count();
    let negatives = scored.len() - positives;
    let baselines = if positives > 0 && negatives > 0 {
        Some(baseline_rows(negatives, positives)?)
    } else {
        None
    };
    let report = EvalReport {
        segments: scored.len(),
        negatives,
        positives,
        metrics,
        baselines,
    };
    create_dir(out)?;
    write_json(&out.join(SCORES_FILE), &scored)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    finish(cfg, "eval", out, &[SCORES_FILE, METRICS_FILE])?;
    Ok(report)
}

pub fn timeline_cmd(cfg: &RunConfigFile, checkpoint: &Path, video_id: &str, out: &Path) -> Result<jointwatch::evaluator::Timeline> {
    let model = Model::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let ds = Dataset::open(&cfg.paths.data)?;
    let video = ds
        .video(video_id)
        .ok_or_else(|| Error::Data(format!("video {video_id} is not in {}", cfg.paths.data.display())))?;
    let entries: Vec<SegmentEntry> = ds
        .plan(cfg.timeline.stride_s)?
        .into_iter()
        .filter(|e| e.video_id == video_id)
        .collect();
    let samples: Vec<Sample<f32>> = entries
        .par_iter()
        .map(|e| {
            let clips = ds.clip_set(e)?;
            let key = SegmentKey {
                video_id: e.video_id.clone(),
                start_s: e.start_s,
            };
            encode_sample(&model.encoder, model.mode, key, &e.subject_id, e.label == SegmentLabel::Ictal, &clips)
        })
        .collect::<Result<_>>()?;
    let scores = model.scores(&samples)?;
    let pairs: Vec<(f64, f64)> = entries.iter().map(|e| e.start_s).zip(scores).collect();
    let tl = timeline(video_id, &pairs, Some(&video.annotation))?;
    create_dir(out)?;
    write_json(&out.join(TIMELINE_FILE), &tl)?;
    let svg = out.join(TIMELINE_SVG);
    std::fs::write(&svg, timeline_svg(&tl)).map_err(|e| Error::io(&svg, e))?;
    finish(cfg, "timeline", out, &[TIMELINE_FILE, TIMELINE_SVG])?;
    Ok(tl)
}
