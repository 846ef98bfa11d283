//! Segment-level metrics, reference predictor rows and onset-aligned timelines.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::OnsetAnnotation;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredSegment {
    pub video_id: String,
    pub start_s: f64,
    /// Post-sigmoid probability of the ictal class.
    pub score: f64,
    /// 1 for ictal, 0 for interictal.
    pub label: u8,
}

impl ScoredSegment {
    pub fn positive(&self) -> bool {
        self.label == 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "{}@{}: score {} outside [0, 1]",
                self.video_id, self.start_s, self.score
            )));
        }
        if self.label > 1 {
            return Err(Error::Validation(format!(
                "{}@{}: label {} is neither 0 nor 1",
                self.video_id, self.start_s, self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Absent when the input holds a single class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Rank-sum AUROC with average ranks for ties, so every tied
/// positive/negative pair counts one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Step-wise average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct
/// score thresholds taken from high to low.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Thresholded and ranking metrics; a segment is predicted ictal when `score ≥ threshold`.
pub fn compute_metrics(scored: &[ScoredSegment], threshold: f64) -> Result<MetricsReport> {
    if scored.is_empty() {
        return Err(Error::Data("no scored segments to evaluate".into()));
    }
    for s in scored {
        s.validate()?;
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(ScoredSegment::positive).collect();
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(&labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let auroc = auroc(&scores, &labels);
    let auprc = if auroc.is_some() {
        average_precision(&scores, &labels)
    } else {
        None
    };
    if auroc.is_none() {
        log::warn!("single-class evaluation set: AUROC and AUPRC are undefined");
    }
    Ok(MetricsReport {
        accuracy: ratio(c.tp + c.tn, scored.len()),
        auroc,
        auprc,
        f1,
        precision,
        recall,
        threshold,
        counts: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRows {
    pub all_positive: MetricsReport,
    pub all_negative: MetricsReport,
    /// Expected values of a fair coin.
    pub coin: MetricsReport,
}

fn constant_scores(negatives: usize, positives: usize, score: f64) -> Vec<ScoredSegment> {
    (0..negatives + positives)
        .map(|i| ScoredSegment {
            video_id: "baseline".into(),
            start_s: i as f64,
            score,
            label: u8::from(i >= negatives),
        })
        .collect()
}

/// Reference rows for trivial predictors on a test pool of the given size.
pub fn baseline_rows(negatives: usize, positives: usize) -> Result<BaselineRows> {
    if negatives == 0 || positives == 0 {
        return Err(Error::Validation(
            "baseline rows need both classes in the test pool".into(),
        ));
    }
    let all_positive = compute_metrics(&constant_scores(negatives, positives, 1.0), DEFAULT_THRESHOLD)?;
    let all_negative = compute_metrics(&constant_scores(negatives, positives, 0.0), DEFAULT_THRESHOLD)?;
    let n = (negatives + positives) as f64;
    let prevalence = positives as f64 / n;
    let coin = MetricsReport {
        accuracy: 0.5,
        auroc: Some(0.5),
        auprc: Some(prevalence),
        f1: 2.0 * prevalence * 0.5 / (prevalence + 0.5),
        precision: prevalence,
        recall: 0.5,
        threshold: DEFAULT_THRESHOLD,
        // Expected counts, halves rounded down.
        counts: ConfusionCounts {
            tp: positives / 2,
            fp: negatives / 2,
            tn: negatives - negatives / 2,
            fn_: positives - positives / 2,
        },
    };
    Ok(BaselineRows {
        all_positive,
        all_negative,
        coin,
    })
}

/// One draw of a coin-flip predictor: scores uniform on `[0, 1)`.
pub fn simulate_coin(negatives: usize, positives: usize, seed: u64) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scored = constant_scores(negatives, positives, 0.0);
    for s in &mut scored {
        s.score = rng.random::<f64>();
    }
    compute_metrics(&scored, DEFAULT_THRESHOLD)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub accuracy: Summary,
    /// Over the runs where the metric was defined.
    pub auroc: Summary,
    pub auprc: Summary,
    pub f1: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub per_run: Vec<MetricsReport>,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        Summary::of(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    AggregateReport {
        runs: reports.len(),
        accuracy: pick(&|r| Some(r.accuracy)),
        auroc: pick(&|r| r.auroc),
        auprc: pick(&|r| r.auprc),
        f1: pick(&|r| Some(r.f1)),
        precision: pick(&|r| Some(r.precision)),
        recall: pick(&|r| Some(r.recall)),
        per_run: reports.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub start_s: f64,
    /// `start_s − clinical onset`, or `start_s` when unaligned.
    pub t: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub video_id: String,
    pub aligned: bool,
    pub clinical_onset_s: Option<f64>,
    pub eeg_onset_s: Option<f64>,
    pub points: Vec<TimelinePoint>,
}

/// Orders window scores by start time and aligns them to clinical onset.
pub fn timeline(
    video_id: &str,
    scores: &[(f64, f64)],
    annotation: Option<&OnsetAnnotation>,
) -> Result<Timeline> {
    if scores.is_empty() {
        return Err(Error::Data(format!("no window scores for {video_id}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!(
            "{video_id}: two scores for the window at {} s",
            w[0].0
        )));
    }
    if annotation.is_none() {
        log::warn!("{video_id}: no annotation, timeline uses absolute time");
    }
    let onset = annotation.map(|a| a.clinical_onset_s);
    Ok(Timeline {
        video_id: video_id.to_string(),
        aligned: onset.is_some(),
        clinical_onset_s: onset,
        eeg_onset_s: annotation.map(|a| a.eeg_onset_s),
        points: sorted
            .into_iter()
            .map(|(start_s, score)| TimelinePoint {
                start_s,
                t: start_s - onset.unwrap_or(0.0),
                score,
            })
            .collect(),
    })
}

/// Line plot of the timeline with onset markers, as a standalone SVG document.
pub fn timeline_svg(tl: &Timeline) -> String {
    let (w, h, m) = (720.0, 260.0, 40.0);
    let t0 = tl.points.first().map_or(0.0, |p| p.t);
    let t1 = tl.points.last().map_or(1.0, |p| p.t).max(t0 + 1.0);
    let x = |t: f64| m + (t - t0) / (t1 - t0) * (w - 2.0 * m);
    let y = |s: f64| h - m - s.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{m}" y="20" font-family="sans-serif" font-size="13">{}</text>"#,
        tl.video_id
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        y(0.5),
        w - m,
        y(0.5)
    );
    let mut mark = |t: f64, color: &str, label: &str| {
        if (t0..=t1).contains(&t) {
            let _ = writeln!(
                svg,
                r#"<line x1="{0}" y1="{m}" x2="{0}" y2="{1}" stroke="{color}"/><text x="{2}" y="{3}" font-family="sans-serif" font-size="11" fill="{color}">{label}</text>"#,
                x(t),
                h - m,
                x(t) + 3.0,
                m + 12.0
            );
        }
    };
    if let Some(c) = tl.clinical_onset_s {
        mark(0.0, "crimson", "clinical onset");
        if let Some(e) = tl.eeg_onset_s {
            mark(e - c, "darkorange", "EEG onset");
        }
    }
    let pts: Vec<String> = tl
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.t), y(p.score)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{}"/>"##,
        pts.join(" ")
    );
    let axis = if tl.aligned { "t − clinical onset (s)" } else { "time (s)" };
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{axis}</text>"#,
        w / 2.0,
        h - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}
