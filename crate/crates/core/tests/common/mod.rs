//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use jointwatch::cropper::Clip;
use jointwatch::dataset::{Dataset, SegmentEntry};
use jointwatch::encoder::{EncoderAdapter, ReferenceEncoder};
use jointwatch::evaluator::{compute_metrics, MetricsReport, ScoredSegment, DEFAULT_THRESHOLD};
use jointwatch::segmenter::{SegmentLabel, SegmentSpec};
use jointwatch::Result;

/// Whole-frame feature for one segment: the 30 sampled frames, uncropped,
/// through the same encoder that embeds joint clips.
pub fn full_frame_feature(ds: &Dataset, enc: &ReferenceEncoder<f32>, e: &SegmentEntry) -> Result<Vec<f64>> {
    let v = ds.video(&e.video_id).expect("video in dataset");
    let spec = SegmentSpec::new(&e.video_id, e.start_s, v.annotation.fps_native);
    let (h, w) = (v.source.height(), v.source.width());
    let mut clip = Clip::zeros(spec.frame_indices.len(), h, w);
    let n = h * w * 3;
    for (t, &i) in spec.frame_indices.iter().enumerate() {
        clip.data[t * n..(t + 1) * n].copy_from_slice(&v.source.frame(i)?.data);
    }
    Ok(enc.encode_joint_clip(&clip)?.vector.iter().map(|&x| x as f64).collect())
}

/// Full-frame ablation: logistic regression on whole-frame encoder features,
/// fit on `train` and scored on `test`.
pub struct FullFrameAblation {
    pub report: MetricsReport,
    pub scored: Vec<ScoredSegment>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn full_frame_ablation(
    ds: &Dataset,
    enc: &ReferenceEncoder<f32>,
    train: &[SegmentEntry],
    test: &[SegmentEntry],
) -> Result<FullFrameAblation> {
    use rayon::prelude::*;
    let labelled = |es: &[SegmentEntry]| -> Vec<SegmentEntry> {
        es.iter().filter(|e| e.label != SegmentLabel::Excluded).cloned().collect()
    };
    let (train, test) = (labelled(train), labelled(test));
    let feats = |es: &[SegmentEntry]| -> Result<Vec<Vec<f64>>> {
        es.par_iter().map(|e| full_frame_feature(ds, enc, e)).collect()
    };
    let (xtr, xte) = (feats(&train)?, feats(&test)?);
    let ytr: Vec<f64> = train.iter().map(|e| (e.label == SegmentLabel::Ictal) as u8 as f64).collect();
    let d = xtr[0].len();
    let mean: Vec<f64> = (0..d).map(|k| xtr.iter().map(|x| x[k]).sum::<f64>() / xtr.len() as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let v = xtr.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / xtr.len() as f64;
            v.sqrt().max(1e-8)
        })
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|k| (x[k] - mean[k]) / std[k]).collect() };
    let ztr: Vec<Vec<f64>> = xtr.iter().map(|x| z(x)).collect();
    let pos = ytr.iter().sum::<f64>();
    let pw = (ytr.len() as f64 - pos) / pos;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let lambda = 1e-3;
    for _ in 0..2000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        let mut wsum = 0.0;
        for (x, &y) in ztr.iter().zip(&ytr) {
            let p = sigmoid(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
            let cw = if y > 0.5 { pw } else { 1.0 };
            for k in 0..d {
                gw[k] += cw * (p - y) * x[k];
            }
            gb += cw * (p - y);
            wsum += cw;
        }
        for k in 0..d {
            w[k] -= 0.5 * (gw[k] / wsum + lambda * w[k]);
        }
        b -= 0.5 * gb / wsum;
    }
    let scored: Vec<ScoredSegment> = test
        .iter()
        .zip(&xte)
        .map(|(e, x)| {
            let zx = z(x);
            ScoredSegment {
                video_id: e.video_id.clone(),
                start_s: e.start_s,
                score: sigmoid(b + zx.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()),
                label: (e.label == SegmentLabel::Ictal) as u8,
            }
        })
        .collect();
    Ok(FullFrameAblation {
        report: compute_metrics(&scored, DEFAULT_THRESHOLD)?,
        scored,
    })
}
