//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the lines always reach stdout; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jointwatch::autograd::Tape;
use jointwatch::cropper::{extract_clip_set, PositionalTensor};
use jointwatch::dataset::{entries_for, Dataset};
use jointwatch::encoder::{PreprocessSpec, ReferenceEncoder, ReferenceEncoderConfig, ResizeMethod};
use jointwatch::evaluator::{auroc, average_precision, baseline_rows};
use jointwatch::fusion::{cross_joint_attention, AttentionBlock, FusionConfig, FusionHead, Pooling};
use jointwatch::ingestion::{Frame, FrameSource, OnsetAnnotation};
use jointwatch::lora::{merge_lora, LoraConfig};
use jointwatch::nn::ForwardCtx;
use jointwatch::params::ParamStore;
use jointwatch::segmenter::{build_segments, label_segment, make_split, SegmentLabel, SegmentSpec, SplitRole};
use jointwatch::synthgen::{generate_dataset, generate_subject, SynthConfig};
use jointwatch::tensor::Matrix;
use jointwatch::trainer::{
    encode_sample, run_experiment, train, Checkpoint, EncodedInput, ExperimentData, Model, SegmentKey,
    TrainConfig, TrainMode,
};

/// Outcome of one criterion: pass flag and a short measured summary.
type Verdict = (bool, String);

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn c1_baseline_rows() -> Verdict {
    let t = Instant::now();
    let rows = baseline_rows(565, 387).unwrap();
    let p = &rows.all_positive;
    let auprc = p.auprc.unwrap();
    let acc = rows.all_negative.accuracy;
    let tol = 5e-4;
    let ok = within(p.precision, 0.407, tol)
        && within(p.recall, 1.0, tol)
        && within(p.f1, 0.578, tol)
        && within(auprc, 0.407, tol)
        && within(acc, 0.593, tol);
    let el = t.elapsed();
    (
        ok && el < Duration::from_secs(1),
        format!(
            "all-positive P {:.4} R {:.4} F1 {:.4} AUPRC {:.4}; all-negative acc {:.4}; {:?}",
            p.precision, p.recall, p.f1, auprc, acc, el
        ),
    )
}

fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn rand_pos(joints: usize, frames: usize, rng: &mut ChaCha8Rng) -> PositionalTensor {
    let v = (0..joints * frames)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    PositionalTensor::from_values(joints, frames, v).unwrap()
}

fn c3_lora_equivalence() -> Verdict {
    let base = ReferenceEncoder::<f64>::new(ReferenceEncoderConfig::default(), 11).unwrap();
    let fusion = FusionConfig::default();
    let lora = LoraConfig::default();
    let frozen = Model::new(TrainMode::Frozen, &base, fusion.clone(), &lora, 4).unwrap();
    let mut adapted = Model::new(TrainMode::Lora, &base, fusion, &lora, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tokens = base.config.tokens();
    let inputs: Vec<(Vec<Matrix<f64>>, PositionalTensor)> = (0..100)
        .map(|_| {
            let stems = (0..14).map(|_| rand_matrix(tokens, 32, 1.5, &mut rng)).collect();
            (stems, rand_pos(14, 30, &mut rng))
        })
        .collect();
    let logit = |m: &Model<f64>, stems: &[Matrix<f64>], pos: &PositionalTensor| {
        let t = m.encoder.tokens_from_stems(stems);
        (m.head.logit(&t, pos).unwrap(), t)
    };
    let mut zero_init = 0.0f64;
    for (stems, pos) in &inputs {
        let (a, ta) = logit(&frozen, stems, pos);
        let (b, tb) = logit(&adapted, stems, pos);
        zero_init = zero_init.max((a - b).abs()).max(ta.max_abs_diff(&tb));
    }
    // Non-zero B so the merge has something to fold in.
    let store = adapted.encoder.params_mut();
    let lora_b: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".lora_b")).map(|(id, _)| id).collect();
    for id in lora_b {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    let before: Vec<f64> = inputs.iter().map(|(s, p)| logit(&adapted, s, p).0).collect();
    let moved = before
        .iter()
        .zip(&inputs)
        .any(|(b, (s, p))| (b - logit(&frozen, s, p).0).abs() > 1e-6);
    let merged_count = merge_lora(&mut adapted.encoder);
    let merge_err = inputs
        .iter()
        .zip(&before)
        .map(|((s, p), b)| (logit(&adapted, s, p).0 - b).abs())
        .fold(0.0, f64::max);
    (
        zero_init <= 1e-6 && merge_err <= 1e-5 && moved && merged_count == 10,
        format!("zero-init max diff {zero_init:.2e}, merge max diff {merge_err:.2e} over 100 inputs, {merged_count} adapters"),
    )
}

fn rand_block(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionBlock<f64> {
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    AttentionBlock {
        heads,
        wq: Matrix::from_vec(d, d, v(d * d)).unwrap(),
        bq: v(d),
        wk: Matrix::from_vec(d, d, v(d * d)).unwrap(),
        bk: v(d),
        wv: Matrix::from_vec(d, d, v(d * d)).unwrap(),
        bv: v(d),
        wo: Matrix::from_vec(d, d, v(d * d)).unwrap(),
        bo: v(d),
    }
}

fn c4_attention() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut row_err = 0.0f64;
    let mut in_range = true;
    for _ in 0..1000 {
        let j = rng.random_range(1..=14);
        let block = rand_block(8, 2, &mut rng);
        let z = rand_matrix(j, 8, 3.0, &mut rng);
        for w in cross_joint_attention(&z, &block).unwrap().weights {
            for i in 0..j {
                let r = w.row(i);
                in_range &= r.iter().all(|&x| (0.0..=1.0).contains(&x));
                row_err = row_err.max((r.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // J = 2, d = 2, one head: every product written out.
    let block = AttentionBlock {
        heads: 1,
        wq: Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap(),
        bq: vec![0.1, 0.0],
        wk: Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        bk: vec![0.0, -0.2],
        wv: Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap(),
        bv: vec![0.0, 0.3],
        wo: Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap(),
        bo: vec![0.5, 0.0],
    };
    let z = [[0.3, -1.2], [1.5, 0.4]];
    let lin = |w: &Matrix<f64>, b: &[f64], x: [f64; 2]| {
        [
            w.get(0, 0) * x[0] + w.get(0, 1) * x[1] + b[0],
            w.get(1, 0) * x[0] + w.get(1, 1) * x[1] + b[1],
        ]
    };
    let q = z.map(|x| lin(&block.wq, &block.bq, x));
    let k = z.map(|x| lin(&block.wk, &block.bk, x));
    let v = z.map(|x| lin(&block.wv, &block.bv, x));
    let s = 2f64.sqrt();
    let mut oracle = [[0.0; 2]; 2];
    let mut weights = [[0.0; 2]; 2];
    for i in 0..2 {
        let e0 = ((q[i][0] * k[0][0] + q[i][1] * k[0][1]) / s).exp();
        let e1 = ((q[i][0] * k[1][0] + q[i][1] * k[1][1]) / s).exp();
        weights[i] = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let mixed = [
            weights[i][0] * v[0][0] + weights[i][1] * v[1][0],
            weights[i][0] * v[0][1] + weights[i][1] * v[1][1],
        ];
        oracle[i] = lin(&block.wo, &block.bo, mixed);
    }
    let got = cross_joint_attention(&Matrix::from_vec(2, 2, z.concat()).unwrap(), &block).unwrap();
    let mut hand_err = 0.0f64;
    for i in 0..2 {
        for c in 0..2 {
            hand_err = hand_err
                .max((got.output.get(i, c) - oracle[i][c]).abs())
                .max((got.weights[0].get(i, c) - weights[i][c]).abs());
        }
    }

    let head = FusionHead::<f64>::new(FusionConfig::default(), 41).unwrap();
    let tokens = rand_matrix(14, 32, 1.0, &mut rng);
    let pos = rand_pos(14, 30, &mut rng);
    let reference = head.logit(&tokens, &pos).unwrap();
    let mut perm_err = 0.0f64;
    let mut perm: Vec<usize> = (0..14).collect();
    for _ in 0..100 {
        perm.shuffle(&mut rng);
        let t = Matrix::from_fn(14, 32, |i, c| tokens.get(perm[i], c));
        perm_err = perm_err.max((head.logit(&t, &pos.permuted(&perm)).unwrap() - reference).abs());
    }
    (
        row_err <= 1e-6 && in_range && hand_err <= 1e-6 && perm_err <= 1e-6,
        format!("row-sum err {row_err:.1e} (1000 sets), J=2 oracle err {hand_err:.1e}, permutation err {perm_err:.1e} (100 perms)"),
    )
}

/// Largest relative error between tape gradients and central differences of
/// `loss`, over every entry of every parameter (strided for big tensors).
fn worst_fd_error<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> f64,
    grads: &jointwatch::params::GradSet<f64>,
) -> f64 {
    let h = 1e-6;
    let ids: Vec<_> = store(model).ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = grads.get(id).expect("gradient for every parameter").clone();
        let n = analytic.data().len();
        let step = if n > 512 { 37 } else { 1 };
        for k in (0..n).step_by(step) {
            let orig = store(model).value(id).data()[k];
            store(model).get_mut(id).value.data_mut()[k] = orig + h;
            let up = loss(model);
            store(model).get_mut(id).value.data_mut()[k] = orig - h;
            let down = loss(model);
            store(model).get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

fn c5_gradients() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = FusionConfig {
        d: 8,
        heads: 2,
        depth: 1,
        pooling: Pooling::Mean,
        frames: 2,
    };
    let mut head = FusionHead::<f64>::new(cfg, 51).unwrap();
    let z = rand_matrix(4, 8, 1.0, &mut rng);
    let pos = rand_pos(4, 2, &mut rng);
    let mut tape = Tape::new();
    let bound = head.params().bind(&mut tape, true);
    let tz = tape.constant(z.clone());
    let tp = tape.constant(pos.to_matrix());
    let tr = head.forward(&mut tape, &bound, tz, tp, &mut ForwardCtx::inference());
    let l = tape.bce_logit(tr.logit, true, 1.5);
    let grads = bound.collect(&mut tape.backward(l));
    let head_err = worst_fd_error(
        &mut head,
        |h| h.params_mut(),
        |h| jointwatch::fusion::bce_weighted(h.logit(&z, &pos).unwrap(), true, 1.5),
        &grads,
    );

    let enc_cfg = ReferenceEncoderConfig {
        d: 16,
        heads: 2,
        mlp_hidden: 32,
        tubelet_frames: 2,
        patch: 8,
        preprocess: PreprocessSpec {
            frames: 4,
            size: 16,
            resize: ResizeMethod::Area,
            mean: [0.5; 3],
            std: [0.25; 3],
        },
        ..ReferenceEncoderConfig::default()
    };
    let mut enc = ReferenceEncoder::<f64>::new(enc_cfg, 52).unwrap();
    enc.set_trainable(true);
    let mut clip = jointwatch::cropper::Clip::zeros(4, 16, 16);
    for v in clip.data.iter_mut() {
        *v = rng.random();
    }
    let patches = enc.patchify(&clip).unwrap();
    let probe = rand_matrix(1, 16, 1.0, &mut rng);
    let forward = |e: &ReferenceEncoder<f64>, grad: bool| {
        let mut tape = Tape::new();
        let bound = e.bind(&mut tape, grad);
        let x = tape.constant(patches.clone());
        let tok = e.token_on_tape(&mut tape, &bound, x, &mut ForwardCtx::inference());
        let w = tape.constant(probe.clone());
        let l = tape.matmul_nt(tok, w);
        (tape, bound, l)
    };
    let (tape, bound, l) = forward(&enc, true);
    let grads = bound.collect(&mut tape.backward(l));
    let enc_err = worst_fd_error(
        &mut enc,
        |e| e.params_mut(),
        |e| {
            let (tape, _, l) = forward(e, false);
            tape.scalar(l)
        },
        &grads,
    );
    let el = t.elapsed();
    (
        head_err < 1e-4 && enc_err < 1e-4 && el < Duration::from_secs(60),
        format!("max relative error head {head_err:.1e} (d=8, J=4), encoder {enc_err:.1e} (d=16, T=4, 16x16); {el:?}"),
    )
}

/// Wraps a frame source and overwrites fixed random pixels that lie outside
/// every crop window of the segment.
struct Perturbed<'a> {
    inner: &'a dyn FrameSource,
    edits: std::collections::HashMap<u64, Vec<(usize, usize, [u8; 3])>>,
}

impl FrameSource for Perturbed<'_> {
    fn video_id(&self) -> &str {
        self.inner.video_id()
    }
    fn height(&self) -> usize {
        self.inner.height()
    }
    fn width(&self) -> usize {
        self.inner.width()
    }
    fn frame_count(&self) -> u64 {
        self.inner.frame_count()
    }
    fn frame(&self, index: u64) -> jointwatch::Result<Frame> {
        let mut f = self.inner.frame(index)?;
        for &(y, x, rgb) in self.edits.get(&index).into_iter().flatten() {
            f.set_pixel(y, x, rgb);
        }
        Ok(f)
    }
}

fn c6_background_invariance() -> Verdict {
    let cfg = SynthConfig {
        n_subjects: 1,
        videos_per_subject: 1,
        duration_s: 30.0,
        ..SynthConfig::default()
    };
    let subject = generate_subject(&cfg, 0).unwrap();
    let v = &subject.videos[0];
    let enc = ReferenceEncoder::<f64>::new(ReferenceEncoderConfig::default(), 60).unwrap();
    let model = Model::new(TrainMode::Frozen, &enc, FusionConfig::default(), &LoraConfig::default(), 61).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut changed = 0usize;
    let mut identical = true;
    for start in [3.0, 12.0, 21.0] {
        let spec = SegmentSpec::new(&v.annotation.video_id, start, cfg.fps);
        let clean = extract_clip_set(&v.scene, &spec, &v.keypoints).unwrap();
        let (h, w) = (cfg.frame_height as i64, cfg.frame_width as i64);
        let mut edits = std::collections::HashMap::new();
        for (t, &idx) in spec.frame_indices.iter().enumerate() {
            let original = v.scene.frame(idx).unwrap();
            let centres: Vec<(i64, i64)> = clean
                .coords
                .iter()
                .map(|c| (c[t].0.round() as i64, c[t].1.round() as i64))
                .collect();
            let mut list = Vec::new();
            while list.len() < 150 {
                let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
                let inside = centres
                    .iter()
                    .any(|&(cx, cy)| x >= cx - 60 && x < cx + 60 && y >= cy - 60 && y < cy + 60);
                let rgb: [u8; 3] = rng.random();
                if !inside && original.pixel(y as usize, x as usize) != rgb {
                    list.push((y as usize, x as usize, rgb));
                }
            }
            changed += list.len();
            edits.insert(idx, list);
        }
        let noisy = Perturbed { inner: &v.scene, edits };
        let dirty = extract_clip_set(&noisy, &spec, &v.keypoints).unwrap();
        let key = SegmentKey {
            video_id: v.annotation.video_id.clone(),
            start_s: start,
        };
        let a = encode_sample(&enc, TrainMode::Frozen, key.clone(), "s", false, &clean).unwrap();
        let b = encode_sample(&enc, TrainMode::Frozen, key, "s", false, &dirty).unwrap();
        identical &= clean == dirty && model.logit(&a).unwrap() == model.logit(&b).unwrap();
    }
    (
        identical && changed >= 10_000,
        format!("{changed} background pixels changed over 3 segments; clip sets and logits bit-identical: {identical}"),
    )
}

/// Per-tick timeline oracle: 0.1 s ticks tagged before-EEG or in the ictal
/// window, segments judged by looking at their ticks one at a time.
fn tick_oracle(start: f64, eeg10: i64, clinical10: i64) -> SegmentLabel {
    let s = (start * 10.0).round() as i64;
    let all_before_eeg = (s..s + 50).all(|tick| tick + 1 <= eeg10);
    let first_in_window = {
        let tick = s;
        tick >= clinical10 && tick < clinical10 + 400
    };
    match (all_before_eeg, first_in_window) {
        (true, false) => SegmentLabel::Interictal,
        (false, true) => SegmentLabel::Ictal,
        (false, false) => SegmentLabel::Excluded,
        (true, true) => panic!("segment at {start} satisfies both rules"),
    }
}

fn c7_label_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let (mut checked, mut agree, mut both) = (0usize, 0usize, 0usize);
    for i in 0..1000 {
        let duration10 = rng.random_range(200..=1500i64);
        let eeg10 = rng.random_range(0..duration10);
        let clinical10 = (eeg10 + rng.random_range(0..=150)).min(duration10);
        let ann = OnsetAnnotation {
            video_id: format!("v{i}"),
            subject_id: "s".into(),
            fps_native: 30.0,
            eeg_onset_s: eeg10 as f64 / 10.0,
            clinical_onset_s: clinical10 as f64 / 10.0,
            duration_s: duration10 as f64 / 10.0,
        };
        for seg in build_segments(&ann, 1.0).unwrap() {
            let got = label_segment(&seg, &ann);
            let want = catch_unwind(|| tick_oracle(seg.start_s, eeg10, clinical10));
            checked += 1;
            match want {
                Ok(w) if w == got => agree += 1,
                Ok(_) => {}
                Err(_) => both += 1,
            }
        }
    }
    (
        agree == checked && both == 0,
        format!("{agree}/{checked} segments agree over 1000 annotations; {both} satisfy both rules"),
    )
}

fn pairwise_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Exhaustive thresholds: precision at every distinct score, weighted by the
/// recall gained there.
fn threshold_ap(s: &[f64], y: &[bool]) -> f64 {
    let mut cuts: Vec<f64> = s.to_vec();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for c in cuts {
        let tp = s.iter().zip(y).filter(|(&v, &l)| v >= c && l).count() as f64;
        let called = s.iter().filter(|&&v| v >= c).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / called;
        prev_recall = recall;
    }
    ap
}

fn c8_metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for _ in 0..2000 {
        let n = rng.random_range(2..=50);
        // Coarse scores make ties common.
        let levels = rng.random_range(2..=20);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            continue;
        }
        instances += 1;
        worst = worst
            .max((auroc(&s, &y).unwrap() - pairwise_auroc(&s, &y)).abs())
            .max((average_precision(&s, &y).unwrap() - threshold_ap(&s, &y)).abs());
    }
    let mut monotone_err = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(5..=50);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..30) as f64 / 30.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let p = rng.random_range(0.2..5.0);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-3.0..3.0));
        let mapped: Vec<f64> = s.iter().map(|&x| (a * x.powf(p) + b).exp()).collect();
        monotone_err = monotone_err.max((auroc(&s, &y).unwrap() - auroc(&mapped, &y).unwrap()).abs());
    }
    (
        worst <= 1e-9 && monotone_err <= 1e-9,
        format!("max oracle diff {worst:.1e} over {instances} instances (n<=50); monotone-map diff {monotone_err:.1e} over 100 maps"),
    )
}

struct EndToEnd {
    verdict: Verdict,
    cfg: TrainConfig,
    base: ReferenceEncoder<f32>,
    data: ExperimentData<f32>,
    run0: jointwatch::trainer::RunOutput<f32>,
    run0_metrics: jointwatch::evaluator::MetricsReport,
}

fn c9_end_to_end() -> EndToEnd {
    let t = Instant::now();
    let synth = SynthConfig::default();
    let subjects = generate_dataset(&synth).unwrap();
    let ds = Dataset::from_synthetic(&subjects);
    let plan = ds.plan(5.0).unwrap();
    let split = make_split(&ds.subjects(), 2, 1, synth.seed).unwrap();
    let base = ReferenceEncoder::<f32>::new(ReferenceEncoderConfig::default(), synth.seed).unwrap();
    let fit = entries_for(&plan, &split, SplitRole::Train);
    let val = entries_for(&plan, &split, SplitRole::Validation);
    let test = entries_for(&plan, &split, SplitRole::Test);
    let data = ExperimentData {
        train: ds.encode(&base, TrainMode::Frozen, &fit).unwrap(),
        validation: ds.encode(&base, TrainMode::Frozen, &val).unwrap(),
        test: ds.encode(&base, TrainMode::Frozen, &test).unwrap(),
    };
    let cfg = TrainConfig {
        lr_head: 1e-3,
        epochs: 30,
        seed: 0,
        ..TrainConfig::default()
    };
    let (report, mut outputs) = run_experiment(&cfg, &base, &FusionConfig::default(), &data, 3).unwrap();
    let ablation = common::full_frame_ablation(&ds, &base, &[fit, val].concat(), &test).unwrap();
    let el = t.elapsed();
    let mean_auroc = report.aggregate.auroc.mean;
    let mean_auprc = report.aggregate.auprc.mean;
    let ab = ablation.report.auroc.unwrap();
    let ok = mean_auroc >= 0.95 && mean_auprc >= 0.90 && ab <= mean_auroc - 0.10 && el <= Duration::from_secs(600);
    let verdict = (
        ok,
        format!(
            "test {:?} / {:?}: AUROC {:.3}±{:.3}, AUPRC {:.3}±{:.3} over 3 seeds; full-frame ablation AUROC {:.3} (gap {:.3}); {:.1?} on {} thread(s)",
            split.test_subjects,
            split.validation_subjects,
            mean_auroc,
            report.aggregate.auroc.std,
            mean_auprc,
            report.aggregate.auprc.std,
            ab,
            mean_auroc - ab,
            el,
            rayon::current_num_threads()
        ),
    );
    EndToEnd {
        verdict,
        cfg,
        base,
        data,
        run0: outputs.remove(0),
        run0_metrics: report.runs[0].metrics.clone(),
    }
}

fn c10_determinism(e2e: &EndToEnd) -> Verdict {
    let again = train(&e2e.cfg, &e2e.base, &FusionConfig::default(), &e2e.data.train, &e2e.data.validation).unwrap();
    let scored = again.model.score_segments(&e2e.data.test).unwrap();
    let metrics = jointwatch::evaluator::compute_metrics(&scored, jointwatch::evaluator::DEFAULT_THRESHOLD).unwrap();
    let same_metrics = metrics == e2e.run0_metrics && scored == e2e.run0.scored;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    e2e.run0.outcome.checkpoint.save(&path).unwrap();
    let loaded = Model::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let original = e2e.run0.outcome.model.scores(&e2e.data.test).unwrap();
    let restored = loaded.scores(&e2e.data.test).unwrap();
    let same_forward = original == restored;
    let tokens_only = e2e.data.test.iter().all(|s| matches!(s.input, EncodedInput::Tokens(_)));
    (
        same_metrics && same_forward && tokens_only,
        format!(
            "retrain with seed {}: identical metrics and scores {same_metrics}; checkpoint reload forward outputs identical {same_forward} ({} segments)",
            e2e.cfg.seed,
            original.len()
        ),
    )
}

fn report(n: &str, name: &str, v: std::thread::Result<Verdict>, failures: &mut Vec<String>) {
    match v {
        Ok((true, detail)) => println!("criterion {n:>2} PASS  {name}: {detail}"),
        Ok((false, detail)) => {
            println!("criterion {n:>2} FAIL  {name}: {detail}");
            failures.push(n.to_string());
        }
        Err(_) => {
            println!("criterion {n:>2} FAIL  {name}: panicked");
            failures.push(n.to_string());
        }
    }
}

fn main() {
    // Only run when the harness asks for tests, not on `--list` probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = Vec::new();
    report("1", "baseline rows", catch_unwind(c1_baseline_rows), &mut failures);
    println!(
        "criterion  2 SUBST full-scale clinical results: need clinical recordings and a large pretrained backbone; covered by criteria 3-9"
    );
    report("3", "LoRA zero-init and merge", catch_unwind(c3_lora_equivalence), &mut failures);
    report("4", "attention correctness", catch_unwind(c4_attention), &mut failures);
    report("5", "gradient checks", catch_unwind(c5_gradients), &mut failures);
    report("6", "background invariance", catch_unwind(c6_background_invariance), &mut failures);
    report("7", "label oracle", catch_unwind(c7_label_oracle), &mut failures);
    report("8", "metric oracles", catch_unwind(c8_metric_oracles), &mut failures);
    match catch_unwind(AssertUnwindSafe(c9_end_to_end)) {
        Ok(e2e) => {
            report("9", "synthetic generalization", Ok(e2e.verdict.clone()), &mut failures);
            report("10", "determinism", catch_unwind(AssertUnwindSafe(|| c10_determinism(&e2e))), &mut failures);
        }
        Err(p) => {
            report("9", "synthetic generalization", Err(p), &mut failures);
            println!("criterion 10 FAIL  determinism: depends on the criterion 9 run, which panicked");
            failures.push("10".into());
        }
    }
    if failures.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {}", failures.join(", "));
        std::process::exit(1);
    }
}
