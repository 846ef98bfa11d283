//! Training of the fusion head (and optionally LoRA adapters) with early
//! stopping, multi-seed experiments and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape};
use crate::cropper::{build_positional_tensor, JointClipSet, PositionalTensor};
use crate::encoder::{EncoderAdapter, ReferenceEncoder, ReferenceEncoderConfig};
use crate::error::{Error, Result};
use crate::evaluator::{aggregate, compute_metrics, AggregateReport, MetricsReport, ScoredSegment, DEFAULT_THRESHOLD};
use crate::fusion::{bce_weighted, FusionConfig, FusionHead, HeadParts};
use crate::lora::{inject_lora, LoraCheckpoint, LoraConfig};
use crate::nn::ForwardCtx;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{GradSet, ParamGroup, ParamSnapshot};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Encoder fixed; only the fusion head learns.
    Frozen,
    /// Fusion head plus low-rank adapters in the encoder.
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_lora: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
    /// Weight positives by `n_neg / n_pos` of the training pool.
    pub class_weighting: bool,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Frozen,
            epochs: 30,
            batch_size: 16,
            lr_head: 1e-4,
            lr_lora: 5e-5,
            weight_decay: 0.01,
            seed: 0,
            patience: 5,
            class_weighting: true,
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_head > 0.0 && self.lr_lora > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates must be positive, weight decay non-negative".into()));
        }
        if self.mode == TrainMode::Lora {
            self.lora.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentKey {
    pub video_id: String,
    pub start_s: f64,
}

/// What the head needs from the encoder for one segment.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedInput<F> {
    /// Final `J × d` tokens of a frozen encoder.
    Tokens(Matrix<F>),
    /// Per-joint stems (tubelet plus position embedding), for adapter training.
    Stems(Vec<Matrix<F>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<F> {
    pub key: SegmentKey,
    pub subject_id: String,
    pub label: bool,
    pub input: EncodedInput<F>,
    pub pos: PositionalTensor,
}

/// Runs the frozen parts of the encoder once for a labelled segment.
pub fn encode_sample<F: Scalar>(
    encoder: &ReferenceEncoder<F>,
    mode: TrainMode,
    key: SegmentKey,
    subject_id: &str,
    label: bool,
    clips: &JointClipSet,
) -> Result<Sample<F>> {
    let input = match mode {
        TrainMode::Frozen => EncodedInput::Tokens(encoder.encode_clip_set(clips)?),
        TrainMode::Lora => EncodedInput::Stems(
            clips
                .clips
                .iter()
                .map(|c| encoder.stem(c))
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Sample {
        key,
        subject_id: subject_id.to_string(),
        label,
        input,
        pos: build_positional_tensor(clips, clips.frame_height, clips.frame_width),
    })
}

/// Encoder plus head, as trained.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub mode: TrainMode,
    pub encoder: ReferenceEncoder<F>,
    pub head: FusionHead<F>,
    pub lora: Option<LoraConfig>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<F: Scalar> Model<F> {
    /// Copies the base encoder, freezes it, and in LoRA mode attaches adapters.
    pub fn new(
        mode: TrainMode,
        base: &ReferenceEncoder<F>,
        fusion: FusionConfig,
        lora: &LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        if fusion.d != base.config.d {
            return Err(Error::Config(format!(
                "head width {} differs from encoder width {}",
                fusion.d, base.config.d
            )));
        }
        let mut encoder = base.clone();
        encoder.set_trainable(false);
        let lora = match mode {
            TrainMode::Frozen => None,
            TrainMode::Lora => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, 0));
                inject_lora(&mut encoder, lora, &mut rng)?;
                Some(lora.clone())
            }
        };
        Ok(Self {
            mode,
            encoder,
            head: FusionHead::new(fusion, mix(seed, 2, 0))?,
            lora,
        })
    }

    fn tokens(&self, input: &EncodedInput<F>) -> Result<Matrix<F>> {
        match (self.mode, input) {
            (TrainMode::Frozen, EncodedInput::Tokens(t)) => Ok(t.clone()),
            (_, EncodedInput::Stems(s)) => Ok(self.encoder.tokens_from_stems(s)),
            (TrainMode::Lora, EncodedInput::Tokens(_)) => Err(Error::Config(
                "adapter training needs encoder stems, not cached tokens".into(),
            )),
        }
    }

    fn logit_with(&self, parts: &HeadParts<F>, s: &Sample<F>) -> Result<F> {
        parts.logit(&self.tokens(&s.input)?, &s.pos)
    }

    pub fn logit(&self, s: &Sample<F>) -> Result<F> {
        self.logit_with(&self.head.parts(), s)
    }

    /// Post-sigmoid scores, in input order.
    pub fn scores(&self, samples: &[Sample<F>]) -> Result<Vec<f64>> {
        let parts = self.head.parts();
        samples
            .par_iter()
            .map(|s| Ok(sigmoid(self.logit_with(&parts, s)?).f64()))
            .collect()
    }

    pub fn score_segments(&self, samples: &[Sample<F>]) -> Result<Vec<ScoredSegment>> {
        Ok(self
            .scores(samples)?
            .into_iter()
            .zip(samples)
            .map(|(score, s)| ScoredSegment {
                video_id: s.key.video_id.clone(),
                start_s: s.key.start_s,
                score,
                label: u8::from(s.label),
            })
            .collect())
    }

    /// Loss and parameter gradients for one sample.
    fn sample_grads(
        &self,
        s: &Sample<F>,
        pos_weight: F,
        ctx_seed: u64,
    ) -> Result<(F, GradSet<F>, Option<GradSet<F>>)> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::training(ctx_seed);
        let head_bound = self.head.params().bind(&mut tape, true);
        let (tokens, enc_bound) = match (&s.input, self.mode) {
            (EncodedInput::Tokens(t), TrainMode::Frozen) => (tape.constant(t.clone()), None),
            (EncodedInput::Stems(stems), mode) => {
                let b = self.encoder.bind(&mut tape, mode == TrainMode::Lora);
                let rows: Vec<_> = stems
                    .iter()
                    .map(|st| {
                        let v = tape.constant(st.clone());
                        self.encoder.token_from_stem(&mut tape, &b, v, &mut ctx)
                    })
                    .collect();
                (tape.stack_rows(&rows), Some(b))
            }
            (EncodedInput::Tokens(_), TrainMode::Lora) => {
                return Err(Error::Config(
                    "adapter training needs encoder stems, not cached tokens".into(),
                ))
            }
        };
        let pos = tape.constant(s.pos.to_matrix());
        let trace = self.head.forward(&mut tape, &head_bound, tokens, pos, &mut ctx);
        let loss = tape.bce_logit(trace.logit, s.label, pos_weight);
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss);
        let head = head_bound.collect(&mut grads);
        let enc = enc_bound.map(|b| b.collect(&mut grads));
        Ok((value, head, enc))
    }

    fn snapshot(&self) -> (BTreeMap<String, ParamSnapshot>, BTreeMap<String, ParamSnapshot>) {
        (self.encoder.params().snapshot(), self.head.params().snapshot())
    }

    fn restore(
        &mut self,
        enc: &BTreeMap<String, ParamSnapshot>,
        head: &BTreeMap<String, ParamSnapshot>,
    ) -> Result<()> {
        self.encoder.params_mut().restore(enc)?;
        self.head.params_mut().restore(head)
    }

    pub fn checkpoint(&self, seed: u64, epoch: usize, validation: ValidationSnapshot, train: &TrainConfig) -> Checkpoint {
        let (encoder, head) = self.snapshot();
        let mut enc = self.encoder.clone();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            mode: self.mode,
            seed,
            epoch,
            validation,
            train_config: train.clone(),
            encoder_config: self.encoder.config.clone(),
            fusion_config: self.head.config.clone(),
            encoder,
            head,
            lora: self
                .lora
                .as_ref()
                .map(|c| LoraCheckpoint::capture(&mut enc, c)),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        if cp.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format {}", cp.format)));
        }
        let base = ReferenceEncoder::new(cp.encoder_config.clone(), 0)?;
        let lora = cp.lora.as_ref().map(|l| l.config.clone()).unwrap_or_default();
        let mut m = Model::new(cp.mode, &base, cp.fusion_config.clone(), &lora, 0)?;
        m.restore(&cp.encoder, &cp.head)?;
        Ok(m)
    }
}

pub const CHECKPOINT_FORMAT: &str = "jointwatch-checkpoint-1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSnapshot {
    pub auroc: Option<f64>,
    pub loss: f64,
}

/// Everything needed to rebuild a trained model. Values are stored as f64,
/// which holds f32 weights exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub epoch: usize,
    pub validation: ValidationSnapshot,
    pub train_config: TrainConfig,
    pub encoder_config: ReferenceEncoderConfig,
    pub fusion_config: FusionConfig,
    pub encoder: BTreeMap<String, ParamSnapshot>,
    pub head: BTreeMap<String, ParamSnapshot>,
    pub lora: Option<LoraCheckpoint>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auroc: Option<f64>,
    pub lr_head: f64,
    pub lr_lora: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn subjects<F>(s: &[Sample<F>]) -> BTreeSet<&str> {
    s.iter().map(|x| x.subject_id.as_str()).collect()
}

/// Fails when any subject appears in more than one pool.
pub fn check_no_leakage<F>(pools: &[(&str, &[Sample<F>])]) -> Result<()> {
    for (i, (na, a)) in pools.iter().enumerate() {
        for (nb, b) in &pools[i + 1..] {
            let sa = subjects(a);
            let shared: Vec<&str> = subjects(b).intersection(&sa).copied().collect();
            if !shared.is_empty() {
                return Err(Error::Data(format!(
                    "subject leakage between {na} and {nb} pools: {}",
                    shared.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn validation_score<F: Scalar>(model: &Model<F>, val: &[Sample<F>]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let parts = model.head.parts();
    let logits: Vec<F> = val
        .par_iter()
        .map(|s| model.logit_with(&parts, s))
        .collect::<Result<_>>()?;
    let loss = logits
        .iter()
        .zip(val)
        .map(|(&l, s)| bce_weighted(l, s.label, F::one()).f64())
        .sum::<f64>()
        / val.len() as f64;
    let scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l).f64()).collect();
    let labels: Vec<bool> = val.iter().map(|s| s.label).collect();
    Ok((Some(loss), crate::evaluator::auroc(&scores, &labels)))
}

fn improves(auroc: Option<f64>, loss: Option<f64>, best: &Option<(Option<f64>, f64)>) -> bool {
    let loss = loss.unwrap_or(f64::INFINITY);
    match best {
        None => true,
        Some((best_auc, best_loss)) => match (auroc, best_auc) {
            (Some(a), Some(b)) if a != *b => a > *b,
            _ => loss < *best_loss,
        },
    }
}

/// Trains one model from `base`, keeping the epoch with the best validation
/// AUROC (ties broken by validation loss). Without a validation pool the last
/// epoch is kept.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    base: &ReferenceEncoder<F>,
    fusion: &FusionConfig,
    train_set: &[Sample<F>],
    val_set: &[Sample<F>],
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    check_no_leakage(&[("train", train_set), ("validation", val_set)])?;
    let n_pos = train_set.iter().filter(|s| s.label).count();
    let n_neg = train_set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "training pool needs both classes, has {n_neg} interictal and {n_pos} ictal segments"
        )));
    }
    let pos_weight = if cfg.class_weighting {
        F::of(n_neg as f64 / n_pos as f64)
    } else {
        F::one()
    };
    let mut model = Model::new(cfg.mode, base, fusion.clone(), &cfg.lora, cfg.seed)?;
    let base_print = (cfg.mode == TrainMode::Frozen).then(|| model.encoder.params().fingerprint());
    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut head_opt = AdamW::new(opt_cfg, model.head.params());
    let mut enc_opt = AdamW::new(opt_cfg, model.encoder.params());
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Option<f64>, f64)> = None;
    let mut best_state = model.snapshot();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let (mut lr_h, mut lr_l) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    model.sample_grads(&train_set[i], pos_weight, mix(cfg.seed, 4, (epoch * train_set.len() + i) as u64))
                })
                .collect::<Result<_>>()?;
            let mut head_g = GradSet::empty(model.head.params().len());
            let mut enc_g = GradSet::empty(model.encoder.params().len());
            for (k, (loss, hg, eg)) in results.iter().enumerate() {
                if !loss.is_finite() {
                    let s = &train_set[chunk[k]];
                    return Err(Error::Training(format!(
                        "non-finite loss {} at epoch {epoch}, batch {b}, segment {}@{}s",
                        loss.f64(),
                        s.key.video_id,
                        s.key.start_s
                    )));
                }
                epoch_loss += loss.f64();
                head_g.accumulate(hg);
                if let Some(eg) = eg {
                    enc_g.accumulate(eg);
                }
            }
            let inv = F::of(1.0 / chunk.len() as f64);
            head_g.scale(inv);
            enc_g.scale(inv);
            lr_h = cosine_lr(cfg.lr_head, step, total_steps);
            lr_l = cosine_lr(cfg.lr_lora, step, total_steps);
            let lr = |g: ParamGroup| match g {
                ParamGroup::Lora => lr_l,
                _ => lr_h,
            };
            head_opt.step(model.head.params_mut(), &head_g, lr);
            if cfg.mode == TrainMode::Lora {
                enc_opt.step(model.encoder.params_mut(), &enc_g, lr);
            }
            step += 1;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_auroc) = validation_score(&model, val_set)?;
        let better = val_set.is_empty() || improves(val_auroc, val_loss, &best);
        if better {
            best = Some((val_auroc, val_loss.unwrap_or(f64::INFINITY)));
            best_state = model.snapshot();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        log::debug!(
            "epoch {epoch}: train loss {train_loss:.4}, val loss {}, val AUROC {}",
            show(val_loss),
            show(val_auroc)
        );
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auroc,
            lr_head: lr_h,
            lr_lora: (cfg.mode == TrainMode::Lora).then_some(lr_l),
            best: better,
        });
        if !val_set.is_empty() && stale >= cfg.patience {
            break;
        }
    }
    model.restore(&best_state.0, &best_state.1)?;
    if let Some(before) = base_print {
        if model.encoder.params().fingerprint() != before {
            return Err(Error::Internal("frozen encoder parameters changed during training".into()));
        }
    }
    let validation = match best {
        Some((auroc, loss)) => ValidationSnapshot { auroc, loss },
        None => ValidationSnapshot {
            auroc: None,
            loss: f64::NAN,
        },
    };
    let checkpoint = model.checkpoint(cfg.seed, best_epoch, validation, cfg);
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub aggregate: AggregateReport,
    pub runs: Vec<RunSummary>,
}

pub struct RunOutput<F> {
    pub outcome: TrainOutcome<F>,
    pub scored: Vec<ScoredSegment>,
}

/// Pools of encoded segments for one subject-wise split.
pub struct ExperimentData<F> {
    pub train: Vec<Sample<F>>,
    pub validation: Vec<Sample<F>>,
    pub test: Vec<Sample<F>>,
}

/// `n_runs` trainings with seeds `cfg.seed + i`, each evaluated on the test
/// pool; the report carries mean and sample standard deviation.
pub fn run_experiment<F: Scalar>(
    cfg: &TrainConfig,
    base: &ReferenceEncoder<F>,
    fusion: &FusionConfig,
    data: &ExperimentData<F>,
    n_runs: usize,
) -> Result<(ExperimentReport, Vec<RunOutput<F>>)> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    check_no_leakage(&[
        ("train", &data.train),
        ("validation", &data.validation),
        ("test", &data.test),
    ])?;
    let mut outputs = Vec::with_capacity(n_runs);
    let mut runs = Vec::with_capacity(n_runs);
    for i in 0..n_runs {
        let run_cfg = TrainConfig {
            seed: cfg.seed + i as u64,
            ..cfg.clone()
        };
        let outcome = train(&run_cfg, base, fusion, &data.train, &data.validation)?;
        let scored = outcome.model.score_segments(&data.test)?;
        let metrics = compute_metrics(&scored, DEFAULT_THRESHOLD)?;
        runs.push(RunSummary {
            seed: run_cfg.seed,
            best_epoch: outcome.best_epoch,
            metrics,
        });
        outputs.push(RunOutput { outcome, scored });
    }
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
    Ok((
        ExperimentReport {
            aggregate: aggregate(&reports),
            runs,
        },
        outputs,
    ))
}
