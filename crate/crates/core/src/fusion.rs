//! Cross-joint fusion head: positional augmentation, self-attention over the
//! joint tokens, pooling and a linear classifier.
//!
//! The head exists twice: as parameters on a tape for training, and as the
//! plain-value functions below, which are what inference and the tests use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Tape, Var};
use crate::cropper::PositionalTensor;
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, LayerKind, Linear, MultiHeadAttention};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::segmenter::SEGMENT_FRAMES;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d: usize,
    pub heads: usize,
    /// Number of stacked attention operations.
    pub depth: usize,
    pub pooling: Pooling,
    /// Frames per segment in the positional tensor.
    pub frames: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            depth: 1,
            pooling: Pooling::Mean,
            frames: SEGMENT_FRAMES,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head width {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.depth == 0 || self.frames == 0 {
            return Err(Error::Config("head depth and frames must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map from a flattened `(T, 3)` joint slice to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalProjection<F> {
    /// `d × 3T`
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
}

/// Value-level attention parameters; weights are stored `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<F> {
    pub heads: usize,
    pub wq: Matrix<F>,
    pub bq: Vec<F>,
    pub wk: Matrix<F>,
    pub bk: Vec<F>,
    pub wv: Matrix<F>,
    pub bv: Vec<F>,
    pub wo: Matrix<F>,
    pub bo: Vec<F>,
}

impl<F: Scalar> AttentionBlock<F> {
    pub fn d(&self) -> usize {
        self.wq.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F> {
    pub w: Vec<F>,
    pub b: F,
}

fn affine<F: Scalar>(x: &Matrix<F>, w: &Matrix<F>, b: &[F]) -> Matrix<F> {
    let mut y = x.matmul_nt(w);
    for i in 0..y.rows() {
        for (v, &bb) in y.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

/// Per-joint positional embeddings `p_j`, `J × d`.
pub fn project_positional<F: Scalar>(
    pos: &PositionalTensor,
    proj: &PositionalProjection<F>,
) -> Result<Matrix<F>> {
    let width = pos.frames * 3;
    if proj.weight.cols() != width || proj.bias.len() != proj.weight.rows() {
        return Err(Error::Shape(format!(
            "projection is {}x{} with {} biases, positional slice has {} values",
            proj.weight.rows(),
            proj.weight.cols(),
            proj.bias.len(),
            width
        )));
    }
    Ok(affine(&pos.to_matrix(), &proj.weight, &proj.bias))
}

pub fn augment_tokens<F: Scalar>(z: &Matrix<F>, p: &Matrix<F>) -> Result<Matrix<F>> {
    if z.shape() != p.shape() {
        return Err(Error::Shape(format!(
            "tokens {:?} vs positional embeddings {:?}",
            z.shape(),
            p.shape()
        )));
    }
    Ok(z.zip_map(p, |a, b| a + b))
}

pub struct AttentionResult<F> {
    pub output: Matrix<F>,
    /// `J × J` weights per head.
    pub weights: Vec<Matrix<F>>,
}

fn softmax_row<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Multi-head self-attention across the joint tokens, scaled by `√(d/heads)`.
pub fn cross_joint_attention<F: Scalar>(
    z: &Matrix<F>,
    block: &AttentionBlock<F>,
) -> Result<AttentionResult<F>> {
    let d = block.d();
    if z.rows() == 0 {
        return Err(Error::Shape("attention needs at least one token".into()));
    }
    if z.cols() != d || block.heads == 0 || !d.is_multiple_of(block.heads) {
        return Err(Error::Shape(format!(
            "tokens of width {} for a {}-head block of width {}",
            z.cols(),
            block.heads,
            d
        )));
    }
    let q = affine(z, &block.wq, &block.bq);
    let k = affine(z, &block.wk, &block.bk);
    let v = affine(z, &block.wv, &block.bv);
    let n = z.rows();
    let dh = d / block.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut merged = Matrix::zeros(n, d);
    let mut weights = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let off = h * dh;
        let mut w = Matrix::from_fn(n, n, |i, j| {
            let mut s = F::zero();
            for c in off..off + dh {
                s += q.get(i, c) * k.get(j, c);
            }
            s * scale
        });
        for i in 0..n {
            softmax_row(w.row_mut(i));
        }
        for i in 0..n {
            for c in off..off + dh {
                let mut s = F::zero();
                for j in 0..n {
                    s += w.get(i, j) * v.get(j, c);
                }
                merged.set(i, c, s);
            }
        }
        weights.push(w);
    }
    Ok(AttentionResult {
        output: affine(&merged, &block.wo, &block.bo),
        weights,
    })
}

pub fn pool<F: Scalar>(x: &Matrix<F>, pooling: Pooling) -> Vec<F> {
    let mut u = match pooling {
        Pooling::Mean => vec![F::zero(); x.cols()],
        Pooling::Max => vec![F::neg_infinity(); x.cols()],
    };
    for i in 0..x.rows() {
        for (a, &b) in u.iter_mut().zip(x.row(i)) {
            *a = match pooling {
                Pooling::Mean => *a + b,
                Pooling::Max => a.max(b),
            };
        }
    }
    if pooling == Pooling::Mean {
        let n = F::of(x.rows() as f64);
        for a in &mut u {
            *a /= n;
        }
    }
    u
}

/// Pools the attended tokens into `u` and returns `ℓ = wᵀu + b`.
pub fn pool_and_classify<F: Scalar>(
    attended: &Matrix<F>,
    head: &ClassifierHead<F>,
    pooling: Pooling,
) -> Result<F> {
    if attended.rows() == 0 || attended.cols() != head.w.len() {
        return Err(Error::Shape(format!(
            "classifier of width {} on {:?} tokens",
            head.w.len(),
            attended.shape()
        )));
    }
    let u = pool(attended, pooling);
    Ok(u.iter().zip(&head.w).fold(head.b, |acc, (&a, &w)| acc + a * w))
}

/// Binary cross-entropy on a logit, in softplus form.
pub fn bce_with_logit<F: Scalar>(logit: F, target: bool) -> F {
    bce_weighted(logit, target, F::one())
}

/// As [`bce_with_logit`] with the positive term scaled by `pos_weight`.
pub fn bce_weighted<F: Scalar>(logit: F, target: bool, pos_weight: F) -> F {
    if target {
        pos_weight * softplus(-logit)
    } else {
        softplus(logit)
    }
}

/// Plain-value copy of every head parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParts<F> {
    pub projection: PositionalProjection<F>,
    pub blocks: Vec<AttentionBlock<F>>,
    pub classifier: ClassifierHead<F>,
    pub pooling: Pooling,
}

pub struct HeadTrace {
    pub logit: Var,
    /// Per attention layer, per head.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct FusionHead<F> {
    pub config: FusionConfig,
    params: ParamStore<F>,
    pos_proj: Linear,
    attention: Vec<MultiHeadAttention>,
    classifier: Linear,
}

impl<F: Scalar> FusionHead<F> {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g = ParamGroup::Head;
        let width = config.frames * 3;
        let pos_proj = Linear::new(
            &mut params,
            "head.pos_proj",
            LayerKind::Other,
            width,
            config.d,
            g,
            1.0 / (width as f64).sqrt(),
            &mut rng,
        );
        let attention = (0..config.depth)
            .map(|i| {
                MultiHeadAttention::new(
                    &mut params,
                    &format!("head.attn.{i}"),
                    config.d,
                    config.heads,
                    g,
                    &mut rng,
                )
            })
            .collect();
        let classifier = Linear::new(
            &mut params,
            "head.classifier",
            LayerKind::Other,
            config.d,
            1,
            g,
            1.0 / (config.d as f64).sqrt(),
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            pos_proj,
            attention,
            classifier,
        })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Logit on a tape. `tokens` is `J × d`, `pos` is `J × 3T`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        tokens: Var,
        pos: Var,
        ctx: &mut ForwardCtx,
    ) -> HeadTrace {
        let p = self.pos_proj.forward(tape, bound, pos, ctx);
        let mut x = tape.add(tokens, p);
        let mut attention = Vec::with_capacity(self.attention.len());
        for a in &self.attention {
            let out = a.forward(tape, bound, x, ctx);
            x = out.output;
            attention.push(out.weights);
        }
        let u = match self.config.pooling {
            Pooling::Mean => tape.mean_rows(x),
            Pooling::Max => tape.max_rows(x),
        };
        HeadTrace {
            logit: self.classifier.forward(tape, bound, u, ctx),
            attention,
        }
    }

    pub fn parts(&self) -> HeadParts<F> {
        let p = &self.params;
        let row = |l: &Linear| p.value(l.bias).row(0).to_vec();
        HeadParts {
            projection: PositionalProjection {
                weight: p.value(self.pos_proj.weight).clone(),
                bias: row(&self.pos_proj),
            },
            blocks: self
                .attention
                .iter()
                .map(|a| AttentionBlock {
                    heads: a.heads,
                    wq: p.value(a.query.weight).clone(),
                    bq: row(&a.query),
                    wk: p.value(a.key.weight).clone(),
                    bk: row(&a.key),
                    wv: p.value(a.value.weight).clone(),
                    bv: row(&a.value),
                    wo: p.value(a.out.weight).clone(),
                    bo: row(&a.out),
                })
                .collect(),
            classifier: ClassifierHead {
                w: p.value(self.classifier.weight).row(0).to_vec(),
                b: p.value(self.classifier.bias).get(0, 0),
            },
            pooling: self.config.pooling,
        }
    }

    /// Inference logit for one segment.
    pub fn logit(&self, tokens: &Matrix<F>, pos: &PositionalTensor) -> Result<F> {
        self.parts().logit(tokens, pos)
    }
}

impl<F: Scalar> HeadParts<F> {
    pub fn logit(&self, tokens: &Matrix<F>, pos: &PositionalTensor) -> Result<F> {
        if tokens.rows() != pos.joints {
            return Err(Error::Shape(format!(
                "{} tokens for {} joints",
                tokens.rows(),
                pos.joints
            )));
        }
        let p = project_positional(pos, &self.projection)?;
        let mut x = augment_tokens(tokens, &p)?;
        for b in &self.blocks {
            x = cross_joint_attention(&x, b)?.output;
        }
        pool_and_classify(&x, &self.classifier, self.pooling)
    }
}
