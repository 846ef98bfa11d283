//! Layers shared by the encoder and the fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::lora::LoraAttachment;
use crate::params::{normal_matrix, Bound, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Train/inference switch plus the randomness that dropout consumes.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn training(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inverted-dropout keep mask scaled by `1/(1-p)`.
    pub fn dropout_mask<F: Scalar>(&mut self, rows: usize, cols: usize, p: f64) -> Matrix<F> {
        let keep = F::of(1.0 / (1.0 - p));
        Matrix::from_fn(rows, cols, |_, _| {
            if self.rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Query,
    Key,
    Value,
    Output,
    FeedForward,
    Other,
}

/// Affine map `y = x Wᵀ + b` with `W` stored `d_out × d_in`, optionally low-rank adapted.
#[derive(Debug, Clone)]
pub struct Linear {
    pub id: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraAttachment>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        id: impl Into<String>,
        kind: LayerKind,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let id = id.into();
        let weight = store.add(
            format!("{id}.weight"),
            normal_matrix(d_out, d_in, std, rng),
            group,
        );
        let bias = store.add(format!("{id}.bias"), Matrix::zeros(1, d_out), group);
        Self {
            id,
            kind,
            d_in,
            d_out,
            weight,
            bias,
            lora: None,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let y = tape.matmul_nt(x, bound.var(self.weight));
        let y = tape.add_row(y, bound.var(self.bias));
        match &self.lora {
            None => y,
            Some(l) => {
                let delta = l.forward(tape, bound, x, ctx);
                tape.add(y, delta)
            }
        }
    }

    /// Forward without a tape, inference mode.
    pub fn apply<F: Scalar>(&self, store: &ParamStore<F>, x: &Matrix<F>) -> Matrix<F> {
        let mut y = x.matmul_nt(store.value(self.weight));
        let b = store.value(self.bias);
        for i in 0..y.rows() {
            for (v, &bb) in y.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += bb;
            }
        }
        if let Some(l) = &self.lora {
            y.add_assign(&l.apply(store, x));
        }
        y
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, id: &str, d: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{id}.gain"), Matrix::filled(1, d, F::one()), group),
            bias: store.add(format!("{id}.bias"), Matrix::zeros(1, d), group),
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x, F::of(self.eps));
        let n = tape.mul_row(n, bound.var(self.gain));
        tape.add_row(n, bound.var(self.bias))
    }
}

/// Multi-head self-attention, `softmax(Q Kᵀ / √d_head) V` per head, then an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One row-stochastic `n × n` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        id: &str,
        d: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "d must be divisible by heads");
        let std = 1.0 / (d as f64).sqrt();
        let mut lin = |name: &str, kind| {
            Linear::new(store, format!("{id}.{name}"), kind, d, d, group, std, rng)
        };
        Self {
            query: lin("query", LayerKind::Query),
            key: lin("key", LayerKind::Key),
            value: lin("value", LayerKind::Value),
            out: lin("out", LayerKind::Output),
            heads,
            d,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> AttentionOutput {
        let q = self.query.forward(tape, bound, x, ctx);
        let k = self.key.forward(tape, bound, x, ctx);
        let v = self.value.forward(tape, bound, x, ctx);
        let dh = self.d / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh),
                    tape.slice_cols(k, h * dh, dh),
                    tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores);
            outs.push(tape.matmul(w, vh));
            weights.push(w);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        AttentionOutput {
            output: self.out.forward(tape, bound, merged, ctx),
            weights,
        }
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.out]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.out]
    }
}
