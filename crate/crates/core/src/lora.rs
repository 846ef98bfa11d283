//! Low-rank adaptation of encoder linear layers.
//!
//! An adapted layer computes `W x + b + (α/r) · B A drop(x)`, with `A` drawn
//! from a zero-mean Gaussian and `B` zero at injection so the adapted encoder
//! starts out identical to its base.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, LayerKind, Linear};
use crate::params::{normal_matrix, Bound, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, MatrixSnapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LayerKind>,
    /// Number of trailing transformer blocks that receive adapters.
    pub last_blocks: usize,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![
                LayerKind::Query,
                LayerKind::Key,
                LayerKind::Value,
                LayerKind::FeedForward,
            ],
            last_blocks: 2,
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "LoRA dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        if self.last_blocks < 1 {
            return Err(Error::Config("LoRA needs at least one target block".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter matrices attached to one linear layer.
#[derive(Debug, Clone)]
pub struct LoraAttachment {
    pub layer_id: String,
    /// `r × d_in`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAttachment {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The low-rank update only, `(α/r) · drop(x) Aᵀ Bᵀ`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let input = if ctx.train && self.dropout > 0.0 {
            let (r, c) = tape.value(x).shape();
            let mask = tape.constant(ctx.dropout_mask(r, c, self.dropout));
            tape.mul(x, mask)
        } else {
            x
        };
        let h = tape.matmul_nt(input, bound.var(self.a));
        let d = tape.matmul_nt(h, bound.var(self.b));
        tape.scale(d, F::of(self.scale()))
    }

    pub fn apply<F: Scalar>(&self, store: &ParamStore<F>, x: &Matrix<F>) -> Matrix<F> {
        let mut d = x
            .matmul_nt(store.value(self.a))
            .matmul_nt(store.value(self.b));
        d.scale_assign(F::of(self.scale()));
        d
    }
}

/// Inference-mode adapted layer on a single vector: `W x + b + (α/r)·B(A x)`.
pub fn lora_forward<F: Scalar>(
    x: &[F],
    weight: &Matrix<F>,
    bias: Option<&[F]>,
    a: &Matrix<F>,
    b: &Matrix<F>,
    alpha: f64,
) -> Result<Vec<F>> {
    let (d_out, d_in) = weight.shape();
    let r = a.rows();
    if x.len() != d_in || a.cols() != d_in || b.shape() != (d_out, r) {
        return Err(Error::Shape(format!(
            "LoRA shapes: x {}, W {d_out}x{d_in}, A {}x{}, B {}x{}",
            x.len(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if bias.is_some_and(|b| b.len() != d_out) {
        return Err(Error::Shape("bias length differs from W rows".into()));
    }
    let xm = Matrix::row_vector(x.to_vec());
    let base = xm.matmul_nt(weight);
    let mut upd = xm.matmul_nt(a).matmul_nt(b);
    upd.scale_assign(F::of(alpha / r as f64));
    Ok((0..d_out)
        .map(|o| base.get(0, o) + upd.get(0, o) + bias.map_or(F::zero(), |b| b[o]))
        .collect())
}

/// A model whose transformer blocks accept adapters.
pub trait LoraHost<F: Scalar> {
    fn block_count(&self) -> usize;
    /// Linear layers of one block together with the store that owns their weights.
    fn block_parts(&mut self, block: usize) -> (Vec<&mut Linear>, &mut ParamStore<F>);
    fn store(&self) -> &ParamStore<F>;
    fn store_mut(&mut self) -> &mut ParamStore<F>;
}

/// Attaches adapters to the targeted layers of the last `cfg.last_blocks` blocks and
/// freezes every base parameter. Returns the number of adapters attached.
pub fn inject_lora<F: Scalar, H: LoraHost<F> + ?Sized, R: Rng + ?Sized>(
    host: &mut H,
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<usize> {
    cfg.validate()?;
    let blocks = host.block_count();
    if blocks < cfg.last_blocks {
        return Err(Error::Config(format!(
            "LoRA targets the last {} blocks but the encoder has {blocks}",
            cfg.last_blocks
        )));
    }
    let mut count = 0;
    for block in blocks - cfg.last_blocks..blocks {
        let (linears, store) = host.block_parts(block);
        for lin in linears {
            if !cfg.targets.contains(&lin.kind) {
                continue;
            }
            if lin.lora.is_some() {
                return Err(Error::Config(format!("{} already carries an adapter", lin.id)));
            }
            let a = store.add(
                format!("{}.lora_a", lin.id),
                normal_matrix(cfg.rank, lin.d_in, cfg.init_std, rng),
                ParamGroup::Lora,
            );
            let b = store.add(
                format!("{}.lora_b", lin.id),
                Matrix::zeros(lin.d_out, cfg.rank),
                ParamGroup::Lora,
            );
            lin.lora = Some(LoraAttachment {
                layer_id: lin.id.clone(),
                a,
                b,
                rank: cfg.rank,
                alpha: cfg.alpha,
                dropout: cfg.dropout,
            });
            count += 1;
        }
    }
    let store = host.store_mut();
    let base: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Lora)
        .map(|(id, _)| id)
        .collect();
    for id in base {
        store.set_trainable(id, false);
    }
    Ok(count)
}

/// Folds every adapter into its base weight, `W ← W + (α/r)·B A`, and detaches it.
pub fn merge_lora<F: Scalar, H: LoraHost<F> + ?Sized>(host: &mut H) -> usize {
    let mut merged = 0;
    for block in 0..host.block_count() {
        let (linears, store) = host.block_parts(block);
        for lin in linears {
            let Some(att) = lin.lora.take() else { continue };
            let mut delta = store.value(att.b).matmul(store.value(att.a));
            delta.scale_assign(F::of(att.scale()));
            store.get_mut(lin.weight).value.add_assign(&delta);
            store.set_trainable(att.a, false);
            store.set_trainable(att.b, false);
            merged += 1;
        }
    }
    merged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    pub layer_id: String,
    pub a: MatrixSnapshot,
    pub b: MatrixSnapshot,
}

/// Adapter-only checkpoint; base weights are not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraCheckpoint {
    pub config: LoraConfig,
    pub adapters: Vec<AdapterWeights>,
}

impl LoraCheckpoint {
    pub fn capture<F: Scalar, H: LoraHost<F> + ?Sized>(host: &mut H, config: &LoraConfig) -> Self {
        let mut adapters = Vec::new();
        for block in 0..host.block_count() {
            let (linears, store) = host.block_parts(block);
            for lin in linears {
                if let Some(att) = &lin.lora {
                    adapters.push(AdapterWeights {
                        layer_id: att.layer_id.clone(),
                        a: store.value(att.a).to_snapshot(),
                        b: store.value(att.b).to_snapshot(),
                    });
                }
            }
        }
        Self {
            config: config.clone(),
            adapters,
        }
    }

    /// Writes stored adapter weights into an already-injected host.
    pub fn restore_into<F: Scalar, H: LoraHost<F> + ?Sized>(&self, host: &mut H) -> Result<()> {
        for w in &self.adapters {
            let mut found = false;
            for block in 0..host.block_count() {
                let (linears, store) = host.block_parts(block);
                for lin in linears {
                    if let Some(att) = &lin.lora {
                        if att.layer_id == w.layer_id {
                            store.get_mut(att.a).value = Matrix::from_snapshot(&w.a)?;
                            store.get_mut(att.b).value = Matrix::from_snapshot(&w.b)?;
                            found = true;
                        }
                    }
                }
            }
            if !found {
                return Err(Error::Data(format!("no adapter slot for {}", w.layer_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
