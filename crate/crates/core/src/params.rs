//! Named parameter storage, tape binding and gradient collection.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, MatrixSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Lora,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Matrix<F>,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Matrix<F>,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable: true,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<F> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.rows() * p.value.cols())
            .sum()
    }

    /// Puts every parameter on the tape. Frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape<F>, with_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), with_grad && p.trainable))
                .collect(),
        }
    }

    /// Bitwise fingerprint of all values; used to prove frozen weights never move.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the f64 bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                h = (h ^ v.f64().to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn snapshot(&self) -> BTreeMap<String, ParamSnapshot> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    ParamSnapshot {
                        value: p.value.to_snapshot(),
                        trainable: p.trainable,
                        group: p.group,
                    },
                )
            })
            .collect()
    }

    /// Overwrites values (and trainable flags) of every parameter from a snapshot.
    pub fn restore(&mut self, snap: &BTreeMap<String, ParamSnapshot>) -> Result<()> {
        for p in &mut self.params {
            let s = snap
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", p.name)))?;
            let m = Matrix::from_snapshot(&s.value)?;
            if m.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m;
            p.trainable = s.trainable;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub value: MatrixSnapshot,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Extracts per-parameter gradients after a backward pass.
    pub fn collect<F: Scalar>(&self, grads: &mut Gradients<F>) -> GradSet<F> {
        GradSet {
            grads: self.vars.iter().map(|&v| grads.take(v)).collect(),
        }
    }
}

/// Per-parameter gradients for one store.
#[derive(Debug, Clone)]
pub struct GradSet<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Scalar> GradSet<F> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &GradSet<F>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

pub fn normal_matrix<F: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Matrix<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| F::of(dist.sample(rng)))
}
