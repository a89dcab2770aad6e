//! Per-row gradient accumulation and the SGD / Adagrad updates applied to it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::FactorModel;

/// Added to the Adagrad accumulator inside the square root.
pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adagrad,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adagrad => "adagrad",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adagrad" => Ok(Optimizer::Adagrad),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Gradient rows keyed by entity index, summed across every contribution.
#[derive(Clone, Debug)]
pub struct SparseRows {
    k: usize,
    slots: HashMap<u32, usize>,
    ids: Vec<u32>,
    data: Vec<f64>,
}

impl SparseRows {
    pub fn new(k: usize) -> Self {
        SparseRows {
            k,
            slots: HashMap::new(),
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.ids.clear();
        self.data.clear();
    }

    /// Zero-initialized on first access.
    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let k = self.k;
        let slot = *self.slots.entry(id).or_insert_with(|| {
            self.ids.push(id);
            self.data.resize(self.data.len() + k, 0.0);
            self.ids.len() - 1
        });
        &mut self.data[slot * k..(slot + 1) * k]
    }

    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.slots
            .get(&id)
            .map(|&slot| &self.data[slot * self.k..(slot + 1) * self.k])
    }

    /// `row(id) += scale * v`.
    #[inline]
    pub fn add_scaled(&mut self, id: u32, scale: f64, v: &[f64]) {
        for (g, x) in self.row_mut(id).iter_mut().zip(v) {
            *g += scale * x;
        }
    }

    /// Rows in first-touched order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.k.max(1)))
            .map(|(&id, row)| (id, row))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Accumulated gradients of one batch over user and item rows.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub users: SparseRows,
    pub items: SparseRows,
}

impl BatchGradient {
    pub fn new(k: usize) -> Self {
        BatchGradient {
            users: SparseRows::new(k),
            items: SparseRows::new(k),
        }
    }

    pub fn clear(&mut self) {
        self.users.clear();
        self.items.clear();
    }
}

/// Optimizer with its persistent state (the Adagrad accumulators).
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    eta: f64,
    user_acc: Vec<f64>,
    item_acc: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, eta: f64) -> Self {
        OptimizerState {
            kind,
            eta,
            user_acc: Vec::new(),
            item_acc: Vec::new(),
        }
    }

    pub fn kind(&self) -> Optimizer {
        self.kind
    }

    /// One update per touched row. Returns false if any updated row is no
    /// longer finite.
    pub fn apply(&mut self, model: &mut FactorModel, grad: &BatchGradient) -> bool {
        let k = model.k();
        if self.kind == Optimizer::Adagrad && self.user_acc.is_empty() {
            self.user_acc = vec![0.0; model.n_users() * k];
            self.item_acc = vec![0.0; model.n_items() * k];
        }
        let eta = self.eta;
        let mut finite = true;
        for (u, g) in grad.users.iter() {
            let row = model.user_mut(u);
            match self.kind {
                Optimizer::Sgd => sgd(row, g, eta),
                Optimizer::Adagrad => {
                    let start = u as usize * k;
                    adagrad(row, &mut self.user_acc[start..start + k], g, eta)
                }
            }
            finite &= row.iter().all(|x| x.is_finite());
        }
        for (i, g) in grad.items.iter() {
            let row = model.item_mut(i);
            match self.kind {
                Optimizer::Sgd => sgd(row, g, eta),
                Optimizer::Adagrad => {
                    let start = i as usize * k;
                    adagrad(row, &mut self.item_acc[start..start + k], g, eta)
                }
            }
            finite &= row.iter().all(|x| x.is_finite());
        }
        finite
    }
}

#[inline]
fn sgd(row: &mut [f64], grad: &[f64], eta: f64) {
    for (x, g) in row.iter_mut().zip(grad) {
        *x -= eta * g;
    }
}

#[inline]
fn adagrad(row: &mut [f64], acc: &mut [f64], grad: &[f64], eta: f64) {
    for ((x, a), g) in row.iter_mut().zip(acc.iter_mut()).zip(grad) {
        *a += g * g;
        *x -= eta * g / (*a + ADAGRAD_EPS).sqrt();
    }
}
