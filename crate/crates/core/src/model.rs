//! Matrix factorization parameters and per-vector perturbations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Standard deviation of the Gaussian used by [`FactorModel::init`].
pub const INIT_STD: f64 = 0.01;

/// Which training procedure last produced a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Bpr,
    Apr,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Bpr => "bpr",
            Stage::Apr => "apr",
        }
    }

    fn code(self) -> u32 {
        match self {
            Stage::Init => 0,
            Stage::Bpr => 1,
            Stage::Apr => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Stage::Init),
            1 => Ok(Stage::Bpr),
            2 => Ok(Stage::Apr),
            other => Err(Error::Format(format!("unknown stage code {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "bpr" => Ok(Stage::Bpr),
            "apr" => Ok(Stage::Apr),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// User embeddings `P` (n_users x k) and item embeddings `Q` (n_items x k),
/// both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    n_users: usize,
    n_items: usize,
    k: usize,
    users: Vec<f64>,
    items: Vec<f64>,
    /// Root seed of the run that produced the parameters.
    pub seed: u64,
    pub stage: Stage,
}

impl FactorModel {
    /// Entries drawn i.i.d. from N(0, 0.01^2) on the `init` substream of `seed`.
    pub fn init(n_users: usize, n_items: usize, k: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(n_users, n_items, k)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = rng::stream(seed, rng::INIT);
        for x in model.users.iter_mut().chain(model.items.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
        model.seed = seed;
        Ok(model)
    }

    pub fn zeros(n_users: usize, n_items: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("embedding size must be at least 1".into()));
        }
        if n_users == 0 || n_items == 0 {
            return Err(Error::Dimension(format!(
                "model needs at least one user and one item (got {n_users} x {n_items})"
            )));
        }
        Ok(FactorModel {
            n_users,
            n_items,
            k,
            users: vec![0.0; n_users * k],
            items: vec![0.0; n_items * k],
            seed: 0,
            stage: Stage::Init,
        })
    }

    /// Builds a model from explicit row-major matrices.
    pub fn from_rows(k: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if k == 0 || users.len() % k != 0 || items.len() % k != 0 {
            return Err(Error::Dimension(format!(
                "matrix sizes {} / {} are not multiples of k = {k}",
                users.len(),
                items.len()
            )));
        }
        let mut model = Self::zeros(users.len() / k, items.len() / k, k)?;
        model.users = users;
        model.items = items;
        Ok(model)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn user(&self, u: u32) -> &[f64] {
        let start = u as usize * self.k;
        &self.users[start..start + self.k]
    }

    #[inline]
    pub fn item(&self, i: u32) -> &[f64] {
        let start = i as usize * self.k;
        &self.items[start..start + self.k]
    }

    #[inline]
    pub fn user_mut(&mut self, u: u32) -> &mut [f64] {
        let start = u as usize * self.k;
        &mut self.users[start..start + self.k]
    }

    #[inline]
    pub fn item_mut(&mut self, i: u32) -> &mut [f64] {
        let start = i as usize * self.k;
        &mut self.items[start..start + self.k]
    }

    pub fn user_matrix(&self) -> &[f64] {
        &self.users
    }

    pub fn item_matrix(&self) -> &[f64] {
        &self.items
    }

    fn check(&self, u: u32, i: u32) -> Result<()> {
        if u as usize >= self.n_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u as usize,
                size: self.n_users,
            });
        }
        if i as usize >= self.n_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i as usize,
                size: self.n_items,
            });
        }
        Ok(())
    }

    /// Score `p_u . q_i`.
    pub fn predict(&self, u: u32, i: u32) -> Result<f64> {
        self.check(u, i)?;
        Ok(self.score(u, i))
    }

    /// Unchecked [`FactorModel::predict`].
    #[inline]
    pub fn score(&self, u: u32, i: u32) -> f64 {
        dot(self.user(u), self.item(i))
    }

    /// Score `(p_u + d_u) . (q_i + d_i)`, with absent perturbations taken as zero.
    pub fn predict_perturbed(&self, field: &PerturbationField, u: u32, i: u32) -> Result<f64> {
        self.check(u, i)?;
        Ok(self.score_perturbed(field, u, i))
    }

    #[inline]
    pub fn score_perturbed(&self, field: &PerturbationField, u: u32, i: u32) -> f64 {
        match (field.user(u), field.item(i)) {
            (None, None) => self.score(u, i),
            (du, di) => {
                let p = self.user(u);
                let q = self.item(i);
                (0..self.k)
                    .map(|c| {
                        let pc = p[c] + du.map_or(0.0, |d| d[c]);
                        let qc = q[c] + di.map_or(0.0, |d| d[c]);
                        pc * qc
                    })
                    .sum()
            }
        }
    }

    /// A copy with the field added to every perturbed row.
    pub fn perturbed(&self, field: &PerturbationField) -> FactorModel {
        let mut out = self.clone();
        for (&u, d) in field.users() {
            for (x, dx) in out.user_mut(u).iter_mut().zip(d) {
                *x += dx;
            }
        }
        for (&i, d) in field.items() {
            for (x, dx) in out.item_mut(i).iter_mut().zip(d) {
                *x += dx;
            }
        }
        out
    }

    /// `||P||_F^2 + ||Q||_F^2`.
    pub fn embedding_norm(&self) -> f64 {
        squared_norm(&self.users) + squared_norm(&self.items)
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|x| x.is_finite())
    }

    /// Errors unless the model matches the given dataset and embedding sizes.
    pub fn check_dims(&self, n_users: usize, n_items: usize, k: Option<usize>) -> Result<()> {
        if self.n_users != n_users || self.n_items != n_items {
            return Err(Error::Dimension(format!(
                "model has {} users x {} items, dataset has {n_users} x {n_items}",
                self.n_users, self.n_items
            )));
        }
        if let Some(k) = k {
            if k != self.k {
                return Err(Error::Dimension(format!(
                    "model has {} factors, configuration asks for {k}",
                    self.k
                )));
            }
        }
        Ok(())
    }

    /// Checkpoint bytes.
    ///
    /// Layout (little endian): 8-byte magic, u32 format version, u32 stage,
    /// u64 n_users, u64 n_items, u64 k, u64 seed, then `P` and `Q` as
    /// row-major f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.users.len() + self.items.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.stage.code().to_le_bytes());
        for dim in [self.n_users, self.n_items, self.k] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for x in self.users.iter().chain(&self.items) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header ({} of {HEADER_LEN} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let stage = Stage::from_code(u32_at(12))?;
        let n_users = u64_at(16) as usize;
        let n_items = u64_at(24) as usize;
        let k = u64_at(32) as usize;
        let seed = u64_at(40);
        let n_values = n_users
            .checked_add(n_items)
            .and_then(|rows| rows.checked_mul(k))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let expected = n_values
            .checked_mul(8)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes for {n_users} x {n_items} x {k}, found {}",
                bytes.len()
            )));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let users: Vec<f64> = values.by_ref().take(n_users * k).collect();
        let items: Vec<f64> = values.collect();
        let mut model = Self::from_rows(k, users, items)?;
        model.seed = seed;
        model.stage = stage;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const MAGIC: &[u8; 8] = b"APRMF\0\0\x01";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 * 4;

/// Sparse per-vector perturbations of user and item embeddings. Entities
/// missing from the maps are unperturbed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbationField {
    epsilon: f64,
    users: BTreeMap<u32, Vec<f64>>,
    items: BTreeMap<u32, Vec<f64>>,
}

impl PerturbationField {
    pub fn new(epsilon: f64) -> Self {
        PerturbationField {
            epsilon,
            ..Default::default()
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn user(&self, u: u32) -> Option<&[f64]> {
        self.users.get(&u).map(Vec::as_slice)
    }

    pub fn item(&self, i: u32) -> Option<&[f64]> {
        self.items.get(&i).map(Vec::as_slice)
    }

    pub fn users(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.users
    }

    pub fn items(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    /// Number of stored vectors.
    pub fn len(&self) -> usize {
        self.users.len() + self.items.len()
    }

    /// Stores `v`, rejecting vectors whose norm exceeds epsilon beyond
    /// rounding.
    pub fn set_user(&mut self, u: u32, v: Vec<f64>) -> Result<()> {
        self.check_norm(&v)?;
        self.users.insert(u, v);
        Ok(())
    }

    pub fn set_item(&mut self, i: u32, v: Vec<f64>) -> Result<()> {
        self.check_norm(&v)?;
        self.items.insert(i, v);
        Ok(())
    }

    fn check_norm(&self, v: &[f64]) -> Result<()> {
        let norm = squared_norm(v).sqrt();
        if norm > self.epsilon * (1.0 + 1e-12) {
            return Err(Error::Contract(format!(
                "perturbation norm {norm} exceeds epsilon {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Iterator over every stored vector.
    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.users.values().chain(self.items.values()).map(Vec::as_slice)
    }

    // Constructors that already guarantee the norm bound.
    pub(crate) fn insert_user_unchecked(&mut self, u: u32, v: Vec<f64>) {
        self.users.insert(u, v);
    }

    pub(crate) fn insert_item_unchecked(&mut self, i: u32, v: Vec<f64>) {
        self.items.insert(i, v);
    }
}

/// Scales `v` to L2 norm `epsilon`. Returns `None` for the zero vector.
pub fn scale_to_norm(v: &[f64], epsilon: f64) -> Option<Vec<f64>> {
    let norm = squared_norm(v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| epsilon * (x / norm)).collect())
}
