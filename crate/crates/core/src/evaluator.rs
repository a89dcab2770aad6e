//! Full-ranking leave-one-out evaluation.
//!
//! Every item the user has not interacted with in training is a candidate;
//! the held-out item is ranked against all of them. Score ties are broken by
//! item index (smaller index ranks first), so results never depend on sort
//! stability or thread scheduling.

use std::time::Instant;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{InteractionDataset, SplitDataset, Target};
use crate::error::{Error, Result};
use crate::model::{dot, FactorModel};

/// Anything that scores every item for a user.
pub trait Scorer: Sync {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// Writes the score of every item into `out` (length `n_items`).
    fn score_items(&self, user: u32, out: &mut [f64]);
}

impl Scorer for FactorModel {
    fn n_users(&self) -> usize {
        FactorModel::n_users(self)
    }

    fn n_items(&self) -> usize {
        FactorModel::n_items(self)
    }

    fn score_items(&self, user: u32, out: &mut [f64]) {
        let p = self.user(user);
        for (i, s) in out.iter_mut().enumerate() {
            *s = dot(p, self.item(i as u32));
        }
    }
}

/// Non-personalized popularity ranking: score(i) = training interactions of i.
#[derive(Clone, Debug)]
pub struct ItemPop {
    n_users: usize,
    counts: Vec<f64>,
}

impl ItemPop {
    pub fn count(&self, item: u32) -> f64 {
        self.counts[item as usize]
    }
}

impl Scorer for ItemPop {
    fn n_users(&self) -> usize {
        self.n_users
    }

    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn score_items(&self, _user: u32, out: &mut [f64]) {
        out.copy_from_slice(&self.counts);
    }
}

pub fn itempop_scorer(train: &InteractionDataset) -> ItemPop {
    ItemPop {
        n_users: train.n_users(),
        counts: train.item_counts().into_iter().map(f64::from).collect(),
    }
}

/// 1-based rank of `target` among all items not in `excluded` (sorted).
pub fn rank_of_test_item(scores: &[f64], target: u32, excluded: &[u32]) -> Result<usize> {
    if target as usize >= scores.len() {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: target as usize,
            size: scores.len(),
        });
    }
    if excluded.binary_search(&target).is_ok() {
        return Err(Error::Contract(format!(
            "held-out item {target} is among the user's training positives"
        )));
    }
    let target_score = scores[target as usize];
    let mut rank = 1;
    let mut skip = excluded.iter().peekable();
    for (j, &s) in scores.iter().enumerate() {
        let j = j as u32;
        while skip.next_if(|&&e| e < j).is_some() {}
        if skip.next_if_eq(&&j).is_some() || j == target {
            continue;
        }
        if s > target_score || (s == target_score && j < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// (hit ratio, NDCG) of a single held-out item at `rank` with cutoff `k`.
pub fn user_metrics(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Sum with pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffMetrics {
    pub cutoff: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One entry per requested cutoff, in request order.
    pub metrics: Vec<CutoffMetrics>,
    pub n_users: usize,
    pub elapsed_secs: f64,
    /// (user, rank of the held-out item) for every evaluated user.
    pub ranks: Vec<(u32, usize)>,
}

impl EvalReport {
    pub fn at(&self, cutoff: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.cutoff == cutoff)
    }

    pub fn hr(&self, cutoff: usize) -> f64 {
        self.at(cutoff).map_or(f64::NAN, |m| m.hr)
    }

    pub fn ndcg(&self, cutoff: usize) -> f64 {
        self.at(cutoff).map_or(f64::NAN, |m| m.ndcg)
    }

    /// Per-user NDCG at `cutoff`, in user order.
    pub fn per_user_ndcg(&self, cutoff: usize) -> Vec<f64> {
        self.ranks.iter().map(|&(_, r)| user_metrics(r, cutoff).1).collect()
    }
}

pub fn validate_cutoffs(cutoffs: &[usize]) -> Result<()> {
    if cutoffs.is_empty() {
        return Err(Error::Config("at least one cutoff is required".into()));
    }
    if cutoffs.contains(&0) {
        return Err(Error::Config("cutoffs must be at least 1".into()));
    }
    Ok(())
}

/// Averages HR@K and NDCG@K over every user holding a `target` item.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    split: &SplitDataset,
    cutoffs: &[usize],
    target: Target,
) -> Result<EvalReport> {
    validate_cutoffs(cutoffs)?;
    if scorer.n_users() != split.n_users() || scorer.n_items() != split.n_items() {
        return Err(Error::Dimension(format!(
            "scorer covers {} users x {} items, split has {} x {}",
            scorer.n_users(),
            scorer.n_items(),
            split.n_users(),
            split.n_items()
        )));
    }
    let start = Instant::now();
    let jobs: Vec<(u32, u32)> = split
        .held_out(target)
        .iter()
        .enumerate()
        .filter_map(|(u, h)| h.map(|h| (u as u32, h.item)))
        .collect();
    let n_items = split.n_items();
    let ranks = jobs
        .par_iter()
        .map_init(
            || vec![0.0; n_items],
            |scores, &(u, item)| {
                scorer.score_items(u, scores);
                rank_of_test_item(scores, item, split.train.positives(u)).map(|r| (u, r))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let n = ranks.len();
    let mut hits = vec![0.0; n];
    let mut gains = vec![0.0; n];
    let metrics = cutoffs
        .iter()
        .map(|&cutoff| {
            for (k, &(_, rank)) in ranks.iter().enumerate() {
                (hits[k], gains[k]) = user_metrics(rank, cutoff);
            }
            let mean = |v: &[f64]| if n == 0 { 0.0 } else { pairwise_sum(v) / n as f64 };
            CutoffMetrics {
                cutoff,
                hr: mean(&hits),
                ndcg: mean(&gains),
            }
        })
        .collect();
    Ok(EvalReport {
        metrics,
        n_users: n,
        elapsed_secs: start.elapsed().as_secs_f64(),
        ranks,
    })
}

/// Two-sided paired t-test p-value on per-user differences `a - b`.
///
/// When every difference is identical the t statistic is undefined; the
/// p-value is then 0 if the common difference is nonzero and 1 otherwise.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Contract("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = pairwise_sum(&diffs) / n;
    let centered: Vec<f64> = diffs.iter().map(|d| (d - mean).powi(2)).collect();
    let var = pairwise_sum(&centered) / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean != 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}
