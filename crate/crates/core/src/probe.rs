//! Robustness probe: how much do small perturbations of a trained model's
//! embeddings hurt ranking quality and training-pair accuracy?

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::apr::adv_field;
use crate::dataset::{SplitDataset, Target, Triplet};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, pairwise_sum};
use crate::model::{squared_norm, FactorModel, PerturbationField};
use crate::rng::{self, Rng};

/// Cutoff of the reported ranking metrics.
pub const PROBE_CUTOFF: usize = 100;
/// Default number of random-mode repeats.
pub const DEFAULT_REPEATS: usize = 5;

/// Substream name for the random-mode repeats.
const RANDOM_STREAM: &str = "probe.random";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Adversarial,
    Random,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adversarial => "adversarial",
            Mode::Random => "random",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" | "adv" => Ok(Mode::Adversarial),
            "random" | "rand" => Ok(Mode::Random),
            other => Err(Error::Config(format!("unknown probe mode '{other}'"))),
        }
    }
}

/// Users and items a perturbation applies to.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Entities {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
}

impl Entities {
    /// Every user and item (in either role) that appears in `set`, sorted.
    pub fn of(set: &[Triplet]) -> Self {
        let mut users = BTreeSet::new();
        let mut items = BTreeSet::new();
        for t in set {
            users.insert(t.user);
            items.insert(t.pos);
            items.insert(t.neg);
        }
        Entities {
            users: users.into_iter().collect(),
            items: items.into_iter().collect(),
        }
    }

    /// Every user and item of the model.
    pub fn all(model: &FactorModel) -> Self {
        Entities {
            users: (0..model.n_users() as u32).collect(),
            items: (0..model.n_items() as u32).collect(),
        }
    }
}

fn check_index(what: &'static str, index: u32, size: usize) -> Result<()> {
    if index as usize >= size {
        return Err(Error::IndexOutOfRange {
            what,
            index: index as usize,
            size,
        });
    }
    Ok(())
}

fn random_direction(k: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let norm = squared_norm(&v).sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Isotropic random perturbations: a normalized Gaussian direction per
/// entity, scaled to norm `epsilon`. Users are drawn first, then items, each
/// in the given order.
pub fn random_perturbations(model: &FactorModel, entities: &Entities, epsilon: f64, rng: &mut Rng) -> Result<PerturbationField> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let k = model.k();
    let mut field = PerturbationField::new(epsilon);
    for &u in &entities.users {
        check_index("user", u, model.n_users())?;
        let d = random_direction(k, rng).into_iter().map(|x| epsilon * x).collect();
        field.insert_user_unchecked(u, d);
    }
    for &i in &entities.items {
        check_index("item", i, model.n_items())?;
        let d = random_direction(k, rng).into_iter().map(|x| epsilon * x).collect();
        field.insert_item_unchecked(i, d);
    }
    Ok(field)
}

/// One adversarial field for the whole set: gradients of the BPR loss with
/// respect to each vector's perturbation are accumulated over every triplet
/// at zero perturbation, then normalized to `epsilon`.
pub fn adv_perturbations_global(model: &FactorModel, set: &[Triplet], epsilon: f64) -> Result<PerturbationField> {
    if set.is_empty() {
        return Err(Error::Contract("adversarial probe needs a non-empty triplet set".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    for t in set {
        model.predict(t.user, t.pos)?;
        model.predict(t.user, t.neg)?;
    }
    Ok(adv_field(model, set, epsilon, 1.0))
}

/// Fraction of triplets whose positive scores strictly above the negative
/// under the perturbation. Ties count as errors.
pub fn triplet_accuracy(model: &FactorModel, field: &PerturbationField, set: &[Triplet]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("accuracy needs a non-empty triplet set".into()));
    }
    let mut correct = 0usize;
    for t in set {
        let pos = model.predict_perturbed(field, t.user, t.pos)?;
        let neg = model.predict_perturbed(field, t.user, t.neg)?;
        if pos > neg {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// One (epsilon, mode, repeat) cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub epsilon: f64,
    pub mode: Mode,
    pub repeat: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub train_acc: f64,
    /// Relative NDCG@100 decrease against the unperturbed model, in percent.
    pub ndcg_drop_pct: f64,
    /// Relative accuracy decrease against the unperturbed model, in percent.
    pub acc_drop_pct: f64,
    /// Per-user test NDCG@100, in user order.
    pub per_user_ndcg: Vec<f64>,
}

/// Mean over the repeats of one (epsilon, mode) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMean {
    pub epsilon: f64,
    pub mode: Mode,
    pub repeats: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub train_acc: f64,
    pub ndcg_drop_pct: f64,
    pub acc_drop_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub base_hr: f64,
    pub base_ndcg: f64,
    pub base_acc: f64,
    pub reduced_set_size: usize,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    /// Means per (epsilon, mode) in sweep order.
    pub fn means(&self) -> Vec<ProbeMean> {
        let mut out: Vec<ProbeMean> = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let first = &self.rows[start];
            let end = start
                + self.rows[start..]
                    .iter()
                    .take_while(|r| r.mode == first.mode && r.epsilon.to_bits() == first.epsilon.to_bits())
                    .count();
            let group = &self.rows[start..end];
            let mean = |f: fn(&ProbeRow) -> f64| {
                let v: Vec<f64> = group.iter().map(f).collect();
                pairwise_sum(&v) / v.len() as f64
            };
            out.push(ProbeMean {
                epsilon: first.epsilon,
                mode: first.mode,
                repeats: group.len(),
                hr: mean(|r| r.hr),
                ndcg: mean(|r| r.ndcg),
                train_acc: mean(|r| r.train_acc),
                ndcg_drop_pct: mean(|r| r.ndcg_drop_pct),
                acc_drop_pct: mean(|r| r.acc_drop_pct),
            });
            start = end;
        }
        out
    }

    pub fn mean(&self, epsilon: f64, mode: Mode) -> Option<ProbeMean> {
        self.means()
            .into_iter()
            .find(|m| m.mode == mode && m.epsilon.to_bits() == epsilon.to_bits())
    }
}

fn drop_pct(base: f64, value: f64) -> f64 {
    if base == value {
        0.0
    } else {
        100.0 * (base - value) / base
    }
}

/// Sweeps perturbation sizes and modes over a trained model, measuring test
/// HR@100 and NDCG@100 plus triplet accuracy on a reduced training set (one
/// sampled negative per training interaction, drawn once from the probe
/// stream and shared by the adversarial construction and the accuracy).
///
/// Adversarial cells are deterministic and run once; random cells run
/// `repeats` times, repeat `r` drawing from its own substream. The model is
/// only read. The model is assumed converged; that is the caller's concern.
pub fn probe_sweep(
    model: &FactorModel,
    split: &SplitDataset,
    epsilons: &[f64],
    modes: &[Mode],
    repeats: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if epsilons.is_empty() {
        return Err(Error::Config("at least one epsilon is required".into()));
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {e}")));
    }
    if modes.is_empty() {
        return Err(Error::Config("at least one probe mode is required".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    model.check_dims(split.n_users(), split.n_items(), None)?;

    let set = split.train.sample_reduced_set(&mut rng::stream(seed, rng::PROBE))?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let entities = Entities::of(&set);
    let base = evaluate(model, split, &[PROBE_CUTOFF], Target::Test)?;
    let base_acc = triplet_accuracy(model, &PerturbationField::new(0.0), &set)?;
    let (base_hr, base_ndcg) = (base.hr(PROBE_CUTOFF), base.ndcg(PROBE_CUTOFF));

    let measure = |field: &PerturbationField, mode: Mode, repeat: usize| -> Result<ProbeRow> {
        let shifted = model.perturbed(field);
        let report = evaluate(&shifted, split, &[PROBE_CUTOFF], Target::Test)?;
        let train_acc = triplet_accuracy(&shifted, &PerturbationField::new(0.0), &set)?;
        let ndcg = report.ndcg(PROBE_CUTOFF);
        Ok(ProbeRow {
            epsilon: field.epsilon(),
            mode,
            repeat,
            hr: report.hr(PROBE_CUTOFF),
            ndcg,
            train_acc,
            ndcg_drop_pct: drop_pct(base_ndcg, ndcg),
            acc_drop_pct: drop_pct(base_acc, train_acc),
            per_user_ndcg: report.per_user_ndcg(PROBE_CUTOFF),
        })
    };

    let mut rows = Vec::new();
    for &epsilon in epsilons {
        for &mode in modes {
            match mode {
                Mode::Adversarial => {
                    let field = adv_perturbations_global(model, &set, epsilon)?;
                    rows.push(measure(&field, mode, 0)?);
                }
                Mode::Random => {
                    for r in 0..repeats {
                        let mut rng = rng::indexed_stream(seed, RANDOM_STREAM, r as u64);
                        let field = random_perturbations(model, &entities, epsilon, &mut rng)?;
                        rows.push(measure(&field, mode, r)?);
                    }
                }
            }
        }
    }
    Ok(ProbeReport {
        base_hr,
        base_ndcg,
        base_acc,
        reduced_set_size: set.len(),
        rows,
    })
}

/// `epsilon,mode,repeat,hr@100,ndcg@100,train_acc,ndcg_drop_pct`
pub fn write_probe_rows<W: Write>(out: &mut W, report: &ProbeReport) -> std::io::Result<()> {
    writeln!(out, "epsilon,mode,repeat,hr@100,ndcg@100,train_acc,ndcg_drop_pct")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epsilon, r.mode, r.repeat, r.hr, r.ndcg, r.train_acc, r.ndcg_drop_pct
        )?;
    }
    Ok(())
}

/// `epsilon,mode,repeats,hr@100,ndcg@100,train_acc,ndcg_drop_pct,acc_drop_pct`
pub fn write_probe_means<W: Write>(out: &mut W, report: &ProbeReport) -> std::io::Result<()> {
    writeln!(out, "epsilon,mode,repeats,hr@100,ndcg@100,train_acc,ndcg_drop_pct,acc_drop_pct")?;
    for m in report.means() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.epsilon, m.mode, m.repeats, m.hr, m.ndcg, m.train_acc, m.ndcg_drop_pct, m.acc_drop_pct
        )?;
    }
    Ok(())
}

/// Sum of L_BPR (no regularizer) over `set` under the field.
pub fn perturbed_bpr_loss(model: &FactorModel, field: &PerturbationField, set: &[Triplet]) -> f64 {
    let losses: Vec<f64> = set
        .iter()
        .map(|t| -crate::bpr::log_sigmoid(crate::apr::perturbed_margin(model, field, t)))
        .collect();
    pairwise_sum(&losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apr::build_adv_perturbations;
    use crate::dataset::{split_leave_one_out, InteractionDataset};
    use crate::synthetic::block_diagonal;

    fn random_model(n_users: usize, n_items: usize, k: usize, seed: u64) -> FactorModel {
        let mut rng = rng::stream(seed, "test");
        let mut g = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let users = g(n_users * k);
        let items = g(n_items * k);
        FactorModel::from_rows(k, users, items).unwrap()
    }

    #[test]
    fn random_field_norms() {
        let m = random_model(4, 6, 5, 1);
        let mut rng = rng::stream(1, "t");
        let zero = random_perturbations(&m, &Entities::all(&m), 0.0, &mut rng).unwrap();
        assert_eq!(zero.len(), 10);
        assert!(zero.vectors().all(|v| v.iter().all(|x| *x == 0.0)));
        let f = random_perturbations(&m, &Entities::all(&m), 0.7, &mut rng).unwrap();
        for v in f.vectors() {
            assert!((squared_norm(v).sqrt() - 0.7).abs() <= 1e-12);
        }
    }

    #[test]
    fn random_directions_are_uniform_in_angle() {
        // chi-square over 20 angle bins, 1e5 draws; critical value at p = 0.01 with 19 dof
        let mut rng = rng::stream(2, "t");
        let bins = 20;
        let mut counts = vec![0usize; bins];
        let n = 100_000;
        for _ in 0..n {
            let d = random_direction(2, &mut rng);
            let angle = d[1].atan2(d[0]) + std::f64::consts::PI;
            let b = ((angle / (2.0 * std::f64::consts::PI)) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 36.19, "chi2 = {chi2}");
    }

    #[test]
    fn global_field_on_singleton_matches_batch_construction() {
        let m = random_model(3, 5, 4, 3);
        let t = [Triplet::new(1, 2, 4)];
        assert_eq!(
            adv_perturbations_global(&m, &t, 0.3).unwrap(),
            build_adv_perturbations(&m, &t, 0.3, 1.0).unwrap()
        );
        let zero = adv_perturbations_global(&m, &t, 0.0).unwrap();
        assert_eq!(perturbed_bpr_loss(&m, &zero, &t), perturbed_bpr_loss(&m, &PerturbationField::new(0.0), &t));
    }

    #[test]
    fn adversarial_field_beats_random_search() {
        let m = random_model(2, 3, 2, 4);
        let set = vec![
            Triplet::new(0, 0, 1),
            Triplet::new(0, 2, 1),
            Triplet::new(1, 1, 0),
            Triplet::new(1, 1, 2),
        ];
        let eps = 0.01;
        let base = perturbed_bpr_loss(&m, &PerturbationField::new(0.0), &set);
        let adv = perturbed_bpr_loss(&m, &adv_perturbations_global(&m, &set, eps).unwrap(), &set) - base;
        let mut rng = rng::stream(4, "t");
        let entities = Entities::of(&set);
        for _ in 0..1000 {
            let f = random_perturbations(&m, &entities, eps, &mut rng).unwrap();
            let gain = perturbed_bpr_loss(&m, &f, &set) - base;
            assert!(adv >= gain, "{adv} < {gain}");
        }
    }

    #[test]
    fn accuracy_conventions() {
        let set: Vec<Triplet> = (0..4).map(|u| Triplet::new(u, 0, 1)).collect();
        let zero = FactorModel::zeros(4, 2, 3).unwrap();
        assert_eq!(triplet_accuracy(&zero, &PerturbationField::new(0.0), &set).unwrap(), 0.0);
        let perfect = FactorModel::from_rows(1, vec![1.0; 4], vec![1.0, -1.0]).unwrap();
        assert_eq!(triplet_accuracy(&perfect, &PerturbationField::new(0.0), &set).unwrap(), 1.0);
        assert!(triplet_accuracy(&perfect, &PerturbationField::new(0.0), &[]).is_err());
    }

    #[test]
    fn random_model_accuracy_is_near_half() {
        let m = random_model(50, 200, 8, 5);
        let mut rng = rng::stream(5, "t");
        let set: Vec<Triplet> = (0..20_000u32)
            .map(|k| {
                use rand::Rng as _;
                let i = rng.random_range(0..200);
                Triplet::new(k % 50, i, (i + rng.random_range(1..200)) % 200)
            })
            .collect();
        let acc = triplet_accuracy(&m, &PerturbationField::new(0.0), &set).unwrap();
        let sigma = (0.25 / set.len() as f64).sqrt();
        // triplets share users and items, so allow the bound some slack
        assert!((acc - 0.5).abs() < 3.0 * sigma * 4.0, "{acc}");
    }

    fn trained_split() -> (FactorModel, SplitDataset) {
        let data: InteractionDataset = block_diagonal(20, 16, 1);
        let split = split_leave_one_out(&data, false, 1);
        let m = random_model(20, 16, 4, 6);
        (m, split)
    }

    #[test]
    fn sweep_is_side_effect_free_and_anchored() {
        let (m, split) = trained_split();
        let before = m.to_bytes();
        let report = probe_sweep(&m, &split, &[0.0, 0.5], &[Mode::Adversarial, Mode::Random], 3, 9).unwrap();
        assert_eq!(m.to_bytes(), before);
        assert_eq!(report.rows.len(), 2 * (1 + 3));
        for r in report.rows.iter().filter(|r| r.epsilon == 0.0) {
            assert_eq!(r.ndcg_drop_pct, 0.0);
            assert_eq!(r.ndcg, report.base_ndcg);
            assert_eq!(r.train_acc, report.base_acc);
        }
        let means = report.means();
        assert_eq!(means.len(), 4);
        assert_eq!(means[1].repeats, 3);
        assert_eq!(report, probe_sweep(&m, &split, &[0.0, 0.5], &[Mode::Adversarial, Mode::Random], 3, 9).unwrap());
    }

    #[test]
    fn repeats_stream_independently() {
        let (m, split) = trained_split();
        let one = probe_sweep(&m, &split, &[0.3], &[Mode::Random], 1, 4).unwrap();
        let five = probe_sweep(&m, &split, &[0.3], &[Mode::Random], 5, 4).unwrap();
        assert_eq!(one.rows[0], five.rows[0]);
    }

    #[test]
    fn sweep_rejects_bad_arguments() {
        let (m, split) = trained_split();
        assert!(probe_sweep(&m, &split, &[], &[Mode::Random], 1, 0).is_err());
        assert!(probe_sweep(&m, &split, &[-1.0], &[Mode::Random], 1, 0).is_err());
        assert!(probe_sweep(&m, &split, &[0.1], &[], 1, 0).is_err());
        assert!(probe_sweep(&m, &split, &[0.1], &[Mode::Random], 0, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let (m, split) = trained_split();
        let report = probe_sweep(&m, &split, &[0.0], &[Mode::Adversarial], 1, 0).unwrap();
        let mut buf = Vec::new();
        write_probe_rows(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epsilon,mode,repeat,hr@100,ndcg@100,train_acc,ndcg_drop_pct");
        assert!(lines.next().unwrap().starts_with("0,adversarial,0,"));
        let mut buf = Vec::new();
        write_probe_means(&mut buf, &report).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epsilon,mode,repeats,"));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("adversarial".parse::<Mode>().unwrap(), Mode::Adversarial);
        assert_eq!("random".parse::<Mode>().unwrap(), Mode::Random);
        assert!("gaussian".parse::<Mode>().is_err());
    }
}
