//! Pairwise BPR objective, its analytic gradients and the batch update.

use crate::dataset::{SplitDataset, Triplet};
use crate::error::{Error, Result};
use crate::model::{squared_norm, FactorModel, Stage};
use crate::optim::{BatchGradient, Optimizer, OptimizerState};
use crate::train::{self, BatchStats, TrainOutcome};

/// Hyperparameters shared by the BPR and APR training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Embedding size.
    pub factors: usize,
    /// Learning rate.
    pub eta: f64,
    /// L2 coefficient on the embedding rows touched by each instance.
    pub lambda_reg: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Validation is evaluated every this many epochs (and after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            factors: 64,
            eta: 0.05,
            lambda_reg: 0.0,
            batch_size: 512,
            epochs: 1000,
            optimizer: Optimizer::Adagrad,
            seed: 0,
            eval_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::Config("factors must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_reg must be non-negative, got {}",
                self.lambda_reg
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `ln(sigmoid(x))` without overflow for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y_ui - y_uj`.
#[inline]
pub fn margin(model: &FactorModel, t: &Triplet) -> f64 {
    model.score(t.user, t.pos) - model.score(t.user, t.neg)
}

fn check_triplet(model: &FactorModel, t: &Triplet) -> Result<()> {
    for (what, index, size) in [
        ("user", t.user, model.n_users()),
        ("item", t.pos, model.n_items()),
        ("item", t.neg, model.n_items()),
    ] {
        if index as usize >= size {
            return Err(Error::IndexOutOfRange {
                what,
                index: index as usize,
                size,
            });
        }
    }
    Ok(())
}

/// `-ln sigmoid(y_ui - y_uj) + lambda_reg (|p_u|^2 + |q_i|^2 + |q_j|^2)`.
pub fn bpr_instance_loss(model: &FactorModel, t: &Triplet, lambda_reg: f64) -> Result<f64> {
    check_triplet(model, t)?;
    Ok(instance_loss(model, t, lambda_reg))
}

pub(crate) fn instance_loss(model: &FactorModel, t: &Triplet, lambda_reg: f64) -> f64 {
    let mut loss = -log_sigmoid(margin(model, t));
    if lambda_reg != 0.0 {
        loss += lambda_reg
            * (squared_norm(model.user(t.user))
                + squared_norm(model.item(t.pos))
                + squared_norm(model.item(t.neg)));
    }
    loss
}

/// Gradient of a single-instance loss over the three rows it touches.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGradient {
    pub user: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl InstanceGradient {
    /// Adds this gradient into the batch accumulator.
    pub fn accumulate_into(&self, t: &Triplet, grad: &mut BatchGradient) {
        grad.users.add_scaled(t.user, 1.0, &self.user);
        grad.items.add_scaled(t.pos, 1.0, &self.pos);
        grad.items.add_scaled(t.neg, 1.0, &self.neg);
    }
}

/// Analytic gradient of [`bpr_instance_loss`].
pub fn bpr_gradients(model: &FactorModel, t: &Triplet, lambda_reg: f64) -> Result<InstanceGradient> {
    check_triplet(model, t)?;
    Ok(instance_gradient(model, t, lambda_reg))
}

pub(crate) fn instance_gradient(model: &FactorModel, t: &Triplet, lambda_reg: f64) -> InstanceGradient {
    let p = model.user(t.user);
    let qi = model.item(t.pos);
    let qj = model.item(t.neg);
    // d(-ln sigmoid(x))/dx = -(1 - sigmoid(x)) = -sigmoid(-x)
    let coef = -sigmoid(-margin(model, t));
    let reg = 2.0 * lambda_reg;
    InstanceGradient {
        user: (0..p.len()).map(|c| coef * (qi[c] - qj[c]) + reg * p[c]).collect(),
        pos: (0..p.len()).map(|c| coef * p[c] + reg * qi[c]).collect(),
        neg: (0..p.len()).map(|c| -coef * p[c] + reg * qj[c]).collect(),
    }
}

/// One optimizer step on a batch: per-instance gradients are summed per
/// embedding row (an item seen as both positive and negative gets both
/// contributions), then every touched row is updated once.
pub fn bpr_batch_step(
    model: &mut FactorModel,
    batch: &[Triplet],
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for t in batch {
        check_triplet(model, t)?;
    }
    let mut grad = BatchGradient::new(model.k());
    let mut loss_sum = 0.0;
    for t in batch {
        loss_sum += instance_loss(model, t, config.lambda_reg);
        instance_gradient(model, t, config.lambda_reg).accumulate_into(t, &mut grad);
    }
    if !state.apply(model, &grad) {
        return Err(Error::NonFinite {
            stage: "bpr",
            epoch: 0,
            batch: 0,
        });
    }
    Ok(BatchStats {
        instances: batch.len(),
        loss_sum,
        ladv_gain_sum: None,
    })
}

/// Trains from a freshly initialized model.
pub fn train_bpr(split: &SplitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = FactorModel::init(split.n_users(), split.n_items(), config.factors, config.seed)?;
    run(split, model, config, train::PRETRAIN_PHASE)
}

/// Continues BPR training of an existing model (fresh optimizer state, the
/// continuation sampler stream).
pub fn continue_bpr(split: &SplitDataset, model: FactorModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_dims(split.n_users(), split.n_items(), Some(config.factors))?;
    run(split, model, config, train::CONTINUE_PHASE)
}

fn run(split: &SplitDataset, model: FactorModel, config: &TrainConfig, phase: u64) -> Result<TrainOutcome> {
    let mut state = OptimizerState::new(config.optimizer, config.eta);
    train::run_epochs(
        split,
        model,
        config,
        Stage::Bpr,
        phase,
        None,
        |model, batch| bpr_batch_step(model, batch, config, &mut state),
    )
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::dataset::{split_leave_one_out, InteractionDataset};
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::rng;
    use crate::synthetic;

    fn random_model(n_users: usize, n_items: usize, k: usize, scale: f64, seed: u64) -> FactorModel {
        let mut rng = rng::stream(seed, "test");
        let users = (0..n_users * k).map(|_| rng.random_range(-scale..scale)).collect();
        let items = (0..n_items * k).map(|_| rng.random_range(-scale..scale)).collect();
        FactorModel::from_rows(k, users, items).unwrap()
    }

    #[test]
    fn stable_sigmoid_forms() {
        assert_eq!(log_sigmoid(0.0), -std::f64::consts::LN_2);
        assert!(log_sigmoid(800.0) == 0.0 || log_sigmoid(800.0).abs() < 1e-300);
        assert_eq!(log_sigmoid(-800.0), -800.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(1.0) + sigmoid(-1.0) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn loss_values() {
        // equal scores: ln 2
        let m = FactorModel::from_rows(1, vec![1.0], vec![0.5, 0.5]).unwrap();
        let t = Triplet::new(0, 0, 1);
        assert!((bpr_instance_loss(&m, &t, 0.0).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-15);
        // margin 1: -ln sigmoid(1), reference 0.313261687518222834 (30-digit evaluation)
        let m = FactorModel::from_rows(1, vec![1.0], vec![1.0, 0.0]).unwrap();
        assert!((bpr_instance_loss(&m, &t, 0.0).unwrap() - 0.313_261_687_518_222_83).abs() < 1e-15);
        // huge margin: loss vanishes without overflow
        let m = FactorModel::from_rows(1, vec![1000.0], vec![1.0, -1.0]).unwrap();
        assert_eq!(bpr_instance_loss(&m, &t, 0.0).unwrap(), 0.0);
        // regularizer covers the three touched rows
        let m = FactorModel::from_rows(1, vec![1.0, 9.0], vec![2.0, 2.0, 9.0]).unwrap();
        let reg = bpr_instance_loss(&m, &t, 0.5).unwrap() - bpr_instance_loss(&m, &t, 0.0).unwrap();
        assert!((reg - 0.5 * (1.0 + 4.0 + 4.0)).abs() < 1e-12);
        assert!(bpr_instance_loss(&m, &Triplet::new(2, 0, 1), 0.0).is_err());
    }

    #[test]
    fn loss_symmetry_under_swap() {
        let m = random_model(3, 5, 4, 1.0, 8);
        for (i, j) in [(0, 1), (2, 4), (3, 0)] {
            let a = bpr_instance_loss(&m, &Triplet::new(1, i, j), 0.0).unwrap();
            let x = margin(&m, &Triplet::new(1, i, j));
            let b = bpr_instance_loss(&m, &Triplet::new(1, j, i), 0.0).unwrap();
            assert!((a - (-log_sigmoid(x))).abs() < 1e-14);
            assert!((b - (-log_sigmoid(-x))).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_user_vector_gives_regularizer_only_item_gradients() {
        let mut m = random_model(2, 3, 4, 1.0, 2);
        m.user_mut(0).fill(0.0);
        let g = bpr_gradients(&m, &Triplet::new(0, 1, 2), 0.1).unwrap();
        for c in 0..4 {
            assert_eq!(g.pos[c], 0.2 * m.item(1)[c]);
            assert_eq!(g.neg[c], 0.2 * m.item(2)[c]);
        }
    }

    #[test]
    fn saturated_margin_gradient_vanishes() {
        let m = FactorModel::from_rows(2, vec![30.0, 30.0], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let g = bpr_gradients(&m, &Triplet::new(0, 0, 1), 0.0).unwrap();
        let norm: f64 = [&g.user, &g.pos, &g.neg].iter().map(|v| squared_norm(v)).sum::<f64>().sqrt();
        assert!(norm < 1e-40, "{norm}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng::stream(21, "test");
        for k in [2, 8, 64] {
            let m = random_model(6, 10, k, 0.5, k as u64);
            for _ in 0..30 {
                let u = rng.random_range(0..6u32);
                let i = rng.random_range(0..10u32);
                let j = (i + rng.random_range(1..10u32)) % 10;
                let t = Triplet::new(u, i, j);
                let analytic = bpr_gradients(&m, &t, 0.01).unwrap();
                let numeric = central_difference(&m, &t, 1e-6, |m| instance_loss(m, &t, 0.01));
                let err = max_relative_error(&analytic, &numeric);
                assert!(err <= 1e-5, "k={k} err={err}");
            }
        }
    }

    #[test]
    fn single_instance_sgd_step_is_the_plain_update_rule() {
        let mut m = random_model(3, 4, 5, 0.5, 4);
        let t = Triplet::new(1, 2, 3);
        let config = TrainConfig {
            eta: 0.1,
            lambda_reg: 0.01,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let g = bpr_gradients(&m, &t, 0.01).unwrap();
        let mut expected = m.clone();
        for c in 0..5 {
            expected.user_mut(1)[c] -= 0.1 * g.user[c];
            expected.item_mut(2)[c] -= 0.1 * g.pos[c];
            expected.item_mut(3)[c] -= 0.1 * g.neg[c];
        }
        let mut state = OptimizerState::new(Optimizer::Sgd, 0.1);
        bpr_batch_step(&mut m, &[t], &config, &mut state).unwrap();
        assert_eq!(m, expected);
    }

    #[test]
    fn shared_item_receives_summed_gradient() {
        // item 7 is the positive of one instance and the negative of another
        let mut m = random_model(2, 9, 3, 0.5, 5);
        let a = Triplet::new(0, 7, 2);
        let b = Triplet::new(1, 4, 7);
        let config = TrainConfig {
            eta: 0.05,
            lambda_reg: 0.0,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let ga = bpr_gradients(&m, &a, 0.0).unwrap();
        let gb = bpr_gradients(&m, &b, 0.0).unwrap();
        let expected: Vec<f64> = (0..3).map(|c| m.item(7)[c] - 0.05 * (ga.pos[c] + gb.neg[c])).collect();
        let mut state = OptimizerState::new(Optimizer::Sgd, 0.05);
        bpr_batch_step(&mut m, &[a, b], &config, &mut state).unwrap();
        for c in 0..3 {
            assert!((m.item(7)[c] - expected[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_batch_leaves_model_unchanged() {
        let users = vec![0.0; 2 * 3];
        let items = vec![0.25; 4 * 3];
        let mut m = FactorModel::from_rows(3, users, items).unwrap();
        let before = m.clone();
        let config = TrainConfig {
            lambda_reg: 0.0,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new(Optimizer::Sgd, 0.1);
        bpr_batch_step(&mut m, &[Triplet::new(0, 1, 2), Triplet::new(1, 3, 0)], &config, &mut state).unwrap();
        assert_eq!(m, before);
        assert!(bpr_batch_step(&mut m, &[], &config, &mut state).is_err());
    }

    fn block_split(seed: u64) -> SplitDataset {
        let data = synthetic::block_diagonal(40, 30, seed);
        split_leave_one_out(&data, true, seed)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let split = block_split(1);
        let config = TrainConfig {
            factors: 8,
            epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train_bpr(&split, &config).unwrap();
        assert_eq!(out.model, FactorModel::init(split.n_users(), split.n_items(), 8, 3).unwrap());
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn separable_blocks_are_learned() {
        let split = SplitDataset::without_holdout(synthetic::block_diagonal(40, 30, 2));
        let config = TrainConfig {
            factors: 8,
            eta: 0.05,
            lambda_reg: 0.0,
            batch_size: 64,
            epochs: 200,
            seed: 9,
            eval_every: 50,
            ..TrainConfig::default()
        };
        let out = train_bpr(&split, &config).unwrap();
        let d = split.train.sample_reduced_set(&mut rng::stream(1, rng::PROBE)).unwrap();
        let correct = d.iter().filter(|t| margin(&out.model, t) > 0.0).count();
        let acc = correct as f64 / d.len() as f64;
        assert!(acc >= 0.95, "triplet accuracy {acc}");

        let again = train_bpr(&split, &config).unwrap();
        assert_eq!(again.model.to_bytes(), out.model.to_bytes());
    }

    #[test]
    fn epoch_loss_is_non_increasing_early() {
        let mut passes = 0;
        for seed in 0..10 {
            let split = block_split(seed);
            let config = TrainConfig {
                factors: 8,
                eta: 0.01,
                batch_size: 32,
                epochs: 10,
                seed,
                eval_every: 100,
                ..TrainConfig::default()
            };
            let out = train_bpr(&split, &config).unwrap();
            let losses: Vec<f64> = out.history.iter().filter_map(|r| r.loss).collect();
            assert_eq!(losses.len(), 10);
            if losses.windows(2).all(|w| w[1] <= w[0]) {
                passes += 1;
            }
        }
        assert!(passes >= 9, "{passes} of 10 seeds monotone");
    }

    #[test]
    fn nan_parameters_abort_with_location() {
        let data = InteractionDataset::from_pairs(2, 4, &[(0, 0), (0, 1), (1, 2), (1, 3)]).unwrap();
        let split = split_leave_one_out(&data, false, 0);
        let mut model = FactorModel::init(2, 4, 2, 0).unwrap();
        model.user_mut(0)[0] = f64::NAN;
        model.user_mut(1)[0] = f64::NAN;
        let config = TrainConfig {
            factors: 2,
            epochs: 3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        match continue_bpr(&split, model, &config) {
            Err(Error::NonFinite { stage, epoch, batch }) => {
                assert_eq!((stage, epoch, batch), ("bpr", 1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
