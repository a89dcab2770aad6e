//! Adversarial personalized ranking on matrix factorization.
//!
//! Each batch plays one round of the minimax game. First the maximizing
//! player builds a fast-gradient perturbation: the gradient of the batch
//! adversarial objective with respect to every touched embedding vector,
//! evaluated at zero perturbation, rescaled to norm epsilon. Then the model
//! takes one optimizer step on the BPR loss plus `lambda_adv` times the BPR
//! loss under that (frozen) perturbation.

use crate::bpr::{instance_gradient, instance_loss, log_sigmoid, sigmoid, InstanceGradient, TrainConfig};
use crate::dataset::{SplitDataset, Triplet};
use crate::error::{Error, Result};
use crate::model::{scale_to_norm, FactorModel, PerturbationField, Stage};
use crate::optim::{BatchGradient, OptimizerState, SparseRows};
use crate::train::{self, BatchStats, TrainOutcome};

/// Default perturbation norm.
pub const DEFAULT_EPSILON: f64 = 0.5;
/// Default adversarial regularizer weight.
pub const DEFAULT_LAMBDA_ADV: f64 = 1.0;
/// Default number of non-improving validation evaluations before stopping.
pub const DEFAULT_PATIENCE: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct AprConfig {
    pub base: TrainConfig,
    /// Per-vector L2 bound of the perturbations.
    pub epsilon: f64,
    /// Weight of the adversarial term.
    pub lambda_adv: f64,
    /// Early stopping on validation NDCG; `None` runs the full epoch budget.
    pub patience: Option<usize>,
}

impl Default for AprConfig {
    fn default() -> Self {
        AprConfig {
            base: TrainConfig::default(),
            epsilon: DEFAULT_EPSILON,
            lambda_adv: DEFAULT_LAMBDA_ADV,
            patience: Some(DEFAULT_PATIENCE),
        }
    }
}

impl AprConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_adv must be non-negative, got {}",
                self.lambda_adv
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// `y_ui - y_uj` under the perturbation.
#[inline]
pub fn perturbed_margin(model: &FactorModel, field: &PerturbationField, t: &Triplet) -> f64 {
    model.score_perturbed(field, t.user, t.pos) - model.score_perturbed(field, t.user, t.neg)
}

fn check(model: &FactorModel, t: &Triplet) -> Result<()> {
    model.predict(t.user, t.pos)?;
    model.predict(t.user, t.neg)?;
    Ok(())
}

/// `-lambda_adv * ln sigmoid(margin under the perturbation)`.
pub fn adv_instance_objective(
    model: &FactorModel,
    field: &PerturbationField,
    t: &Triplet,
    lambda_adv: f64,
) -> Result<f64> {
    check(model, t)?;
    Ok(-lambda_adv * log_sigmoid(perturbed_margin(model, field, t)))
}

/// Fast-gradient perturbations for a batch.
///
/// For every user and item the batch touches (items in either role), the
/// gradient of the summed adversarial objective with respect to its
/// perturbation vector is accumulated at zero perturbation and rescaled to
/// norm `epsilon`. Entities whose gradient is exactly zero get no
/// perturbation.
pub fn build_adv_perturbations(
    model: &FactorModel,
    batch: &[Triplet],
    epsilon: f64,
    lambda_adv: f64,
) -> Result<PerturbationField> {
    for t in batch {
        check(model, t)?;
    }
    Ok(adv_field(model, batch, epsilon, lambda_adv))
}

pub(crate) fn adv_field(model: &FactorModel, batch: &[Triplet], epsilon: f64, lambda_adv: f64) -> PerturbationField {
    let mut field = PerturbationField::new(epsilon);
    if lambda_adv == 0.0 {
        return field;
    }
    let k = model.k();
    let mut users = SparseRows::new(k);
    let mut items = SparseRows::new(k);
    let mut diff = vec![0.0; k];
    for t in batch {
        let p = model.user(t.user);
        let qi = model.item(t.pos);
        let qj = model.item(t.neg);
        // d l_adv / d margin at zero perturbation
        let coef = -lambda_adv * sigmoid(-(crate::model::dot(p, qi) - crate::model::dot(p, qj)));
        for c in 0..k {
            diff[c] = qi[c] - qj[c];
        }
        users.add_scaled(t.user, coef, &diff);
        items.add_scaled(t.pos, coef, p);
        items.add_scaled(t.neg, -coef, p);
    }
    for (u, g) in users.iter() {
        if let Some(d) = scale_to_norm(g, epsilon) {
            field.insert_user_unchecked(u, d);
        }
    }
    for (i, g) in items.iter() {
        if let Some(d) = scale_to_norm(g, epsilon) {
            field.insert_item_unchecked(i, d);
        }
    }
    field
}

/// BPR loss (with L2) plus the weighted loss under the perturbation.
pub fn apr_instance_loss(
    model: &FactorModel,
    field: &PerturbationField,
    t: &Triplet,
    config: &AprConfig,
) -> Result<f64> {
    check(model, t)?;
    Ok(instance_apr_loss(model, field, t, config))
}

fn instance_apr_loss(model: &FactorModel, field: &PerturbationField, t: &Triplet, config: &AprConfig) -> f64 {
    let mut loss = instance_loss(model, t, config.base.lambda_reg);
    if config.lambda_adv != 0.0 {
        loss += -config.lambda_adv * log_sigmoid(perturbed_margin(model, field, t));
    }
    loss
}

/// Gradient of [`apr_instance_loss`] with respect to the model, holding the
/// perturbation constant.
pub fn apr_gradients(
    model: &FactorModel,
    field: &PerturbationField,
    t: &Triplet,
    config: &AprConfig,
) -> Result<InstanceGradient> {
    check(model, t)?;
    Ok(instance_apr_gradient(model, field, t, config))
}

fn instance_apr_gradient(
    model: &FactorModel,
    field: &PerturbationField,
    t: &Triplet,
    config: &AprConfig,
) -> InstanceGradient {
    let mut grad = instance_gradient(model, t, config.base.lambda_reg);
    if config.lambda_adv == 0.0 {
        return grad;
    }
    let k = model.k();
    let zero = vec![0.0; k];
    let du = field.user(t.user).unwrap_or(&zero);
    let di = field.item(t.pos).unwrap_or(&zero);
    let dj = field.item(t.neg).unwrap_or(&zero);
    let p = model.user(t.user);
    let qi = model.item(t.pos);
    let qj = model.item(t.neg);
    let coef = -config.lambda_adv * sigmoid(-perturbed_margin(model, field, t));
    for c in 0..k {
        let pu = p[c] + du[c];
        grad.user[c] += coef * ((qi[c] + di[c]) - (qj[c] + dj[c]));
        grad.pos[c] += coef * pu;
        grad.neg[c] -= coef * pu;
    }
    grad
}

/// One round of the minimax game on a batch: build the perturbation at the
/// current parameters, then apply one optimizer update per touched row with
/// the summed APR gradients.
pub fn apr_batch_step(
    model: &mut FactorModel,
    batch: &[Triplet],
    config: &AprConfig,
    state: &mut OptimizerState,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for t in batch {
        check(model, t)?;
    }
    let field = adv_field(model, batch, config.epsilon, config.lambda_adv);

    let mut grad = BatchGradient::new(model.k());
    let mut loss_sum = 0.0;
    let mut gain_sum = 0.0;
    for t in batch {
        loss_sum += instance_apr_loss(model, &field, t, config);
        if config.lambda_adv != 0.0 {
            let clean = log_sigmoid(crate::bpr::margin(model, t));
            let attacked = log_sigmoid(perturbed_margin(model, &field, t));
            gain_sum += config.lambda_adv * (clean - attacked);
        }
        instance_apr_gradient(model, &field, t, config).accumulate_into(t, &mut grad);
    }
    if !state.apply(model, &grad) {
        return Err(Error::NonFinite {
            stage: "apr",
            epoch: 0,
            batch: 0,
        });
    }
    Ok(BatchStats {
        instances: batch.len(),
        loss_sum,
        ladv_gain_sum: Some(gain_sum),
    })
}

/// Continues a (BPR-trained) model with adversarial training. The optimizer
/// state starts fresh; the sampler uses the continuation stream, so with
/// `lambda_adv = 0` the run reproduces [`crate::bpr::continue_bpr`].
pub fn train_apr(split: &SplitDataset, pretrained: FactorModel, config: &AprConfig) -> Result<TrainOutcome> {
    config.validate()?;
    pretrained.check_dims(split.n_users(), split.n_items(), Some(config.base.factors))?;
    let mut state = OptimizerState::new(config.base.optimizer, config.base.eta);
    train::run_epochs(
        split,
        pretrained,
        &config.base,
        Stage::Apr,
        train::CONTINUE_PHASE,
        config.patience,
        |model, batch| apr_batch_step(model, batch, config, &mut state),
    )
}
