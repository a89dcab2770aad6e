//! Central finite differences over the rows touched by a triplet.

use crate::bpr::InstanceGradient;
use crate::dataset::Triplet;
use crate::model::FactorModel;

/// Magnitude below which relative error is measured against this floor
/// instead of the (vanishing) gradient component.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Numerical gradient of `loss` with respect to `p_u`, `q_i` and `q_j`, using
/// `(f(x + h) - f(x - h)) / 2h` per coordinate.
pub fn central_difference<F>(model: &FactorModel, t: &Triplet, h: f64, loss: F) -> InstanceGradient
where
    F: Fn(&FactorModel) -> f64,
{
    stencil(model, t, h, &loss, &[(1.0, 1.0 / 2.0)])
}

/// Fourth-order central difference,
/// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h`. Its truncation
/// error is small enough to allow a larger `h`, which keeps the rounding error
/// of the loss evaluations from swamping small gradient components.
pub fn five_point_difference<F>(model: &FactorModel, t: &Triplet, h: f64, loss: F) -> InstanceGradient
where
    F: Fn(&FactorModel) -> f64,
{
    stencil(model, t, h, &loss, &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)])
}

/// Antisymmetric stencil: sum over `(offset, weight)` of
/// `weight * (f(x + offset h) - f(x - offset h)) / h`.
fn stencil<F>(model: &FactorModel, t: &Triplet, h: f64, loss: &F, taps: &[(f64, f64)]) -> InstanceGradient
where
    F: Fn(&FactorModel) -> f64,
{
    let k = model.k();
    let mut work = model.clone();
    let mut probe = |row: &dyn Fn(&mut FactorModel) -> &mut [f64]| -> Vec<f64> {
        (0..k)
            .map(|c| {
                let orig = row(&mut work)[c];
                let mut acc = 0.0;
                for &(offset, weight) in taps {
                    row(&mut work)[c] = orig + offset * h;
                    let up = loss(&work);
                    row(&mut work)[c] = orig - offset * h;
                    let down = loss(&work);
                    acc += weight * (up - down);
                }
                row(&mut work)[c] = orig;
                acc / h
            })
            .collect()
    };
    InstanceGradient {
        user: probe(&|m| m.user_mut(t.user)),
        pos: probe(&|m| m.item_mut(t.pos)),
        neg: probe(&|m| m.item_mut(t.neg)),
    }
}

/// Largest `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)` over all components.
pub fn max_relative_error(a: &InstanceGradient, b: &InstanceGradient) -> f64 {
    [(&a.user, &b.user), (&a.pos, &b.pos), (&a.neg, &b.neg)]
        .into_iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}
