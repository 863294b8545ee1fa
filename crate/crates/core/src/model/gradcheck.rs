//! Finite-difference verification of the analytic gradients.

use thiserror::Error;

use super::encoder::EncodeOptions;
use super::heads::Sample;
use super::Model;
use crate::nn::{Grads, ParamStore, Tape, Var};

/// Which scalar the check differentiates; every choice is summed over the
/// batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Bond,
    Hydrogen,
    /// Product-mode leaving-group term.
    LgProduct,
    /// Contrastive-mode leaving-group term.
    LgContrast,
    Connection,
    /// `w_B·L_B + w_H·L_H + w_lg·L_lg + w_lgc·L_lgc`.
    Weighted([f64; 4]),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("gradient check failed on {param}[{index}]: relative error {error:.3e}")]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub error: f64,
}

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-4;

impl Model {
    /// Builds the selected objective on `t` and returns its node.
    pub fn objective_on(&self, t: &mut Tape, samples: &[Sample], obj: &Objective) -> Var {
        let contrastive = matches!(obj, Objective::LgContrast | Objective::Weighted(_));
        let opts = EncodeOptions::default();
        let mut terms = Vec::new();
        for s in samples {
            let v = self.task_losses_on(t, s, contrastive, &opts);
            match obj {
                Objective::Bond => terms.push((v.bond, 1.0)),
                Objective::Hydrogen => terms.push((v.hydrogen, 1.0)),
                Objective::LgProduct => terms.push((v.lg_product, 1.0)),
                Objective::LgContrast => terms.extend(v.lg_contrast.map(|c| (c, 1.0))),
                Objective::Connection => terms.extend(v.lgc.map(|c| (c, 1.0))),
                Objective::Weighted(w) => {
                    terms.push((v.bond, w[0]));
                    terms.push((v.hydrogen, w[1]));
                    terms.push((v.lg, w[2]));
                    terms.extend(v.lgc.map(|c| (c, w[3])));
                }
            }
        }
        t.weighted_sum(&terms)
    }

    pub fn objective_value(&self, params: &ParamStore, samples: &[Sample], obj: &Objective) -> f64 {
        let mut t = Tape::new(params);
        let v = self.objective_on(&mut t, samples, obj);
        t.value(v).scalar()
    }

    pub fn objective_gradients(&self, samples: &[Sample], obj: &Objective) -> Grads {
        let mut t = Tape::new(&self.params);
        let v = self.objective_on(&mut t, samples, obj);
        t.backward(v)
    }
}

/// Largest relative error `|g_a − g_n| / max(1, |g_a|, |g_n|)` between
/// `analytic` and central differences, with its location.
pub fn max_relative_error(model: &Model, samples: &[Sample], obj: &Objective, analytic: &Grads) -> (f64, String, usize) {
    let mut params = model.params.clone();
    let mut worst = (0.0, String::new(), 0);
    for id in model.params.ids() {
        let len = params.value(id).data.len();
        for i in 0..len {
            let x = params.value(id).data[i];
            params.value_mut(id).data[i] = x + FD_STEP;
            let up = model.objective_value(&params, samples, obj);
            params.value_mut(id).data[i] = x - FD_STEP;
            let down = model.objective_value(&params, samples, obj);
            params.value_mut(id).data[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data[i]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst.0 {
                worst = (err, model.params.name(id).to_string(), i);
            }
        }
    }
    worst
}

/// Checks the model's own gradients of `obj`; returns the max relative error.
pub fn grad_check(model: &Model, samples: &[Sample], obj: &Objective) -> Result<f64, GradCheckFailure> {
    check_against(model, samples, obj, &model.objective_gradients(samples, obj))
}

/// Checks a supplied gradient set against finite differences.
pub fn check_against(model: &Model, samples: &[Sample], obj: &Objective, analytic: &Grads) -> Result<f64, GradCheckFailure> {
    let (error, param, index) = max_relative_error(model, samples, obj, analytic);
    if error > GRAD_TOLERANCE {
        return Err(GradCheckFailure { param, index, error });
    }
    Ok(error)
}
