//! Comparison estimators: the difference of arm means, a forest on the
//! transformed outcome, and separate forests per arm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mean, require_both_arms, Dataset, EffectModel};
use crate::error::{HteError, Result};
use crate::forests::{fit_regression_forest, ForestParams, RegressionForest};
use crate::pto::fit_z_forest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub mu1: f64,
    pub mu0: f64,
    pub effect: f64,
}

/// `Ȳ₁ − Ȳ₀`, predicted everywhere.
pub fn fit_null(d: &Dataset) -> Result<NullModel> {
    require_both_arms(d)?;
    let (mut y1, mut y0) = (Vec::new(), Vec::new());
    for (i, &y) in d.response().iter().enumerate() {
        if d.is_treated(i) {
            y1.push(y);
        } else {
            y0.push(y);
        }
    }
    let (mu1, mu0) = (mean(&y1), mean(&y0));
    Ok(NullModel {
        mu1,
        mu0,
        effect: mu1 - mu0,
    })
}

impl EffectModel for NullModel {
    fn predict_means(&self, _x: &[f64]) -> Option<(f64, f64)> {
        Some((self.mu1, self.mu0))
    }
}

/// Regression forest on the transformed outcome; effect only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToForest {
    pub forest: RegressionForest,
}

impl EffectModel for ToForest {
    fn predict_means(&self, _x: &[f64]) -> Option<(f64, f64)> {
        None
    }

    fn predict_effect(&self, x: &[f64]) -> f64 {
        self.forest.predict(x)
    }
}

pub fn fit_to_forest<R: Rng + ?Sized>(
    d: &Dataset,
    scores: &[f64],
    params: &ForestParams,
    rng: &mut R,
) -> Result<ToForest> {
    Ok(ToForest {
        forest: fit_z_forest(d, scores, params, rng)?,
    })
}

/// One forest per arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbForest {
    pub treated: RegressionForest,
    pub control: RegressionForest,
}

impl EffectModel for DbForest {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        Some((self.treated.predict(x), self.control.predict(x)))
    }
}

pub fn fit_db_forest<R: Rng + ?Sized>(d: &Dataset, params: &ForestParams, rng: &mut R) -> Result<DbForest> {
    let needed = 2 * params.min_leaf.max(1);
    let fit_arm = |treated: bool, rng: &mut R| {
        let idx = d.arm_indices(treated);
        if idx.len() < needed {
            return Err(HteError::ArmTooSmall {
                arm: if treated { "treated" } else { "control" },
                got: idx.len(),
                needed,
            });
        }
        let sub = d.subset(&idx);
        fit_regression_forest(sub.features(), sub.response(), params, rng)
    };
    let treated = fit_arm(true, rng)?;
    let control = fit_arm(false, rng)?;
    Ok(DbForest { treated, control })
}
