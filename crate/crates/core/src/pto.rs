//! Pollinated transformed-outcome forests: a forest grown on the
//! transformed outcome whose leaves are re-estimated with arm means.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{require_both_arms, Dataset, EffectModel};
use crate::error::Result;
use crate::forests::{fit_regression_forest, pollinate_tree, ForestParams, PairTree, RegressionForest};
use crate::propensity::transformed_outcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtoModel {
    pub pair_forest: Vec<PairTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoother: Option<RegressionForest>,
    /// The forest grown on Z, before pollination.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_forest: Option<RegressionForest>,
}

impl PtoModel {
    /// Average pollinated pair over trees.
    pub fn pair_means(&self, x: &[f64]) -> (f64, f64) {
        let (s1, s0) = self.pair_forest.iter().fold((0.0, 0.0), |(a, b), t| {
            let leaf = t.route(x);
            (a + leaf.ybar1, b + leaf.ybar0)
        });
        let k = self.pair_forest.len() as f64;
        (s1 / k, s0 / k)
    }

    /// Pollinated effect, ignoring any smoother.
    pub fn pollinated_effect(&self, x: &[f64]) -> f64 {
        let (m1, m0) = self.pair_means(x);
        m1 - m0
    }

    /// Prediction of the unpollinated forest on Z, when retained.
    pub fn raw_effect(&self, x: &[f64]) -> Option<f64> {
        self.raw_forest.as_ref().map(|f| f.predict(x))
    }
}

/// Smoother present: its prediction; otherwise the pollinated effect.
pub fn predict_pto(m: &PtoModel, x: &[f64]) -> f64 {
    m.predict_effect(x)
}

impl EffectModel for PtoModel {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        match self.smoother {
            Some(_) => None,
            None => Some(self.pair_means(x)),
        }
    }

    fn predict_effect(&self, x: &[f64]) -> f64 {
        match &self.smoother {
            Some(g) => g.predict(x),
            None => {
                let (m1, m0) = self.pair_means(x);
                m1 - m0
            }
        }
    }
}

/// Step 1: the regression forest on the transformed outcome. Shared with
/// the transformed-outcome baseline so both consume the stream identically.
pub(crate) fn fit_z_forest<R: Rng + ?Sized>(
    d: &Dataset,
    scores: &[f64],
    params: &ForestParams,
    rng: &mut R,
) -> Result<RegressionForest> {
    require_both_arms(d)?;
    let z = transformed_outcome(d, scores)?;
    fit_regression_forest(d.features(), &z, params, rng)
}

pub fn fit_pto_forest<R: Rng + ?Sized>(
    d: &Dataset,
    scores: &[f64],
    params: &ForestParams,
    smooth: bool,
    rng: &mut R,
) -> Result<PtoModel> {
    let raw = fit_z_forest(d, scores, params, rng)?;
    let pair_forest: Vec<PairTree> = raw
        .trees
        .par_iter()
        .map(|t| pollinate_tree(t, d))
        .collect::<Result<_>>()?;
    let mut model = PtoModel {
        pair_forest,
        smoother: None,
        raw_forest: None,
    };
    if smooth {
        // Out-of-bag pollinated effects for the training units.
        let x = d.features();
        let tau: Vec<f64> = (0..d.n())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                let (s, c) = model
                    .pair_forest
                    .iter()
                    .zip(&raw.inbag)
                    .filter(|(_, bag)| bag[i] == 0)
                    .fold((0.0, 0usize), |(s, c), (t, _)| (s + t.route(row).effect(), c + 1));
                if c == 0 {
                    model.pollinated_effect(row)
                } else {
                    s / c as f64
                }
            })
            .collect();
        model.smoother = Some(fit_regression_forest(x, &tau, params, rng)?);
    }
    model.raw_forest = Some(raw);
    Ok(model)
}
