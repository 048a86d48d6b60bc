use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cart::{check_fit_inputs, CartBuilder, ForestParams};
use super::tree::TreeNode;
use crate::data::Matrix;
use crate::error::{HteError, Result};
use crate::rng::child_stream;

/// Default clipping of probability-forest outputs; keeps 1/π̂ ≤ 40.
pub const DEFAULT_CLIP: f64 = 0.025;

/// Averaging ensemble of regression trees.
///
/// Probability forests are the same structure with `clip` set: their
/// averaged class-1 proportions are clamped to `[clip, 1 - clip]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub trees: Vec<TreeNode<f64>>,
    pub params: ForestParams,
    #[serde(default)]
    pub clip: Option<f64>,
    /// In-bag multiplicity of each training row, per tree. Only populated
    /// on freshly fitted forests; not persisted.
    #[serde(skip)]
    pub inbag: Vec<Vec<u32>>,
}

impl RegressionForest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| *t.route(x)).sum();
        self.finish(s / self.trees.len() as f64)
    }

    pub fn predict_all(&self, x: &Matrix) -> Vec<f64> {
        x.rows().map(|r| self.predict(r)).collect()
    }

    fn finish(&self, v: f64) -> f64 {
        match self.clip {
            Some(c) => v.clamp(c, 1.0 - c),
            None => v,
        }
    }

    /// Out-of-bag predictions for the training rows: each row averages the
    /// trees that did not sample it, falling back to all trees when every
    /// tree did.
    pub fn predict_oob(&self, x: &Matrix) -> Result<Vec<f64>> {
        if self.inbag.len() != self.trees.len()
            || self.inbag.iter().any(|b| b.len() != x.nrows())
        {
            return Err(HteError::Unsupported(
                "out-of-bag prediction needs the in-bag record of a freshly fitted forest".into(),
            ));
        }
        Ok((0..x.nrows())
            .map(|i| {
                let row = x.row(i);
                let (s, c) = self
                    .trees
                    .iter()
                    .zip(&self.inbag)
                    .filter(|(_, bag)| bag[i] == 0)
                    .fold((0.0, 0usize), |(s, c), (t, _)| (s + *t.route(row), c + 1));
                if c == 0 {
                    self.predict(row)
                } else {
                    self.finish(s / c as f64)
                }
            })
            .collect())
    }
}

fn grow_forest<R: Rng + ?Sized>(
    x: &Matrix,
    y: &[f64],
    params: &ForestParams,
    rng: &mut R,
) -> (Vec<TreeNode<f64>>, Vec<Vec<u32>>) {
    let n = y.len();
    let base: u64 = rng.random();
    let mtry = params.mtry_for(x.ncols());
    let builder = CartBuilder {
        x,
        y,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        mtry,
    };
    (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut trng = child_stream(base, &[t as u64]);
            let mut counts = vec![0u32; n];
            let mut rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| trng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            rows.sort_unstable();
            for &i in &rows {
                counts[i] += 1;
            }
            (builder.build(&mut rows, &mut trng), counts)
        })
        .unzip()
}

/// Bagged CART forest; tree `t` draws from a stream derived from one seed
/// taken from `rng` and `t`, so the result is independent of thread count.
pub fn fit_regression_forest<R: Rng + ?Sized>(
    x: &Matrix,
    y: &[f64],
    params: &ForestParams,
    rng: &mut R,
) -> Result<RegressionForest> {
    check_fit_inputs(x, y, params)?;
    let (trees, inbag) = grow_forest(x, y, params, rng);
    Ok(RegressionForest {
        trees,
        params: params.clone(),
        clip: None,
        inbag,
    })
}

/// Probability forest for a binary label: per-leaf class-1 proportions,
/// averaged over trees and clipped to `[clip, 1 - clip]` at prediction.
pub fn fit_probability_forest<R: Rng + ?Sized>(
    x: &Matrix,
    labels: &[u8],
    params: &ForestParams,
    clip: f64,
    rng: &mut R,
) -> Result<RegressionForest> {
    if !(0.0..0.5).contains(&clip) {
        return Err(HteError::InvalidParameter(format!("clip must be in [0, 0.5), got {clip}")));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(HteError::SingleClass);
    }
    if let Some(row) = labels.iter().position(|&l| l > 1) {
        return Err(HteError::InvalidTreatment {
            row,
            value: f64::from(labels[row]),
        });
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let mut forest = fit_regression_forest(x, &y, params, rng)?;
    forest.clip = Some(clip);
    Ok(forest)
}
