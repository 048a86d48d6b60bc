use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{HteError, Result};
use crate::forests::{fit_regression_tree, ForestParams, TreeNode};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// 1-based bin number, in increasing feature order.
    pub bin: usize,
    pub feature_lo: f64,
    pub feature_hi: f64,
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

/// Units sorted by `feature` (stable), cut into `n_bins` groups whose sizes
/// differ by at most one; per bin the mean estimate and its standard error.
pub fn binned_effect_report(estimates: &[f64], feature: &[f64], n_bins: usize) -> Result<Vec<BinRow>> {
    if estimates.len() != feature.len() {
        return Err(HteError::LengthMismatch {
            left: estimates.len(),
            right: feature.len(),
        });
    }
    if n_bins < 1 {
        return Err(HteError::InvalidParameter("n_bins must be >= 1".into()));
    }
    let n = estimates.len();
    if n < n_bins {
        return Err(HteError::InvalidParameter(format!("{n} units cannot fill {n_bins} bins")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| feature[a].total_cmp(&feature[b]));
    let mut rows = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = n / n_bins + usize::from(b < n % n_bins);
        let idx = &order[start..start + size];
        start += size;
        let v: Vec<f64> = idx.iter().map(|&i| estimates[i]).collect();
        let mean = v.iter().sum::<f64>() / size as f64;
        let se = if size > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (size - 1) as f64;
            (var / size as f64).sqrt()
        } else {
            0.0
        };
        rows.push(BinRow {
            bin: b + 1,
            feature_lo: feature[idx[0]],
            feature_hi: feature[idx[size - 1]],
            mean,
            se,
            count: size,
        });
    }
    Ok(rows)
}

/// Shallow exhaustive regression tree of `tau_hat` on `x`; leaves hold the
/// mean estimate of their units.
pub fn summarize_with_tree(x: &Matrix, tau_hat: &[f64], max_depth: usize, min_leaf: usize) -> Result<TreeNode<f64>> {
    let params = ForestParams {
        n_trees: 1,
        max_depth,
        min_leaf,
        mtry: Some(x.ncols()),
        bootstrap: false,
    };
    fit_regression_tree(x, tau_hat, &params, &mut stream(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_estimates() {
        let rows = binned_effect_report(&[2.0; 10], &(0..10).map(f64::from).collect::<Vec<_>>(), 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(rows.iter().all(|r| r.mean == 2.0 && r.se == 0.0));
    }

    #[test]
    fn hand_computed_table() {
        // Sorted by feature: estimates 1, 3 | 2, 6.
        let est = [6.0, 1.0, 2.0, 3.0];
        let feat = [4.0, 1.0, 3.0, 2.0];
        let rows = binned_effect_report(&est, &feat, 2).unwrap();
        assert_eq!(rows[0].mean, 2.0);
        assert_eq!(rows[0].se, 1.0);
        assert_eq!(rows[1].mean, 4.0);
        assert_eq!(rows[1].se, 2.0);
        assert_eq!((rows[1].feature_lo, rows[1].feature_hi), (3.0, 4.0));
    }

    #[test]
    fn estimates_equal_feature_increase() {
        let f: Vec<f64> = (0..50).map(|i| ((i * 17) % 50) as f64).collect();
        let rows = binned_effect_report(&f, &f, 5).unwrap();
        assert!(rows.windows(2).all(|w| w[0].mean < w[1].mean));
    }

    #[test]
    fn tree_summary() {
        let x = Matrix::new(20, 2, (0..40).map(|i| ((i * 7) % 20) as f64).collect()).unwrap();
        assert_eq!(summarize_with_tree(&x, &[1.0; 20], 3, 2).unwrap().n_leaves(), 1);
        let step: Vec<f64> = (0..20).map(|i| if x.get(i, 0) > 9.0 { 5.0 } else { 0.0 }).collect();
        let t = summarize_with_tree(&x, &step, 2, 2).unwrap();
        assert_eq!(t.splits()[0].0, 0);
        assert!(t.depth() <= 2);
    }
}
