use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::TreeNode;
use crate::data::Matrix;
use crate::error::{HteError, Result};

/// Hyperparameters shared by every forest in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Maximum depth; 0 grows a single leaf.
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌈√p⌉.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: 4,
            min_leaf: 5,
            mtry: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    /// Defaults for the propensity forest: deeper trees, since the
    /// assignment mechanism is a nuisance function worth fitting closely.
    pub fn propensity_default() -> Self {
        ForestParams {
            max_depth: 8,
            ..ForestParams::default()
        }
    }

    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p.max(1))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees < 1 {
            return Err(HteError::InvalidParameter("n_trees must be >= 1".into()));
        }
        if self.min_leaf < 1 {
            return Err(HteError::InvalidParameter("min_leaf must be >= 1".into()));
        }
        if let Some(m) = self.mtry {
            if m < 1 || m > p {
                return Err(HteError::InvalidParameter(format!(
                    "mtry must be in 1..={p}, got {m}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Greedy least-squares tree on `rows` (duplicates act as weights).
pub(crate) struct CartBuilder<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mtry: usize,
}

impl CartBuilder<'_> {
    pub fn build<R: Rng + ?Sized>(&self, rows: &mut [usize], rng: &mut R) -> TreeNode<f64> {
        self.grow(rows, 0, rng)
    }

    fn grow<R: Rng + ?Sized>(&self, rows: &mut [usize], depth: usize, rng: &mut R) -> TreeNode<f64> {
        let n = rows.len();
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return TreeNode::leaf(mean);
        }
        let Some(best) = self.best_split(rows, mean, rng) else {
            return TreeNode::leaf(mean);
        };
        let split_at = partition_in_place(rows, |i| self.x.get(i, best.feature) < best.threshold);
        let (l, r) = rows.split_at_mut(split_at);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        TreeNode::split(best.feature, best.threshold, left, right)
    }

    fn best_split<R: Rng + ?Sized>(&self, rows: &[usize], mean: f64, rng: &mut R) -> Option<Candidate> {
        let p = self.x.ncols();
        let features: Vec<usize> = if self.mtry >= p {
            (0..p).collect()
        } else {
            let mut f = sample(rng, p, self.mtry).into_vec();
            f.sort_unstable();
            f
        };
        let n = rows.len();
        let centered_total: f64 = rows.iter().map(|&i| self.y[i] - mean).sum();
        let sst: f64 = rows.iter().map(|&i| (self.y[i] - mean).powi(2)).sum();
        if sst <= 0.0 {
            return None;
        }
        let mut order: Vec<usize> = rows.to_vec();
        let mut best: Option<Candidate> = None;
        for &j in &features {
            order.sort_unstable_by(|&a, &b| {
                self.x.get(a, j).total_cmp(&self.x.get(b, j)).then(a.cmp(&b))
            });
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.y[order[k]] - mean;
                let nl = k + 1;
                let nr = n - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let a = self.x.get(order[k], j);
                let b = self.x.get(order[k + 1], j);
                if a == b {
                    continue;
                }
                let right_sum = centered_total - left_sum;
                // Reduction in SSE; the parent term is ~0 after centering.
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64
                    - centered_total * centered_total / n as f64;
                if gain > 1e-12 * sst && best.is_none_or(|c| gain > c.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: j,
                        threshold: midpoint(a, b),
                    });
                }
            }
        }
        best
    }
}

/// A threshold `t` with `a < t <= b`, so `a` routes left and `b` right.
pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m > a && m <= b {
        m
    } else {
        b
    }
}

/// Stable partition: elements satisfying `pred` first. Returns the split.
pub(crate) fn partition_in_place(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| pred(i));
    let k = l.len();
    rows[..k].copy_from_slice(&l);
    rows[k..].copy_from_slice(&r);
    k
}

/// Fits one CART regression tree by exhaustive variance-reduction search.
///
/// Candidate thresholds are midpoints between consecutive distinct values;
/// equal-gain candidates resolve to the lowest feature index, then the
/// smallest threshold.
pub fn fit_regression_tree<R: Rng + ?Sized>(
    x: &Matrix,
    y: &[f64],
    params: &ForestParams,
    rng: &mut R,
) -> Result<TreeNode<f64>> {
    check_fit_inputs(x, y, params)?;
    let mut rows: Vec<usize> = (0..y.len()).collect();
    let builder = CartBuilder {
        x,
        y,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        mtry: params.mtry_for(x.ncols()),
    };
    Ok(builder.build(&mut rows, rng))
}

pub(crate) fn check_fit_inputs(x: &Matrix, y: &[f64], params: &ForestParams) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(HteError::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    params.validate(x.ncols())?;
    let needed = (2 * params.min_leaf).max(1);
    if y.len() < needed {
        return Err(HteError::InsufficientSamples {
            needed,
            got: y.len(),
        });
    }
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(HteError::NonFiniteValue {
            field: "target",
            index,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn params(depth: usize, min_leaf: usize) -> ForestParams {
        ForestParams {
            n_trees: 1,
            max_depth: depth,
            min_leaf,
            mtry: Some(1),
            bootstrap: false,
        }
    }

    #[test]
    fn separable_single_split() {
        let x = Matrix::new(4, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let y = [0.0, 0.0, 10.0, 10.0];
        let t = fit_regression_tree(&x, &y, &params(3, 1), &mut stream(0)).unwrap();
        match &t {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                assert_eq!(*feature, 0);
                assert!(*threshold > 0.0 && *threshold <= 1.0);
                assert_eq!(**left, TreeNode::leaf(0.0));
                assert_eq!(**right, TreeNode::leaf(10.0));
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn constant_target_single_leaf() {
        let x = Matrix::new(6, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = [2.5; 6];
        let t = fit_regression_tree(&x, &y, &params(4, 1), &mut stream(0)).unwrap();
        assert_eq!(t, TreeNode::leaf(2.5));
    }

    #[test]
    fn insufficient_samples() {
        let x = Matrix::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let err = fit_regression_tree(&x, &[1.0, 2.0, 3.0], &params(2, 2), &mut stream(0)).unwrap_err();
        assert_eq!(err.kind(), "insufficient-samples");
    }

    #[test]
    fn min_leaf_and_depth_respected() {
        let n = 50;
        let x = Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let y: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64).collect();
        let t = fit_regression_tree(&x, &y, &params(3, 4), &mut stream(0)).unwrap();
        assert!(t.depth() <= 3);
        let mut counts = vec![0usize; t.n_leaves()];
        for i in 0..n {
            counts[t.leaf_index(x.row(i))] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 4));
        assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn midpoint_handles_adjacent_floats() {
        let a = 1.0_f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(m > a && m <= b);
        assert_eq!(midpoint(0.0, 1.0), 0.5);
    }
}
