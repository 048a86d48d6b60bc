//! Causal boosting: a stagewise sum of shrunk causal trees fit to running
//! residuals, with validation through re-pollinated tree sequences.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal_tree::{predict_pair, CausalTree, CausalTreeParams, Grower, LeafEstimate, Presorted};
use crate::data::{validate_dataset, Dataset, EffectModel, Matrix};
use crate::error::{HteError, Result};
use crate::forests::TreeNode;
use crate::propensity::{stratified_contrast, stratum_stats, StrataAssignment};
use crate::rng::child_stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub epsilon: f64,
    pub tree: CausalTreeParams,
    /// Fraction of rows drawn without replacement for each stage; 1 fits
    /// every stage on all rows.
    pub subsample: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_trees: 200,
            epsilon: 0.05,
            tree: CausalTreeParams::default(),
            subsample: 1.0,
        }
    }
}

impl BoostParams {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees < 1 {
            return Err(HteError::InvalidParameter("n_trees must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(HteError::InvalidParameter(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(HteError::InvalidParameter("subsample must be in (0, 1]".into()));
        }
        self.tree.validate(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub trees: Vec<CausalTree>,
    pub epsilon: f64,
    pub n_strata: usize,
}

impl BoostModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Model restricted to its first `k` stages.
    pub fn truncated(&self, k: usize) -> Result<BoostModel> {
        if k < 1 || k > self.trees.len() {
            return Err(HteError::KOutOfRange {
                k,
                max: self.trees.len(),
            });
        }
        Ok(BoostModel {
            trees: self.trees[..k].to_vec(),
            epsilon: self.epsilon,
            n_strata: self.n_strata,
        })
    }
}

/// `(Ĝ_k(x,1), Ĝ_k(x,0))`, the shrunk sum of the first `k` trees.
pub fn predict_boost(m: &BoostModel, x: &[f64], k: usize) -> Result<(f64, f64)> {
    if k < 1 || k > m.trees.len() {
        return Err(HteError::KOutOfRange {
            k,
            max: m.trees.len(),
        });
    }
    Ok(partial_sum(m, x, k))
}

fn partial_sum(m: &BoostModel, x: &[f64], k: usize) -> (f64, f64) {
    let (s1, s0) = m.trees[..k].iter().fold((0.0, 0.0), |(a, b), t| {
        let (m1, m0) = predict_pair(t, x);
        (a + m1, b + m0)
    });
    (m.epsilon * s1, m.epsilon * s0)
}

impl EffectModel for BoostModel {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        Some(partial_sum(self, x, self.trees.len()))
    }
}

struct BoostFit {
    model: BoostModel,
    #[cfg_attr(not(test), allow(dead_code))]
    residuals: Vec<f64>,
}

fn fit_inner<R: Rng + ?Sized>(
    d: &Dataset,
    sa: &StrataAssignment,
    params: &BoostParams,
    rng: &mut R,
) -> Result<BoostFit> {
    validate_dataset(d)?;
    if sa.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: sa.len(),
        });
    }
    params.validate(d.p())?;
    let n = d.n();
    let presort = Presorted::new(d.features());
    let grower = Grower {
        x: d.features(),
        t: d.treatment(),
        sa,
        presort: &presort,
        params: &params.tree,
    };
    let take = ((params.subsample * n as f64).ceil() as usize).clamp(1, n);
    let mut residuals = d.response().to_vec();
    let mut trees: Vec<CausalTree> = Vec::with_capacity(params.n_trees);
    for k in 0..params.n_trees {
        let rows: Vec<usize> = if take < n {
            let mut r = rand::seq::index::sample(rng, n, take).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let tree = match grower.fit(&residuals, rows, rng) {
            Ok(t) => t,
            Err(e) if k == 0 => return Err(e),
            Err(_) => break,
        };
        for (i, r) in residuals.iter_mut().enumerate() {
            let (m1, m0) = predict_pair(&tree, d.features().row(i));
            *r -= params.epsilon * if d.is_treated(i) { m1 } else { m0 };
        }
        trees.push(tree);
    }
    Ok(BoostFit {
        model: BoostModel {
            trees,
            epsilon: params.epsilon,
            n_strata: sa.n_strata,
        },
        residuals,
    })
}

/// Fits `K` stages; stops early (truncating `K`) when a later stage has
/// no viable root.
pub fn fit_causal_boost<R: Rng + ?Sized>(
    d: &Dataset,
    sa: &StrataAssignment,
    params: &BoostParams,
    rng: &mut R,
) -> Result<BoostModel> {
    Ok(fit_inner(d, sa, params, rng)?.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostCvReport {
    pub per_k_error: Vec<f64>,
    /// 1-based argmin of `per_k_error`, ties to the smaller `k`.
    pub k_star: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_fold_error: Vec<Vec<f64>>,
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in v.iter().enumerate() {
        if e < v[best] {
            best = k;
        }
    }
    best + 1
}

/// Re-estimates a tree's leaf pairs from `rows` of `(x, t, y)` with the
/// ancestor fallback for leaves missing an arm.
fn repollinate(
    tree: &TreeNode<LeafEstimate>,
    x: &Matrix,
    t: &[u8],
    y: &[f64],
    sa: &StrataAssignment,
) -> Option<TreeNode<(f64, f64)>> {
    let rows: Vec<usize> = (0..y.len()).collect();
    tree.refill(
        x,
        &rows,
        &|r: &[usize]| {
            let stats = stratum_stats(y, t, sa, r.iter().copied());
            stratified_contrast(&stats, 1).map(|c| (c.mu1, c.mu0))
        },
        &|e: &(f64, f64), _r: &[usize], _fallback| *e,
    )
}

/// Scores each `G_k` against the saturated validation sequence `H_K`.
///
/// `H` is built by pushing validation residuals down each tree's fixed
/// topology in turn; the error at `k` is
/// `Σ_v ({G_k(x,1) − G_k(x,0)} − {H_K(x,1) − H_K(x,0)})²`.
pub fn validate_boost(m: &BoostModel, v: &Dataset, sa_v: &StrataAssignment) -> Result<BoostCvReport> {
    if v.n() == 0 {
        return Err(HteError::EmptyValidationSet);
    }
    if sa_v.len() != v.n() {
        return Err(HteError::LengthMismatch {
            left: v.n(),
            right: sa_v.len(),
        });
    }
    let x = v.features();
    let mut r = v.response().to_vec();
    let mut h_effect = vec![0.0; v.n()];
    for tree in &m.trees {
        let h = repollinate(&tree.root, x, v.treatment(), &r, sa_v).ok_or(HteError::RootDegenerate)?;
        for (i, ri) in r.iter_mut().enumerate() {
            let (m1, m0) = *h.route(x.row(i));
            h_effect[i] += m.epsilon * (m1 - m0);
            *ri -= m.epsilon * if v.is_treated(i) { m1 } else { m0 };
        }
    }
    let mut g_effect = vec![0.0; v.n()];
    let per_k_error: Vec<f64> = m
        .trees
        .iter()
        .map(|tree| {
            let mut err = 0.0;
            for i in 0..v.n() {
                let (m1, m0) = predict_pair(tree, x.row(i));
                g_effect[i] += m.epsilon * (m1 - m0);
                err += (g_effect[i] - h_effect[i]).powi(2);
            }
            err
        })
        .collect();
    let k_star = argmin_first(&per_k_error);
    Ok(BoostCvReport {
        per_k_error,
        k_star,
        per_fold_error: Vec::new(),
    })
}

/// Cross-validated choice of the number of stages plus the model refit on
/// all rows with `K = k_star`.
#[derive(Clone, Debug)]
pub struct BoostCv {
    pub report: BoostCvReport,
    pub model: BoostModel,
}

/// Arm-stratified fold labels: each arm is shuffled and dealt round-robin.
pub fn assign_folds<R: Rng + ?Sized>(d: &Dataset, folds: usize, rng: &mut R) -> Vec<usize> {
    let mut ids = vec![0; d.n()];
    for treated in [true, false] {
        let mut idx = d.arm_indices(treated);
        idx.shuffle(rng);
        for (pos, i) in idx.into_iter().enumerate() {
            ids[i] = pos % folds;
        }
    }
    ids
}

pub fn cross_validate_boost<R: Rng + ?Sized>(
    d: &Dataset,
    sa: &StrataAssignment,
    folds: usize,
    params: &BoostParams,
    rng: &mut R,
) -> Result<BoostCv> {
    if folds < 2 {
        return Err(HteError::InvalidParameter("folds must be >= 2".into()));
    }
    validate_dataset(d)?;
    let (n1, n0) = (d.n_treated(), d.n_control());
    if n1 < folds || n0 < folds {
        return Err(HteError::FoldTooSmall(format!(
            "{folds} folds need at least {folds} units per arm (treated={n1}, control={n0})"
        )));
    }
    let fold_ids = assign_folds(d, folds, rng);
    let base: u64 = rng.random();
    cross_validate_with_folds(d, sa, &fold_ids, params, base)
}

/// Cross-validation with caller-supplied fold labels `0..F`; fold `f`
/// trains with the stream derived from `(base, f)`.
pub fn cross_validate_with_folds(
    d: &Dataset,
    sa: &StrataAssignment,
    fold_ids: &[usize],
    params: &BoostParams,
    base: u64,
) -> Result<BoostCv> {
    if fold_ids.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: fold_ids.len(),
        });
    }
    if sa.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: sa.len(),
        });
    }
    let folds = fold_ids.iter().max().map_or(0, |m| m + 1);
    if folds < 2 {
        return Err(HteError::InvalidParameter("need at least two folds".into()));
    }
    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (valid, train): (Vec<usize>, Vec<usize>) = (0..d.n()).partition(|&i| fold_ids[i] == f);
            if valid.is_empty() {
                return Err(HteError::FoldTooSmall(format!("fold {f} is empty")));
            }
            let dt = d.subset(&train);
            let dv = d.subset(&valid);
            let mut frng = child_stream(base, &[f as u64]);
            let model = fit_causal_boost(&dt, &sa.subset(&train), params, &mut frng)
                .map_err(|e| HteError::FoldTooSmall(format!("fold {f}: {e}")))?;
            let mut errs = validate_boost(&model, &dv, &sa.subset(&valid))
                .map_err(|e| HteError::FoldTooSmall(format!("fold {f}: {e}")))?
                .per_k_error;
            let last = *errs.last().expect("at least one stage");
            errs.resize(params.n_trees, last);
            Ok(errs)
        })
        .collect::<Result<_>>()?;
    let per_k_error: Vec<f64> = (0..params.n_trees)
        .map(|k| per_fold.iter().map(|e| e[k]).sum::<f64>() / folds as f64)
        .collect();
    let k_star = argmin_first(&per_k_error);
    let refit = BoostParams {
        n_trees: k_star,
        ..params.clone()
    };
    let model = fit_causal_boost(d, sa, &refit, &mut child_stream(base, &[folds as u64, u64::MAX]))?;
    Ok(BoostCv {
        report: BoostCvReport {
            per_k_error,
            k_star,
            per_fold_error: per_fold,
        },
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_tree::fit_causal_tree;
    use crate::rng::stream;

    fn fixture(n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed);
        let mut x = Vec::with_capacity(2 * n);
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let ti = (i % 2) as u8;
            x.extend([a, b]);
            t.push(ti);
            y.push(b + f64::from(ti) * (1.0 + a) + 0.5 * rng.random_range(-1.0..1.0));
        }
        Dataset::new(Matrix::new(n, 2, x).unwrap(), t, y).unwrap()
    }

    #[test]
    fn one_unshrunk_stage_is_a_causal_tree() {
        let d = fixture(120, 1);
        let sa = StrataAssignment::uniform(d.n());
        let params = BoostParams {
            n_trees: 1,
            epsilon: 1.0,
            ..BoostParams::default()
        };
        let m = fit_causal_boost(&d, &sa, &params, &mut stream(3)).unwrap();
        let t = fit_causal_tree(&d, &sa, &params.tree, &mut stream(3)).unwrap();
        assert_eq!(m.trees[0], t);
        for r in d.features().rows() {
            assert_eq!(predict_boost(&m, r, 1).unwrap(), predict_pair(&t, r));
        }
    }

    #[test]
    fn zero_shrinkage_predicts_zero() {
        let d = fixture(80, 2);
        let params = BoostParams {
            n_trees: 5,
            epsilon: 0.0,
            ..BoostParams::default()
        };
        let fit = fit_inner(&d, &StrataAssignment::uniform(80), &params, &mut stream(0)).unwrap();
        assert_eq!(fit.residuals, d.response());
        assert!(d.features().rows().all(|r| fit.model.predict_effect(r) == 0.0));
    }

    #[test]
    fn residuals_track_partial_sums() {
        let d = fixture(100, 3);
        let params = BoostParams {
            n_trees: 15,
            epsilon: 0.3,
            ..BoostParams::default()
        };
        let fit = fit_inner(&d, &StrataAssignment::uniform(100), &params, &mut stream(0)).unwrap();
        let k = fit.model.n_trees();
        for i in 0..d.n() {
            let (g1, g0) = predict_boost(&fit.model, d.features().row(i), k).unwrap();
            let g = if d.is_treated(i) { g1 } else { g0 };
            let expected = d.response()[i] - g;
            assert!((fit.residuals[i] - expected).abs() <= 1e-10 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn additivity_and_range() {
        let d = fixture(100, 4);
        let params = BoostParams {
            n_trees: 6,
            epsilon: 0.2,
            ..BoostParams::default()
        };
        let m = fit_causal_boost(&d, &StrataAssignment::uniform(100), &params, &mut stream(0)).unwrap();
        let x = d.features().row(5);
        for k in 2..=m.n_trees() {
            let (a1, a0) = predict_boost(&m, x, k).unwrap();
            let (b1, b0) = predict_boost(&m, x, k - 1).unwrap();
            let (t1, t0) = predict_pair(&m.trees[k - 1], x);
            assert!((a1 - b1 - 0.2 * t1).abs() < 1e-12);
            assert!((a0 - b0 - 0.2 * t0).abs() < 1e-12);
        }
        assert_eq!(predict_boost(&m, x, 0).unwrap_err().kind(), "k-out-of-range");
        assert!(predict_boost(&m, x, m.n_trees() + 1).is_err());
    }

    #[test]
    fn validation_on_training_data_single_stage_is_zero() {
        let d = fixture(100, 5);
        let sa = StrataAssignment::uniform(100);
        let params = BoostParams {
            n_trees: 1,
            epsilon: 1.0,
            ..BoostParams::default()
        };
        let m = fit_causal_boost(&d, &sa, &params, &mut stream(0)).unwrap();
        let rep = validate_boost(&m, &d, &sa).unwrap();
        assert!(rep.per_k_error[0].abs() < 1e-20);
        assert_eq!(rep.k_star, 1);
    }

    #[test]
    fn zero_model_error_is_saturated_effect_energy() {
        let d = fixture(100, 6);
        let v = fixture(60, 7);
        let params = BoostParams {
            n_trees: 3,
            epsilon: 0.0,
            ..BoostParams::default()
        };
        let m = fit_causal_boost(&d, &StrataAssignment::uniform(100), &params, &mut stream(0)).unwrap();
        let rep = validate_boost(&m, &v, &StrataAssignment::uniform(60)).unwrap();
        // With ε = 0 both G_k and H_K vanish.
        assert!(rep.per_k_error.iter().all(|&e| e == 0.0));
        assert!(validate_boost(&m, &v.subset(&[]), &StrataAssignment::uniform(0)).is_err());
    }

    #[test]
    fn folds_are_arm_balanced() {
        let d = fixture(101, 8);
        let ids = assign_folds(&d, 4, &mut stream(0));
        for f in 0..4 {
            let t = (0..d.n()).filter(|&i| ids[i] == f && d.is_treated(i)).count();
            assert!((12..=13).contains(&t));
        }
        let small = d.subset(&[0, 1, 2]);
        let err = cross_validate_boost(&small, &StrataAssignment::uniform(3), 2, &BoostParams::default(), &mut stream(0))
            .unwrap_err();
        assert_eq!(err.kind(), "fold-too-small");
    }
}
