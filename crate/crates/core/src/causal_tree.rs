//! Causal trees split on the T-statistic of the difference between the
//! child effect estimates, optionally computed within propensity strata.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EffectModel, Matrix};
use crate::error::{HteError, Result};
use crate::forests::{midpoint, TreeNode};
use crate::propensity::{stratified_contrast, stratum_stats, Contrast, StrataAssignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalTreeParams {
    pub max_depth: usize,
    pub min_leaf_per_arm: usize,
    /// Features tried per split; `None` means all of them.
    pub mtry: Option<usize>,
    pub min_split_gain: f64,
}

impl Default for CausalTreeParams {
    fn default() -> Self {
        CausalTreeParams {
            max_depth: 3,
            min_leaf_per_arm: 2,
            mtry: None,
            min_split_gain: 0.0,
        }
    }
}

impl CausalTreeParams {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.min_leaf_per_arm < 2 {
            return Err(HteError::InvalidParameter("min_leaf_per_arm must be >= 2".into()));
        }
        if !(self.min_split_gain >= 0.0) {
            return Err(HteError::InvalidParameter("min_split_gain must be >= 0".into()));
        }
        if let Some(m) = self.mtry {
            if m < 1 || m > p {
                return Err(HteError::InvalidParameter(format!("mtry must be in 1..={p}, got {m}")));
            }
        }
        Ok(())
    }
}

/// Propensity-adjusted arm means and effect of one leaf.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafEstimate {
    pub mu1: f64,
    pub mu0: f64,
    pub tau: f64,
    pub var_tau: f64,
    pub n_leaf: usize,
}

impl LeafEstimate {
    pub(crate) fn from_contrast(c: &Contrast, n_leaf: usize) -> Self {
        LeafEstimate {
            mu1: c.mu1,
            mu0: c.mu0,
            tau: c.mu1 - c.mu0,
            var_tau: c.var,
            n_leaf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub root: TreeNode<LeafEstimate>,
    pub params: CausalTreeParams,
}

impl CausalTree {
    pub fn n_leaves(&self) -> usize {
        self.root.n_leaves()
    }
}

/// `(μ̂₁, μ̂₀)` of the leaf `x` routes to.
pub fn predict_pair(t: &CausalTree, x: &[f64]) -> (f64, f64) {
    let leaf = t.root.route(x);
    (leaf.mu1, leaf.mu0)
}

impl EffectModel for CausalTree {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        Some(predict_pair(self, x))
    }
}

/// Stratified leaf estimate over `rows`.
///
/// Strata with both arms present contribute; at least one of them must
/// hold two units per arm so the variance is estimable.
pub fn leaf_estimate(d: &Dataset, rows: &[usize], sa: &StrataAssignment) -> Result<LeafEstimate> {
    if sa.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: sa.len(),
        });
    }
    let stats = stratum_stats(d.response(), d.treatment(), sa, rows.iter().copied());
    let viable = stats.iter().any(|[c, t]| c.n >= 2 && t.n >= 2);
    let contrast = stratified_contrast(&stats, 1).filter(|_| viable);
    contrast
        .map(|c| LeafEstimate::from_contrast(&c, rows.len()))
        .ok_or(HteError::NoViableStratum { min_per_arm: 2 })
}

/// Feature-wise sort orders of every row, computed once per design matrix
/// and shared by all trees grown on it.
pub(crate) struct Presorted {
    pub orders: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: &Matrix) -> Self {
        let orders = (0..x.ncols())
            .into_par_iter()
            .map(|j| {
                let mut o: Vec<u32> = (0..x.nrows() as u32).collect();
                o.sort_unstable_by(|&a, &b| {
                    x.get(a as usize, j)
                        .total_cmp(&x.get(b as usize, j))
                        .then(a.cmp(&b))
                });
                o
            })
            .collect();
        Presorted { orders }
    }
}

/// Running `(count, shifted sum, shifted sum of squares)` for one arm of one
/// stratum during a split sweep.
#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    n: usize,
    s: f64,
    ss: f64,
}

impl Acc {
    #[inline]
    fn add(&mut self, v: f64) {
        self.n += 1;
        self.s += v;
        self.ss += v * v;
    }

    #[inline]
    fn minus(&self, o: &Acc) -> Acc {
        Acc {
            n: self.n - o.n,
            s: self.s - o.s,
            ss: self.ss - o.ss,
        }
    }

    #[inline]
    fn mean(&self) -> f64 {
        self.s / self.n as f64
    }

    #[inline]
    fn var_of_mean(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.ss - self.s * self.s / n) / (n - 1.0)).max(0.0) / n
    }
}

/// `(τ̂, V̂ar)` from per-stratum accumulators, strata with both arms only.
#[inline]
fn tau_and_var(accs: &[[Acc; 2]], other: Option<&[[Acc; 2]]>) -> Option<(f64, f64)> {
    let (mut w, mut a, mut v) = (0usize, 0.0, 0.0);
    for (s, pair) in accs.iter().enumerate() {
        let [c, t] = match other {
            Some(tot) => [tot[s][0].minus(&pair[0]), tot[s][1].minus(&pair[1])],
            None => *pair,
        };
        if c.n == 0 || t.n == 0 {
            continue;
        }
        let ns = (c.n + t.n) as f64;
        w += c.n + t.n;
        a += ns * (t.mean() - c.mean());
        v += ns * ns * (t.var_of_mean() + c.var_of_mean());
    }
    if w == 0 {
        return None;
    }
    let wf = w as f64;
    Some((a / wf, v / (wf * wf)))
}

#[inline]
fn viable(accs: &[[Acc; 2]], other: Option<&[[Acc; 2]]>, min: usize) -> bool {
    accs.iter().enumerate().any(|(s, pair)| match other {
        Some(tot) => tot[s][0].n - pair[0].n >= min && tot[s][1].n - pair[1].n >= min,
        None => pair[0].n >= min && pair[1].n >= min,
    })
}

/// `|τ̂ℓ − τ̂r| / √(V̂arℓ + V̂arr)`, with the zero-variance guard.
#[inline]
pub(crate) fn t_score(tau_l: f64, var_l: f64, tau_r: f64, var_r: f64) -> f64 {
    let diff = (tau_l - tau_r).abs();
    let v = var_l + var_r;
    if v > 0.0 {
        diff / v.sqrt()
    } else if diff > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

pub(crate) struct Grower<'a> {
    pub x: &'a Matrix,
    pub t: &'a [u8],
    pub sa: &'a StrataAssignment,
    pub presort: &'a Presorted,
    pub params: &'a CausalTreeParams,
}

struct Best {
    score: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    /// Grows a tree on `rows` (distinct, ascending) with response `y`.
    pub fn fit<R: Rng + ?Sized>(&self, y: &[f64], rows: Vec<usize>, rng: &mut R) -> Result<CausalTree> {
        let min = self.params.min_leaf_per_arm;
        let mut mask = vec![false; self.x.nrows()];
        let stats = self.accumulate(y, &rows, 0.0);
        if !viable(&stats, None, min) {
            return Err(HteError::RootNotViable { min_per_arm: min });
        }
        let root = self.grow(y, rows, 0, &mut mask, rng);
        Ok(CausalTree {
            root,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, y: &[f64], rows: &[usize], shift: f64) -> Vec<[Acc; 2]> {
        let mut accs = vec![[Acc::default(); 2]; self.sa.n_strata];
        for &i in rows {
            accs[self.sa.index(i)][usize::from(self.t[i])].add(y[i] - shift);
        }
        accs
    }

    fn leaf(&self, y: &[f64], rows: &[usize]) -> TreeNode<LeafEstimate> {
        let stats = stratum_stats(y, self.t, self.sa, rows.iter().copied());
        let c = stratified_contrast(&stats, 1).expect("viable node has a contrast");
        TreeNode::leaf(LeafEstimate::from_contrast(&c, rows.len()))
    }

    fn grow<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        rows: Vec<usize>,
        depth: usize,
        mask: &mut [bool],
        rng: &mut R,
    ) -> TreeNode<LeafEstimate> {
        if depth >= self.params.max_depth {
            return self.leaf(y, &rows);
        }
        for &i in &rows {
            mask[i] = true;
        }
        let best = self.best_split(y, &rows, mask, rng);
        for &i in &rows {
            mask[i] = false;
        }
        let Some(best) = best else {
            return self.leaf(y, &rows);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x.get(i, best.feature) < best.threshold);
        let left = self.grow(y, l, depth + 1, mask, rng);
        let right = self.grow(y, r, depth + 1, mask, rng);
        TreeNode::split(best.feature, best.threshold, left, right)
    }

    fn best_split<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        rows: &[usize],
        mask: &[bool],
        rng: &mut R,
    ) -> Option<Best> {
        let p = self.x.ncols();
        let mtry = self.params.mtry.unwrap_or(p).clamp(1, p);
        let features: Vec<usize> = if mtry >= p {
            (0..p).collect()
        } else {
            let mut f = sample(rng, p, mtry).into_vec();
            f.sort_unstable();
            f
        };
        let min = self.params.min_leaf_per_arm;
        let shift = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
        let total = self.accumulate(y, rows, shift);
        let (n_ctl, n_trt) = total
            .iter()
            .fold((0, 0), |(c, t), a| (c + a[0].n, t + a[1].n));
        let mut best: Option<Best> = None;
        let mut best_score = self.params.min_split_gain;
        let mut left = vec![[Acc::default(); 2]; self.sa.n_strata];
        for &j in &features {
            left.iter_mut().for_each(|a| *a = [Acc::default(); 2]);
            let (mut lc, mut lt) = (0usize, 0usize);
            let mut prev: Option<f64> = None;
            for &i in &self.presort.orders[j] {
                let i = i as usize;
                if !mask[i] {
                    continue;
                }
                let v = self.x.get(i, j);
                if let Some(pv) = prev {
                    if v != pv
                        && lc >= min
                        && lt >= min
                        && n_ctl - lc >= min
                        && n_trt - lt >= min
                        && viable(&left, None, min)
                        && viable(&left, Some(&total), min)
                    {
                        if let (Some((tl, vl)), Some((tr, vr))) =
                            (tau_and_var(&left, None), tau_and_var(&left, Some(&total)))
                        {
                            let score = t_score(tl, vl, tr, vr);
                            if score > best_score {
                                best_score = score;
                                best = Some(Best {
                                    score,
                                    feature: j,
                                    threshold: midpoint(pv, v),
                                });
                            }
                        }
                    }
                }
                let arm = usize::from(self.t[i]);
                left[self.sa.index(i)][arm].add(y[i] - shift);
                if arm == 1 {
                    lt += 1;
                } else {
                    lc += 1;
                }
                prev = Some(v);
            }
        }
        best.filter(|b| b.score > self.params.min_split_gain)
    }
}

/// Fits a causal tree; pass [`StrataAssignment::uniform`] for the
/// unadjusted criterion.
pub fn fit_causal_tree<R: Rng + ?Sized>(
    d: &Dataset,
    sa: &StrataAssignment,
    params: &CausalTreeParams,
    rng: &mut R,
) -> Result<CausalTree> {
    if sa.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: sa.len(),
        });
    }
    params.validate(d.p())?;
    let presort = Presorted::new(d.features());
    Grower {
        x: d.features(),
        t: d.treatment(),
        sa,
        presort: &presort,
        params,
    }
    .fit(d.response(), (0..d.n()).collect(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::assign_strata;
    use crate::rng::stream;

    fn ds(x: Vec<f64>, t: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = t.len();
        let p = x.len() / n;
        Dataset::new(Matrix::new(n, p, x).unwrap(), t, y).unwrap()
    }

    #[test]
    fn leaf_estimate_single_stratum() {
        let d = ds(vec![0.0; 4], vec![1, 1, 0, 0], vec![3.0, 5.0, 1.0, 1.0]);
        let e = leaf_estimate(&d, &[0, 1, 2, 3], &StrataAssignment::uniform(4)).unwrap();
        assert_eq!(e.tau, 3.0);
        assert_eq!(e.var_tau, 1.0);
        assert_eq!((e.mu1, e.mu0), (4.0, 1.0));
    }

    #[test]
    fn leaf_estimate_two_equal_strata() {
        // Stratum 1 effect 2, stratum 2 effect 4.
        let y = vec![3.0, 5.0, 1.0, 3.0, 10.0, 12.0, 6.0, 8.0];
        let t = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let d = ds(vec![0.0; 8], t, y);
        let sa = assign_strata(&[0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9], 2).unwrap();
        let e = leaf_estimate(&d, &(0..8).collect::<Vec<_>>(), &sa).unwrap();
        assert!((e.tau - 3.0).abs() < 1e-14);
        assert_eq!(e.tau, e.mu1 - e.mu0);
    }

    #[test]
    fn leaf_estimate_needs_two_per_arm() {
        let d = ds(vec![0.0; 3], vec![1, 0, 0], vec![1.0, 2.0, 3.0]);
        let err = leaf_estimate(&d, &[0, 1, 2], &StrataAssignment::uniform(3)).unwrap_err();
        assert_eq!(err.kind(), "no-viable-stratum");
    }

    #[test]
    fn score_guard() {
        assert_eq!(t_score(1.0, 0.0, 0.0, 0.0), f64::INFINITY);
        assert_eq!(t_score(1.0, 0.0, 1.0, 0.0), 0.0);
        assert_eq!(t_score(3.0, 2.0, 1.0, 2.0), 1.0);
    }

    #[test]
    fn sign_flip_splits_on_first_feature() {
        let n = 400;
        let mut rng = stream(4);
        let mut x = Vec::new();
        let mut t = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x1: f64 = rng.random_range(-1.0..1.0);
            let x2: f64 = rng.random_range(-1.0..1.0);
            let ti = (i % 2) as u8;
            let tau = if x1 >= 0.0 { 2.0 } else { -2.0 };
            x.extend([x1, x2]);
            t.push(ti);
            y.push(x2 + f64::from(ti) * tau + 0.1 * rng.random_range(-1.0..1.0));
        }
        let d = ds(x, t, y);
        let tree = fit_causal_tree(
            &d,
            &StrataAssignment::uniform(n),
            &CausalTreeParams {
                max_depth: 1,
                ..CausalTreeParams::default()
            },
            &mut stream(0),
        )
        .unwrap();
        let TreeNode::Split { feature, left, right, .. } = &tree.root else {
            panic!("expected a split");
        };
        assert_eq!(*feature, 0);
        let (TreeNode::Leaf { payload: l }, TreeNode::Leaf { payload: r }) = (&**left, &**right) else {
            panic!("expected leaves");
        };
        assert!(l.tau < 0.0 && r.tau > 0.0);
    }

    #[test]
    fn large_gain_threshold_gives_single_leaf() {
        let d = ds(
            (0..8).map(f64::from).collect(),
            vec![1, 0, 1, 0, 1, 0, 1, 0],
            vec![2.0, 1.0, 3.0, 1.0, 2.5, 0.5, 3.5, 1.5],
        );
        let params = CausalTreeParams {
            max_depth: 1,
            min_split_gain: 1e9,
            ..CausalTreeParams::default()
        };
        let tree = fit_causal_tree(&d, &StrataAssignment::uniform(8), &params, &mut stream(0)).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        let (m1, m0) = predict_pair(&tree, &[100.0]);
        assert!((m1 - 2.75).abs() < 1e-14 && (m0 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn root_not_viable() {
        let d = ds(vec![0.0, 1.0, 2.0], vec![1, 0, 0], vec![1.0, 2.0, 3.0]);
        let err = fit_causal_tree(&d, &StrataAssignment::uniform(3), &CausalTreeParams::default(), &mut stream(0))
            .unwrap_err();
        assert_eq!(err.kind(), "root-not-viable");
    }

    #[test]
    fn single_stratum_assignment_matches_uniform() {
        let n = 60;
        let mut rng = stream(9);
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| x[2 * i] * f64::from(t[i]) + rng.random_range(0.0..0.3)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let d = ds(x, t, y);
        let params = CausalTreeParams::default();
        let a = fit_causal_tree(&d, &StrataAssignment::uniform(n), &params, &mut stream(1)).unwrap();
        let b = fit_causal_tree(&d, &assign_strata(&scores, 1).unwrap(), &params, &mut stream(1)).unwrap();
        assert_eq!(a, b);
    }
}
