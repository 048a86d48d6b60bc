//! Causal MARS: a hinge basis shared by both arms, grown by the gain from
//! letting a candidate pair take arm-specific rather than shared
//! coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal_tree::Presorted;
use crate::data::{validate_dataset, Dataset, EffectModel, Matrix};
use crate::error::{HteError, Result};
use crate::propensity::{StrataAssignment, Stratifier};
use crate::rng::child_stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarsParams {
    /// Number of forward steps `D`; each adds one hinge pair.
    pub max_terms: usize,
    pub max_degree: usize,
    /// Knot candidates per feature, quantile-spaced over distinct values.
    pub max_knots: usize,
    /// Nonzero values a new function needs in each arm to get a coefficient.
    pub min_support: usize,
    /// Strata with fewer units than this in either arm are merged into
    /// their nearest sufficiently populated neighbour.
    pub min_stratum_arm: usize,
}

impl Default for MarsParams {
    fn default() -> Self {
        MarsParams {
            max_terms: 11,
            max_degree: 3,
            max_knots: 32,
            min_support: 20,
            min_stratum_arm: 5,
        }
    }
}

impl MarsParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_terms < 1 {
            return Err(HteError::InvalidParameter("max_terms (D) must be >= 1".into()));
        }
        if self.max_degree < 1 {
            return Err(HteError::InvalidParameter("max_degree must be >= 1".into()));
        }
        if self.max_knots < 1 {
            return Err(HteError::InvalidParameter("max_knots must be >= 1".into()));
        }
        Ok(())
    }
}

/// `max(0, sign·(x_feature − knot))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeTerm {
    pub feature: usize,
    pub knot: f64,
    pub sign: i8,
}

impl HingeTerm {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (f64::from(self.sign) * (x[self.feature] - self.knot)).max(0.0)
    }
}

/// Product of hinges; the empty product is the constant 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub terms: Vec<HingeTerm>,
}

impl BasisFunction {
    pub fn constant() -> Self {
        BasisFunction { terms: Vec::new() }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).product()
    }

    pub fn degree(&self) -> usize {
        self.terms.len()
    }

    pub fn uses(&self, feature: usize) -> bool {
        self.terms.iter().any(|t| t.feature == feature)
    }

    fn times(&self, term: HingeTerm) -> Self {
        let mut terms = self.terms.clone();
        terms.push(term);
        BasisFunction { terms }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarsModel {
    pub basis: Vec<BasisFunction>,
    /// Treated-arm coefficients, one row per effective stratum.
    pub coef1: Vec<Vec<f64>>,
    pub coef0: Vec<Vec<f64>>,
    /// Effective stratum of each (1-based) propensity stratum, at index `s-1`.
    pub stratum_map: Vec<usize>,
    /// Training share of each effective stratum.
    pub stratum_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratifier: Option<Stratifier>,
}

impl MarsModel {
    pub fn is_stratified(&self) -> bool {
        self.coef1.len() > 1
    }

    fn means_in(&self, x: &[f64], eff: usize) -> (f64, f64) {
        let (mut m1, mut m0) = (0.0, 0.0);
        for (h, b) in self.basis.iter().enumerate() {
            let v = b.eval(x);
            m1 += self.coef1[eff][h] * v;
            m0 += self.coef0[eff][h] * v;
        }
        (m1, m0)
    }

    fn effective(&self, stratum: usize) -> Result<usize> {
        if stratum < 1 || stratum > self.stratum_map.len() {
            return Err(HteError::InvalidParameter(format!(
                "stratum {stratum} outside 1..={}",
                self.stratum_map.len()
            )));
        }
        Ok(self.stratum_map[stratum - 1])
    }

    /// Means when no stratum is supplied: the attached stratifier's stratum,
    /// or else the training-share-weighted average over strata.
    fn marginal_means(&self, x: &[f64]) -> (f64, f64) {
        if !self.is_stratified() {
            return self.means_in(x, 0);
        }
        if let Some(st) = &self.stratifier {
            if let Ok(e) = self.effective(st.stratum(x)) {
                return self.means_in(x, e);
            }
        }
        let (mut m1, mut m0) = (0.0, 0.0);
        for (e, w) in self.stratum_weights.iter().enumerate() {
            let (a, b) = self.means_in(x, e);
            m1 += w * a;
            m0 += w * b;
        }
        (m1, m0)
    }
}

/// `(μ̂₁, μ̂₀)` at `x`; stratified models need the unit's 1-based stratum.
pub fn predict_mars(m: &MarsModel, x: &[f64], stratum: Option<usize>) -> Result<(f64, f64)> {
    if !m.is_stratified() {
        return Ok(m.means_in(x, 0));
    }
    let s = stratum.ok_or(HteError::MissingStratum)?;
    Ok(m.means_in(x, m.effective(s)?))
}

impl EffectModel for MarsModel {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        Some(self.marginal_means(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaggedMars {
    pub models: Vec<MarsModel>,
}

impl BaggedMars {
    pub fn n_models(&self) -> usize {
        self.models.len()
    }
}

/// Average of the members' means (so also of their effects).
pub fn predict_bagged_mars(m: &BaggedMars, x: &[f64], stratum: Option<usize>) -> Result<(f64, f64)> {
    let mut s = (0.0, 0.0);
    for member in &m.models {
        let (a, b) = predict_mars(member, x, stratum)?;
        s.0 += a;
        s.1 += b;
    }
    let k = m.models.len() as f64;
    Ok((s.0 / k, s.1 / k))
}

impl EffectModel for BaggedMars {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        let (s1, s0) = self.models.iter().fold((0.0, 0.0), |(a, b), m| {
            let (m1, m0) = m.marginal_means(x);
            (a + m1, b + m0)
        });
        let k = self.models.len() as f64;
        Some((s1 / k, s0 / k))
    }
}

/// Row-to-effective-stratum layout of one training set.
struct Layout {
    eff: Vec<usize>,
    n_eff: usize,
    map: Vec<usize>,
    counts: Vec<usize>,
}

fn layout(d: &Dataset, sa: Option<&StrataAssignment>, min_arm: usize) -> Layout {
    let Some(sa) = sa else {
        return Layout {
            eff: vec![0; d.n()],
            n_eff: 1,
            map: vec![0],
            counts: vec![d.n()],
        };
    };
    let s_count = sa.n_strata;
    let mut arm = vec![[0usize; 2]; s_count];
    for i in 0..d.n() {
        arm[sa.index(i)][usize::from(d.treatment()[i])] += 1;
    }
    let valid: Vec<usize> = (0..s_count)
        .filter(|&s| arm[s][0] >= min_arm && arm[s][1] >= min_arm)
        .collect();
    let map: Vec<usize> = if valid.is_empty() {
        vec![0; s_count]
    } else {
        (0..s_count)
            .map(|s| {
                let nearest = valid
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, &v)| v.abs_diff(s))
                    .map(|(k, _)| k)
                    .expect("non-empty");
                nearest
            })
            .collect()
    };
    let n_eff = valid.len().max(1);
    let eff: Vec<usize> = (0..d.n()).map(|i| map[sa.index(i)]).collect();
    let mut counts = vec![0; n_eff];
    for &e in &eff {
        counts[e] += 1;
    }
    Layout {
        eff,
        n_eff,
        map,
        counts,
    }
}

/// One candidate pair `{b·(x_j − c)₊, b·(c − x_j)₊}` with its entry gain.
#[derive(Clone, Debug, PartialEq)]
pub struct MarsCandidate {
    pub parent: usize,
    pub feature: usize,
    pub knot: f64,
    /// Unweighted sum over effective strata of `RSS_μ − RSS_τ`.
    pub drss: f64,
    /// `Σ_s n_s·dRSS_s`, the selection criterion.
    pub criterion: f64,
    pub keep_pos: bool,
    pub keep_neg: bool,
}

/// Weighted sums of one group (effective stratum × arm) over the rows with
/// a nonzero parent: `Σb², Σb²x, Σb²x², ΣRb, ΣRbx` with `x` centered.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    w: f64,
    wx: f64,
    wxx: f64,
    r: f64,
    rx: f64,
    n: usize,
}

impl Moments {
    #[inline]
    fn add(&mut self, b: f64, x: f64, r: f64) {
        let bb = b * b;
        self.w += bb;
        self.wx += bb * x;
        self.wxx += bb * x * x;
        self.r += r * b;
        self.rx += r * b * x;
        self.n += 1;
    }

    #[inline]
    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            w: self.w - o.w,
            wx: self.wx - o.wx,
            wxx: self.wxx - o.wxx,
            r: self.r - o.r,
            rx: self.rx - o.rx,
            n: self.n - o.n,
        }
    }

    /// `(Σ R·b(x−c)₊, Σ (b(x−c)₊)²)` when these are the rows above `c`.
    #[inline]
    fn above(&self, c: f64) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        (
            self.rx - c * self.r,
            (self.wxx - 2.0 * c * self.wx + c * c * self.w).max(0.0),
        )
    }

    /// `(Σ R·b(c−x)₊, Σ (b(c−x)₊)²)` when these are the rows at or below `c`.
    #[inline]
    fn below(&self, c: f64) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        (
            c * self.r - self.rx,
            (c * c * self.w - 2.0 * c * self.wx + self.wxx).max(0.0),
        )
    }
}

#[inline]
fn reduction(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num * num / den
    } else {
        0.0
    }
}

struct Forward<'a> {
    d: &'a Dataset,
    lay: &'a Layout,
    params: &'a MarsParams,
    presort: Presorted,
    knots: Vec<Vec<f64>>,
    centers: Vec<f64>,
    basis: Vec<BasisFunction>,
    cols: Vec<Vec<f64>>,
    coef1: Vec<Vec<f64>>,
    coef0: Vec<Vec<f64>>,
    residual: Vec<f64>,
}

fn knot_grid(values: &[f64], max_knots: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v.dedup();
    v.pop();
    if v.len() <= max_knots {
        return v;
    }
    let m = v.len();
    let mut out: Vec<f64> = (0..max_knots)
        .map(|q| v[((2 * q + 1) * m) / (2 * max_knots)])
        .collect();
    out.dedup();
    out
}

impl<'a> Forward<'a> {
    fn new(d: &'a Dataset, lay: &'a Layout, params: &'a MarsParams) -> Self {
        let x = d.features();
        let knots: Vec<Vec<f64>> = (0..d.p())
            .into_par_iter()
            .map(|j| knot_grid(&x.column(j), params.max_knots))
            .collect();
        let centers: Vec<f64> = (0..d.p())
            .map(|j| x.column(j).iter().sum::<f64>() / d.n() as f64)
            .collect();
        // Arm-specific intercepts per effective stratum.
        let mut sums = vec![[(0.0, 0usize); 2]; lay.n_eff];
        for i in 0..d.n() {
            let cell = &mut sums[lay.eff[i]][usize::from(d.treatment()[i])];
            cell.0 += d.response()[i];
            cell.1 += 1;
        }
        let mean = |c: (f64, usize)| if c.1 > 0 { c.0 / c.1 as f64 } else { 0.0 };
        let coef1: Vec<Vec<f64>> = sums.iter().map(|s| vec![mean(s[1])]).collect();
        let coef0: Vec<Vec<f64>> = sums.iter().map(|s| vec![mean(s[0])]).collect();
        let residual = (0..d.n())
            .map(|i| {
                let e = lay.eff[i];
                d.response()[i] - if d.is_treated(i) { coef1[e][0] } else { coef0[e][0] }
            })
            .collect();
        Forward {
            d,
            lay,
            params,
            presort: Presorted::new(x),
            knots,
            centers,
            basis: vec![BasisFunction::constant()],
            cols: vec![vec![1.0; d.n()]],
            coef1,
            coef0,
            residual,
        }
    }

    /// Scores every knot of `feature` against `parent`, in ascending knot order.
    fn scan(&self, parent: usize, feature: usize, sink: &mut impl FnMut(MarsCandidate)) {
        let d = self.d;
        let groups = 2 * self.lay.n_eff;
        let bcol = &self.cols[parent];
        let center = self.centers[feature];
        let x = d.features();
        let group = |i: usize| 2 * self.lay.eff[i] + usize::from(d.treatment()[i]);
        let mut tot = vec![Moments::default(); groups];
        for i in 0..d.n() {
            if bcol[i] != 0.0 {
                tot[group(i)].add(bcol[i], x.get(i, feature) - center, self.residual[i]);
            }
        }
        if tot.iter().all(|m| m.n == 0) {
            return;
        }
        let order = &self.presort.orders[feature];
        let mut le = vec![Moments::default(); groups];
        let mut lt_n = vec![0usize; groups];
        let mut ptr = 0;
        let weights: Vec<f64> = self.lay.counts.iter().map(|&c| c as f64).collect();
        let min_sup = self.params.min_support;
        for &c in &self.knots[feature] {
            while ptr < order.len() && x.get(order[ptr] as usize, feature) < c {
                let i = order[ptr] as usize;
                if bcol[i] != 0.0 {
                    le[group(i)].add(bcol[i], x.get(i, feature) - center, self.residual[i]);
                }
                ptr += 1;
            }
            for (g, m) in le.iter().enumerate() {
                lt_n[g] = m.n;
            }
            while ptr < order.len() && x.get(order[ptr] as usize, feature) == c {
                let i = order[ptr] as usize;
                if bcol[i] != 0.0 {
                    le[group(i)].add(bcol[i], x.get(i, feature) - center, self.residual[i]);
                }
                ptr += 1;
            }
            let cc = c - center;
            let mut sup_pos = [0usize; 2];
            let mut sup_neg = [0usize; 2];
            for g in 0..groups {
                sup_pos[g % 2] += tot[g].n - le[g].n;
                sup_neg[g % 2] += lt_n[g];
            }
            let keep_pos = sup_pos[0] >= min_sup && sup_pos[1] >= min_sup;
            let keep_neg = sup_neg[0] >= min_sup && sup_neg[1] >= min_sup;
            if !keep_pos && !keep_neg {
                continue;
            }
            let (mut drss, mut criterion) = (0.0, 0.0);
            for s in 0..self.lay.n_eff {
                let mut arm_red = 0.0;
                let (mut fp, mut fd, mut gp, mut gd) = (0.0, 0.0, 0.0, 0.0);
                for t in 0..2 {
                    let g = 2 * s + t;
                    let (pn, pd) = tot[g].minus(&le[g]).above(cc);
                    let (nn, nd) = if lt_n[g] > 0 { le[g].below(cc) } else { (0.0, 0.0) };
                    if keep_pos {
                        arm_red += reduction(pn, pd);
                        fp += pn;
                        fd += pd;
                    }
                    if keep_neg {
                        arm_red += reduction(nn, nd);
                        gp += nn;
                        gd += nd;
                    }
                }
                let shared = reduction(fp, fd) + reduction(gp, gd);
                let ds = arm_red - shared;
                drss += ds;
                criterion += weights[s] * ds;
            }
            sink(MarsCandidate {
                parent,
                feature,
                knot: c,
                drss,
                criterion,
                keep_pos,
                keep_neg,
            });
        }
    }

    fn eligible(&self, parent: usize, feature: usize) -> bool {
        let b = &self.basis[parent];
        b.degree() < self.params.max_degree && !b.uses(feature)
    }

    fn all_candidates(&self) -> Vec<MarsCandidate> {
        let mut out = Vec::new();
        for parent in 0..self.basis.len() {
            for feature in 0..self.d.p() {
                if self.eligible(parent, feature) {
                    self.scan(parent, feature, &mut |c| out.push(c));
                }
            }
        }
        out
    }

    fn best_candidate(&self) -> Option<MarsCandidate> {
        let p = self.d.p();
        let per: Vec<Option<MarsCandidate>> = (0..self.basis.len() * p)
            .into_par_iter()
            .map(|k| {
                let (parent, feature) = (k / p, k % p);
                if !self.eligible(parent, feature) {
                    return None;
                }
                let mut best: Option<MarsCandidate> = None;
                self.scan(parent, feature, &mut |c| {
                    if best.as_ref().is_none_or(|b| c.criterion > b.criterion) {
                        best = Some(c);
                    }
                });
                best
            })
            .collect();
        per.into_iter().flatten().fold(None, |best, c| match best {
            Some(b) if c.criterion <= b.criterion => Some(b),
            _ => Some(c),
        })
    }

    /// Adds the pair, fit with arm- and stratum-specific coefficients
    /// against the current residuals.
    fn add(&mut self, c: &MarsCandidate) {
        let x = self.d.features();
        let parent = self.basis[c.parent].clone();
        for (sign, keep) in [(1i8, c.keep_pos), (-1i8, c.keep_neg)] {
            let term = HingeTerm {
                feature: c.feature,
                knot: c.knot,
                sign,
            };
            let col: Vec<f64> = (0..self.d.n())
                .map(|i| self.cols[c.parent][i] * term.eval(x.row(i)))
                .collect();
            let mut num = vec![[0.0f64; 2]; self.lay.n_eff];
            let mut den = vec![[0.0f64; 2]; self.lay.n_eff];
            for i in 0..self.d.n() {
                let (e, t) = (self.lay.eff[i], usize::from(self.d.treatment()[i]));
                num[e][t] += self.residual[i] * col[i];
                den[e][t] += col[i] * col[i];
            }
            let beta = |e: usize, t: usize| {
                if keep && den[e][t] > 0.0 {
                    num[e][t] / den[e][t]
                } else {
                    0.0
                }
            };
            for e in 0..self.lay.n_eff {
                self.coef1[e].push(beta(e, 1));
                self.coef0[e].push(beta(e, 0));
            }
            for i in 0..self.d.n() {
                let (e, t) = (self.lay.eff[i], usize::from(self.d.treatment()[i]));
                self.residual[i] -= beta(e, t) * col[i];
            }
            self.basis.push(parent.times(term));
            self.cols.push(col);
        }
    }

    fn run(&mut self, steps: usize) {
        for _ in 0..steps {
            match self.best_candidate() {
                Some(c) => self.add(&c),
                None => break,
            }
        }
    }
}

fn check_inputs(d: &Dataset, sa: Option<&StrataAssignment>, params: &MarsParams) -> Result<()> {
    validate_dataset(d)?;
    params.validate()?;
    if let Some(sa) = sa {
        if sa.len() != d.n() {
            return Err(HteError::LengthMismatch {
                left: d.n(),
                right: sa.len(),
            });
        }
    }
    Ok(())
}

/// Every candidate pair after `steps_taken` forward steps, in scan order.
pub fn forward_candidates(
    d: &Dataset,
    sa: Option<&StrataAssignment>,
    params: &MarsParams,
    steps_taken: usize,
) -> Result<Vec<MarsCandidate>> {
    check_inputs(d, sa, params)?;
    let lay = layout(d, sa, params.min_stratum_arm);
    let mut f = Forward::new(d, &lay, params);
    f.run(steps_taken);
    Ok(f.all_candidates())
}

fn model_from(
    basis: Vec<BasisFunction>,
    coef1: Vec<Vec<f64>>,
    coef0: Vec<Vec<f64>>,
    lay: &Layout,
) -> MarsModel {
    let n: usize = lay.counts.iter().sum();
    MarsModel {
        basis,
        coef1,
        coef0,
        stratum_map: lay.map.clone(),
        stratum_weights: lay.counts.iter().map(|&c| c as f64 / n as f64).collect(),
        stratifier: None,
    }
}

fn forward_model(d: &Dataset, sa: Option<&StrataAssignment>, params: &MarsParams) -> MarsModel {
    let lay = layout(d, sa, params.min_stratum_arm);
    let mut f = Forward::new(d, &lay, params);
    f.run(params.max_terms);
    model_from(f.basis, f.coef1, f.coef0, &lay)
}

/// Per effective stratum and arm: Gram matrix, cross-products and `Σy²`
/// of a fixed set of basis columns.
struct Moments2 {
    gram: Vec<[DMatrix<f64>; 2]>,
    xty: Vec<[DVector<f64>; 2]>,
    yy: Vec<[f64; 2]>,
}

fn cross_moments(cols: &[Vec<f64>], rows: &[usize], eff: &[usize], t: &[u8], y: &[f64], n_eff: usize) -> Moments2 {
    let m = cols.len();
    let mut gram = vec![[DMatrix::zeros(m, m), DMatrix::zeros(m, m)]; n_eff];
    let mut xty = vec![[DVector::zeros(m), DVector::zeros(m)]; n_eff];
    let mut yy = vec![[0.0; 2]; n_eff];
    let mut v = vec![0.0; m];
    for &i in rows {
        let (e, a) = (eff[i], usize::from(t[i]));
        for (h, c) in cols.iter().enumerate() {
            v[h] = c[i];
        }
        let g = &mut gram[e][a];
        for h in 0..m {
            if v[h] == 0.0 {
                continue;
            }
            for k in h..m {
                g[(h, k)] += v[h] * v[k];
            }
            xty[e][a][h] += v[h] * y[i];
        }
        yy[e][a] += y[i] * y[i];
    }
    for e in 0..n_eff {
        for a in 0..2 {
            let g = &mut gram[e][a];
            for h in 0..m {
                for k in 0..h {
                    g[(h, k)] = g[(k, h)];
                }
            }
        }
    }
    Moments2 { gram, xty, yy }
}

/// Ridge least squares with `λ = 1e-8·trace/m`; returns `(β, RSS)`.
fn ridge_solve(g: &DMatrix<f64>, b: &DVector<f64>, yy: f64) -> (DVector<f64>, f64) {
    let m = g.nrows();
    let trace = g.trace();
    if m == 0 || !(trace > 0.0) {
        return (DVector::zeros(m), yy);
    }
    let mut lambda = 1e-8 * trace / m as f64;
    loop {
        let mut a = g.clone();
        for k in 0..m {
            a[(k, k)] += lambda;
        }
        if let Some(ch) = a.cholesky() {
            let beta = ch.solve(b);
            let rss = yy - 2.0 * beta.dot(b) + beta.dot(&(g * &beta));
            return (beta, rss.max(0.0));
        }
        lambda *= 10.0;
    }
}

fn sub(g: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| g[(idx[a], idx[b])])
}

fn subv(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |a, _| v[idx[a]])
}

/// Arm- and stratum-specific least squares on the basis subset `set`;
/// coefficient rows are laid out over the full basis (zeros off `set`).
fn joint_fit(mo: &Moments2, set: &[usize], m: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_eff = mo.gram.len();
    let mut c1 = vec![vec![0.0; m]; n_eff];
    let mut c0 = vec![vec![0.0; m]; n_eff];
    for e in 0..n_eff {
        for (a, out) in [(1usize, &mut c1), (0usize, &mut c0)] {
            let (beta, _) = ridge_solve(&sub(&mo.gram[e][a], set), &subv(&mo.xty[e][a], set), mo.yy[e][a]);
            for (k, &h) in set.iter().enumerate() {
                out[e][h] = beta[k];
            }
        }
    }
    (c1, c0)
}

/// `Σ_s n_s·(RSS with term h shared across arms − RSS all arm-specific)`.
fn deletion_score(mo: &Moments2, set: &[usize], h: usize, weights: &[usize]) -> f64 {
    let rest: Vec<usize> = set.iter().copied().filter(|&k| k != h).collect();
    let r = rest.len();
    let mut total = 0.0;
    for e in 0..mo.gram.len() {
        let (g1, g0) = (&mo.gram[e][1], &mo.gram[e][0]);
        let (b1, b0) = (&mo.xty[e][1], &mo.xty[e][0]);
        let free = ridge_solve(&sub(g1, set), &subv(b1, set), mo.yy[e][1]).1
            + ridge_solve(&sub(g0, set), &subv(b0, set), mo.yy[e][0]).1;
        let dim = 2 * r + 1;
        let mut g = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for (a, &ka) in rest.iter().enumerate() {
            for (c, &kc) in rest.iter().enumerate() {
                g[(a, c)] = g1[(ka, kc)];
                g[(r + a, r + c)] = g0[(ka, kc)];
            }
            g[(a, 2 * r)] = g1[(ka, h)];
            g[(2 * r, a)] = g1[(h, ka)];
            g[(r + a, 2 * r)] = g0[(ka, h)];
            g[(2 * r, r + a)] = g0[(h, ka)];
            b[a] = b1[ka];
            b[r + a] = b0[ka];
        }
        g[(2 * r, 2 * r)] = g1[(h, h)] + g0[(h, h)];
        b[2 * r] = b1[h] + b0[h];
        let shared = ridge_solve(&g, &b, mo.yy[e][0] + mo.yy[e][1]).1;
        total += weights[e] as f64 * (shared - free);
    }
    total
}

/// Nested basis subsets from the full forward basis down to `{1}`,
/// deleting at each step the term whose sharing costs least.
fn backward_sequence(mo: &Moments2, m: usize, weights: &[usize]) -> Vec<Vec<usize>> {
    let mut set: Vec<usize> = (0..m).collect();
    let mut seq = vec![set.clone()];
    while set.len() > 1 {
        let scores: Vec<(usize, f64)> = set[1..]
            .par_iter()
            .map(|&h| (h, deletion_score(mo, &set, h, weights)))
            .collect();
        let (drop, _) = scores
            .into_iter()
            .fold(None::<(usize, f64)>, |best, (h, s)| match best {
                Some((_, bs)) if s >= bs => best,
                _ => Some((h, s)),
            })
            .expect("non-constant term present");
        set.retain(|&k| k != drop);
        seq.push(set.clone());
    }
    seq
}

fn eval_cols(basis: &[BasisFunction], x: &Matrix) -> Vec<Vec<f64>> {
    basis
        .iter()
        .map(|b| x.rows().map(|r| b.eval(r)).collect())
        .collect()
}

/// Picks the deletion step whose out-of-bag effects are closest to those
/// of the full basis refit on the out-of-bag rows; ties go to the smaller
/// model. Returns an index into `seq`.
fn select_size(
    seq: &[Vec<usize>],
    inbag: &Moments2,
    oob: &Moments2,
    oob_cols: &[Vec<f64>],
    oob_rows: &[usize],
    oob_eff: &[usize],
) -> usize {
    let m = oob_cols.len();
    let full: Vec<usize> = (0..m).collect();
    let (h1, h0) = joint_fit(oob, &full, m);
    let effect = |c1: &[Vec<f64>], c0: &[Vec<f64>], i: usize| {
        let e = oob_eff[i];
        (0..m).map(|h| (c1[e][h] - c0[e][h]) * oob_cols[h][i]).sum::<f64>()
    };
    let target: Vec<f64> = oob_rows.iter().map(|&i| effect(&h1, &h0, i)).collect();
    let errors: Vec<f64> = seq
        .par_iter()
        .map(|set| {
            let (c1, c0) = joint_fit(inbag, set, m);
            oob_rows
                .iter()
                .zip(&target)
                .map(|(&i, t)| (effect(&c1, &c0, i) - t).powi(2))
                .sum()
        })
        .collect();
    let mut best = seq.len() - 1;
    for k in (0..seq.len()).rev() {
        if errors[k] < errors[best] {
            best = k;
        }
    }
    best
}

/// Bootstrap row indices of size `n`.
pub fn bootstrap_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn has_both_arms(d: &Dataset, idx: &[usize]) -> bool {
    let t = idx.iter().filter(|&&i| d.is_treated(i)).count();
    t > 0 && t < idx.len()
}

/// Fits causal MARS.
///
/// With `prune`, the forward pass runs on a bootstrap resample, terms are
/// deleted one at a time by the same criterion, the model size is picked on
/// the out-of-bag rows and the chosen basis is refit on all rows. Without
/// it, the forward-pass model fit on `d` itself is returned.
pub fn fit_causal_mars<R: Rng + ?Sized>(
    d: &Dataset,
    sa: Option<&StrataAssignment>,
    params: &MarsParams,
    prune: bool,
    rng: &mut R,
) -> Result<MarsModel> {
    check_inputs(d, sa, params)?;
    if !prune {
        return Ok(forward_model(d, sa, params));
    }
    let n = d.n();
    let mut idx = bootstrap_indices(n, rng);
    let mut tries = 1;
    while !has_both_arms(d, &idx) {
        if tries >= 100 {
            return Err(HteError::DegenerateArm {
                treated: d.n_treated(),
                control: d.n_control(),
            });
        }
        idx = bootstrap_indices(n, rng);
        tries += 1;
    }
    let boot = d.subset(&idx);
    let boot_sa = sa.map(|s| s.subset(&idx));
    let lay = layout(&boot, boot_sa.as_ref(), params.min_stratum_arm);
    let mut fwd = Forward::new(&boot, &lay, params);
    fwd.run(params.max_terms);
    let basis = fwd.basis;
    let m = basis.len();
    let rows: Vec<usize> = (0..boot.n()).collect();
    let inbag = cross_moments(&fwd.cols, &rows, &lay.eff, boot.treatment(), boot.response(), lay.n_eff);
    let seq = backward_sequence(&inbag, m, &lay.counts);

    let mut in_bag = vec![false; n];
    for &i in &idx {
        in_bag[i] = true;
    }
    let oob_rows: Vec<usize> = (0..n).filter(|&i| !in_bag[i]).collect();
    let chosen = if oob_rows.is_empty() {
        0
    } else {
        let oob_cols = eval_cols(&basis, d.features());
        let oob_eff: Vec<usize> = match sa {
            Some(s) => (0..n).map(|i| lay.map[s.index(i)]).collect(),
            None => vec![0; n],
        };
        let oob = cross_moments(&oob_cols, &oob_rows, &oob_eff, d.treatment(), d.response(), lay.n_eff);
        select_size(&seq, &inbag, &oob, &oob_cols, &oob_rows, &oob_eff)
    };

    let kept: Vec<BasisFunction> = seq[chosen].iter().map(|&h| basis[h].clone()).collect();
    let full_lay = layout(d, sa, params.min_stratum_arm);
    let cols = eval_cols(&kept, d.features());
    let all: Vec<usize> = (0..n).collect();
    let mo = cross_moments(&cols, &all, &full_lay.eff, d.treatment(), d.response(), full_lay.n_eff);
    let set: Vec<usize> = (0..kept.len()).collect();
    let (c1, c0) = joint_fit(&mo, &set, kept.len());
    Ok(model_from(kept, c1, c0, &full_lay))
}

/// `B` forward-only fits on bootstrap resamples; member `b` draws its
/// resample from the stream derived from one seed taken from `rng` and `b`.
pub fn fit_bagged_causal_mars<R: Rng + ?Sized>(
    d: &Dataset,
    sa: Option<&StrataAssignment>,
    params: &MarsParams,
    n_models: usize,
    rng: &mut R,
) -> Result<BaggedMars> {
    if n_models < 1 {
        return Err(HteError::InvalidParameter("number of bagged models must be >= 1".into()));
    }
    check_inputs(d, sa, params)?;
    let base: u64 = rng.random();
    let models = (0..n_models)
        .into_par_iter()
        .map(|b| {
            let mut brng = child_stream(base, &[b as u64]);
            let mut idx = bootstrap_indices(d.n(), &mut brng);
            while !has_both_arms(d, &idx) {
                idx = bootstrap_indices(d.n(), &mut brng);
            }
            let boot = d.subset(&idx);
            let boot_sa = sa.map(|s| s.subset(&idx));
            forward_model(&boot, boot_sa.as_ref(), params)
        })
        .collect();
    Ok(BaggedMars { models })
}
