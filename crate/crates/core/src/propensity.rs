//! Propensity estimation and stratification, the transformed outcome, and
//! population ATE estimators (conditional-mean, transformed-outcome,
//! inverse-probability-weighted, stratified).

use std::io::Write;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean, require_both_arms, sample_variance, Dataset};
use crate::error::{HteError, Result};
use crate::forests::{fit_probability_forest, ForestParams, RegressionForest, DEFAULT_CLIP};
use crate::rng::child_stream;

/// Propensity scores and their equal-width strata.
///
/// Stratum labels are 1-based: unit `i` is in stratum `s` iff
/// `boundaries[s-1] <= scores[i] < boundaries[s]`, the last interval closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataAssignment {
    pub scores: Vec<f64>,
    pub strata: Vec<usize>,
    pub n_strata: usize,
    pub boundaries: Vec<f64>,
}

impl StrataAssignment {
    /// Single stratum holding every unit; the unadjusted case.
    pub fn uniform(n: usize) -> Self {
        StrataAssignment {
            scores: vec![0.5; n],
            strata: vec![1; n],
            n_strata: 1,
            boundaries: vec![0.0, 1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        StrataAssignment {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            strata: idx.iter().map(|&i| self.strata[i]).collect(),
            n_strata: self.n_strata,
            boundaries: self.boundaries.clone(),
        }
    }

    /// Zero-based stratum of unit `i`.
    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        self.strata[i] - 1
    }

    pub fn stratum_of(&self, score: f64) -> usize {
        stratum_for(&self.boundaries, score)
    }
}

fn stratum_for(boundaries: &[f64], score: f64) -> usize {
    let s = boundaries.len() - 1;
    // Last interval is closed; everything at or beyond its lower edge lands there.
    match boundaries[1..s].iter().position(|&b| score < b) {
        Some(k) => k + 1,
        None => s,
    }
}

/// Equal-width strata of `[0, 1]`: boundaries `0, 1/S, ..., 1`.
pub fn assign_strata(scores: &[f64], n_strata: usize) -> Result<StrataAssignment> {
    if n_strata < 1 {
        return Err(HteError::InvalidParameter("number of strata must be >= 1".into()));
    }
    let boundaries: Vec<f64> = (0..=n_strata)
        .map(|k| k as f64 / n_strata as f64)
        .collect();
    let strata = scores.iter().map(|&s| stratum_for(&boundaries, s)).collect();
    Ok(StrataAssignment {
        scores: scores.to_vec(),
        strata,
        n_strata,
        boundaries,
    })
}

/// A fitted propensity forest plus the strata definition, for scoring
/// units that were not part of the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratifier {
    pub forest: RegressionForest,
    pub n_strata: usize,
}

impl Stratifier {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.forest.predict(x)
    }

    /// 1-based stratum of a new unit.
    pub fn stratum(&self, x: &[f64]) -> usize {
        let boundaries: Vec<f64> = (0..=self.n_strata)
            .map(|k| k as f64 / self.n_strata as f64)
            .collect();
        stratum_for(&boundaries, self.score(x))
    }
}

/// Out-of-bag propensity scores and the forest that produced them.
#[derive(Clone, Debug)]
pub struct PropensityFit {
    pub scores: Vec<f64>,
    pub forest: RegressionForest,
}

pub fn fit_propensity<R: Rng + ?Sized>(
    d: &Dataset,
    params: &ForestParams,
    clip: f64,
    rng: &mut R,
) -> Result<PropensityFit> {
    require_both_arms(d)?;
    let forest = fit_probability_forest(d.features(), d.treatment(), params, clip, rng)?;
    let scores = forest.predict_oob(d.features())?;
    Ok(PropensityFit { scores, forest })
}

/// Out-of-bag probability-forest estimate of P(T=1 | X) for every unit,
/// clipped to `[0.025, 0.975]`.
pub fn estimate_propensity<R: Rng + ?Sized>(
    d: &Dataset,
    params: &ForestParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(fit_propensity(d, params, DEFAULT_CLIP, rng)?.scores)
}

fn check_scores(d: &Dataset, scores: &[f64]) -> Result<()> {
    if scores.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: scores.len(),
        });
    }
    if let Some(index) = scores.iter().position(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(HteError::ScoreOutOfRange {
            index,
            value: scores[index],
        });
    }
    Ok(())
}

/// `Z = T·Y/π̂ − (1−T)·Y/(1−π̂)`; its conditional mean is τ(x).
pub fn transformed_outcome(d: &Dataset, scores: &[f64]) -> Result<Vec<f64>> {
    check_scores(d, scores)?;
    Ok((0..d.n())
        .map(|i| {
            let y = d.response()[i];
            if d.is_treated(i) {
                y / scores[i]
            } else {
                -y / (1.0 - scores[i])
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AteMethod {
    Cm,
    To,
    Ipw,
    Strat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub estimate: f64,
    pub variance_estimate: Option<f64>,
    pub method: AteMethod,
}

fn split_arms(d: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let (mut y1, mut y0) = (Vec::new(), Vec::new());
    for (i, &y) in d.response().iter().enumerate() {
        if d.is_treated(i) {
            y1.push(y);
        } else {
            y0.push(y);
        }
    }
    (y1, y0)
}

/// Difference of arm means, `Ȳ₁ − Ȳ₀`, with variance `s₁²/N₁ + s₀²/N₀`.
pub fn ate_cm(d: &Dataset) -> Result<AteReport> {
    require_both_arms(d)?;
    let (y1, y0) = split_arms(d);
    let variance_estimate = match (sample_variance(&y1), sample_variance(&y0)) {
        (Some(v1), Some(v0)) => Some(v1 / y1.len() as f64 + v0 / y0.len() as f64),
        _ => None,
    };
    Ok(AteReport {
        estimate: mean(&y1) - mean(&y0),
        variance_estimate,
        method: AteMethod::Cm,
    })
}

/// Mean of the transformed outcome, with variance `var(Z)/n`.
pub fn ate_to(d: &Dataset, scores: &[f64]) -> Result<AteReport> {
    let z = transformed_outcome(d, scores)?;
    Ok(AteReport {
        estimate: mean(&z),
        variance_estimate: sample_variance(&z).map(|v| v / z.len() as f64),
        method: AteMethod::To,
    })
}

/// Self-normalized (Hájek) inverse-probability-weighted difference.
pub fn ate_ipw(d: &Dataset, scores: &[f64]) -> Result<AteReport> {
    check_scores(d, scores)?;
    require_both_arms(d)?;
    let (mut num1, mut den1, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in d.response().iter().enumerate() {
        if d.is_treated(i) {
            let w = 1.0 / scores[i];
            num1 += w * y;
            den1 += w;
        } else {
            let w = 1.0 / (1.0 - scores[i]);
            num0 += w * y;
            den0 += w;
        }
    }
    Ok(AteReport {
        estimate: num1 / den1 - num0 / den0,
        variance_estimate: None,
        method: AteMethod::Ipw,
    })
}

/// Welford accumulator for one arm of one stratum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct ArmStats {
    pub n: usize,
    pub mean: f64,
    m2: f64,
}

impl ArmStats {
    #[inline]
    pub fn push(&mut self, y: f64) {
        self.n += 1;
        let delta = y - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (y - self.mean);
    }

    /// Sample variance; zero for a single observation.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }
}

/// Stratified within-group contrast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Contrast {
    pub tau: f64,
    pub var: f64,
    pub mu1: f64,
    pub mu0: f64,
    /// Σₛ nₛ over the contributing strata.
    pub weight: usize,
    /// Whether every contributing arm had ≥ 2 units (variance fully defined).
    pub var_defined: bool,
}

/// Accumulates `[control, treated]` stats per stratum for `rows`.
pub(crate) fn stratum_stats(
    response: &[f64],
    treatment: &[u8],
    sa: &StrataAssignment,
    rows: impl IntoIterator<Item = usize>,
) -> Vec<[ArmStats; 2]> {
    let mut stats = vec![[ArmStats::default(); 2]; sa.n_strata];
    for i in rows {
        stats[sa.index(i)][usize::from(treatment[i])].push(response[i]);
    }
    stats
}

/// `τ̂ = Σ nₛ(Ȳ₁ₛ − Ȳ₀ₛ)/Σ nₛ`, `V̂ar = Σ nₛ² σ̂ₛ²/(Σ nₛ)²` with
/// `σ̂ₛ² = s²₁ₛ/n₁ₛ + s²₀ₛ/n₀ₛ`, and arm means `Σ nₛȲₜₛ/Σ nₛ`. Only strata
/// with at least `min_per_arm` units in both arms contribute.
pub(crate) fn stratified_contrast(stats: &[[ArmStats; 2]], min_per_arm: usize) -> Option<Contrast> {
    let min = min_per_arm.max(1);
    let (mut w, mut a, mut v, mut m1, mut m0) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut var_defined = true;
    for [c, t] in stats {
        if t.n < min || c.n < min {
            continue;
        }
        let ns = t.n + c.n;
        let nsf = ns as f64;
        w += ns;
        a += nsf * (t.mean - c.mean);
        m1 += nsf * t.mean;
        m0 += nsf * c.mean;
        v += nsf * nsf * (t.variance() / t.n as f64 + c.variance() / c.n as f64);
        var_defined &= t.n >= 2 && c.n >= 2;
    }
    if w == 0 {
        return None;
    }
    let wf = w as f64;
    Some(Contrast {
        tau: a / wf,
        var: v / (wf * wf),
        mu1: m1 / wf,
        mu0: m0 / wf,
        weight: w,
        var_defined,
    })
}

/// Propensity-stratified ATE; strata missing an arm are excluded.
pub fn ate_stratified(d: &Dataset, sa: &StrataAssignment) -> Result<AteReport> {
    if sa.len() != d.n() {
        return Err(HteError::LengthMismatch {
            left: d.n(),
            right: sa.len(),
        });
    }
    let stats = stratum_stats(d.response(), d.treatment(), sa, 0..d.n());
    let c = stratified_contrast(&stats, 1).ok_or(HteError::NoValidStratum)?;
    Ok(AteReport {
        estimate: c.tau,
        variance_estimate: c.var_defined.then_some(c.var),
        method: AteMethod::Strat,
    })
}

/// One cell of the transformed-outcome vs conditional-mean variance study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    pub ratio: f64,
    pub var_to: f64,
    pub var_cm: f64,
    pub reps: usize,
    /// Monte Carlo standard errors of the two variance estimates.
    pub se_var_to: f64,
    pub se_var_cm: f64,
}

/// Draws `(τ̂_TO, τ̂_CM)` for one randomized trial of size `n` with
/// π = 1/2, main effect `ratio·σ` in both arms and zero effect.
/// `N₁ ~ Binomial(n, 1/2)` truncated to `1..n-1` unless `fixed_n1` is set.
pub fn draw_ate_pair<R: Rng + ?Sized>(
    n: usize,
    ratio: f64,
    sigma: f64,
    fixed_n1: Option<usize>,
    rng: &mut R,
) -> (f64, f64) {
    let n1 = fixed_n1.unwrap_or_else(|| {
        let b = Binomial::new(n as u64, 0.5).expect("valid binomial");
        loop {
            let k = b.sample(rng) as usize;
            if k > 0 && k < n {
                break k;
            }
        }
    });
    let n0 = n - n1;
    let mu = ratio * sigma;
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let ybar1 = mu + sigma / (n1 as f64).sqrt() * z.sample(rng);
    let ybar0 = mu + sigma / (n0 as f64).sqrt() * z.sample(rng);
    let half = n as f64 / 2.0;
    let to = n1 as f64 / half * ybar1 - n0 as f64 / half * ybar0;
    (to, ybar1 - ybar0)
}

fn variance_and_se(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let k = v.len() as f64;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / k;
    let var = m2 * k / (k - 1.0);
    (var, ((m4 - m2 * m2) / k).max(0.0).sqrt())
}

/// Monte Carlo marginal variances of `τ̂_TO` and `τ̂_CM` over a grid of
/// sample sizes and main-effect-to-noise ratios `|μ₁+μ₀|/(2σ)`.
pub fn ate_variance_study(
    n_values: &[usize],
    ratio_grid: &[f64],
    sigma: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if reps < 1000 {
        return Err(HteError::InvalidParameter(format!("reps must be >= 1000, got {reps}")));
    }
    if let Some(&n) = n_values.iter().find(|&&n| n < 2) {
        return Err(HteError::InvalidParameter(format!("n must be >= 2, got {n}")));
    }
    if !(sigma > 0.0) {
        return Err(HteError::InvalidParameter("sigma must be positive".into()));
    }
    let cells: Vec<(usize, usize)> = n_values
        .iter()
        .flat_map(|&n| (0..ratio_grid.len()).map(move |r| (n, r)))
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(n, r)| {
            let mut rng = child_stream(seed, &[n as u64, r as u64]);
            let (to, cm): (Vec<f64>, Vec<f64>) = (0..reps)
                .map(|_| draw_ate_pair(n, ratio_grid[r], sigma, None, &mut rng))
                .unzip();
            let (var_to, se_var_to) = variance_and_se(&to);
            let (var_cm, se_var_cm) = variance_and_se(&cm);
            VarianceRow {
                n,
                ratio: ratio_grid[r],
                var_to,
                var_cm,
                reps,
                se_var_to,
                se_var_cm,
            }
        })
        .collect())
}

/// Writes the study as CSV with columns `n,ratio,var_to,var_cm,reps`.
pub fn write_variance_csv<W: Write>(rows: &[VarianceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| HteError::Io(std::io::Error::other(e));
    w.write_record(["n", "ratio", "var_to", "var_cm", "reps"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.ratio.to_string(),
            r.var_to.to_string(),
            r.var_cm.to_string(),
            r.reps.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;
    use crate::rng::stream;

    fn ds(t: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = t.len();
        Dataset::new(Matrix::new(n, 1, vec![0.0; n]).unwrap(), t, y).unwrap()
    }

    #[test]
    fn strata_boundaries() {
        let sa = assign_strata(&[0.95, 0.1, 0.0999, 0.5, 1.0, 0.0], 10).unwrap();
        assert_eq!(sa.strata, vec![10, 2, 1, 6, 10, 1]);
        assert_eq!(sa.boundaries.len(), 11);
        let one = assign_strata(&[0.2, 0.7, 0.99], 1).unwrap();
        assert_eq!(one.strata, vec![1, 1, 1]);
        assert!(assign_strata(&[0.5], 0).is_err());
    }

    #[test]
    fn strata_invariant_holds() {
        let scores: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
        for s in [1, 3, 7, 10] {
            let sa = assign_strata(&scores, s).unwrap();
            for (i, &st) in sa.strata.iter().enumerate() {
                assert!((1..=s).contains(&st));
                let lo = sa.boundaries[st - 1];
                let hi = sa.boundaries[st];
                assert!(scores[i] >= lo && (scores[i] < hi || st == s));
            }
        }
    }

    #[test]
    fn transformed_outcome_values() {
        let d = ds(vec![1, 0], vec![2.0, 3.0]);
        let z = transformed_outcome(&d, &[0.5, 0.25]).unwrap();
        assert_eq!(z, vec![4.0, -4.0]);
        assert_eq!(
            transformed_outcome(&d, &[0.5, 1.0]).unwrap_err().kind(),
            "score-out-of-range"
        );
    }

    #[test]
    fn cm_basic_cases() {
        let d = ds(vec![1, 1, 0, 0], vec![3.0, 5.0, 1.0, 1.0]);
        let r = ate_cm(&d).unwrap();
        assert_eq!(r.estimate, 3.0);
        assert_eq!(r.variance_estimate, Some(1.0));
        let same = ds(vec![1, 0, 1, 0], vec![2.0, 2.0, 7.0, 7.0]);
        assert_eq!(ate_cm(&same).unwrap().estimate, 0.0);
        assert_eq!(ate_cm(&ds(vec![1, 1], vec![1.0, 2.0])).unwrap_err().kind(), "degenerate-arm");
    }

    #[test]
    fn to_equals_cm_when_balanced_at_half() {
        let d = ds(vec![1, 0, 1, 0, 1, 0], vec![1.5, -2.0, 4.0, 0.5, 3.0, 9.0]);
        let half = vec![0.5; 6];
        assert!((ate_to(&d, &half).unwrap().estimate - ate_cm(&d).unwrap().estimate).abs() < 1e-14);
        let zeros = ds(vec![1, 0, 1], vec![0.0; 3]);
        assert_eq!(ate_to(&zeros, &[0.5; 3]).unwrap().estimate, 0.0);
    }

    #[test]
    fn to_cm_identity_unbalanced() {
        let d = ds(vec![1, 1, 1, 0, 0], vec![2.0, 4.0, 3.0, 1.0, -1.5]);
        let to = ate_to(&d, &[0.5; 5]).unwrap().estimate;
        let cm = ate_cm(&d).unwrap().estimate;
        let ybar1 = 3.0;
        let ybar0 = -0.25;
        let expected = cm + (3.0 - 2.0) / 5.0 * (ybar1 + ybar0);
        assert!((to - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn ipw_uniform_matches_cm_and_weights_pull() {
        let d = ds(vec![1, 1, 0, 0], vec![1.0, 5.0, 2.0, 0.0]);
        let u = ate_ipw(&d, &[0.3; 4]).unwrap().estimate;
        assert!((u - ate_cm(&d).unwrap().estimate).abs() < 1e-14);
        // The second treated unit has a tiny propensity, hence a large weight.
        let w = ate_ipw(&d, &[0.9, 0.05, 0.5, 0.5]).unwrap().estimate;
        assert!(w > u && w < 5.0 - 1.0);
    }

    #[test]
    fn stratified_hand_computed_fixture() {
        // Stratum 1: treated {4, 6}, control {1, 3}, n=4, diff 3.
        // Stratum 2: treated {10, 12, 14}, control {9}, n=4... control has
        // one unit so the arm variance is undefined; use two controls.
        let y = vec![4.0, 6.0, 1.0, 3.0, 10.0, 14.0, 9.0, 7.0];
        let t = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let scores = vec![0.2, 0.3, 0.1, 0.4, 0.7, 0.8, 0.6, 0.9];
        let d = ds(t, y);
        let sa = assign_strata(&scores, 2).unwrap();
        assert_eq!(sa.strata, vec![1, 1, 1, 1, 2, 2, 2, 2]);
        let r = ate_stratified(&d, &sa).unwrap();
        // diffs: 5-2 = 3 and 12-8 = 4; equal weights.
        assert!((r.estimate - 3.5).abs() < 1e-14);
        // sigma^2_1 = 2/2 + 2/2 = 2; sigma^2_2 = 8/2 + 2/2 = 5.
        // Var = (16*2 + 16*5)/64 = 1.75.
        assert!((r.variance_estimate.unwrap() - 1.75).abs() < 1e-14);
    }

    #[test]
    fn stratified_single_stratum_is_cm() {
        let d = ds(vec![1, 0, 1, 0, 0], vec![3.0, 1.0, 5.0, 2.0, 0.0]);
        let sa = StrataAssignment::uniform(5);
        let s = ate_stratified(&d, &sa).unwrap();
        let c = ate_cm(&d).unwrap();
        assert!((s.estimate - c.estimate).abs() < 1e-14);
        assert!((s.variance_estimate.unwrap() - c.variance_estimate.unwrap()).abs() < 1e-14);
    }

    #[test]
    fn stratified_no_valid_stratum() {
        let d = ds(vec![1, 1, 0, 0], vec![1.0, 2.0, 3.0, 4.0]);
        let sa = assign_strata(&[0.1, 0.2, 0.8, 0.9], 2).unwrap();
        assert_eq!(ate_stratified(&d, &sa).unwrap_err().kind(), "no-valid-stratum");
    }

    #[test]
    fn variance_study_needs_reps() {
        assert!(ate_variance_study(&[10], &[0.0], 1.0, 10, 1).is_err());
    }

    #[test]
    fn draw_pair_respects_fixed_n1() {
        let mut rng = stream(3);
        let (to, cm) = draw_ate_pair(10, 0.0, 1.0, Some(5), &mut rng);
        // Balanced arms: the two estimators coincide.
        assert!((to - cm).abs() < 1e-12);
    }
}
