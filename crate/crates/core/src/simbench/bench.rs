use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::functions::draw_features;
use super::scenarios::{generate, Assignment, generate_outcomes, scenario, ScenarioSpec, SimDraw};
use crate::data::EffectModel;
use crate::error::{HteError, Result};
use crate::estimators::{fit_method_with, HyperParams, Method};
use crate::forests::ForestParams;
use crate::io::csv_err;
use crate::propensity::{fit_propensity, PropensityFit};
use crate::rng::{derive_seed, stream};

/// Seed component reserved for the propensity fit shared by a replicate.
const PROPENSITY_PART: u64 = 1000;

/// Mean squared difference.
pub fn mse_effect(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(HteError::LengthMismatch {
            left: est.len(),
            right: truth.len(),
        });
    }
    if est.is_empty() {
        return Err(HteError::EmptyInput("no estimates".into()));
    }
    Ok(est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / est.len() as f64)
}

/// Benchmark settings. The defaults are the desk-scale settings: fewer
/// trees, boosting stages and bagged models than a full-size run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub params: HyperParams,
    /// Settings for scenarios with biased assignment, when they differ.
    pub biased_params: Option<HyperParams>,
    /// Score estimates on a fresh draw from the same scenario instead of
    /// the training rows.
    pub held_out: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut params = HyperParams {
            smooth: false,
            bagged_models: 25,
            cv_folds: 5,
            ..HyperParams::default()
        };
        params.forest = ForestParams {
            n_trees: 100,
            ..ForestParams::default()
        };
        params.propensity.n_trees = 100;
        params.boost.n_trees = 100;
        params.boost.tree.min_leaf_per_arm = 20;
        params.mars.max_degree = 2;
        params.mars.min_support = 40;
        let mut biased = params.clone();
        biased.boost.tree.min_leaf_per_arm = 10;
        BenchConfig {
            params,
            biased_params: Some(biased),
            held_out: false,
        }
    }
}

impl BenchConfig {
    pub fn params_for(&self, spec: &ScenarioSpec) -> &HyperParams {
        match (&self.biased_params, spec.assignment) {
            (Some(b), Assignment::Biased) => b,
            _ => &self.params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: usize,
    pub method: String,
    pub rep: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Seeds of replicate `rep` of scenario `id`: the data draw and each method.
pub fn data_seed(base: u64, id: usize, rep: usize) -> u64 {
    derive_seed(base, &[id as u64, rep as u64])
}

pub fn method_seed(base: u64, id: usize, rep: usize, m: Method) -> u64 {
    derive_seed(base, &[id as u64, rep as u64, m.code()])
}

fn shared_propensity(
    draw: &SimDraw,
    methods: &[Method],
    params: &HyperParams,
    seed: u64,
) -> Option<Result<PropensityFit>> {
    methods.iter().any(Method::needs_propensity).then(|| {
        fit_propensity(
            &draw.dataset,
            &params.propensity,
            params.clip,
            &mut stream(derive_seed(seed, &[PROPENSITY_PART])),
        )
    })
}

fn run_method(
    m: Method,
    draw: &SimDraw,
    prop: Option<&Result<PropensityFit>>,
    params: &HyperParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let prop = match prop {
        Some(Ok(p)) => Some(p),
        Some(Err(e)) if m.needs_propensity() => {
            return Err(HteError::Unsupported(format!("propensity fit failed: {e}")));
        }
        _ => None,
    };
    let fit = fit_method_with(m, params, &draw.dataset, prop, &mut stream(seed))?;
    fit.in_sample_effects(draw.dataset.features())
}

fn run_cell(spec: &ScenarioSpec, rep: usize, methods: &[Method], base: u64, cfg: &BenchConfig) -> Vec<BenchResult> {
    let dseed = data_seed(base, spec.id, rep);
    let fail = |m: &Method, e: &HteError| BenchResult {
        scenario: spec.id,
        method: m.tag().to_string(),
        rep,
        seed: method_seed(base, spec.id, rep, *m),
        mse: None,
        wall_ms: 0,
        error: Some(e.to_string()),
    };
    let draw = match generate(spec, dseed) {
        Ok(d) => d,
        Err(e) => return methods.iter().map(|m| fail(m, &e)).collect(),
    };
    let test = if cfg.held_out {
        match generate(spec, derive_seed(dseed, &[1])) {
            Ok(t) => Some(t),
            Err(e) => return methods.iter().map(|m| fail(m, &e)).collect(),
        }
    } else {
        None
    };
    let params = cfg.params_for(spec);
    let prop = shared_propensity(&draw, methods, params, dseed);
    methods
        .iter()
        .map(|&m| {
            let seed = method_seed(base, spec.id, rep, m);
            let start = Instant::now();
            let outcome = match &test {
                None => run_method(m, &draw, prop.as_ref(), params, seed)
                    .and_then(|est| mse_effect(&est, &draw.tau_true)),
                Some(t) => {
                    let p = match &prop {
                        Some(Ok(p)) => Some(p),
                        _ => None,
                    };
                    fit_method_with(m, params, &draw.dataset, p, &mut stream(seed)).and_then(|fit| {
                        let est: Vec<f64> = t.dataset.features().rows().map(|r| fit.model.predict_effect(r)).collect();
                        mse_effect(&est, &t.tau_true)
                    })
                }
            };
            let wall_ms = start.elapsed().as_millis() as u64;
            match outcome {
                Ok(mse) => BenchResult {
                    scenario: spec.id,
                    method: m.tag().to_string(),
                    rep,
                    seed,
                    mse: Some(mse),
                    wall_ms,
                    error: None,
                },
                Err(e) => BenchResult { wall_ms, ..fail(&m, &e) },
            }
        })
        .collect()
}

/// Every (scenario, replicate) draw is generated once and shared by all
/// methods. Failed fits are recorded in their row. Rows come back ordered by
/// scenario, replicate, then the order of `methods`.
pub fn run_benchmark(
    ids: &[usize],
    methods: &[Method],
    reps: usize,
    base_seed: u64,
    cfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    if reps < 1 {
        return Err(HteError::InvalidParameter("reps must be >= 1".into()));
    }
    if methods.is_empty() {
        return Err(HteError::InvalidParameter("no methods given".into()));
    }
    let specs: Vec<ScenarioSpec> = ids.iter().map(|&id| scenario(id)).collect::<Result<_>>()?;
    for s in &specs {
        cfg.params_for(s).validate(s.p)?;
    }
    let cells: Vec<(&ScenarioSpec, usize)> = specs.iter().flat_map(|s| (0..reps).map(move |r| (s, r))).collect();
    Ok(cells
        .par_iter()
        .map(|&(s, r)| run_cell(s, r, methods, base_seed, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

pub fn write_results_csv<W: Write>(rows: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "method", "rep", "seed", "mse", "wall_ms"])
        .map_err(csv_err)?;
    for r in rows {
        let mse = r.mse.map_or_else(String::new, |v| format!("{v:?}"));
        w.write_record([
            r.scenario.to_string(),
            r.method.clone(),
            r.rep.to_string(),
            r.seed.to_string(),
            mse,
            r.wall_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Median and interquartile range of one method's MSE in one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: usize,
    pub method: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub iqr: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// One row per (scenario, method), in first-appearance order.
pub fn summarize(rows: &[BenchResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, String)> = Vec::new();
    for r in rows {
        let k = (r.scenario, r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, method)| {
            let cell: Vec<&BenchResult> = rows.iter().filter(|r| r.scenario == scenario && r.method == method).collect();
            let mut v: Vec<f64> = cell.iter().filter_map(|r| r.mse).collect();
            v.sort_by(f64::total_cmp);
            let q1 = quantile(&v, 0.25);
            let q3 = quantile(&v, 0.75);
            SummaryRow {
                scenario,
                method,
                n_ok: v.len(),
                n_failed: cell.len() - v.len(),
                median: quantile(&v, 0.5),
                q1,
                q3,
                iqr: q1.zip(q3).map(|(a, b)| b - a),
            }
        })
        .collect()
}

/// Median MSE of `method` in `scenario`, if any replicate succeeded.
pub fn median_mse(rows: &[BenchResult], scenario: usize, method: &str) -> Option<f64> {
    summarize(rows)
        .into_iter()
        .find(|s| s.scenario == scenario && s.method == method)
        .and_then(|s| s.median)
}

/// Per-unit truth and per-method mean estimate over the redraws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub truth: Vec<f64>,
    pub methods: Vec<String>,
    /// `mean_estimates[m][i]`: method `m`, unit `i`.
    pub mean_estimates: Vec<Vec<f64>>,
    pub reps: usize,
}

impl BiasReport {
    /// Units-averaged `|mean estimate − truth|` of method `m`.
    pub fn mean_abs_bias(&self, m: usize) -> f64 {
        let est = &self.mean_estimates[m];
        est.iter().zip(&self.truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.len() as f64
    }

    pub fn method_index(&self, tag: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == tag)
    }
}

/// An effect estimator for the bias study: given a draw and a seed, the
/// in-sample effect estimates.
pub type Estimator<'a> = dyn Fn(&SimDraw, u64) -> Result<Vec<f64>> + Sync + 'a;

/// Features are drawn once from `(seed, 0)`; redraw `r` takes its
/// treatment and response from `(seed, 1, r)` and estimator `e` is handed
/// the seed `(seed, 2, r, e)`.
pub fn bias_study_with(
    spec: &ScenarioSpec,
    estimators: &[(String, &Estimator<'_>)],
    reps: usize,
    seed: u64,
) -> Result<BiasReport> {
    if reps < 2 {
        return Err(HteError::InvalidParameter("bias study needs reps >= 2".into()));
    }
    spec.validate()?;
    let x = draw_features(spec.n, spec.p, &mut crate::rng::child_stream(seed, &[0]));
    let per_rep: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let draw = generate_outcomes(spec, x.clone(), derive_seed(seed, &[1, r as u64]))?;
            let est = estimators
                .iter()
                .enumerate()
                .map(|(e, (_, f))| f(&draw, derive_seed(seed, &[2, r as u64, e as u64])))
                .collect::<Result<Vec<_>>>()?;
            Ok((draw.tau_true, est))
        })
        .collect::<Result<_>>()?;
    let n = spec.n;
    let mut mean_estimates = vec![vec![0.0; n]; estimators.len()];
    for (_, est) in &per_rep {
        for (acc, e) in mean_estimates.iter_mut().zip(est) {
            for (a, v) in acc.iter_mut().zip(e) {
                *a += v;
            }
        }
    }
    for acc in &mut mean_estimates {
        for a in acc.iter_mut() {
            *a /= reps as f64;
        }
    }
    Ok(BiasReport {
        truth: per_rep[0].0.clone(),
        methods: estimators.iter().map(|(n, _)| n.clone()).collect(),
        mean_estimates,
        reps,
    })
}

/// Bias study over named methods fit with `params`.
pub fn bias_study(
    spec: &ScenarioSpec,
    methods: &[Method],
    reps: usize,
    seed: u64,
    params: &HyperParams,
) -> Result<BiasReport> {
    let closures: Vec<Box<Estimator<'_>>> = methods
        .iter()
        .map(|&m| {
            Box::new(move |draw: &SimDraw, s: u64| {
                let prop = shared_propensity(draw, &[m], params, s).transpose()?;
                let fit = fit_method_with(m, params, &draw.dataset, prop.as_ref(), &mut stream(s))?;
                fit.in_sample_effects(draw.dataset.features())
            }) as Box<Estimator<'_>>
        })
        .collect();
    let named: Vec<(String, &Estimator<'_>)> = methods
        .iter()
        .zip(&closures)
        .map(|(m, f)| (m.tag().to_string(), f.as_ref()))
        .collect();
    bias_study_with(spec, &named, reps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    
    #[test]
    fn mse_examples() {
        assert_eq!(mse_effect(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_effect(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        // (0.5² + 1² + 2²) / 3
        assert_eq!(mse_effect(&[0.5, -1.0, 4.0], &[0.0, 0.0, 2.0]).unwrap(), 5.25 / 3.0);
        assert_eq!(mse_effect(&[1.0], &[1.0, 2.0]).unwrap_err().kind(), "length-mismatch");
    }

    #[test]
    fn null_on_scenario_one_is_squared_mean_difference() {
        let m = Method::parse("null").unwrap();
        let rows = run_benchmark(&[1], &[m], 2, 5, &BenchConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            let d = generate(&scenario(1).unwrap(), data_seed(5, 1, r.rep)).unwrap();
            let ate = crate::propensity::ate_cm(&d.dataset).unwrap().estimate;
            assert!((r.mse.unwrap() - ate * ate).abs() <= 1e-12 * ate * ate);
        }
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&[], 0.5), None);
    }

    fn tiny_spec() -> ScenarioSpec {
        ScenarioSpec {
            id: 0,
            n: 60,
            p: 9,
            mu_fn: 5,
            tau_fn: 3,
            sigma2: 1.0,
            assignment: Assignment::Randomized,
        }
    }

    #[test]
    fn oracle_estimator_has_no_bias() {
        let oracle = |d: &SimDraw, _s: u64| Ok(d.tau_true.clone());
        let rep = bias_study_with(&tiny_spec(), &[("oracle".into(), &oracle)], 4, 1).unwrap();
        assert_eq!(rep.mean_estimates[0], rep.truth);
        assert_eq!(rep.mean_abs_bias(0), 0.0);
    }

    #[test]
    fn null_bias_study_is_constant_per_unit() {
        let m = Method::parse("null").unwrap();
        let rep = bias_study(&tiny_spec(), &[m], 3, 2, &HyperParams::default()).unwrap();
        let e = &rep.mean_estimates[0];
        assert!(e.iter().all(|v| (v - e[0]).abs() < 1e-12));
    }
}
