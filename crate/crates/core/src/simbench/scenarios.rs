use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::functions::{biased_propensity, draw_features, eval_f, MIN_P};
use crate::data::{Dataset, Matrix};
use crate::error::{HteError, Result};
use crate::rng::child_stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Randomized,
    Biased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: usize,
    pub n: usize,
    pub p: usize,
    pub mu_fn: usize,
    pub tau_fn: usize,
    pub sigma2: f64,
    pub assignment: Assignment,
}

// (n, p, mean function, effect function, noise variance)
const ROWS: [(usize, usize, usize, usize, f64); 8] = [
    (200, 400, 8, 1, 1.0),
    (200, 400, 5, 2, 0.25),
    (300, 300, 4, 3, 1.0),
    (300, 300, 7, 4, 0.25),
    (400, 200, 3, 5, 1.0),
    (400, 200, 1, 6, 1.0),
    (1000, 100, 2, 7, 4.0),
    (1000, 100, 6, 8, 4.0),
];

/// Built-in scenario `id` in `1..=16`; 9–16 repeat 1–8 with biased assignment.
pub fn scenario(id: usize) -> Result<ScenarioSpec> {
    if !(1..=16).contains(&id) {
        return Err(HteError::InvalidParameter(format!("scenario id must be 1..=16, got {id}")));
    }
    let (n, p, mu_fn, tau_fn, sigma2) = ROWS[(id - 1) % 8];
    Ok(ScenarioSpec {
        id,
        n,
        p,
        mu_fn,
        tau_fn,
        sigma2,
        assignment: if id <= 8 { Assignment::Randomized } else { Assignment::Biased },
    })
}

pub fn all_scenarios() -> Vec<ScenarioSpec> {
    (1..=16).map(|id| scenario(id).expect("built-in id")).collect()
}

/// Parses `"1-16"`, `"2,5,9-11"` and the like.
pub fn parse_scenario_ids(s: &str) -> Result<Vec<usize>> {
    let bad = || HteError::InvalidParameter(format!("bad scenario list {s:?}"));
    let mut ids = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v: usize = part.parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if a > b {
            return Err(bad());
        }
        for id in a..=b {
            scenario(id)?;
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(bad());
    }
    Ok(ids)
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < MIN_P {
            return Err(HteError::PTooSmall { p: self.p, needed: MIN_P });
        }
        if self.n < 2 {
            return Err(HteError::InsufficientSamples { needed: 2, got: self.n });
        }
        if !(1..=8).contains(&self.mu_fn) || !(1..=8).contains(&self.tau_fn) {
            return Err(HteError::InvalidParameter("function indices must be 1..=8".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(HteError::InvalidParameter("sigma2 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimDraw {
    pub dataset: Dataset,
    pub tau_true: Vec<f64>,
    pub pi_true: Vec<f64>,
    pub mu_true: Vec<f64>,
    /// Number of times the treatment vector was redrawn because an arm was empty.
    pub t_redraws: usize,
}

/// Full draw: features from the stream `(seed, 0)`, then outcomes as in
/// [`generate_outcomes`].
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<SimDraw> {
    spec.validate()?;
    let x = draw_features(spec.n, spec.p, &mut child_stream(seed, &[0]));
    generate_outcomes(spec, x, seed)
}

/// Treatment and response for fixed features. Treatment attempt `a` uses
/// the stream `(seed, 1, a)`; the response noise uses `(seed, 2)`.
pub fn generate_outcomes(spec: &ScenarioSpec, x: Matrix, seed: u64) -> Result<SimDraw> {
    spec.validate()?;
    if x.ncols() < MIN_P {
        return Err(HteError::PTooSmall { p: x.ncols(), needed: MIN_P });
    }
    let n = x.nrows();
    let mut mu_true = Vec::with_capacity(n);
    let mut tau_true = Vec::with_capacity(n);
    for r in x.rows() {
        mu_true.push(eval_f(spec.mu_fn, r)?);
        tau_true.push(eval_f(spec.tau_fn, r)?);
    }
    let pi_true: Vec<f64> = match spec.assignment {
        Assignment::Randomized => vec![0.5; n],
        Assignment::Biased => mu_true.iter().zip(&tau_true).map(|(&m, &t)| biased_propensity(m, t)).collect(),
    };
    let mut t_redraws = 0;
    let t = loop {
        let mut rng = child_stream(seed, &[1, t_redraws as u64]);
        let t: Vec<u8> = pi_true.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
        let n1 = t.iter().filter(|&&v| v == 1).count();
        if n1 > 0 && n1 < n {
            break t;
        }
        t_redraws += 1;
        if t_redraws > 10_000 {
            return Err(HteError::DegenerateArm {
                treated: n1,
                control: n - n1,
            });
        }
    };
    let sigma = spec.sigma2.sqrt();
    let mut rng = child_stream(seed, &[2]);
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            mu_true[i] + (f64::from(t[i]) - 0.5) * tau_true[i] + sigma * e
        })
        .collect();
    let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    let dataset = Dataset::new(x, t, y)?.with_feature_names(names)?;
    Ok(SimDraw {
        dataset,
        tau_true,
        pi_true,
        mu_true,
        t_redraws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_one_sizes_and_zero_effect() {
        let d = generate(&scenario(1).unwrap(), 4).unwrap();
        assert_eq!((d.dataset.n(), d.dataset.p()), (200, 400));
        assert!(d.tau_true.iter().all(|&t| t == 0.0));
        let share = d.dataset.n_treated() as f64 / 200.0;
        assert!((0.4..=0.6).contains(&share));
    }

    #[test]
    fn biased_scenario_uses_logistic_score() {
        let d = generate(&scenario(9).unwrap(), 4).unwrap();
        for i in 0..d.dataset.n() {
            assert_eq!(d.pi_true[i], biased_propensity(d.mu_true[i], d.tau_true[i]));
        }
        assert!(d.pi_true.iter().any(|&p| (p - 0.5).abs() > 0.1));
    }

    #[test]
    fn same_seed_same_draw() {
        let s = scenario(3).unwrap();
        let a = generate(&s, 11).unwrap();
        let b = generate(&s, 11).unwrap();
        assert_eq!(a.dataset.response(), b.dataset.response());
        assert_eq!(a.dataset.treatment(), b.dataset.treatment());
    }

    #[test]
    fn empty_arm_is_redrawn() {
        let spec = ScenarioSpec {
            id: 0,
            n: 2,
            p: 9,
            mu_fn: 1,
            tau_fn: 1,
            sigma2: 1.0,
            assignment: Assignment::Randomized,
        };
        let total: usize = (0..50).map(|s| generate(&spec, s).unwrap().t_redraws).sum();
        assert!(total > 0);
    }

    #[test]
    fn scenario_lists() {
        assert_eq!(parse_scenario_ids("1-3,9").unwrap(), vec![1, 2, 3, 9]);
        assert!(parse_scenario_ids("0").is_err());
        assert!(parse_scenario_ids("17").is_err());
    }
}
