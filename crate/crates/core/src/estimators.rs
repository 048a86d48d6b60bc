//! One entry point for fitting any estimator by name, shared by the
//! benchmark runner, the command line and the C interface.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_db_forest, fit_null, fit_to_forest, DbForest, NullModel, ToForest};
use crate::boosting::{cross_validate_boost, fit_causal_boost, BoostCvReport, BoostModel, BoostParams};
use crate::data::{validate_dataset, Dataset, EffectModel, Matrix};
use crate::error::{HteError, Result};
use crate::forests::{ForestParams, DEFAULT_CLIP};
use crate::mars::{
    fit_bagged_causal_mars, fit_causal_mars, predict_bagged_mars, predict_mars, BaggedMars, MarsModel, MarsParams,
};
use crate::propensity::{assign_strata, fit_propensity, PropensityFit, StrataAssignment, Stratifier};
use crate::pto::{fit_pto_forest, PtoModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Null,
    ToForest,
    DbForest,
    Pto,
    CausalBoost,
    CausalMars,
    BaggedCausalMars,
}

/// For the transformed-outcome methods `Stratified` means "use estimated
/// propensity scores" and `None` means π = 1/2; for boosting and MARS it
/// means fitting within propensity strata.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    #[default]
    None,
    Stratified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Method {
    pub kind: MethodKind,
    pub adjustment: Adjustment,
}

const TAGS: &[(&str, MethodKind, Adjustment)] = &[
    ("null", MethodKind::Null, Adjustment::None),
    ("to_forest", MethodKind::ToForest, Adjustment::Stratified),
    ("to_forest0", MethodKind::ToForest, Adjustment::None),
    ("db_forest", MethodKind::DbForest, Adjustment::None),
    ("pto", MethodKind::Pto, Adjustment::Stratified),
    ("pto0", MethodKind::Pto, Adjustment::None),
    ("causal_boost", MethodKind::CausalBoost, Adjustment::None),
    ("causal_boost_adj", MethodKind::CausalBoost, Adjustment::Stratified),
    ("causal_mars", MethodKind::CausalMars, Adjustment::None),
    ("causal_mars_adj", MethodKind::CausalMars, Adjustment::Stratified),
    ("bagged_causal_mars", MethodKind::BaggedCausalMars, Adjustment::None),
    ("bagged_causal_mars_adj", MethodKind::BaggedCausalMars, Adjustment::Stratified),
];

const ALIASES: &[(&str, &str)] = &[
    ("to", "to_forest"),
    ("to0", "to_forest0"),
    ("db", "db_forest"),
    ("cb0", "causal_boost"),
    ("cb1", "causal_boost_adj"),
    ("cm0", "causal_mars"),
    ("cm1", "causal_mars_adj"),
    ("bcm0", "bagged_causal_mars"),
    ("bcm1", "bagged_causal_mars_adj"),
];

impl Method {
    pub fn new(kind: MethodKind, adjustment: Adjustment) -> Self {
        let adjustment = match kind {
            MethodKind::Null | MethodKind::DbForest => Adjustment::None,
            _ => adjustment,
        };
        Method { kind, adjustment }
    }

    /// Accepts the canonical tags and the short labels
    /// (`CB0`, `BCM1`, `TO`, …), case-insensitively.
    pub fn parse(tag: &str) -> Result<Method> {
        let lower = tag.trim().to_ascii_lowercase();
        let name = ALIASES
            .iter()
            .find(|(a, _)| *a == lower)
            .map_or(lower.as_str(), |(_, c)| c);
        TAGS.iter()
            .find(|(t, _, _)| *t == name)
            .map(|&(_, kind, adjustment)| Method { kind, adjustment })
            .ok_or_else(|| HteError::UnknownMethod(tag.to_string()))
    }

    pub fn tag(&self) -> &'static str {
        TAGS.iter()
            .find(|(_, k, a)| *k == self.kind && *a == self.adjustment)
            .map(|(t, _, _)| *t)
            .expect("every normalized method has a tag")
    }

    /// Stable per-method seed component.
    pub fn code(&self) -> u64 {
        let k = self.kind as u64;
        2 * k + u64::from(self.adjustment == Adjustment::Stratified)
    }

    pub fn needs_propensity(&self) -> bool {
        self.adjustment == Adjustment::Stratified
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Every tunable of every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Number of propensity strata `S`.
    pub n_strata: usize,
    pub forest: ForestParams,
    pub propensity: ForestParams,
    pub clip: f64,
    /// Fit the smoothing forest on top of the pollinated forest.
    pub smooth: bool,
    pub boost: BoostParams,
    /// Folds for choosing the number of boosting stages; 0 fits `boost.n_trees` stages directly.
    pub cv_folds: usize,
    pub mars: MarsParams,
    /// Backward deletion with out-of-bag size selection for single MARS fits.
    pub prune: bool,
    pub bagged_models: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            n_strata: 10,
            forest: ForestParams::default(),
            propensity: ForestParams::propensity_default(),
            clip: DEFAULT_CLIP,
            smooth: true,
            boost: BoostParams::default(),
            cv_folds: 0,
            mars: MarsParams::default(),
            prune: true,
            bagged_models: 50,
        }
    }
}

impl HyperParams {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_strata < 1 {
            return Err(HteError::InvalidParameter("n_strata must be >= 1".into()));
        }
        if !(self.clip >= 0.0 && self.clip < 0.5) {
            return Err(HteError::InvalidParameter(format!("clip must lie in [0, 0.5), got {}", self.clip)));
        }
        if self.cv_folds == 1 {
            return Err(HteError::InvalidParameter("cv_folds must be 0 or >= 2".into()));
        }
        if self.bagged_models < 1 {
            return Err(HteError::InvalidParameter("bagged_models must be >= 1".into()));
        }
        self.forest.validate(p)?;
        self.propensity.validate(p)?;
        self.boost.validate(p)?;
        self.mars.validate()
    }
}

/// A fitted estimator of any kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FittedModel {
    Null(NullModel),
    ToForest(ToForest),
    DbForest(DbForest),
    Pto(PtoModel),
    CausalBoost(BoostModel),
    CausalMars(MarsModel),
    BaggedCausalMars(BaggedMars),
}

impl FittedModel {
    fn as_effect_model(&self) -> &dyn EffectModel {
        match self {
            FittedModel::Null(m) => m,
            FittedModel::ToForest(m) => m,
            FittedModel::DbForest(m) => m,
            FittedModel::Pto(m) => m,
            FittedModel::CausalBoost(m) => m,
            FittedModel::CausalMars(m) => m,
            FittedModel::BaggedCausalMars(m) => m,
        }
    }

    /// Number of features the model was fit on, when it records it.
    pub fn kind(&self) -> MethodKind {
        match self {
            FittedModel::Null(_) => MethodKind::Null,
            FittedModel::ToForest(_) => MethodKind::ToForest,
            FittedModel::DbForest(_) => MethodKind::DbForest,
            FittedModel::Pto(_) => MethodKind::Pto,
            FittedModel::CausalBoost(_) => MethodKind::CausalBoost,
            FittedModel::CausalMars(_) => MethodKind::CausalMars,
            FittedModel::BaggedCausalMars(_) => MethodKind::BaggedCausalMars,
        }
    }
}

impl EffectModel for FittedModel {
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)> {
        self.as_effect_model().predict_means(x)
    }

    fn predict_effect(&self, x: &[f64]) -> f64 {
        self.as_effect_model().predict_effect(x)
    }
}

/// A fitted model with what was learned alongside it on the training rows.
#[derive(Clone, Debug)]
pub struct Fit {
    pub method: Method,
    pub model: FittedModel,
    /// Training-row strata, for stratified methods.
    pub strata: Option<StrataAssignment>,
    pub cv: Option<BoostCvReport>,
}

impl Fit {
    /// Effect estimates for the training rows. Stratified MARS models use
    /// each row's own stratum; everything else predicts from `x` alone.
    pub fn in_sample_effects(&self, x: &Matrix) -> Result<Vec<f64>> {
        let strata = self.strata.as_ref();
        let with_stratum = |i: usize, f: &dyn Fn(Option<usize>) -> Result<(f64, f64)>| -> Result<f64> {
            let (m1, m0) = f(strata.map(|s| s.strata[i]))?;
            Ok(m1 - m0)
        };
        match &self.model {
            FittedModel::CausalMars(m) if m.is_stratified() => (0..x.nrows())
                .map(|i| with_stratum(i, &|s| predict_mars(m, x.row(i), s)))
                .collect(),
            FittedModel::BaggedCausalMars(m) if m.models.iter().any(MarsModel::is_stratified) => (0..x.nrows())
                .map(|i| with_stratum(i, &|s| predict_bagged_mars(m, x.row(i), s)))
                .collect(),
            model => Ok(x.rows().map(|r| model.predict_effect(r)).collect()),
        }
    }
}

/// Fits `method`, estimating propensity scores from `rng` when needed.
pub fn fit_method<R: Rng + ?Sized>(method: Method, hp: &HyperParams, d: &Dataset, rng: &mut R) -> Result<Fit> {
    validate_dataset(d)?;
    hp.validate(d.p())?;
    let prop = if method.needs_propensity() {
        Some(fit_propensity(d, &hp.propensity, hp.clip, rng)?)
    } else {
        None
    };
    fit_method_with(method, hp, d, prop.as_ref(), rng)
}

/// As [`fit_method`] with propensity estimates supplied by the caller
/// (ignored by methods that do not use them).
pub fn fit_method_with<R: Rng + ?Sized>(
    method: Method,
    hp: &HyperParams,
    d: &Dataset,
    prop: Option<&PropensityFit>,
    rng: &mut R,
) -> Result<Fit> {
    validate_dataset(d)?;
    hp.validate(d.p())?;
    let prop = if method.needs_propensity() {
        Some(prop.ok_or_else(|| {
            HteError::InvalidParameter(format!("{method} needs propensity estimates"))
        })?)
    } else {
        None
    };
    let half = || vec![0.5; d.n()];
    let strata = || -> Result<StrataAssignment> {
        match prop {
            Some(p) => assign_strata(&p.scores, hp.n_strata),
            None => Ok(StrataAssignment::uniform(d.n())),
        }
    };
    let mut fit = Fit {
        method,
        model: FittedModel::Null(fit_null(d)?),
        strata: None,
        cv: None,
    };
    fit.model = match method.kind {
        MethodKind::Null => fit.model,
        MethodKind::ToForest => {
            let scores = prop.map_or_else(half, |p| p.scores.clone());
            FittedModel::ToForest(fit_to_forest(d, &scores, &hp.forest, rng)?)
        }
        MethodKind::DbForest => FittedModel::DbForest(fit_db_forest(d, &hp.forest, rng)?),
        MethodKind::Pto => {
            let scores = prop.map_or_else(half, |p| p.scores.clone());
            FittedModel::Pto(fit_pto_forest(d, &scores, &hp.forest, hp.smooth, rng)?)
        }
        MethodKind::CausalBoost => {
            let sa = strata()?;
            let model = if hp.cv_folds >= 2 {
                let cv = cross_validate_boost(d, &sa, hp.cv_folds, &hp.boost, rng)?;
                fit.cv = Some(cv.report);
                cv.model
            } else {
                fit_causal_boost(d, &sa, &hp.boost, rng)?
            };
            if prop.is_some() {
                fit.strata = Some(sa);
            }
            FittedModel::CausalBoost(model)
        }
        MethodKind::CausalMars | MethodKind::BaggedCausalMars => {
            let sa = match prop {
                Some(_) => Some(strata()?),
                None => None,
            };
            let stratifier = prop.map(|p| Stratifier {
                forest: p.forest.clone(),
                n_strata: hp.n_strata,
            });
            let model = if method.kind == MethodKind::CausalMars {
                let mut m = fit_causal_mars(d, sa.as_ref(), &hp.mars, hp.prune, rng)?;
                if m.is_stratified() {
                    m.stratifier = stratifier;
                }
                FittedModel::CausalMars(m)
            } else {
                let mut m = fit_bagged_causal_mars(d, sa.as_ref(), &hp.mars, hp.bagged_models, rng)?;
                for member in &mut m.models {
                    if member.is_stratified() {
                        member.stratifier = stratifier.clone();
                    }
                }
                FittedModel::BaggedCausalMars(m)
            };
            fit.strata = sa;
            model
        }
    };
    Ok(fit)
}
