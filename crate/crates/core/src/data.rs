//! Shared data model: the feature matrix, the (X, T, Y) dataset and the
//! prediction contract every fitted estimator satisfies.

use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};

/// Dense row-major matrix; one row per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(HteError::DimensionMismatch(format!(
                "matrix buffer has {} values, expected {}x{}",
                data.len(),
                nrows,
                ncols
            )));
        }
        Ok(Matrix { nrows, ncols, data })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Matrix {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(HteError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {ncols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            nrows: rows.len(),
            ncols,
            data,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.ncols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.ncols.max(1)).take(self.nrows)
    }

    /// Gathers the given rows (duplicates allowed) into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            nrows: idx.len(),
            ncols: self.ncols,
            data,
        }
    }
}

/// Features, binary treatment and real response for `n` units.
///
/// Construction checks shapes, the 0/1 coding of the treatment and the
/// finiteness of every value. The arm-balance requirement of the fitting
/// routines is checked separately by [`validate_dataset`], because arm
/// subsets (e.g. treated rows only) are legitimate datasets too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    treatment: Vec<u8>,
    response: Vec<f64>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, treatment: Vec<u8>, response: Vec<f64>) -> Result<Self> {
        let d = Dataset {
            features,
            treatment,
            response,
            feature_names: None,
        };
        d.check_structure()?;
        Ok(d)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(HteError::DimensionMismatch(format!(
                "{} feature names for {} features",
                names.len(),
                self.p()
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    fn check_structure(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.treatment.len() != n || self.response.len() != n {
            return Err(HteError::DimensionMismatch(format!(
                "features have {n} rows, treatment {} and response {}",
                self.treatment.len(),
                self.response.len()
            )));
        }
        if let Some(names) = &self.feature_names {
            if names.len() != self.p() {
                return Err(HteError::DimensionMismatch("feature name count".into()));
            }
        }
        if let Some((row, &t)) = self.treatment.iter().enumerate().find(|(_, &t)| t > 1) {
            return Err(HteError::InvalidTreatment {
                row,
                value: f64::from(t),
            });
        }
        if let Some(index) = self.features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(HteError::NonFiniteValue {
                field: "features",
                index,
            });
        }
        if let Some(index) = self.response.iter().position(|v| !v.is_finite()) {
            return Err(HteError::NonFiniteValue {
                field: "response",
                index,
            });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    #[inline]
    pub fn is_treated(&self, i: usize) -> bool {
        self.treatment[i] == 1
    }

    /// Number of treated units (N₁).
    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }

    /// Number of control units (N₀).
    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Rows gathered by index; duplicates allowed (bootstrap resamples).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Same features and treatment with a replacement response.
    pub fn with_response(&self, response: Vec<f64>) -> Result<Dataset> {
        Dataset::new(self.features.clone(), self.treatment.clone(), response)
    }

    pub fn arm_indices(&self, treated: bool) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.is_treated(i) == treated)
            .collect()
    }
}

/// Checks every dataset invariant required by the fitting operations.
pub fn validate_dataset(d: &Dataset) -> Result<()> {
    d.check_structure()?;
    if d.n() < 2 {
        return Err(HteError::InsufficientSamples {
            needed: 2,
            got: d.n(),
        });
    }
    if d.p() < 1 {
        return Err(HteError::DimensionMismatch("dataset has no features".into()));
    }
    require_both_arms(d)
}

pub(crate) fn require_both_arms(d: &Dataset) -> Result<()> {
    let treated = d.n_treated();
    let control = d.n() - treated;
    if treated == 0 || control == 0 {
        return Err(HteError::DegenerateArm { treated, control });
    }
    Ok(())
}

/// Per-unit effect estimates, optionally with the arm-specific means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimates {
    pub tau_hat: Vec<f64>,
    pub mu1_hat: Option<Vec<f64>>,
    pub mu0_hat: Option<Vec<f64>>,
}

/// Prediction contract of a fitted heterogeneous-effect estimator.
///
/// Models that estimate the two conditional means return them from
/// [`predict_means`](EffectModel::predict_means) and inherit the default
/// `predict_effect`, which is their exact difference. Models that only
/// estimate the effect (the transformed-outcome forest) return `None` and
/// override `predict_effect`.
pub trait EffectModel {
    /// `(μ̂₁(x), μ̂₀(x))`, or `None` if the model has no arm-mean readout.
    fn predict_means(&self, x: &[f64]) -> Option<(f64, f64)>;

    fn predict_effect(&self, x: &[f64]) -> f64 {
        let (mu1, mu0) = self
            .predict_means(x)
            .expect("model exposes no arm means and must override predict_effect");
        mu1 - mu0
    }

    fn estimate(&self, x: &Matrix) -> EffectEstimates {
        let means: Option<Vec<(f64, f64)>> = x.rows().map(|r| self.predict_means(r)).collect();
        match means {
            Some(m) => EffectEstimates {
                tau_hat: m.iter().map(|(a, b)| a - b).collect(),
                mu1_hat: Some(m.iter().map(|p| p.0).collect()),
                mu0_hat: Some(m.iter().map(|p| p.1).collect()),
            },
            None => EffectEstimates {
                tau_hat: x.rows().map(|r| self.predict_effect(r)).collect(),
                mu1_hat: None,
                mu0_hat: None,
            },
        }
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the n−1 denominator; `None` below two values.
pub(crate) fn sample_variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(t: Vec<u8>, y: Vec<f64>) -> Result<Dataset> {
        let n = t.len();
        let x = Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(x, t, y)
    }

    #[test]
    fn valid_dataset_passes() {
        let d = ds(vec![1, 0, 1, 0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        validate_dataset(&d).unwrap();
        assert_eq!(d.n_treated(), 2);
        assert_eq!(d.n_control(), 2);
    }

    #[test]
    fn all_treated_is_degenerate() {
        let d = ds(vec![1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            validate_dataset(&d),
            Err(HteError::DegenerateArm { treated: 3, control: 0 })
        ));
    }

    #[test]
    fn non_finite_response_rejected() {
        let err = ds(vec![1, 0], vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(err.kind(), "non-finite-value");
        let err = ds(vec![1, 0], vec![f64::INFINITY, 1.0]).unwrap_err();
        assert_eq!(err.kind(), "non-finite-value");
    }

    #[test]
    fn shape_and_coding_errors() {
        let x = Matrix::new(3, 1, vec![0.0; 3]).unwrap();
        let err = Dataset::new(x.clone(), vec![1, 0], vec![0.0; 3]).unwrap_err();
        assert_eq!(err.kind(), "dimension-mismatch");
        let err = Dataset::new(x, vec![1, 0, 2], vec![0.0; 3]).unwrap_err();
        assert_eq!(err.kind(), "invalid-treatment");
    }

    #[test]
    fn validation_is_pure() {
        let d = ds(vec![1, 0, 1, 0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = d.clone();
        validate_dataset(&d).unwrap();
        validate_dataset(&d).unwrap();
        assert_eq!(d, before);
    }

    #[test]
    fn subset_allows_duplicates() {
        let d = ds(vec![1, 0, 1, 0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = d.subset(&[2, 2, 1]);
        assert_eq!(s.response(), &[3.0, 3.0, 2.0]);
        assert_eq!(s.treatment(), &[1, 1, 0]);
        assert_eq!(s.features().row(1), &[2.0]);
    }
}
