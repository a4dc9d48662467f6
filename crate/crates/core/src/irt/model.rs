//! The two-parameter logistic item characteristic curve and the joint
//! log-likelihood over a scored response matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::response_data::ScoredMatrix;

/// Scaling constant that brings the logistic close to the normal ogive.
pub const SCALE: f64 = 1.7;

/// Box constraints applied to every estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            a_min: 0.2,
            a_max: 4.0,
            b_min: -4.0,
            b_max: 4.0,
            theta_min: -4.0,
            theta_max: 4.0,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a_min > 0.0
            && self.a_min < self.a_max
            && self.b_min < self.b_max
            && self.theta_min < self.theta_max
            && [
                self.a_max,
                self.b_min,
                self.b_max,
                self.theta_min,
                self.theta_max,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid parameter bounds {self:?}")))
        }
    }
}

/// Discrimination `a` and difficulty `b`, one pair per item column.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemParameters {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ItemParameters {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Integrity(format!(
                "{} discriminations but {} difficulties",
                a.len(),
                b.len()
            )));
        }
        if let Some(bad) = a.iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Domain(format!("discrimination {bad} is not positive")));
        }
        Ok(Self { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Probability of a correct response, `1 / (1 + exp(-1.7 a (theta - b)))`.
pub fn icc(theta: f64, a: f64, b: f64) -> Result<f64> {
    if a.is_nan() || a <= 0.0 {
        return Err(Error::Domain(format!("discrimination {a} is not positive")));
    }
    Ok(prob(logit(theta, a, b)))
}

#[inline]
pub(crate) fn logit(theta: f64, a: f64, b: f64) -> f64 {
    SCALE * a * (theta - b)
}

#[inline]
pub(crate) fn prob(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// log(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-likelihood contribution of a single scored cell with logit `z`.
#[inline]
pub(crate) fn cell_log_lik(correct: bool, z: f64) -> f64 {
    if correct {
        -softplus(-z)
    } else {
        -softplus(z)
    }
}

fn check_dims(responses: &ScoredMatrix, items: &ItemParameters, theta: &[f64]) -> Result<()> {
    if responses.n_cols() != items.len() || responses.n_rows() != theta.len() {
        return Err(Error::Integrity(format!(
            "responses are {}x{} but got {} abilities and {} items",
            responses.n_rows(),
            responses.n_cols(),
            theta.len(),
            items.len()
        )));
    }
    Ok(())
}

/// Sum of `delta log P + (1 - delta) log Q` over all scored cells. Cells
/// scored `None` (absent under [`AbsencePolicy::AsMissing`]) are skipped.
///
/// Row sums are evaluated independently and then added in row order, so
/// the result does not depend on the thread count.
///
/// [`AbsencePolicy::AsMissing`]: crate::response_data::AbsencePolicy::AsMissing
pub fn log_likelihood(responses: &ScoredMatrix, items: &ItemParameters, theta: &[f64]) -> Result<f64> {
    check_dims(responses, items, theta)?;
    let rows: Vec<f64> = (0..responses.n_rows())
        .into_par_iter()
        .map(|i| row_log_lik(responses.row(i), items, theta[i], None))
        .collect();
    Ok(rows.iter().sum())
}

/// Row log-likelihood, optionally restricted to a column mask.
pub(crate) fn row_log_lik(
    row: &[Option<bool>],
    items: &ItemParameters,
    theta: f64,
    cols: Option<&[bool]>,
) -> f64 {
    let mut ll = 0.0;
    for (j, cell) in row.iter().enumerate() {
        if cols.is_some_and(|c| !c[j]) {
            continue;
        }
        if let Some(correct) = *cell {
            ll += cell_log_lik(correct, logit(theta, items.a[j], items.b[j]));
        }
    }
    ll
}

/// Analytic gradient of [`log_likelihood`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub theta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn gradient(responses: &ScoredMatrix, items: &ItemParameters, theta: &[f64]) -> Result<Gradient> {
    check_dims(responses, items, theta)?;
    let (n, m) = (responses.n_rows(), responses.n_cols());
    let mut g = Gradient {
        theta: vec![0.0; n],
        a: vec![0.0; m],
        b: vec![0.0; m],
    };
    for i in 0..n {
        for j in 0..m {
            let Some(correct) = responses.get(i, j) else {
                continue;
            };
            let (a, b) = (items.a[j], items.b[j]);
            let resid = f64::from(u8::from(correct)) - prob(logit(theta[i], a, b));
            g.theta[i] += SCALE * a * resid;
            g.a[j] += SCALE * (theta[i] - b) * resid;
            g.b[j] -= SCALE * a * resid;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icc_values() {
        assert_eq!(icc(0.3, 2.0, 0.3).unwrap(), 0.5);
        let p = icc(1.0, 1.0, 0.0).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.7f64).exp())).abs() < 1e-15);
        assert!((p - 0.84553).abs() < 1e-5);
        let q = icc(-1.0, 1.0, 0.0).unwrap();
        assert!((q - 0.15447).abs() < 1e-5);
        assert!((p + q - 1.0).abs() < 1e-15);
        assert!(matches!(icc(0.0, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(icc(0.0, -1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_cell_log_likelihood() {
        let r = ScoredMatrix::from_binary(&[vec![1]]).unwrap();
        let items = ItemParameters::new(vec![1.3], vec![0.4]).unwrap();
        let ll = log_likelihood(&r, &items, &[0.4]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn independent_cells_add() {
        let items = ItemParameters::new(vec![1.0, 0.7], vec![0.2, -0.5]).unwrap();
        let both = ScoredMatrix::from_binary(&[vec![1, 0]]).unwrap();
        let ll = log_likelihood(&both, &items, &[0.1]).unwrap();
        let one = ItemParameters::new(vec![1.0], vec![0.2]).unwrap();
        let two = ItemParameters::new(vec![0.7], vec![-0.5]).unwrap();
        let l1 = log_likelihood(&ScoredMatrix::from_binary(&[vec![1]]).unwrap(), &one, &[0.1]).unwrap();
        let l2 = log_likelihood(&ScoredMatrix::from_binary(&[vec![0]]).unwrap(), &two, &[0.1]).unwrap();
        assert!((ll - (l1 + l2)).abs() < 1e-15);
    }

    #[test]
    fn missing_cells_are_skipped() {
        let items = ItemParameters::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let r = ScoredMatrix::from_rows(&[vec![Some(true), None]]).unwrap();
        let ll = log_likelihood(&r, &items, &[0.0]).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let items = ItemParameters::new(vec![1.0], vec![0.0]).unwrap();
        let r = ScoredMatrix::from_binary(&[vec![1, 0]]).unwrap();
        assert!(matches!(log_likelihood(&r, &items, &[0.0]), Err(Error::Integrity(_))));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
