//! Conditional maximum-likelihood steps: abilities with items fixed, and
//! one item's (a, b) with abilities fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{cell_log_lik, logit, prob, Bounds, ItemParameters, SCALE};
use crate::response_data::ScoredMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbilityFlag {
    /// Interior (or box-constrained) maximum-likelihood estimate.
    Ok,
    AllCorrect,
    AllIncorrect,
    /// No scored cells, or every cell of the row was absent.
    NoData,
    /// Pushed onto the ability box by the final standardization.
    Clamped,
}

impl AbilityFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            AbilityFlag::Ok => "ok",
            AbilityFlag::AllCorrect => "all_correct",
            AbilityFlag::AllIncorrect => "all_incorrect",
            AbilityFlag::NoData => "no_data",
            AbilityFlag::Clamped => "clamped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AbilityFlag::Ok,
            AbilityFlag::AllCorrect,
            AbilityFlag::AllIncorrect,
            AbilityFlag::NoData,
            AbilityFlag::Clamped,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
    }

    pub fn is_flagged(self) -> bool {
        self != AbilityFlag::Ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbilityVector {
    pub theta: Vec<f64>,
    pub flags: Vec<AbilityFlag>,
}

impl AbilityVector {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Classifies a row by its scored cells over the columns in `cols`.
pub(crate) fn row_status(row: &[Option<bool>], cols: Option<&[bool]>) -> AbilityFlag {
    let (mut right, mut wrong) = (0usize, 0usize);
    for (j, cell) in row.iter().enumerate() {
        if cols.is_some_and(|c| !c[j]) {
            continue;
        }
        match cell {
            Some(true) => right += 1,
            Some(false) => wrong += 1,
            None => {}
        }
    }
    match (right, wrong) {
        (0, 0) => AbilityFlag::NoData,
        (_, 0) => AbilityFlag::AllCorrect,
        (0, _) => AbilityFlag::AllIncorrect,
        _ => AbilityFlag::Ok,
    }
}

/// Per-student ability estimates with item parameters held fixed.
///
/// Degenerate rows have no interior maximum and are clamped: all correct
/// to `theta_max`, all incorrect or nothing scored to `theta_min`.
pub fn estimate_abilities(
    responses: &ScoredMatrix,
    items: &ItemParameters,
    bounds: &Bounds,
) -> AbilityVector {
    assert_eq!(responses.n_cols(), items.len(), "item count mismatch");
    let (theta, flags) = (0..responses.n_rows())
        .into_par_iter()
        .map(|i| {
            let row = responses.row(i);
            match row_status(row, None) {
                AbilityFlag::Ok => (maximize_theta(row, items, None, bounds, 0.0), AbilityFlag::Ok),
                AbilityFlag::AllCorrect => (bounds.theta_max, AbilityFlag::AllCorrect),
                flag => (bounds.theta_min, flag),
            }
        })
        .unzip();
    AbilityVector { theta, flags }
}

/// First and second derivative of a row log-likelihood in theta.
fn theta_derivs(row: &[Option<bool>], items: &ItemParameters, cols: Option<&[bool]>, theta: f64) -> (f64, f64) {
    let (mut g, mut h) = (0.0, 0.0);
    for (j, cell) in row.iter().enumerate() {
        if cols.is_some_and(|c| !c[j]) {
            continue;
        }
        if let Some(correct) = *cell {
            let sa = SCALE * items.a[j];
            let p = prob(logit(theta, items.a[j], items.b[j]));
            g += sa * (f64::from(u8::from(correct)) - p);
            h -= sa * sa * p * (1.0 - p);
        }
    }
    (g, h)
}

/// Maximizes a row log-likelihood over `[theta_min, theta_max]`.
///
/// The row likelihood is concave in theta, so the maximizer is the root
/// of the score inside a sign bracket, or a box end when the score does
/// not change sign. Newton steps that leave the bracket are replaced by
/// bisection.
pub(crate) fn maximize_theta(
    row: &[Option<bool>],
    items: &ItemParameters,
    cols: Option<&[bool]>,
    bounds: &Bounds,
    start: f64,
) -> f64 {
    let (mut lo, mut hi) = (bounds.theta_min, bounds.theta_max);
    if theta_derivs(row, items, cols, lo).0 <= 0.0 {
        return lo;
    }
    if theta_derivs(row, items, cols, hi).0 >= 0.0 {
        return hi;
    }
    let mut x = start.clamp(lo, hi);
    for _ in 0..200 {
        let (g, h) = theta_derivs(row, items, cols, x);
        if g == 0.0 {
            return x;
        }
        if g > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = if h < 0.0 { x - g / h } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-12 * (1.0 + x.abs()) || hi - lo <= 1e-13 {
            return next;
        }
        x = next;
    }
    x
}

/// Item log-likelihood over the rows in `rows`.
pub(crate) fn item_log_lik(
    responses: &ScoredMatrix,
    col: usize,
    theta: &[f64],
    rows: &[bool],
    a: f64,
    b: f64,
) -> f64 {
    let mut ll = 0.0;
    for (i, &active) in rows.iter().enumerate() {
        if !active {
            continue;
        }
        if let Some(correct) = responses.get(i, col) {
            ll += cell_log_lik(correct, logit(theta[i], a, b));
        }
    }
    ll
}

/// Gradient and Hessian of the item log-likelihood in (a, b).
fn item_derivs(
    responses: &ScoredMatrix,
    col: usize,
    theta: &[f64],
    rows: &[bool],
    a: f64,
    b: f64,
) -> ([f64; 2], [[f64; 2]; 2]) {
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for (i, &active) in rows.iter().enumerate() {
        if !active {
            continue;
        }
        let Some(correct) = responses.get(i, col) else {
            continue;
        };
        let d = theta[i] - b;
        let p = prob(logit(theta[i], a, b));
        let w = p * (1.0 - p);
        let resid = f64::from(u8::from(correct)) - p;
        let za = SCALE * d;
        let zb = -SCALE * a;
        g[0] += resid * za;
        g[1] += resid * zb;
        h[0][0] -= w * za * za;
        h[1][1] -= w * zb * zb;
        h[0][1] += -w * za * zb - SCALE * resid;
    }
    h[1][0] = h[0][1];
    (g, h)
}

/// Box-constrained maximization of one item's likelihood in (a, b).
///
/// Projected Newton with an active set: coordinates pinned to a bound with
/// the gradient pointing outward are frozen, the rest take a Newton step
/// (or a scaled gradient step where the Hessian is not negative definite),
/// and the step is halved until the objective improves.
pub(crate) fn maximize_item(
    responses: &ScoredMatrix,
    col: usize,
    theta: &[f64],
    rows: &[bool],
    bounds: &Bounds,
    start: (f64, f64),
) -> (f64, f64) {
    let lo = [bounds.a_min, bounds.b_min];
    let hi = [bounds.a_max, bounds.b_max];
    let mut x = [start.0.clamp(lo[0], hi[0]), start.1.clamp(lo[1], hi[1])];
    let mut f = item_log_lik(responses, col, theta, rows, x[0], x[1]);

    for _ in 0..100 {
        let (g, h) = item_derivs(responses, col, theta, rows, x[0], x[1]);
        let pinned: [bool; 2] = std::array::from_fn(|k| {
            (x[k] <= lo[k] && g[k] < 0.0) || (x[k] >= hi[k] && g[k] > 0.0)
        });
        let step = match pinned {
            [true, true] => break,
            [false, false] => {
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                if h[0][0] < 0.0 && det > 0.0 {
                    [
                        -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                        -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
                    ]
                } else {
                    gradient_step(g, h)
                }
            }
            _ => {
                let k = usize::from(pinned[0]);
                let mut s = [0.0; 2];
                s[k] = if h[k][k] < 0.0 {
                    -g[k] / h[k][k]
                } else {
                    g[k] / (1.0 + g[k].abs())
                };
                s
            }
        };

        let mut t = 1.0;
        let mut improved = None;
        for _ in 0..50 {
            let cand = [
                (x[0] + t * step[0]).clamp(lo[0], hi[0]),
                (x[1] + t * step[1]).clamp(lo[1], hi[1]),
            ];
            let fc = item_log_lik(responses, col, theta, rows, cand[0], cand[1]);
            if fc > f {
                improved = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = improved else { break };
        let moved = (cand[0] - x[0]).abs().max((cand[1] - x[1]).abs());
        let gain = fc - f;
        x = cand;
        f = fc;
        if moved < 1e-10 || gain < 1e-13 * (1.0 + f.abs()) {
            break;
        }
    }
    (x[0], x[1])
}

fn gradient_step(g: [f64; 2], h: [[f64; 2]; 2]) -> [f64; 2] {
    let curvature = h.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = 1.0 / (1.0 + curvature);
    [g[0] * scale, g[1] * scale]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_correct_response_clamps_to_max() {
        let r = ScoredMatrix::from_binary(&[vec![1]]).unwrap();
        let items = ItemParameters::new(vec![1.0], vec![0.0]).unwrap();
        let est = estimate_abilities(&r, &items, &Bounds::default());
        assert_eq!(est.theta, vec![4.0]);
        assert_eq!(est.flags, vec![AbilityFlag::AllCorrect]);
    }

    #[test]
    fn empty_row_is_no_data() {
        let r = ScoredMatrix::from_rows(&[vec![None, None], vec![Some(false), Some(false)]]).unwrap();
        let items = ItemParameters::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let est = estimate_abilities(&r, &items, &Bounds::default());
        assert_eq!(est.theta, vec![-4.0, -4.0]);
        assert_eq!(est.flags, vec![AbilityFlag::NoData, AbilityFlag::AllIncorrect]);
    }

    #[test]
    fn half_correct_on_identical_items_is_zero() {
        // Grid-search oracle over [-4, 4] with step 1e-3.
        let row: Vec<u8> = (0..40).map(|j| (j % 2) as u8).collect();
        let r = ScoredMatrix::from_binary(std::slice::from_ref(&row)).unwrap();
        let items = ItemParameters::new(vec![1.0; 40], vec![0.0; 40]).unwrap();
        let est = estimate_abilities(&r, &items, &Bounds::default());

        let ll = |t: f64| -> f64 {
            row.iter()
                .map(|&d| {
                    let p = 1.0 / (1.0 + (-1.7 * t).exp());
                    if d == 1 { p.ln() } else { (1.0 - p).ln() }
                })
                .sum()
        };
        let grid_best = (0..=8000)
            .map(|k| -4.0 + k as f64 * 1e-3)
            .max_by(|x, y| ll(*x).partial_cmp(&ll(*y)).unwrap())
            .unwrap();
        assert!(grid_best.abs() < 1e-3);
        assert!((est.theta[0] - grid_best).abs() < 1e-3);
        assert!(est.theta[0].abs() < 1e-9);
    }

    #[test]
    fn item_maximizer_matches_grid() {
        let theta: Vec<f64> = (0..60).map(|i| -2.0 + i as f64 * 4.0 / 59.0).collect();
        // Deterministic pattern: correct when theta exceeds 0.3, with a few flips.
        let rows: Vec<Vec<u8>> = theta
            .iter()
            .enumerate()
            .map(|(i, &t)| vec![u8::from((t > 0.3) ^ (i % 7 == 0))])
            .collect();
        let r = ScoredMatrix::from_binary(&rows).unwrap();
        let active = vec![true; theta.len()];
        let bounds = Bounds::default();
        let (a, b) = maximize_item(&r, 0, &theta, &active, &bounds, (1.0, 0.0));
        let f = item_log_lik(&r, 0, &theta, &active, a, b);
        let mut grid_best = f64::NEG_INFINITY;
        for ia in 0..=190 {
            for ib in 0..=160 {
                let (ga, gb) = (0.2 + ia as f64 * 0.02, -4.0 + ib as f64 * 0.05);
                grid_best = grid_best.max(item_log_lik(&r, 0, &theta, &active, ga, gb));
            }
        }
        assert!(f >= grid_best - 1e-9, "newton {f} grid {grid_best}");
    }

    #[test]
    fn separable_item_hits_discrimination_bound() {
        let theta = vec![-1.0, -0.5, 0.5, 1.0];
        let r = ScoredMatrix::from_binary(&[vec![0], vec![0], vec![1], vec![1]]).unwrap();
        let (a, b) = maximize_item(&r, 0, &theta, &[true; 4], &Bounds::default(), (1.0, 0.3));
        assert_eq!(a, 4.0);
        assert!(b.abs() < 1e-6);
    }
}
