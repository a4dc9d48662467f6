//! Joint maximum-likelihood calibration of item parameters and abilities.
//!
//! Each outer iteration
//!
//! 1. re-estimates every ability with the items fixed,
//! 2. re-standardizes the abilities to mean 0 / sd 1 and absorbs the
//!    affine change into (a, b), which leaves every response probability
//!    unchanged,
//! 3. re-estimates every item with the abilities fixed.
//!
//! Rows and columns without an interior maximum (all correct, all
//! incorrect, nothing scored) are pruned before estimation, repeatedly,
//! until the remaining block is non-degenerate. The objective is the
//! log-likelihood of that block; it never decreases across iterations.
//!
//! The standardization in step 2 is applied only as far as the parameter
//! box allows (an affine map never changes the likelihood, clamping
//! would). Abilities of estimated rows use a box three times as wide as
//! the reporting box while the loop runs. Once the loop stops, a final
//! exact standardization is applied and any ability outside the reporting
//! box is clamped and flagged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{maximize_item, maximize_theta, row_status, AbilityFlag, AbilityVector};
use super::model::{row_log_lik, Bounds, ItemParameters};
use crate::error::{Error, Result};
use crate::response_data::ScoredMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bounds: Bounds,
    /// Stop once the outer-iteration log-likelihood gain drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            tolerance: 1e-6,
            max_iterations: 100,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) || self.max_iterations == 0 {
            return Err(Error::Config(format!(
                "tolerance {} / max_iterations {} must be positive",
                self.tolerance, self.max_iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemFlag {
    Ok,
    /// Every scored response correct; set to (a_min, b_min).
    AllCorrect,
    /// Every scored response incorrect; set to (a_min, b_max).
    AllIncorrect,
    /// No scored responses; set to (a_min, 0) clamped into the box.
    NoData,
}

impl ItemFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemFlag::Ok => "ok",
            ItemFlag::AllCorrect => "all_correct",
            ItemFlag::AllIncorrect => "all_incorrect",
            ItemFlag::NoData => "no_data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub gain: f64,
    /// Fraction of the standardizing map applied this iteration (1 = full).
    pub standardization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub items: ItemParameters,
    pub item_flags: Vec<ItemFlag>,
    pub abilities: AbilityVector,
    /// Log-likelihood of the returned parameters over the estimated
    /// (non-degenerate) block.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after initialization (iteration 0) and after every outer
    /// iteration.
    pub trace: Vec<IterationRecord>,
}

struct Block {
    rows: Vec<bool>,
    cols: Vec<bool>,
    row_flags: Vec<AbilityFlag>,
    col_flags: Vec<ItemFlag>,
}

fn col_status(responses: &ScoredMatrix, col: usize, rows: &[bool]) -> ItemFlag {
    let (mut right, mut wrong) = (0usize, 0usize);
    for (i, &active) in rows.iter().enumerate() {
        if !active {
            continue;
        }
        match responses.get(i, col) {
            Some(true) => right += 1,
            Some(false) => wrong += 1,
            None => {}
        }
    }
    match (right, wrong) {
        (0, 0) => ItemFlag::NoData,
        (_, 0) => ItemFlag::AllCorrect,
        (0, _) => ItemFlag::AllIncorrect,
        _ => ItemFlag::Ok,
    }
}

fn prune(responses: &ScoredMatrix) -> Block {
    let (n, m) = (responses.n_rows(), responses.n_cols());
    let mut block = Block {
        rows: vec![true; n],
        cols: vec![true; m],
        row_flags: vec![AbilityFlag::Ok; n],
        col_flags: vec![ItemFlag::Ok; m],
    };
    loop {
        let mut changed = false;
        for i in 0..n {
            if !block.rows[i] {
                continue;
            }
            let status = row_status(responses.row(i), Some(&block.cols));
            if status != AbilityFlag::Ok {
                block.rows[i] = false;
                block.row_flags[i] = status;
                changed = true;
            }
        }
        for j in 0..m {
            if !block.cols[j] {
                continue;
            }
            let status = col_status(responses, j, &block.rows);
            if status != ItemFlag::Ok {
                block.cols[j] = false;
                block.col_flags[j] = status;
                changed = true;
            }
        }
        if !changed {
            return block;
        }
    }
}

fn logit_of(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Population mean and standard deviation of the active entries.
fn moments(theta: &[f64], rows: &[bool]) -> (f64, f64) {
    let n = rows.iter().filter(|&&r| r).count() as f64;
    let mean = theta.iter().zip(rows).filter(|(_, &r)| r).map(|(t, _)| t).sum::<f64>() / n;
    let var = theta
        .iter()
        .zip(rows)
        .filter(|(_, &r)| r)
        .map(|(t, _)| (t - mean) * (t - mean))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

struct State {
    theta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl State {
    fn items(&self) -> ItemParameters {
        ItemParameters {
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    fn objective(&self, responses: &ScoredMatrix, block: &Block) -> f64 {
        let items = self.items();
        let rows: Vec<f64> = (0..responses.n_rows())
            .into_par_iter()
            .map(|i| {
                if block.rows[i] {
                    row_log_lik(responses.row(i), &items, self.theta[i], Some(&block.cols))
                } else {
                    0.0
                }
            })
            .collect();
        rows.iter().sum()
    }

    /// Applies `theta -> (theta - lambda c) / d`, `a -> a d`,
    /// `b -> (b - lambda c) / d` with `d = 1 + lambda (s - 1)`, using the
    /// largest `lambda` in [0, 1] that keeps every active value in the box.
    fn standardize(&mut self, block: &Block, bounds: &Bounds) -> f64 {
        let (c, s) = moments(&self.theta, &block.rows);
        let s = if s > 1e-12 { s } else { 1.0 };
        if c == 0.0 && s == 1.0 {
            return 1.0;
        }
        let mut lambda: f64 = 1.0;
        // value v stays inside [lo, hi] while
        // (v - lo) - lambda (c + lo (s - 1)) >= 0 and
        // (hi - v) + lambda (c + hi (s - 1)) >= 0.
        let mut limit = |v: f64, lo: f64, hi: f64| {
            let k_lo = c + lo * (s - 1.0);
            if k_lo > 0.0 {
                lambda = lambda.min(((v - lo) / k_lo).max(0.0));
            }
            let k_hi = c + hi * (s - 1.0);
            if k_hi < 0.0 {
                lambda = lambda.min(((hi - v) / -k_hi).max(0.0));
            }
        };
        for (i, &t) in self.theta.iter().enumerate() {
            if block.rows[i] {
                limit(t, bounds.theta_min, bounds.theta_max);
            }
        }
        for j in 0..self.b.len() {
            if block.cols[j] {
                limit(self.b[j], bounds.b_min, bounds.b_max);
            }
        }
        for j in 0..self.a.len() {
            if !block.cols[j] {
                continue;
            }
            let a = self.a[j];
            if s > 1.0 {
                lambda = lambda.min(((bounds.a_max / a - 1.0) / (s - 1.0)).max(0.0));
            } else if s < 1.0 {
                lambda = lambda.min(((1.0 - bounds.a_min / a) / (1.0 - s)).max(0.0));
            }
        }
        if lambda <= 0.0 {
            return 0.0;
        }
        let shift = lambda * c;
        let d = 1.0 + lambda * (s - 1.0);
        for (i, t) in self.theta.iter_mut().enumerate() {
            if block.rows[i] {
                *t = ((*t - shift) / d).clamp(bounds.theta_min, bounds.theta_max);
            }
        }
        for j in 0..self.a.len() {
            if block.cols[j] {
                self.a[j] = (self.a[j] * d).clamp(bounds.a_min, bounds.a_max);
                self.b[j] = ((self.b[j] - shift) / d).clamp(bounds.b_min, bounds.b_max);
            }
        }
        lambda
    }
}

/// Alternating joint maximum-likelihood calibration of a 2PL model.
pub fn calibrate(responses: &ScoredMatrix, config: &CalibrationConfig) -> Result<CalibrationResult> {
    config.validate()?;
    let bounds = config.bounds;
    let (n, m) = (responses.n_rows(), responses.n_cols());
    if n < 2 || m < 2 {
        return Err(Error::Domain(format!(
            "calibration needs at least 2 students and 2 items, got {n}x{m}"
        )));
    }

    // Abilities of estimated rows may leave the reporting box while the
    // loop runs; the final scaling clamps and flags them.
    let span = bounds.theta_max - bounds.theta_min;
    let inner = Bounds {
        theta_min: bounds.theta_min - span,
        theta_max: bounds.theta_max + span,
        ..bounds
    };

    let block = prune(responses);
    let mut state = State {
        theta: vec![0.0; n],
        a: vec![1.0f64.clamp(bounds.a_min, bounds.a_max); m],
        b: vec![0.0f64.clamp(bounds.b_min, bounds.b_max); m],
    };
    let active_rows = block.rows.iter().filter(|&&r| r).count();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    if active_rows >= 1 {
        // Starting values from log-odds of the proportion correct.
        for i in 0..n {
            if block.rows[i] {
                let row = responses.row(i);
                let (mut right, mut total) = (0.0, 0.0);
                for (j, cell) in row.iter().enumerate() {
                    if let (true, Some(c)) = (block.cols[j], cell) {
                        total += 1.0;
                        right += f64::from(u8::from(*c));
                    }
                }
                state.theta[i] = logit_of(right / total).clamp(bounds.theta_min, bounds.theta_max);
            }
        }
        let (c, s) = moments(&state.theta, &block.rows);
        let s = if s > 1e-12 { s } else { 1.0 };
        for (i, t) in state.theta.iter_mut().enumerate() {
            if block.rows[i] {
                *t = ((*t - c) / s).clamp(bounds.theta_min, bounds.theta_max);
            }
        }
        for j in 0..m {
            if block.cols[j] {
                let (mut right, mut total) = (0.0, 0.0);
                for i in 0..n {
                    if let (true, Some(c)) = (block.rows[i], responses.get(i, j)) {
                        total += 1.0;
                        right += f64::from(u8::from(c));
                    }
                }
                state.b[j] = (-logit_of(right / total) / super::model::SCALE)
                    .clamp(bounds.b_min, bounds.b_max);
            }
        }

        let mut ll = state.objective(responses, &block);
        trace.push(IterationRecord {
            iteration: 0,
            log_likelihood: ll,
            gain: f64::NAN,
            standardization: 1.0,
        });

        for iter in 1..=config.max_iterations {
            iterations = iter;
            let items = state.items();
            state.theta = (0..n)
                .into_par_iter()
                .map(|i| {
                    if block.rows[i] {
                        maximize_theta(responses.row(i), &items, Some(&block.cols), &inner, state.theta[i])
                    } else {
                        state.theta[i]
                    }
                })
                .collect();

            let lambda = state.standardize(&block, &inner);

            let fitted: Vec<(f64, f64)> = (0..m)
                .into_par_iter()
                .map(|j| {
                    if block.cols[j] {
                        maximize_item(responses, j, &state.theta, &block.rows, &bounds, (state.a[j], state.b[j]))
                    } else {
                        (state.a[j], state.b[j])
                    }
                })
                .collect();
            for (j, (a, b)) in fitted.into_iter().enumerate() {
                state.a[j] = a;
                state.b[j] = b;
            }

            let next = state.objective(responses, &block);
            if !next.is_finite() {
                return Err(Error::Numerical(format!(
                    "log-likelihood became {next} at iteration {iter}"
                )));
            }
            let gain = next - ll;
            ll = next;
            trace.push(IterationRecord {
                iteration: iter,
                log_likelihood: ll,
                gain,
                standardization: lambda,
            });
            if gain < config.tolerance {
                converged = true;
                break;
            }
        }
    } else {
        converged = true;
    }

    let mut flags = block.row_flags.clone();
    finalize_scale(&mut state, &block, &mut flags, &bounds);

    for i in 0..n {
        if !block.rows[i] {
            state.theta[i] = match flags[i] {
                AbilityFlag::AllCorrect => bounds.theta_max,
                _ => bounds.theta_min,
            };
        }
    }
    for j in 0..m {
        let (a, b) = match block.col_flags[j] {
            ItemFlag::Ok => continue,
            ItemFlag::AllCorrect => (bounds.a_min, bounds.b_min),
            ItemFlag::AllIncorrect => (bounds.a_min, bounds.b_max),
            ItemFlag::NoData => (bounds.a_min, 0.0f64.clamp(bounds.b_min, bounds.b_max)),
        };
        state.a[j] = a;
        state.b[j] = b;
    }

    let log_likelihood = if active_rows >= 1 {
        state.objective(responses, &block)
    } else {
        0.0
    };
    Ok(CalibrationResult {
        items: state.items(),
        item_flags: block.col_flags,
        abilities: AbilityVector {
            theta: state.theta,
            flags,
        },
        log_likelihood,
        iterations,
        converged,
        trace,
    })
}

/// Exact mean-0 / sd-1 scaling over the unflagged estimated rows. Values
/// that land outside the ability box are clamped, flagged and dropped from
/// the reference set, and the rest re-scaled until nothing moves.
fn finalize_scale(state: &mut State, block: &Block, flags: &mut [AbilityFlag], bounds: &Bounds) {
    let mut set = block.rows.clone();
    loop {
        if !set.iter().any(|&r| r) {
            return;
        }
        let (c, s) = moments(&state.theta, &set);
        let s = if s > 1e-12 { s } else { 1.0 };
        if c != 0.0 || s != 1.0 {
            for (i, t) in state.theta.iter_mut().enumerate() {
                if set[i] {
                    *t = (*t - c) / s;
                }
            }
            for j in 0..state.a.len() {
                if block.cols[j] {
                    state.a[j] = (state.a[j] * s).clamp(bounds.a_min, bounds.a_max);
                    state.b[j] = ((state.b[j] - c) / s).clamp(bounds.b_min, bounds.b_max);
                }
            }
        }
        let mut clamped_any = false;
        for i in 0..state.theta.len() {
            if set[i] && !(bounds.theta_min..=bounds.theta_max).contains(&state.theta[i]) {
                state.theta[i] = state.theta[i].clamp(bounds.theta_min, bounds.theta_max);
                flags[i] = AbilityFlag::Clamped;
                set[i] = false;
                clamped_any = true;
            }
        }
        if !clamped_any {
            return;
        }
    }
}
