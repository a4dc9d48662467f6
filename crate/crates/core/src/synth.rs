//! Seeded synthetic cohorts with known ground truth.
//!
//! The generator uses ChaCha8 seeded from a single `u64`, so a given
//! configuration yields the same cohort on every platform. Draw order is
//! fixed: abilities, discriminations, difficulties, then per student the
//! responses unit by unit, then the exam outcomes.

use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irt::{icc, ItemParameters};
use crate::response_data::{csv_writer, AbsencePolicy, OutcomeLabels, ResponseCell, ResponseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_students: usize,
    pub items_per_test: usize,
    pub n_tests: usize,
    pub seed: u64,
    /// Standard deviation of log(a); the log-mean is 0.
    pub a_log_sd: f64,
    /// Per-unit drift of the difficulty mean: b ~ N(drift (k - 1), b_sd).
    pub b_drift: f64,
    pub b_sd: f64,
    /// Probability that a student misses a whole unit.
    pub absence_rate: f64,
    /// P(pass | theta) = logistic(pass_intercept + pass_slope theta).
    pub pass_intercept: f64,
    pub pass_slope: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 1127,
            items_per_test: 5,
            n_tests: 14,
            seed: 42,
            a_log_sd: 0.3,
            b_drift: 0.05,
            b_sd: 1.0,
            absence_rate: 0.03,
            // Gives a population failure rate of about 0.18 with slope 1.8.
            pass_intercept: 2.3,
            pass_slope: 1.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.items_per_test == 0 || self.n_tests == 0 {
            return Err(Error::Domain(format!(
                "cohort needs students, items and tests; got N={} m={} K={}",
                self.n_students, self.items_per_test, self.n_tests
            )));
        }
        if !(0.0..=1.0).contains(&self.absence_rate) {
            return Err(Error::Domain(format!(
                "absence rate {} outside [0, 1]",
                self.absence_rate
            )));
        }
        let finite = [
            self.a_log_sd,
            self.b_drift,
            self.b_sd,
            self.pass_intercept,
            self.pass_slope,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.a_log_sd < 0.0 || self.b_sd < 0.0 {
            return Err(Error::Domain("distribution parameters must be finite and spreads non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub matrix: ResponseMatrix,
    pub labels: OutcomeLabels,
    pub theta_true: Vec<f64>,
    pub items_true: ItemParameters,
}

fn id_width(count: usize, min: usize) -> usize {
    count.to_string().len().max(min)
}

pub fn student_id(index: usize, n_students: usize) -> String {
    format!("S{:0w$}", index + 1, w = id_width(n_students, 4))
}

pub fn item_id(unit: usize, question: usize, n_tests: usize) -> String {
    format!("L{:0w$}-Q{}", unit, question, w = id_width(n_tests, 2))
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let (n, m, k) = (config.n_students, config.items_per_test, config.n_tests);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let theta: Vec<f64> = (0..n).map(|_| std_normal.sample(&mut rng)).collect();

    let a_dist = LogNormal::new(0.0, config.a_log_sd)
        .map_err(|e| Error::Domain(format!("discrimination distribution: {e}")))?;
    let a: Vec<f64> = (0..m * k).map(|_| a_dist.sample(&mut rng)).collect();
    let mut b = Vec::with_capacity(m * k);
    for unit in 0..k {
        let dist = Normal::new(config.b_drift * unit as f64, config.b_sd)
            .map_err(|e| Error::Domain(format!("difficulty distribution: {e}")))?;
        b.extend((0..m).map(|_| dist.sample(&mut rng)));
    }
    let items = ItemParameters::new(a, b)?;

    let mut cells = Vec::with_capacity(n * m * k);
    for &t in &theta {
        for unit in 0..k {
            if rng.random::<f64>() < config.absence_rate {
                cells.extend(std::iter::repeat_n(ResponseCell::Absent, m));
                continue;
            }
            for q in 0..m {
                let j = unit * m + q;
                let p = icc(t, items.a[j], items.b[j])?;
                cells.push(if rng.random::<f64>() < p {
                    ResponseCell::Correct
                } else {
                    ResponseCell::Incorrect
                });
            }
        }
    }

    let passed: Vec<bool> = theta
        .iter()
        .map(|&t| {
            let p = 1.0 / (1.0 + (-(config.pass_intercept + config.pass_slope * t)).exp());
            rng.random::<f64>() < p
        })
        .collect();

    let student_ids: Vec<String> = (0..n).map(|i| student_id(i, n)).collect();
    let mut item_ids = Vec::with_capacity(m * k);
    let mut item_units = Vec::with_capacity(m * k);
    for unit in 1..=k {
        for q in 1..=m {
            item_ids.push(item_id(unit, q, k));
            item_units.push(unit);
        }
    }
    let matrix = ResponseMatrix::new(student_ids.clone(), item_ids, item_units, cells)?;
    let labels = OutcomeLabels::new(student_ids, passed)?;
    Ok(SyntheticCohort {
        matrix,
        labels,
        theta_true: theta,
        items_true: items,
    })
}

impl SyntheticCohort {
    /// Writes `student_id,theta_true`.
    pub fn write_theta(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv_writer(file);
        wtr.write_record(["student_id", "theta_true"])?;
        for (id, t) in self.matrix.student_ids().iter().zip(&self.theta_true) {
            wtr.write_record([id.clone(), t.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `item_id,a_true,b_true`.
    pub fn write_items(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv_writer(file);
        wtr.write_record(["item_id", "a_true", "b_true"])?;
        for (j, id) in self.matrix.item_ids().iter().enumerate() {
            wtr.write_record([
                id.clone(),
                self.items_true.a[j].to_string(),
                self.items_true.b[j].to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn failure_rate(&self) -> f64 {
        let failed = self.labels.passed().iter().filter(|&&p| !p).count();
        failed as f64 / self.labels.len() as f64
    }
}

/// Correct-answer rate per student; `None` when nothing is scored.
pub fn empirical_car(matrix: &ResponseMatrix, policy: AbsencePolicy) -> Vec<Option<f64>> {
    let scored = matrix.scored_view(policy);
    (0..scored.n_rows())
        .map(|i| {
            let total = scored.scored_count(i);
            (total > 0).then(|| scored.correct_count(i) as f64 / total as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_students: 50,
            items_per_test: 3,
            n_tests: 4,
            ..Default::default()
        }
    }

    #[test]
    fn dimensions_and_ids() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.matrix.n_students(), 50);
        assert_eq!(c.matrix.n_items(), 12);
        assert_eq!(c.matrix.n_tests(), 4);
        assert_eq!(c.matrix.student_ids()[0], "S0001");
        assert_eq!(c.matrix.item_ids()[4], "L02-Q2");
    }

    #[test]
    fn same_seed_same_cohort() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 7, ..small() };
        assert_ne!(generate(&small()).unwrap().matrix, generate(&other).unwrap().matrix);
    }

    #[test]
    fn full_absence() {
        let c = generate(&SynthConfig {
            absence_rate: 1.0,
            ..small()
        })
        .unwrap();
        assert!(c.matrix.cells().iter().all(|&x| x == ResponseCell::Absent));
    }

    #[test]
    fn absence_blanks_whole_units() {
        let c = generate(&SynthConfig {
            absence_rate: 0.3,
            ..small()
        })
        .unwrap();
        let m = c.matrix.items_per_test();
        for i in 0..c.matrix.n_students() {
            for block in c.matrix.row(i).chunks(m) {
                let absent = block.iter().filter(|&&x| x == ResponseCell::Absent).count();
                assert!(absent == 0 || absent == m);
            }
        }
    }

    #[test]
    fn steep_link_orders_outcomes_by_ability() {
        let c = generate(&SynthConfig {
            pass_slope: 1e6,
            ..small()
        })
        .unwrap();
        let mut pairs: Vec<(f64, bool)> = c.theta_true.iter().copied().zip(c.labels.passed().iter().copied()).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let first_pass = pairs.iter().position(|p| p.1).unwrap();
        assert!(pairs[first_pass..].iter().all(|p| p.1));
    }

    #[test]
    fn degenerate_config_rejected() {
        let bad = SynthConfig {
            items_per_test: 0,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Domain(_))));
        let bad = SynthConfig {
            absence_rate: 1.5,
            ..small()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn car_values() {
        let csv = "student_id,L1-a,L1-b\ns1,1,1\ns2,1,0\ns3,NA,NA\n";
        let m = ResponseMatrix::from_reader(csv.as_bytes(), crate::response_data::ColumnLayout::Tagged).unwrap();
        assert_eq!(empirical_car(&m, AbsencePolicy::AsMissing), vec![Some(1.0), Some(0.5), None]);
        assert_eq!(empirical_car(&m, AbsencePolicy::AsIncorrect)[2], Some(0.0));
    }
}
