//! Nearest-neighbor outcome prediction over cumulative ability trends.
//!
//! The distance between two students at horizon k is the root mean
//! squared difference of their trajectories over units 1..k. A student's
//! predicted success value is the fraction of the n nearest labeled
//! students who passed; the failure probability is its complement.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::response_data::csv_writer;
use crate::trends::{AbilityTrend, TrendKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Equal distances are ordered by ascending student id.
    #[default]
    StudentId,
    /// Equal distances are ordered by row position in the trend.
    RowOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    /// Every labeled student is predicted from all other students.
    #[default]
    #[serde(alias = "loo")]
    LeaveOneOut,
    /// Unlabeled students are predicted from the labeled ones.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub n_neighbors: usize,
    pub tie_break: TieBreak,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 10,
            tie_break: TieBreak::StudentId,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub student_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailurePrediction {
    pub index: usize,
    pub student_id: String,
    pub k: usize,
    /// Neighbors who passed.
    pub successes: usize,
    /// Predicted success value, `successes / n_neighbors`.
    pub mu: f64,
    /// `1 - mu`.
    pub p_fail: f64,
    /// Selected neighbors, nearest first.
    pub neighbors: Vec<Neighbor>,
}

/// Root mean squared difference of two trajectories.
pub(crate) fn rms_distance(x: &[f64], y: &[f64]) -> f64 {
    let sum: f64 = x.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    (sum / x.len() as f64).sqrt()
}

pub fn similarity(trend: &AbilityTrend, i: usize, j: usize, k: usize) -> Result<f64> {
    if i == j {
        return Err(Error::Domain(format!("similarity of student {i} with itself")));
    }
    check_student(trend, i)?;
    check_student(trend, j)?;
    Ok(rms_distance(trend.trajectory(i, k)?, trend.trajectory(j, k)?))
}

fn check_student(trend: &AbilityTrend, i: usize) -> Result<()> {
    if i >= trend.n_students() {
        return Err(Error::Domain(format!(
            "student index {i} outside a cohort of {}",
            trend.n_students()
        )));
    }
    Ok(())
}

fn check_trend(trend: &AbilityTrend) -> Result<()> {
    if trend.kind() != TrendKind::Cumulative {
        return Err(Error::Domain("neighbor prediction needs a cumulative trend".into()));
    }
    Ok(())
}

/// The `n_neighbors` reference students closest to student `i`, nearest
/// first.
pub fn nearest_neighbors(
    trend: &AbilityTrend,
    i: usize,
    k: usize,
    reference: &[usize],
    config: &SimilarityConfig,
) -> Result<Vec<Neighbor>> {
    check_trend(trend)?;
    check_student(trend, i)?;
    if config.n_neighbors == 0 {
        return Err(Error::Domain("n_neighbors must be at least 1".into()));
    }
    if reference.len() < config.n_neighbors {
        return Err(Error::Domain(format!(
            "reference cohort of {} is smaller than n_neighbors = {}",
            reference.len(),
            config.n_neighbors
        )));
    }
    if reference.contains(&i) {
        return Err(Error::Domain(format!("reference cohort contains the target student {i}")));
    }
    let target = trend.trajectory(i, k)?;
    let ids = trend.student_ids();
    let mut scored = reference
        .iter()
        .map(|&j| {
            check_student(trend, j)?;
            Ok((j, rms_distance(target, trend.trajectory(j, k)?)))
        })
        .collect::<Result<Vec<_>>>()?;

    let order = |x: &(usize, f64), y: &(usize, f64)| -> Ordering {
        x.1.total_cmp(&y.1).then_with(|| match config.tie_break {
            TieBreak::StudentId => ids[x.0].cmp(&ids[y.0]),
            TieBreak::RowOrder => x.0.cmp(&y.0),
        })
    };
    let n = config.n_neighbors;
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, order);
        scored.truncate(n);
    }
    scored.sort_by(order);
    Ok(scored
        .into_iter()
        .map(|(j, distance)| Neighbor {
            index: j,
            student_id: ids[j].clone(),
            distance,
        })
        .collect())
}

/// Neighbor vote for student `i`. `labels` is aligned to the trend's
/// students; every reference student must be labeled.
pub fn predict(
    trend: &AbilityTrend,
    i: usize,
    k: usize,
    reference: &[usize],
    labels: &[Option<bool>],
    config: &SimilarityConfig,
) -> Result<FailurePrediction> {
    if labels.len() != trend.n_students() {
        return Err(Error::Integrity(format!(
            "{} labels for {} students",
            labels.len(),
            trend.n_students()
        )));
    }
    let neighbors = nearest_neighbors(trend, i, k, reference, config)?;
    let mut successes = 0;
    for nb in &neighbors {
        match labels[nb.index] {
            Some(true) => successes += 1,
            Some(false) => {}
            None => {
                return Err(Error::Integrity(format!(
                    "reference student {:?} has no outcome label",
                    nb.student_id
                )))
            }
        }
    }
    let mu = successes as f64 / neighbors.len() as f64;
    Ok(FailurePrediction {
        index: i,
        student_id: trend.student_ids()[i].clone(),
        k,
        successes,
        mu,
        p_fail: 1.0 - mu,
        neighbors,
    })
}

/// Predictions for a whole cohort at horizon `k`, in trend row order.
pub fn predict_cohort(
    trend: &AbilityTrend,
    k: usize,
    labels: &[Option<bool>],
    config: &SimilarityConfig,
    mode: PredictionMode,
) -> Result<Vec<FailurePrediction>> {
    check_trend(trend)?;
    trend.check_horizon(k)?;
    if labels.len() != trend.n_students() {
        return Err(Error::Integrity(format!(
            "{} labels for {} students",
            labels.len(),
            trend.n_students()
        )));
    }
    let n = trend.n_students();
    match mode {
        PredictionMode::LeaveOneOut => {
            if let Some(i) = labels.iter().position(Option::is_none) {
                return Err(Error::Integrity(format!(
                    "student {:?} is unlabeled; leave-one-out needs every outcome",
                    trend.student_ids()[i]
                )));
            }
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let reference: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    predict(trend, i, k, &reference, labels, config)
                })
                .collect()
        }
        PredictionMode::Reference => {
            let reference: Vec<usize> = (0..n).filter(|&j| labels[j].is_some()).collect();
            (0..n)
                .into_par_iter()
                .filter(|&i| labels[i].is_none())
                .map(|i| predict(trend, i, k, &reference, labels, config))
                .collect()
        }
    }
}

/// One row of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub student_id: String,
    pub k: usize,
    pub mu: f64,
    pub p_fail: f64,
    pub neighbor_ids: Vec<String>,
}

impl From<&FailurePrediction> for PredictionRecord {
    fn from(p: &FailurePrediction) -> Self {
        Self {
            student_id: p.student_id.clone(),
            k: p.k,
            mu: p.mu,
            p_fail: p.p_fail,
            neighbor_ids: p.neighbors.iter().map(|n| n.student_id.clone()).collect(),
        }
    }
}

/// Writes `student_id,k,mu,p_fail,neighbor_ids` with `;`-separated ids.
pub fn write_predictions(records: &[PredictionRecord], writer: impl Write) -> Result<()> {
    let mut wtr = csv_writer(writer);
    wtr.write_record(["student_id", "k", "mu", "p_fail", "neighbor_ids"])?;
    for r in records {
        wtr.write_record([
            r.student_id.clone(),
            r.k.to_string(),
            r.mu.to_string(),
            r.p_fail.to_string(),
            r.neighbor_ids.join(";"),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<prediction writer>", e))?;
    Ok(())
}

pub fn save_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_predictions(records, File::create(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_predictions(reader: impl Read) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Integrity("empty prediction file".into()))??;
    if header.iter().collect::<Vec<_>>() != ["student_id", "k", "mu", "p_fail", "neighbor_ids"] {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "prediction header must be student_id,k,mu,p_fail,neighbor_ids".into(),
        });
    }
    let mut out = Vec::new();
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        let row = r + 2;
        if rec.len() != 5 {
            return Err(Error::Integrity(format!("prediction row {row} has {} fields", rec.len())));
        }
        let parse_err = |col: usize, what: &str| Error::Parse {
            row,
            col,
            msg: format!("invalid {what} {:?}", &rec[col - 1]),
        };
        out.push(PredictionRecord {
            student_id: rec[0].to_owned(),
            k: rec[1].parse().map_err(|_| parse_err(2, "horizon"))?,
            mu: rec[2].parse().map_err(|_| parse_err(3, "mu"))?,
            p_fail: rec[3].parse().map_err(|_| parse_err(4, "p_fail"))?,
            neighbor_ids: if rec[4].is_empty() {
                Vec::new()
            } else {
                rec[4].split(';').map(str::to_owned).collect()
            },
        });
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    read_predictions(File::open(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trend(rows: &[&[f64]]) -> AbilityTrend {
        let k = rows[0].len();
        let ids = (0..rows.len()).map(|i| format!("s{i:02}")).collect();
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        AbilityTrend::from_values(TrendKind::Cumulative, ids, k, values).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let t = trend(&[&[0.0, 1.0], &[1.0, 2.0], &[0.0, 1.0], &[3.5, 4.5]]);
        assert_eq!(similarity(&t, 0, 1, 2).unwrap(), 1.0);
        assert_eq!(similarity(&t, 0, 2, 2).unwrap(), 0.0);
        assert_eq!(similarity(&t, 0, 3, 2).unwrap(), 3.5);
        assert_eq!(similarity(&t, 0, 1, 1).unwrap(), 1.0);
        assert!(matches!(similarity(&t, 1, 1, 2), Err(Error::Domain(_))));
        assert!(similarity(&t, 0, 1, 3).is_err());
    }

    #[test]
    fn tie_at_cut_admits_lower_id() {
        // s01 and s02 are equidistant from s00; only one slot.
        let t = trend(&[&[0.0], &[1.0], &[-1.0], &[5.0]]);
        let cfg = SimilarityConfig {
            n_neighbors: 1,
            ..Default::default()
        };
        let nb = nearest_neighbors(&t, 0, 1, &[3, 2, 1], &cfg).unwrap();
        assert_eq!(nb[0].student_id, "s01");
    }

    #[test]
    fn reference_of_exact_size_returns_all() {
        let rows: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 * 0.37 - 2.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let t = trend(&refs);
        let reference: Vec<usize> = (1..11).collect();
        let nb = nearest_neighbors(&t, 0, 1, &reference, &SimilarityConfig::default()).unwrap();
        let mut got: Vec<usize> = nb.iter().map(|n| n.index).collect();
        got.sort();
        assert_eq!(got, reference);
        assert!(nb.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn reference_errors() {
        let t = trend(&[&[0.0], &[1.0], &[2.0]]);
        let cfg = SimilarityConfig::default();
        assert!(matches!(nearest_neighbors(&t, 0, 1, &[1, 2], &cfg), Err(Error::Domain(_))));
        let one = SimilarityConfig {
            n_neighbors: 1,
            ..cfg
        };
        assert!(matches!(nearest_neighbors(&t, 0, 1, &[0, 1], &one), Err(Error::Domain(_))));
    }

    #[test]
    fn vote_arithmetic() {
        let rows: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let t = trend(&refs);
        let reference: Vec<usize> = (1..11).collect();
        let mut labels = vec![Some(true); 11];
        let p = predict(&t, 0, 1, &reference, &labels, &SimilarityConfig::default()).unwrap();
        assert_eq!((p.mu, p.p_fail, p.successes), (1.0, 0.0, 10));
        for l in labels.iter_mut().skip(7) {
            *l = Some(false);
        }
        let p = predict(&t, 0, 1, &reference, &labels, &SimilarityConfig::default()).unwrap();
        assert_eq!(p.successes, 6);
        assert_eq!(p.mu, 0.6);
        assert!((p.p_fail - 0.4).abs() < 1e-15);
        labels[3] = None;
        assert!(matches!(
            predict(&t, 0, 1, &reference, &labels, &SimilarityConfig::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn leave_one_out_on_eleven_uses_the_other_ten() {
        let rows: Vec<Vec<f64>> = (0..11).map(|i| vec![(i * 7 % 11) as f64, i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let t = trend(&refs);
        let labels: Vec<Option<bool>> = (0..11).map(|i| Some(i % 3 != 0)).collect();
        let preds = predict_cohort(&t, 2, &labels, &SimilarityConfig::default(), PredictionMode::LeaveOneOut).unwrap();
        for p in &preds {
            let mut got: Vec<usize> = p.neighbors.iter().map(|n| n.index).collect();
            got.sort();
            let expected: Vec<usize> = (0..11).filter(|&j| j != p.index).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn reference_mode_predicts_unlabeled_only() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let t = trend(&refs);
        let labels = vec![Some(true), Some(false), None, Some(true), None, Some(true)];
        let cfg = SimilarityConfig {
            n_neighbors: 2,
            ..Default::default()
        };
        let preds = predict_cohort(&t, 1, &labels, &cfg, PredictionMode::Reference).unwrap();
        assert_eq!(preds.iter().map(|p| p.index).collect::<Vec<_>>(), vec![2, 4]);
        // student 2 at 2.0: nearest labeled are s01 (1.0) and s03 (3.0).
        assert_eq!(preds[0].successes, 1);
        assert!(matches!(
            predict_cohort(&t, 1, &labels, &cfg, PredictionMode::LeaveOneOut),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn prediction_file_round_trip() {
        let recs = vec![PredictionRecord {
            student_id: "s1".into(),
            k: 7,
            mu: 0.7,
            p_fail: 1.0 - 0.7,
            neighbor_ids: vec!["a".into(), "b".into()],
        }];
        let mut out = Vec::new();
        write_predictions(&recs, &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.starts_with("student_id,k,mu,p_fail,neighbor_ids\ns1,7,0.7,"));
        assert!(text.ends_with(",a;b\n"));
        assert_eq!(read_predictions(out.as_slice()).unwrap(), recs);
    }
}
