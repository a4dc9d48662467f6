//! Ability trends across test units.
//!
//! A per-unit trend calibrates each unit's N x m block on its own. A
//! cumulative trend calibrates units 1..k for every k, so column k is the
//! ability estimate available right after the k-th test.

use std::fs::File;
use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irt::{calibrate, estimate_abilities, AbilityFlag, CalibrationConfig, CalibrationResult};
use crate::response_data::{csv_writer, AbsencePolicy, ResponseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrendKind {
    PerUnit,
    Cumulative,
}

/// Where the item parameters of a cumulative column come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemSource {
    /// Items and abilities re-estimated from units 1..k only.
    #[default]
    Recalibrate,
    /// Items fixed from a full-matrix calibration; only abilities are
    /// estimated per prefix. Uses responses from later units and exists
    /// for comparison only.
    FullMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub policy: AbsencePolicy,
    pub calibration: CalibrationConfig,
    pub item_source: ItemSource,
}

/// Convergence summary of one trend column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnFit {
    pub unit: usize,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbilityTrend {
    kind: TrendKind,
    student_ids: Vec<String>,
    n_tests: usize,
    /// Row-major N x K; NaN outside the computed units.
    values: Vec<f64>,
    flags: Vec<Option<AbilityFlag>>,
    present: Vec<bool>,
    fits: Vec<ColumnFit>,
}

impl AbilityTrend {
    pub fn kind(&self) -> TrendKind {
        self.kind
    }

    pub fn student_ids(&self) -> &[String] {
        &self.student_ids
    }

    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_tests(&self) -> usize {
        self.n_tests
    }

    /// Units that were computed, ascending.
    pub fn units(&self) -> Vec<usize> {
        (1..=self.n_tests).filter(|&k| self.present[k - 1]).collect()
    }

    pub fn has_unit(&self, k: usize) -> bool {
        k >= 1 && k <= self.n_tests && self.present[k - 1]
    }

    pub fn fits(&self) -> &[ColumnFit] {
        &self.fits
    }

    pub fn value(&self, student: usize, k: usize) -> Option<f64> {
        self.has_unit(k).then(|| self.values[student * self.n_tests + k - 1])
    }

    pub fn flag(&self, student: usize, k: usize) -> Option<AbilityFlag> {
        if self.has_unit(k) {
            self.flags[student * self.n_tests + k - 1]
        } else {
            None
        }
    }

    pub fn column(&self, k: usize) -> Option<Vec<f64>> {
        self.has_unit(k)
            .then(|| (0..self.n_students()).map(|i| self.values[i * self.n_tests + k - 1]).collect())
    }

    /// Units 1..=k of a student's trajectory.
    pub fn trajectory(&self, student: usize, k: usize) -> Result<&[f64]> {
        self.check_horizon(k)?;
        let start = student * self.n_tests;
        Ok(&self.values[start..start + k])
    }

    pub(crate) fn check_horizon(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_tests {
            return Err(Error::Domain(format!("horizon {k} outside 1..={}", self.n_tests)));
        }
        if let Some(missing) = (1..=k).find(|&u| !self.present[u - 1]) {
            return Err(Error::Domain(format!(
                "trend has no column for unit {missing} (needed for horizon {k})"
            )));
        }
        Ok(())
    }

    /// Builds a trend from dense values; NaN marks an absent entry and a
    /// column is present when all of its entries are finite.
    pub fn from_values(kind: TrendKind, student_ids: Vec<String>, n_tests: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != student_ids.len() * n_tests {
            return Err(Error::Integrity(format!(
                "{} trend values for {} students x {n_tests} units",
                values.len(),
                student_ids.len()
            )));
        }
        let n = student_ids.len();
        let present: Vec<bool> = (0..n_tests)
            .map(|k| n > 0 && (0..n).all(|i| values[i * n_tests + k].is_finite()))
            .collect();
        let flags = values
            .iter()
            .enumerate()
            .map(|(idx, _)| present[idx % n_tests].then_some(AbilityFlag::Ok))
            .collect();
        Ok(Self {
            kind,
            student_ids,
            n_tests,
            values,
            flags,
            present,
            fits: Vec::new(),
        })
    }

    pub fn write(&self, values_path: impl AsRef<Path>, flags_path: impl AsRef<Path>) -> Result<()> {
        let (vp, fp) = (values_path.as_ref(), flags_path.as_ref());
        self.write_values(File::create(vp).map_err(|e| Error::io(vp, e))?)?;
        self.write_flags(File::create(fp).map_err(|e| Error::io(fp, e))?)
    }

    /// `student_id,theta_1,...,theta_K` with `NA` outside the computed units.
    pub fn write_values(&self, writer: impl Write) -> Result<()> {
        self.write_table(writer, "theta", |idx| {
            let v = self.values[idx];
            if v.is_nan() { "NA".to_owned() } else { v.to_string() }
        })
    }

    /// `student_id,flag_1,...,flag_K` with `NA` outside the computed units.
    pub fn write_flags(&self, writer: impl Write) -> Result<()> {
        self.write_table(writer, "flag", |idx| {
            self.flags[idx].map_or_else(|| "NA".to_owned(), |f| f.as_str().to_owned())
        })
    }

    fn write_table(&self, writer: impl Write, prefix: &str, cell: impl Fn(usize) -> String) -> Result<()> {
        let mut wtr = csv_writer(writer);
        let mut header = vec!["student_id".to_owned()];
        header.extend((1..=self.n_tests).map(|k| format!("{prefix}_{k}")));
        wtr.write_record(&header)?;
        for (i, id) in self.student_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend((0..self.n_tests).map(|k| cell(i * self.n_tests + k)));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<trend writer>", e))?;
        Ok(())
    }

    pub fn load(values_path: impl AsRef<Path>, flags_path: Option<&Path>, kind: TrendKind) -> Result<Self> {
        let vp = values_path.as_ref();
        let mut trend = Self::from_reader(File::open(vp).map_err(|e| Error::io(vp, e))?, kind)?;
        if let Some(fp) = flags_path {
            trend.read_flags(File::open(fp).map_err(|e| Error::io(fp, e))?)?;
        }
        Ok(trend)
    }

    pub fn from_reader(reader: impl Read, kind: TrendKind) -> Result<Self> {
        let (ids, n_tests, cells) = read_table(reader, "theta")?;
        let values = cells
            .iter()
            .enumerate()
            .map(|(idx, s)| {
                if s == "NA" {
                    Ok(f64::NAN)
                } else {
                    s.parse::<f64>().map_err(|_| Error::Parse {
                        row: idx / n_tests + 2,
                        col: idx % n_tests + 2,
                        msg: format!("invalid ability value {s:?}"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(kind, ids, n_tests, values)
    }

    fn read_flags(&mut self, reader: impl Read) -> Result<()> {
        let (ids, n_tests, cells) = read_table(reader, "flag")?;
        if ids != self.student_ids || n_tests != self.n_tests {
            return Err(Error::Integrity("flags file does not match the trend file".into()));
        }
        for (idx, s) in cells.iter().enumerate() {
            self.flags[idx] = if s == "NA" {
                None
            } else {
                Some(AbilityFlag::parse(s).ok_or_else(|| Error::Parse {
                    row: idx / n_tests + 2,
                    col: idx % n_tests + 2,
                    msg: format!("invalid flag {s:?}"),
                })?)
            };
        }
        Ok(())
    }
}

fn read_table(reader: impl Read, prefix: &str) -> Result<(Vec<String>, usize, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Integrity("empty trend file".into()))??;
    let n_tests = header.len().saturating_sub(1);
    for (k, name) in header.iter().enumerate().skip(1) {
        if name != format!("{prefix}_{k}") {
            return Err(Error::Parse {
                row: 1,
                col: k + 1,
                msg: format!("expected column {prefix}_{k}, found {name:?}"),
            });
        }
    }
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    for (r, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != n_tests + 1 {
            return Err(Error::Integrity(format!(
                "trend row {} has {} fields, expected {}",
                r + 2,
                rec.len(),
                n_tests + 1
            )));
        }
        ids.push(rec[0].to_owned());
        cells.extend(rec.iter().skip(1).map(str::to_owned));
    }
    Ok((ids, n_tests, cells))
}

fn check_range(matrix: &ResponseMatrix, units: &RangeInclusive<usize>) -> Result<()> {
    if units.is_empty() || *units.start() == 0 || *units.end() > matrix.n_tests() {
        return Err(Error::Domain(format!(
            "unit range {}..={} outside 1..={}",
            units.start(),
            units.end(),
            matrix.n_tests()
        )));
    }
    Ok(())
}

struct Column {
    unit: usize,
    theta: Vec<f64>,
    flags: Vec<AbilityFlag>,
    fit: ColumnFit,
}

fn column_from(unit: usize, sub: &ResponseMatrix, result: CalibrationResult) -> Column {
    let mut flags = result.abilities.flags;
    for (i, flag) in flags.iter_mut().enumerate() {
        if sub.is_all_absent(i) {
            *flag = AbilityFlag::NoData;
        }
    }
    Column {
        unit,
        theta: result.abilities.theta,
        flags,
        fit: ColumnFit {
            unit,
            iterations: result.iterations,
            converged: result.converged,
            log_likelihood: result.log_likelihood,
        },
    }
}

fn assemble(kind: TrendKind, matrix: &ResponseMatrix, columns: Vec<Column>) -> AbilityTrend {
    let (n, k_total) = (matrix.n_students(), matrix.n_tests());
    let mut values = vec![f64::NAN; n * k_total];
    let mut flags = vec![None; n * k_total];
    let mut present = vec![false; k_total];
    let mut fits = Vec::with_capacity(columns.len());
    for col in columns {
        present[col.unit - 1] = true;
        for i in 0..n {
            values[i * k_total + col.unit - 1] = col.theta[i];
            flags[i * k_total + col.unit - 1] = Some(col.flags[i]);
        }
        fits.push(col.fit);
    }
    AbilityTrend {
        kind,
        student_ids: matrix.student_ids().to_vec(),
        n_tests: k_total,
        values,
        flags,
        present,
        fits,
    }
}

/// Abilities estimated from each unit's responses alone.
pub fn per_unit_trend(
    matrix: &ResponseMatrix,
    units: RangeInclusive<usize>,
    config: &TrendConfig,
) -> Result<AbilityTrend> {
    check_range(matrix, &units)?;
    let columns = units
        .into_par_iter()
        .map(|k| {
            let sub = matrix.unit_slice(k)?;
            let result = calibrate(&sub.scored_view(config.policy), &config.calibration)?;
            Ok(column_from(k, &sub, result))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(TrendKind::PerUnit, matrix, columns))
}

/// Abilities estimated from units 1..k, for every k in `units`.
pub fn cumulative_trend(
    matrix: &ResponseMatrix,
    units: RangeInclusive<usize>,
    config: &TrendConfig,
) -> Result<AbilityTrend> {
    check_range(matrix, &units)?;
    let full_items = match config.item_source {
        ItemSource::Recalibrate => None,
        ItemSource::FullMatrix => Some(calibrate(&matrix.scored_view(config.policy), &config.calibration)?.items),
    };
    let columns = units
        .into_par_iter()
        .map(|k| {
            let sub = matrix.prefix(k)?;
            let scored = sub.scored_view(config.policy);
            let result = match &full_items {
                None => calibrate(&scored, &config.calibration)?,
                Some(items) => {
                    let n_cols = sub.n_items();
                    let prefix_items = crate::irt::ItemParameters::new(
                        items.a[..n_cols].to_vec(),
                        items.b[..n_cols].to_vec(),
                    )?;
                    let abilities = estimate_abilities(&scored, &prefix_items, &config.calibration.bounds);
                    let ll = crate::irt::log_likelihood(&scored, &prefix_items, &abilities.theta)?;
                    CalibrationResult {
                        item_flags: vec![crate::irt::ItemFlag::Ok; n_cols],
                        items: prefix_items,
                        abilities,
                        log_likelihood: ll,
                        iterations: 0,
                        converged: true,
                        trace: Vec::new(),
                    }
                }
            };
            Ok(column_from(k, &sub, result))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(TrendKind::Cumulative, matrix, columns))
}
