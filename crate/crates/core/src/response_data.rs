//! Response matrices from weekly learning-check tests.
//!
//! A matrix holds N students by m·K items, where the items of unit k
//! (the k-th weekly test) occupy a contiguous block of m columns. The
//! canonical exchange format is a CSV with a header row:
//!
//! ```text
//! student_id,L01-Q1,L01-Q2,...,L14-Q5
//! S0001,1,0,...,NA
//! ```
//!
//! Cells are `1` (correct), `0` (incorrect) or `NA` (absent).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseCell {
    Correct,
    Incorrect,
    Absent,
}

impl ResponseCell {
    pub fn code(self) -> &'static str {
        match self {
            ResponseCell::Correct => "1",
            ResponseCell::Incorrect => "0",
            ResponseCell::Absent => "NA",
        }
    }

    pub fn parse(code: &str) -> Option<Self> {
        match code {
            "1" => Some(ResponseCell::Correct),
            "0" => Some(ResponseCell::Incorrect),
            "NA" => Some(ResponseCell::Absent),
            _ => None,
        }
    }
}

/// How absent cells enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsencePolicy {
    /// Absent is scored 0.
    #[default]
    AsIncorrect,
    /// Absent cells are dropped from every likelihood sum.
    AsMissing,
}

/// How the header's item columns map onto test units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnLayout {
    /// Item ids carry their unit as an `L<k>-` prefix, e.g. `L07-Q3`.
    Tagged,
    /// Item ids are untagged; consecutive blocks of `items_per_test`
    /// columns form units 1, 2, ...
    Blocks { items_per_test: usize },
}

/// Extracts the unit index from an item id of the form `L<digits>-<rest>`.
pub fn parse_unit_tag(item_id: &str) -> Option<usize> {
    let rest = item_id.strip_prefix('L')?;
    let (digits, _) = rest.split_once('-')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&k| k >= 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseMatrix {
    student_ids: Vec<String>,
    item_ids: Vec<String>,
    item_units: Vec<usize>,
    items_per_test: usize,
    n_tests: usize,
    cells: Vec<ResponseCell>,
}

impl ResponseMatrix {
    /// Builds a validated matrix. `item_units` are 1-based unit indices,
    /// one per item column; `cells` is row-major.
    pub fn new(
        student_ids: Vec<String>,
        item_ids: Vec<String>,
        item_units: Vec<usize>,
        cells: Vec<ResponseCell>,
    ) -> Result<Self> {
        if item_ids.len() != item_units.len() {
            return Err(Error::Integrity(format!(
                "{} item ids but {} unit tags",
                item_ids.len(),
                item_units.len()
            )));
        }
        if item_ids.is_empty() {
            return Err(Error::Integrity("matrix has no item columns".into()));
        }
        if cells.len() != student_ids.len() * item_ids.len() {
            return Err(Error::Integrity(format!(
                "cell count {} does not match {} students x {} items",
                cells.len(),
                student_ids.len(),
                item_ids.len()
            )));
        }
        check_unique("student id", &student_ids)?;
        check_unique("item id", &item_ids)?;
        let (items_per_test, n_tests) = unit_structure(&item_units)?;
        Ok(Self {
            student_ids,
            item_ids,
            item_units,
            items_per_test,
            n_tests,
            cells,
        })
    }

    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Questions per test (m).
    pub fn items_per_test(&self) -> usize {
        self.items_per_test
    }

    /// Number of test units (K).
    pub fn n_tests(&self) -> usize {
        self.n_tests
    }

    pub fn student_ids(&self) -> &[String] {
        &self.student_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn item_units(&self) -> &[usize] {
        &self.item_units
    }

    pub fn cells(&self) -> &[ResponseCell] {
        &self.cells
    }

    pub fn cell(&self, student: usize, item: usize) -> ResponseCell {
        self.cells[student * self.n_items() + item]
    }

    pub fn row(&self, student: usize) -> &[ResponseCell] {
        let n = self.n_items();
        &self.cells[student * n..(student + 1) * n]
    }

    /// True when every cell of the student's row is `Absent`.
    pub fn is_all_absent(&self, student: usize) -> bool {
        self.row(student).iter().all(|&c| c == ResponseCell::Absent)
    }

    /// Units 1..=k: the tentative matrix available after the k-th test.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        self.check_unit(k)?;
        Ok(self.columns(0, k * self.items_per_test))
    }

    /// The N x m matrix of unit k alone.
    pub fn unit_slice(&self, k: usize) -> Result<Self> {
        self.check_unit(k)?;
        let m = self.items_per_test;
        Ok(self.columns((k - 1) * m, k * m))
    }

    fn check_unit(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_tests {
            return Err(Error::Domain(format!(
                "unit {k} outside 1..={}",
                self.n_tests
            )));
        }
        Ok(())
    }

    fn columns(&self, start: usize, end: usize) -> Self {
        let n = self.n_items();
        let mut cells = Vec::with_capacity(self.n_students() * (end - start));
        for i in 0..self.n_students() {
            cells.extend_from_slice(&self.cells[i * n + start..i * n + end]);
        }
        let item_units = self.item_units[start..end].to_vec();
        let first_unit = item_units[0];
        let n_tests = item_units[item_units.len() - 1] - first_unit + 1;
        Self {
            student_ids: self.student_ids.clone(),
            item_ids: self.item_ids[start..end].to_vec(),
            item_units,
            items_per_test: self.items_per_test,
            n_tests,
            cells,
        }
    }

    pub fn scored_view(&self, policy: AbsencePolicy) -> ScoredMatrix {
        let data = self
            .cells
            .iter()
            .map(|c| match (c, policy) {
                (ResponseCell::Correct, _) => Some(true),
                (ResponseCell::Incorrect, _) => Some(false),
                (ResponseCell::Absent, AbsencePolicy::AsIncorrect) => Some(false),
                (ResponseCell::Absent, AbsencePolicy::AsMissing) => None,
            })
            .collect();
        ScoredMatrix {
            n_rows: self.n_students(),
            n_cols: self.n_items(),
            data,
        }
    }

    pub fn load(path: impl AsRef<Path>, layout: ColumnLayout) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, layout)
    }

    pub fn from_reader(reader: impl Read, layout: ColumnLayout) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(rec) => rec?,
            None => return Err(Error::Integrity("empty matrix file".into())),
        };
        if header.len() < 2 {
            return Err(Error::Integrity(
                "header must name student_id followed by at least one item".into(),
            ));
        }
        let item_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let item_units = match layout {
            ColumnLayout::Tagged => item_ids
                .iter()
                .enumerate()
                .map(|(j, id)| {
                    parse_unit_tag(id).ok_or_else(|| Error::Parse {
                        row: 1,
                        col: j + 2,
                        msg: format!("item id {id:?} has no L<k>- unit tag"),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            ColumnLayout::Blocks { items_per_test } => {
                if items_per_test == 0 || !item_ids.len().is_multiple_of(items_per_test) {
                    return Err(Error::Integrity(format!(
                        "{} items do not split into blocks of {items_per_test}",
                        item_ids.len()
                    )));
                }
                (0..item_ids.len()).map(|j| j / items_per_test + 1).collect()
            }
        };

        let width = item_ids.len() + 1;
        let mut student_ids = Vec::new();
        let mut cells = Vec::new();
        for (r, rec) in records.enumerate() {
            let rec = rec?;
            let row = r + 2;
            if rec.len() != width {
                return Err(Error::Integrity(format!(
                    "row {row} has {} fields, expected {width}",
                    rec.len()
                )));
            }
            student_ids.push(rec[0].to_owned());
            for (c, field) in rec.iter().enumerate().skip(1) {
                let cell = ResponseCell::parse(field).ok_or_else(|| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("invalid cell code {field:?}; expected 1, 0 or NA"),
                })?;
                cells.push(cell);
            }
        }
        Self::new(student_ids, item_ids, item_units, cells)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(file)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv_writer(writer);
        let mut header = vec!["student_id"];
        header.extend(self.item_ids.iter().map(String::as_str));
        wtr.write_record(&header)?;
        for (i, id) in self.student_ids.iter().enumerate() {
            let mut rec = Vec::with_capacity(self.n_items() + 1);
            rec.push(id.as_str());
            rec.extend(self.row(i).iter().map(|c| c.code()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<matrix writer>", e))?;
        Ok(())
    }
}

pub(crate) fn csv_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer)
}

fn check_unique(what: &str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Integrity(format!("duplicate {what} {id:?}")));
        }
    }
    Ok(())
}

/// Returns (m, K) after checking the tags are non-decreasing, contiguous
/// from the first unit, and every unit owns the same number of items.
fn unit_structure(units: &[usize]) -> Result<(usize, usize)> {
    let first = units[0];
    let mut counts: Vec<usize> = Vec::new();
    let mut current = first;
    for &u in units {
        if u == current && !counts.is_empty() {
            *counts.last_mut().unwrap() += 1;
        } else if counts.is_empty() {
            counts.push(1);
        } else if u == current + 1 {
            current = u;
            counts.push(1);
        } else {
            return Err(Error::Integrity(format!(
                "unit tags must be non-decreasing and contiguous; found {u} after {current}"
            )));
        }
    }
    if first != 1 {
        return Err(Error::Integrity(format!(
            "unit tags must start at 1, found {first}"
        )));
    }
    let m = counts[0];
    if let Some((k, &c)) = counts.iter().enumerate().find(|(_, &c)| c != m) {
        return Err(Error::Integrity(format!(
            "unit {} has {c} items, expected {m}",
            k + 1
        )));
    }
    Ok((m, counts.len()))
}

/// Dichotomous view of a response matrix; `None` marks a cell excluded
/// from the likelihood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<Option<bool>>,
}

impl ScoredMatrix {
    /// Row-major constructor, mainly for tests and direct library use.
    pub fn from_rows(rows: &[Vec<Option<bool>>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Integrity("ragged scored rows".into()));
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// Fully observed 0/1 rows.
    pub fn from_binary(rows: &[Vec<u8>]) -> Result<Self> {
        let rows: Vec<Vec<Option<bool>>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| Some(v != 0)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<bool> {
        self.data[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[Option<bool>] {
        &self.data[row * self.n_cols..(row + 1) * self.n_cols]
    }

    pub fn scored_count(&self, row: usize) -> usize {
        self.row(row).iter().filter(|c| c.is_some()).count()
    }

    pub fn correct_count(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&c| c == Some(true)).count()
    }
}

/// Final-exam outcomes keyed by student id; `passed = true` is success.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OutcomeLabels {
    student_ids: Vec<String>,
    passed: Vec<bool>,
}

impl OutcomeLabels {
    pub fn new(student_ids: Vec<String>, passed: Vec<bool>) -> Result<Self> {
        if student_ids.len() != passed.len() {
            return Err(Error::Integrity(format!(
                "{} label ids but {} outcomes",
                student_ids.len(),
                passed.len()
            )));
        }
        check_unique("student id", &student_ids)?;
        Ok(Self {
            student_ids,
            passed,
        })
    }

    pub fn len(&self) -> usize {
        self.passed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passed.is_empty()
    }

    pub fn student_ids(&self) -> &[String] {
        &self.student_ids
    }

    pub fn passed(&self) -> &[bool] {
        &self.passed
    }

    /// Outcome per id in `ids`, `None` where the student is unlabeled.
    pub fn aligned_to(&self, ids: &[String]) -> Vec<Option<bool>> {
        let lookup: HashMap<&str, bool> = self
            .student_ids
            .iter()
            .map(String::as_str)
            .zip(self.passed.iter().copied())
            .collect();
        ids.iter().map(|id| lookup.get(id.as_str()).copied()).collect()
    }

    /// Outcome per id in `ids`; every id must be labeled.
    pub fn require_all(&self, ids: &[String]) -> Result<Vec<bool>> {
        self.aligned_to(ids)
            .into_iter()
            .zip(ids)
            .map(|(label, id)| {
                label.ok_or_else(|| Error::Integrity(format!("student {id:?} has no outcome label")))
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        match records.next() {
            Some(h) => {
                let h = h?;
                if h.len() != 2 || &h[0] != "student_id" || &h[1] != "passed" {
                    return Err(Error::Parse {
                        row: 1,
                        col: 1,
                        msg: "labels header must be student_id,passed".into(),
                    });
                }
            }
            None => return Err(Error::Integrity("empty labels file".into())),
        }
        let mut ids = Vec::new();
        let mut passed = Vec::new();
        for (r, rec) in records.enumerate() {
            let rec = rec?;
            let row = r + 2;
            if rec.len() != 2 {
                return Err(Error::Integrity(format!(
                    "labels row {row} has {} fields, expected 2",
                    rec.len()
                )));
            }
            ids.push(rec[0].to_owned());
            passed.push(match &rec[1] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        row,
                        col: 2,
                        msg: format!("invalid outcome {other:?}; expected 1 or 0"),
                    })
                }
            });
        }
        Self::new(ids, passed)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(file)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv_writer(writer);
        wtr.write_record(["student_id", "passed"])?;
        for (id, &p) in self.student_ids.iter().zip(&self.passed) {
            wtr.write_record([id.as_str(), if p { "1" } else { "0" }])?;
        }
        wtr.flush().map_err(|e| Error::io("<labels writer>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_csv() -> &'static str {
        "student_id,L01-Q1,L01-Q2,L02-Q1,L02-Q2\n\
         a,1,0,NA,1\n\
         b,0,0,1,1\n\
         c,1,1,0,NA\n"
    }

    #[test]
    fn all_correct_matrix() {
        let csv = "student_id,L1-a,L1-b,L2-a,L2-b\ns1,1,1,1,1\ns2,1,1,1,1\ns3,1,1,1,1\n";
        let m = ResponseMatrix::from_reader(csv.as_bytes(), ColumnLayout::Tagged).unwrap();
        assert_eq!(m.n_students(), 3);
        assert_eq!(m.items_per_test(), 2);
        assert_eq!(m.n_tests(), 2);
        let correct = m.cells().iter().filter(|&&c| c == ResponseCell::Correct).count();
        assert_eq!(correct, 12);
    }

    #[test]
    fn bad_cell_code_reports_position() {
        let csv = "student_id,L1-a,L1-b,L2-a,L2-b\n\
                   s1,1,1,1,1\ns2,1,1,1,1\ns3,1,1,1,1\ns4,1,2,1,1\n";
        let err = ResponseMatrix::from_reader(csv.as_bytes(), ColumnLayout::Tagged).unwrap_err();
        match err {
            Error::Parse { row, col, .. } => assert_eq!((row, col), (5, 3)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_student_and_ragged_row_are_integrity_errors() {
        let dup = "student_id,L1-a\ns1,1\ns1,0\n";
        assert!(matches!(
            ResponseMatrix::from_reader(dup.as_bytes(), ColumnLayout::Tagged),
            Err(Error::Integrity(_))
        ));
        let ragged = "student_id,L1-a,L1-b\ns1,1,0\ns2,1\n";
        assert!(matches!(
            ResponseMatrix::from_reader(ragged.as_bytes(), ColumnLayout::Tagged),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn unit_tags_are_validated() {
        assert_eq!(parse_unit_tag("L07-Q3"), Some(7));
        assert_eq!(parse_unit_tag("L0-Q3"), None);
        assert_eq!(parse_unit_tag("Q3"), None);
        // uneven units
        let uneven = "student_id,L1-a,L1-b,L2-a\ns1,1,0,1\n";
        assert!(ResponseMatrix::from_reader(uneven.as_bytes(), ColumnLayout::Tagged).is_err());
        // decreasing
        let dec = "student_id,L2-a,L1-a\ns1,1,0\n";
        assert!(ResponseMatrix::from_reader(dec.as_bytes(), ColumnLayout::Tagged).is_err());
        // untagged ids with a block layout
        let plain = "student_id,q1,q2,q3,q4\ns1,1,0,1,0\n";
        let m = ResponseMatrix::from_reader(
            plain.as_bytes(),
            ColumnLayout::Blocks { items_per_test: 2 },
        )
        .unwrap();
        assert_eq!(m.item_units(), &[1, 1, 2, 2]);
    }

    #[test]
    fn prefix_and_unit_slice() {
        let m = ResponseMatrix::from_reader(small_csv().as_bytes(), ColumnLayout::Tagged).unwrap();
        assert_eq!(m.prefix(2).unwrap(), m);
        let p1 = m.prefix(1).unwrap();
        assert_eq!(p1.n_items(), 2);
        assert_eq!(p1.n_tests(), 1);
        let u2 = m.unit_slice(2).unwrap();
        assert_eq!(u2.item_ids(), &["L02-Q1", "L02-Q2"]);
        assert_eq!(u2.row(0), &[ResponseCell::Absent, ResponseCell::Correct]);
        assert!(matches!(m.prefix(0), Err(Error::Domain(_))));
        assert!(matches!(m.unit_slice(3), Err(Error::Domain(_))));
    }

    #[test]
    fn scored_view_policies() {
        let m = ResponseMatrix::from_reader(small_csv().as_bytes(), ColumnLayout::Tagged).unwrap();
        let inc = m.scored_view(AbsencePolicy::AsIncorrect);
        let mis = m.scored_view(AbsencePolicy::AsMissing);
        assert_eq!(inc.get(0, 2), Some(false));
        assert_eq!(mis.get(0, 2), None);
        assert_eq!(mis.scored_count(0), 3);
        assert_eq!(inc.scored_count(0), 4);

        let all_absent = "student_id,L1-a,L1-b\ns1,NA,NA\ns2,1,0\n";
        let m = ResponseMatrix::from_reader(all_absent.as_bytes(), ColumnLayout::Tagged).unwrap();
        assert!(m.is_all_absent(0));
        assert_eq!(
            m.scored_view(AbsencePolicy::AsIncorrect).row(0),
            &[Some(false), Some(false)]
        );
        assert_eq!(m.scored_view(AbsencePolicy::AsMissing).scored_count(0), 0);
    }

    #[test]
    fn no_absent_cells_identical_under_both_policies() {
        let csv = "student_id,L1-a,L1-b\ns1,1,0\ns2,0,0\n";
        let m = ResponseMatrix::from_reader(csv.as_bytes(), ColumnLayout::Tagged).unwrap();
        assert_eq!(
            m.scored_view(AbsencePolicy::AsIncorrect),
            m.scored_view(AbsencePolicy::AsMissing)
        );
    }

    #[test]
    fn emit_is_byte_exact() {
        let m = ResponseMatrix::from_reader(small_csv().as_bytes(), ColumnLayout::Tagged).unwrap();
        let mut out = Vec::new();
        m.to_writer(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), small_csv());
    }

    #[test]
    fn labels_round_trip_and_alignment() {
        let csv = "student_id,passed\nb,1\na,0\n";
        let labels = OutcomeLabels::from_reader(csv.as_bytes()).unwrap();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(labels.aligned_to(&ids), vec![Some(false), Some(true), None]);
        assert!(matches!(labels.require_all(&ids), Err(Error::Integrity(_))));
        let mut out = Vec::new();
        labels.to_writer(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), csv);
        assert!(OutcomeLabels::from_reader("student_id,passed\na,2\n".as_bytes()).is_err());
    }
}
