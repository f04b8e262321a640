//! Confusion matrices and the metrics derived from them.
//!
//! Rows are actual classes and columns are predicted classes. A class whose
//! column (or row) is empty gets precision (or recall) 0 and is flagged, so
//! macro averages stay defined on degenerate folds.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", format!("{k} classes need a {k} x {k} matrix")));
        }
        Ok(Self { classes, counts })
    }

    pub fn from_predictions(classes: Vec<String>, actual: &[usize], predicted: &[usize]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::shape(
                "confusion matrix",
                format!("{} labels vs {} predictions", actual.len(), predicted.len()),
            ));
        }
        let mut cm = Self::new(classes);
        for (&a, &p) in actual.iter().zip(predicted) {
            cm.record(a, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        let k = self.classes.len();
        if actual >= k || predicted >= k {
            return Err(Error::InvalidArgument(format!(
                "class pair ({actual}, {predicted}) outside {k} classes"
            )));
        }
        self.counts[actual][predicted] += 1;
        Ok(())
    }

    /// Element-wise sum, for pooling folds.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::InvalidArgument("cannot merge matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// The same matrix with classes reordered so that new class `i` is old
    /// class `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let k = self.classes.len();
        let mut check = order.to_vec();
        check.sort_unstable();
        if check != (0..k).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument("order is not a permutation of the classes".into()));
        }
        Ok(Self {
            classes: order.iter().map(|&i| self.classes[i].clone()).collect(),
            counts: order
                .iter()
                .map(|&r| order.iter().map(|&c| self.counts[r][c]).collect())
                .collect(),
        })
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::InvalidArgument("confusion matrix is empty".into())),
        t => Ok(cm.trace() as f64 / t as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    /// The class was never predicted.
    pub precision_undefined: bool,
    /// The class never occurs.
    pub recall_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub sample_count: u64,
}

pub fn precision_recall(cm: &ConfusionMatrix) -> Result<Metrics> {
    let acc = accuracy(cm)?;
    let per_class: Vec<ClassMetrics> = (0..cm.classes.len())
        .map(|c| {
            let diag = cm.counts[c][c] as f64;
            let (col, row) = (cm.column_sum(c), cm.row_sum(c));
            ClassMetrics {
                class: cm.classes[c].clone(),
                precision: if col == 0 { 0.0 } else { diag / col as f64 },
                recall: if row == 0 { 0.0 } else { diag / row as f64 },
                precision_undefined: col == 0,
                recall_undefined: row == 0,
            }
        })
        .collect();
    let k = per_class.len() as f64;
    Ok(Metrics {
        accuracy: acc,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        per_class,
        sample_count: cm.total(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?} (text, json, csv)"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PerClass {
    precision: Vec<f64>,
    recall: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Macro {
    precision: f64,
    recall: f64,
}

#[derive(Serialize, Deserialize)]
struct Undefined {
    precision: Vec<String>,
    recall: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    schema_version: u32,
    classes: Vec<String>,
    matrix: Vec<Vec<u64>>,
    accuracy: f64,
    per_class: PerClass,
    #[serde(rename = "macro")]
    macro_avg: Macro,
    sample_count: u64,
    undefined: Undefined,
}

fn report_json(cm: &ConfusionMatrix, m: &Metrics) -> ReportJson {
    ReportJson {
        schema_version: REPORT_SCHEMA_VERSION,
        classes: cm.classes.clone(),
        matrix: cm.counts.clone(),
        accuracy: m.accuracy,
        per_class: PerClass {
            precision: m.per_class.iter().map(|c| c.precision).collect(),
            recall: m.per_class.iter().map(|c| c.recall).collect(),
        },
        macro_avg: Macro {
            precision: m.macro_precision,
            recall: m.macro_recall,
        },
        sample_count: m.sample_count,
        undefined: Undefined {
            precision: m.per_class.iter().filter(|c| c.precision_undefined).map(|c| c.class.clone()).collect(),
            recall: m.per_class.iter().filter(|c| c.recall_undefined).map(|c| c.class.clone()).collect(),
        },
    }
}

/// Report as a JSON value, for embedding in larger documents.
pub fn report_value(cm: &ConfusionMatrix, m: &Metrics) -> serde_json::Value {
    serde_json::to_value(report_json(cm, m)).expect("report serializes")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_report(cm: &ConfusionMatrix, m: &Metrics, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report_json(cm, m)).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("actual\\predicted");
            for c in &cm.classes {
                s.push(',');
                s.push_str(&csv_field(c));
            }
            s.push_str(",recall\n");
            for (i, row) in cm.counts.iter().enumerate() {
                s.push_str(&csv_field(&cm.classes[i]));
                for v in row {
                    write!(s, ",{v}").unwrap();
                }
                writeln!(s, ",{}", m.per_class[i].recall).unwrap();
            }
            s
        }
        ReportFormat::Text => {
            let width = cm
                .classes
                .iter()
                .map(|c| c.len())
                .chain(cm.counts.iter().flatten().map(|v| v.to_string().len()))
                .max()
                .unwrap_or(1)
                .max(9);
            let mut s = String::new();
            write!(s, "{:>width$}", "actual").unwrap();
            for c in &cm.classes {
                write!(s, " {c:>width$}").unwrap();
            }
            s.push('\n');
            for (i, row) in cm.counts.iter().enumerate() {
                write!(s, "{:>width$}", cm.classes[i]).unwrap();
                for v in row {
                    write!(s, " {v:>width$}").unwrap();
                }
                s.push('\n');
            }
            writeln!(s, "\naccuracy {:.4} ({} / {})", m.accuracy, cm.trace(), m.sample_count).unwrap();
            writeln!(s, "{:>width$} {:>9} {:>9}", "class", "precision", "recall").unwrap();
            for c in &m.per_class {
                let flag = if c.precision_undefined || c.recall_undefined { "  (empty column/row, set to 0)" } else { "" };
                writeln!(s, "{:>width$} {:>9.4} {:>9.4}{flag}", c.class, c.precision, c.recall).unwrap();
            }
            writeln!(s, "{:>width$} {:>9.4} {:>9.4}", "macro", m.macro_precision, m.macro_recall).unwrap();
            s
        }
    }
}

/// Recovers the matrix from a JSON report.
pub fn parse_report_json(text: &str) -> Result<ConfusionMatrix> {
    let r: ReportJson = serde_json::from_str(text)?;
    if r.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Version {
            found: r.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    ConfusionMatrix::from_counts(r.classes, r.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn uniform_two_class() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![1, 1], vec![1, 1]]).unwrap();
        let m = precision_recall(&cm).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.macro_precision, 0.5);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(accuracy(&ConfusionMatrix::new(names(3))).is_err());
    }

    #[test]
    fn never_predicted_class_is_flagged() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![3, 0], vec![2, 0]]).unwrap();
        let m = precision_recall(&cm).unwrap();
        assert!(m.per_class[1].precision_undefined);
        assert_eq!(m.per_class[1].precision, 0.0);
        assert!(render_report(&cm, &m, ReportFormat::Text).contains("set to 0"));
        let json = render_report(&cm, &m, ReportFormat::Json);
        assert!(json.contains("\"undefined\""));
    }

    #[test]
    fn renders() {
        let cm = ConfusionMatrix::from_counts(names(3), vec![vec![4, 0, 0], vec![0, 5, 0], vec![0, 0, 6]]).unwrap();
        let m = precision_recall(&cm).unwrap();
        let text = render_report(&cm, &m, ReportFormat::Text);
        let rows: Vec<&str> = text.lines().skip(1).take(3).collect();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split_whitespace().skip(1).collect();
            for (j, c) in cells.iter().enumerate() {
                if i != j {
                    assert_eq!(*c, "0");
                }
            }
        }
        let csv = render_report(&cm, &m, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 4);
        let json = render_report(&cm, &m, ReportFormat::Json);
        assert_eq!(parse_report_json(&json).unwrap(), cm);
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn merge_and_permute() {
        let mut a = ConfusionMatrix::from_predictions(names(2), &[0, 1, 1], &[0, 0, 1]).unwrap();
        let b = a.clone();
        a.merge(&b).unwrap();
        assert_eq!(a.counts(), &[vec![2, 0], vec![2, 2]]);
        let p = a.permuted(&[1, 0]).unwrap();
        assert_eq!(p.counts(), &[vec![2, 2], vec![0, 2]]);
        assert!(a.record(2, 0).is_err());
    }
}
