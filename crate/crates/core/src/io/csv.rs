//! Comma-separated reports with a header row and a fixed column order per
//! report type.

use std::fmt;
use std::path::Path;

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::evaluation::{DisentanglingReport, ReconstructionReport, VerificationReport};
use crate::fitting::FitResult;
use crate::network::{EpochReport, PhaseOneEpoch};

/// One CSV cell. Floats use the shortest text that parses back to the same
/// value; missing values are empty cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Field {
    F(f64),
    U(u64),
    Missing,
}

impl From<Option<f64>> for Field {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Field::Missing, Field::F)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::F(v) => write!(f, "{v}"),
            Field::U(v) => write!(f, "{v}"),
            Field::Missing => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Field>>,
}

/// A report with a documented column order.
pub trait CsvReport {
    fn to_table(&self) -> Table;
}

impl CsvReport for VerificationReport {
    fn to_table(&self) -> Table {
        Table {
            header: vec![
                "accuracy_mean",
                "accuracy_std",
                "eer",
                "auc",
                "tar_far10",
                "tar_far1",
                "rank1",
                "rank5",
            ],
            rows: vec![vec![
                Field::F(self.accuracy.mean),
                Field::F(self.accuracy.std),
                Field::F(self.eer),
                Field::F(self.auc),
                Field::F(self.tar_at_far_10pct),
                Field::F(self.tar_at_far_1pct),
                self.rank1.into(),
                self.rank5.into(),
            ]],
        }
    }
}

/// A reconstruction report together with the crop radius it was computed at.
impl CsvReport for (ReconstructionReport, f64) {
    fn to_table(&self) -> Table {
        let (r, radius) = self;
        Table {
            header: vec!["rmse_paper", "mean_vertex_dist", "n_pairs", "crop_radius"],
            rows: vec![vec![
                Field::F(r.rmse),
                Field::F(r.mean_vertex_distance),
                Field::U(r.n_pairs as u64),
                Field::F(*radius),
            ]],
        }
    }
}

impl CsvReport for DisentanglingReport {
    fn to_table(&self) -> Table {
        Table {
            header: vec![
                "intra_subject_distance",
                "inter_subject_distance",
                "displacement_ratio",
                "id_variance_explained",
                "degenerate",
            ],
            rows: vec![vec![
                Field::F(self.intra_subject_distance),
                Field::F(self.inter_subject_distance),
                self.displacement_ratio.into(),
                self.id_variance_explained.into(),
                Field::U(self.degenerate as u64),
            ]],
        }
    }
}

impl CsvReport for [PhaseOneEpoch] {
    fn to_table(&self) -> Table {
        Table {
            header: vec!["epoch", "train_loss", "validation_loss"],
            rows: self
                .iter()
                .enumerate()
                .map(|(i, e)| vec![Field::U(i as u64), Field::F(e.train_loss), Field::F(e.validation_loss)])
                .collect(),
        }
    }
}

impl CsvReport for [EpochReport] {
    fn to_table(&self) -> Table {
        Table {
            header: vec![
                "epoch",
                "lambda_r",
                "train_total",
                "train_recon",
                "train_ident",
                "train_accuracy",
                "val_total",
                "val_recon",
                "val_ident",
                "val_accuracy",
            ],
            rows: self
                .iter()
                .map(|e| {
                    vec![
                        Field::U(e.epoch as u64),
                        Field::F(e.lambda_r),
                        Field::F(e.train.total),
                        Field::F(e.train.recon),
                        Field::F(e.train.ident),
                        Field::F(e.train.accuracy),
                        Field::F(e.validation.total),
                        Field::F(e.validation.recon),
                        Field::F(e.validation.ident),
                        Field::F(e.validation.accuracy),
                    ]
                })
                .collect(),
        }
    }
}

/// Per-pass objective and landmark data term of a fit.
impl CsvReport for FitResult {
    fn to_table(&self) -> Table {
        Table {
            header: vec!["pass", "objective", "data_term"],
            rows: self
                .objective_trace
                .iter()
                .zip(&self.data_trace)
                .enumerate()
                .map(|(i, (o, d))| vec![Field::U(i as u64 + 1), Field::F(*o), Field::F(*d)])
                .collect(),
        }
    }
}

pub fn format_csv(table: &Table) -> String {
    let mut out = table.header.join(",");
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(Field::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    write_atomic(path, format_csv(table).as_bytes())
}

pub fn write_report_csv<R: CsvReport + ?Sized>(report: &R, path: &Path) -> Result<()> {
    write_table(&report.to_table(), path)
}

/// A parsed CSV file: header names and rows of optional numbers.
pub type ParsedCsv = (Vec<String>, Vec<Vec<Option<f64>>>);

/// Header and rows of CSV text; empty cells parse to `None`. `path` is used
/// only in error messages.
pub fn parse_csv(text: &str, path: &Path) -> Result<ParsedCsv> {
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) => h.split(',').map(str::to_string).collect(),
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(parse_err(format!("{} cells for {} columns", cells.len(), header.len())));
        }
        let row = cells
            .into_iter()
            .map(|c| match c {
                "" => Ok(None),
                c => c.parse().map(Some).map_err(|_| parse_err(format!("bad number `{c}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_csv(path: &Path) -> Result<ParsedCsv> {
    parse_csv(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::FoldAccuracy;
    use crate::network::LossReport;

    fn verification() -> VerificationReport {
        VerificationReport {
            accuracy: FoldAccuracy {
                mean: 0.9123456789012345,
                std: 1.0 / 3.0,
            },
            eer: 0.1,
            auc: 0.987654321,
            tar_at_far_10pct: 0.5,
            tar_at_far_1pct: 1e-17,
            rank1: Some(0.75),
            rank5: None,
        }
    }

    #[test]
    fn verification_schema_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        let r = verification();
        write_report_csv(&r, &path).unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header.join(","), "accuracy_mean,accuracy_std,eer,auc,tar_far10,tar_far1,rank1,rank5");
        let expected = [
            Some(r.accuracy.mean),
            Some(r.accuracy.std),
            Some(r.eer),
            Some(r.auc),
            Some(r.tar_at_far_10pct),
            Some(r.tar_at_far_1pct),
            r.rank1,
            r.rank5,
        ];
        assert_eq!(rows, vec![expected.to_vec()]);
    }

    #[test]
    fn reconstruction_schema() {
        let r = ReconstructionReport {
            rmse: 2.5,
            mean_vertex_distance: 1.25,
            n_pairs: 3,
        };
        assert_eq!(format_csv(&(r, 95.0).to_table()), "rmse_paper,mean_vertex_dist,n_pairs,crop_radius\n2.5,1.25,3,95\n");
    }

    #[test]
    fn loss_trace_has_one_row_per_epoch() {
        let rep = LossReport {
            total: 1.5,
            recon: 1.0,
            ident: 1.0,
            accuracy: 0.5,
        };
        let trace: Vec<EpochReport> = (0..3)
            .map(|epoch| EpochReport {
                epoch,
                lambda_r: 0.5,
                train: rep,
                validation: rep,
            })
            .collect();
        let text = format_csv(&trace.to_table());
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().nth(3).unwrap(), "2,0.5,1.5,1,1,0.5,1.5,1,1,0.5");
    }

    #[test]
    fn malformed_rows_are_rejected_with_line_number() {
        let err = parse_csv("a,b\n1,2\n3\n", Path::new("r.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_csv("a,b\n1,x\n", Path::new("r.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }
}
