//! Tabular input: CSV frames and the (Y, X) design extracted for a model.

use crate::model_spec::ParameterTable;
use nalgebra::DMatrix;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read data: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}, column `{column}`: `{value}` is not numeric")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("data has no rows")]
    Empty,
}

/// Raw CSV contents; columns are converted on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Frame {
    pub fn from_reader<R: Read>(r: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Frame { header, rows })
    }

    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn col(&self, name: &str) -> Result<usize, DataError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.into()))
    }

    pub fn text_column(&self, name: &str) -> Result<Vec<String>, DataError> {
        let c = self.col(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r[c].as_str() {
                "" | "NA" => Err(DataError::MissingValue {
                    row: i + 1,
                    column: name.into(),
                }),
                s => Ok(s.to_string()),
            })
            .collect()
    }

    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>, DataError> {
        self.text_column(name)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or(DataError::NotNumeric {
                        row: i + 1,
                        column: name.into(),
                        value: s,
                    })
            })
            .collect()
    }
}

/// Observations aligned with a parameter table: `y` is n×m, `x` is n×l.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Self {
        assert_eq!(y.nrows(), x.nrows(), "Y and X row counts differ");
        Dataset { y, x }
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn from_frame(frame: &Frame, table: &ParameterTable) -> Result<Self, DataError> {
        let n = frame.n_rows();
        let build = |names: &[String]| -> Result<DMatrix<f64>, DataError> {
            let mut mat = DMatrix::zeros(n, names.len());
            for (j, name) in names.iter().enumerate() {
                for (i, v) in frame.numeric_column(name)?.into_iter().enumerate() {
                    mat[(i, j)] = v;
                }
            }
            Ok(mat)
        };
        Ok(Dataset {
            y: build(&table.endogenous)?,
            x: build(&table.exogenous)?,
        })
    }

    /// CSV with endogenous then exogenous columns.
    pub fn to_csv(&self, table: &ParameterTable) -> String {
        let mut s = String::new();
        let names: Vec<&str> = table
            .endogenous
            .iter()
            .chain(&table.exogenous)
            .map(String::as_str)
            .collect();
        s.push_str(&names.join(","));
        s.push('\n');
        for i in 0..self.n() {
            let vals: Vec<String> = self
                .y
                .row(i)
                .iter()
                .chain(self.x.row(i).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            s.push_str(&vals.join(","));
            s.push('\n');
        }
        s
    }
}
