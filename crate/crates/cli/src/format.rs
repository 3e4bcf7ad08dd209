//! Number formatting and the two report layouts.

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Aligned text columns.
    Table,
    Csv,
}

/// Six significant digits; scientific below 1e-4 and from 1e6 up, trailing
/// zeros dropped. Equal inputs always give equal strings.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    // Rounding to 6 digits first fixes the exponent (999999.7 -> 1e6).
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rows of already formatted cells under a header.
pub struct Report {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    /// Numeric columns are right aligned in table output.
    numeric: Vec<bool>,
}

impl Report {
    pub fn new(header: &[(&str, bool)]) -> Self {
        Report {
            header: header.iter().map(|h| h.0.to_string()).collect(),
            numeric: header.iter().map(|h| h.1).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.header).expect("in-memory write");
                for r in &self.rows {
                    w.write_record(r).expect("in-memory write");
                }
                String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
            }
            Format::Table => {
                let shown = |c: &str| if c.is_empty() { "-".to_string() } else { c.to_string() };
                let widths: Vec<usize> = (0..self.header.len())
                    .map(|j| {
                        self.rows
                            .iter()
                            .map(|r| shown(&r[j]).chars().count())
                            .chain([self.header[j].chars().count()])
                            .max()
                            .unwrap_or(0)
                    })
                    .collect();
                let line = |cells: Vec<String>| {
                    let parts: Vec<String> = cells
                        .iter()
                        .enumerate()
                        .map(|(j, c)| {
                            if self.numeric[j] {
                                format!("{c:>w$}", w = widths[j])
                            } else {
                                format!("{c:<w$}", w = widths[j])
                            }
                        })
                        .collect();
                    parts.join("  ").trim_end().to_string() + "\n"
                };
                let mut s = line(self.header.clone());
                for r in &self.rows {
                    s += &line(r.iter().map(|c| shown(c)).collect());
                }
                s
            }
        }
    }
}
