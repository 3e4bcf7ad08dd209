//! Symbolic model structure: the path-diagram DSL, the spec it parses into and
//! the free-parameter table used by every numerical module.
//!
//! The DSL is statement-per-line (or `;`-separated) with `#` comments:
//!
//! ```text
//! latent: eta            # required unless eta is regressed or has a variance
//! Y1 ~ 1*eta + X1        # measurement edges, numeric prefix fixes a value
//! Y2 ~ lam*eta           # identifier prefix names (and shares) a parameter
//! Y2 ~ 0*1               # `1` is the intercept
//! eta ~ 1 + X2           # free latent intercept, structural edge
//! Y1 ~~ s*Y1; Y2 ~~ s*Y2 # residual variances with a shared label
//! ```
//!
//! Defaults: the first unmodified loading of each latent is fixed to 1 unless
//! a loading or the latent variance is already fixed; latent intercepts are
//! fixed to 0 unless freed; endogenous intercepts and every residual variance
//! are free; residual covariances exist only when declared.

mod parser;
mod table;

pub use table::{index_parameters, Cell, CellValue, Grid, Matrix, Parameter, ParameterTable, Role};

use nalgebra::DMatrix;
use std::fmt::{self, Write as _};
use thiserror::Error;

/// Coefficient slot of a matrix cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    /// Free parameter with an automatic label.
    Free(String),
    Fixed(f64),
    /// Named parameter; every slot with the same label maps to one parameter.
    Shared(String),
}

/// `target ~ source`
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub target: String,
    pub source: String,
    pub slot: Slot,
}

/// `a ~~ b`
#[derive(Debug, Clone, PartialEq)]
pub struct CovEdge {
    pub a: String,
    pub b: String,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub endogenous: Vec<String>,
    pub latent: Vec<String>,
    pub exogenous: Vec<String>,
    /// Edges into endogenous variables (from latent or exogenous sources).
    pub measurement_edges: Vec<Edge>,
    /// Edges into latent variables (from latent or exogenous sources).
    pub structural_edges: Vec<Edge>,
    /// Residual variances and covariances, all endogenous or all latent.
    pub covariance_edges: Vec<CovEdge>,
    /// Intercept slot per endogenous variable.
    pub nu: Vec<Slot>,
    /// Intercept slot per latent variable.
    pub alpha: Vec<Slot>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("{line}:{col}: syntax error: expected {expected}, found {found}")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
        found: String,
    },
    #[error("{line}:{col}: undeclared variable `{name}`")]
    Undeclared {
        line: usize,
        col: usize,
        name: String,
    },
    #[error("{line}:{col}: duplicate edge `{edge}`")]
    Duplicate {
        line: usize,
        col: usize,
        edge: String,
    },
    #[error("{line}:{col}: {msg}")]
    Invalid { line: usize, col: usize, msg: String },
    #[error("model specification is empty")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("variable `{0}` is not a data column")]
    MissingColumn(String),
    #[error("(I - B) is singular at the start values")]
    SingularStructural,
}

/// Parses model DSL text.
pub fn parse_model(text: &str) -> Result<ModelSpec, SpecError> {
    parser::parse(text)
}

/// Checks the spec against a data header and the structural matrix at start values.
pub fn validate(spec: &ModelSpec, header: &[String]) -> Result<(), Vec<ValidationError>> {
    let mut errs = Vec::new();
    for n in spec.endogenous.iter().chain(&spec.exogenous) {
        if !header.iter().any(|h| h == n) {
            errs.push(ValidationError::MissingColumn(n.clone()));
        }
    }
    let table = index_parameters(spec);
    if !structural_invertible(&table, &table.start_values()) {
        errs.push(ValidationError::SingularStructural);
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

fn structural_invertible(table: &ParameterTable, theta: &nalgebra::DVector<f64>) -> bool {
    let q = table.latent.len();
    if q == 0 {
        return true;
    }
    let b = table.fill(Matrix::Beta, theta);
    let ib = DMatrix::identity(q, q) - b;
    let lu = ib.lu();
    let det = lu.determinant();
    det.is_finite() && det.abs() > 1e-10
}

fn fmt_slot(slot: &Slot, auto: &str) -> String {
    match slot {
        Slot::Fixed(v) => format!("{v:?}*"),
        Slot::Shared(l) => format!("{l}*"),
        Slot::Free(l) if l == auto => String::new(),
        Slot::Free(l) => format!("{l}*"),
    }
}

impl ModelSpec {
    /// Canonical DSL text; reparsing it yields an equal spec.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let decl = |s: &mut String, kw: &str, names: &[String]| {
            if !names.is_empty() {
                let _ = writeln!(s, "{kw}: {}", names.join(", "));
            }
        };
        decl(&mut s, "endogenous", &self.endogenous);
        decl(&mut s, "latent", &self.latent);
        decl(&mut s, "exogenous", &self.exogenous);
        for (n, slot) in self.endogenous.iter().zip(&self.nu) {
            let _ = writeln!(s, "{n} ~ {}1", fmt_slot(slot, &format!("{n}~1")));
        }
        for (n, slot) in self.latent.iter().zip(&self.alpha) {
            let _ = writeln!(s, "{n} ~ {}1", fmt_slot(slot, &format!("{n}~1")));
        }
        for e in self.measurement_edges.iter().chain(&self.structural_edges) {
            let auto = format!("{}~{}", e.target, e.source);
            let _ = writeln!(s, "{} ~ {}{}", e.target, fmt_slot(&e.slot, &auto), e.source);
        }
        for c in &self.covariance_edges {
            let auto = format!("{}~~{}", c.a, c.b);
            let _ = writeln!(s, "{} ~~ {}{}", c.a, fmt_slot(&c.slot, &auto), c.b);
        }
        s
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
