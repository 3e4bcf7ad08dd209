use super::{ModelSpec, Slot};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

/// The eight model matrices.
///
/// Orientation follows row-vector observations: `nu` 1×m, `alpha` 1×q,
/// `lambda` q×m, `kappa` l×m, `gamma` l×q, `beta` q×q (`beta[(r, s)]` is
/// the effect of latent r on latent s), `sigma_eps` m×m, `sigma_zeta` q×q.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Matrix {
    Nu,
    Alpha,
    Lambda,
    Kappa,
    Gamma,
    Beta,
    SigmaEps,
    SigmaZeta,
}

impl Matrix {
    pub const ALL: [Matrix; 8] = [
        Matrix::Nu,
        Matrix::Alpha,
        Matrix::Lambda,
        Matrix::Kappa,
        Matrix::Gamma,
        Matrix::Beta,
        Matrix::SigmaEps,
        Matrix::SigmaZeta,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, Matrix::SigmaEps | Matrix::SigmaZeta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellValue {
    Fixed(f64),
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub matrix: Matrix,
    pub row: usize,
    pub col: usize,
}

/// Dense cell map of one model matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<CellValue>,
}

impl Grid {
    fn new(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            entries: vec![CellValue::Fixed(0.0); rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> CellValue {
        self.entries[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: CellValue) {
        self.entries[r * self.cols + c] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Enters only the conditional mean.
    Mean,
    /// Enters only the conditional variance.
    Variance,
    /// Loadings and latent regressions: enters both.
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub label: String,
    pub role: Role,
    pub start: f64,
    /// `Some(0.0)` when every cell is a variance diagonal; such parameters are
    /// optimized on the log scale.
    pub lower: Option<f64>,
    /// Every matrix cell the parameter fills; symmetric off-diagonals appear twice.
    pub cells: Vec<Cell>,
}

impl Parameter {
    pub fn touches(&self, m: Matrix) -> bool {
        self.cells.iter().any(|c| c.matrix == m)
    }
}

/// Map from the free-parameter vector θ to the model matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    pub endogenous: Vec<String>,
    pub latent: Vec<String>,
    pub exogenous: Vec<String>,
    pub params: Vec<Parameter>,
    grids: Vec<Grid>,
}

impl ParameterTable {
    pub fn p(&self) -> usize {
        self.params.len()
    }

    pub fn m(&self) -> usize {
        self.endogenous.len()
    }

    pub fn q(&self) -> usize {
        self.latent.len()
    }

    pub fn l(&self) -> usize {
        self.exogenous.len()
    }

    pub fn grid(&self, m: Matrix) -> &Grid {
        &self.grids[m.slot()]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.params.iter().position(|p| p.label == label)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.label.as_str()).collect()
    }

    pub fn start_values(&self) -> DVector<f64> {
        DVector::from_iterator(self.p(), self.params.iter().map(|p| p.start))
    }

    /// Indices of θ_Σ, the parameters Algorithm-1 style corrections update.
    pub fn variance_indices(&self) -> Vec<usize> {
        self.indices_with(Role::Variance)
    }

    pub fn mean_indices(&self) -> Vec<usize> {
        self.indices_with(Role::Mean)
    }

    fn indices_with(&self, role: Role) -> Vec<usize> {
        (0..self.p()).filter(|&k| self.params[k].role == role).collect()
    }

    /// No parameter enters both the mean and the variance.
    pub fn is_mean_variance(&self) -> bool {
        self.params.iter().all(|p| p.role != Role::Both)
    }

    /// Matrix `m` evaluated at θ.
    pub fn fill(&self, m: Matrix, theta: &DVector<f64>) -> DMatrix<f64> {
        let g = self.grid(m);
        DMatrix::from_fn(g.rows, g.cols, |r, c| match g.get(r, c) {
            CellValue::Fixed(v) => v,
            CellValue::Param(k) => theta[k],
        })
    }
}

fn default_start(m: Matrix, row: usize, col: usize) -> f64 {
    match m {
        Matrix::Lambda => 1.0,
        Matrix::SigmaEps | Matrix::SigmaZeta if row == col => 1.0,
        _ => 0.0,
    }
}

/// Builds the parameter table: ν, α, Λ, K, Γ, B free cells in declaration
/// order, then Σ_ε and Σ_ζ cells.
pub fn index_parameters(spec: &ModelSpec) -> ParameterTable {
    let m = spec.endogenous.len();
    let q = spec.latent.len();
    let l = spec.exogenous.len();
    let pos = |list: &[String], n: &str| list.iter().position(|x| x == n);

    let mut grids = vec![
        Grid::new(1, m),
        Grid::new(1, q),
        Grid::new(q, m),
        Grid::new(l, m),
        Grid::new(l, q),
        Grid::new(q, q),
        Grid::new(m, m),
        Grid::new(q, q),
    ];
    let mut params: Vec<Parameter> = Vec::new();
    let mut by_label: HashMap<String, usize> = HashMap::new();

    let mut assign = |cell: Cell, slot: &Slot, grids: &mut Vec<Grid>, params: &mut Vec<Parameter>| {
        let mut cells = vec![cell];
        if cell.matrix.is_symmetric() && cell.row != cell.col {
            cells.push(Cell {
                matrix: cell.matrix,
                row: cell.col,
                col: cell.row,
            });
        }
        let value = match slot {
            Slot::Fixed(v) => CellValue::Fixed(*v),
            Slot::Free(label) | Slot::Shared(label) => {
                let k = *by_label.entry(label.clone()).or_insert_with(|| {
                    params.push(Parameter {
                        label: label.clone(),
                        role: Role::Mean,
                        start: default_start(cell.matrix, cell.row, cell.col),
                        lower: None,
                        cells: Vec::new(),
                    });
                    params.len() - 1
                });
                params[k].cells.extend_from_slice(&cells);
                CellValue::Param(k)
            }
        };
        for c in cells {
            grids[c.matrix.slot()].set(c.row, c.col, value);
        }
    };

    for (j, slot) in spec.nu.iter().enumerate() {
        assign(Cell { matrix: Matrix::Nu, row: 0, col: j }, slot, &mut grids, &mut params);
    }
    for (r, slot) in spec.alpha.iter().enumerate() {
        assign(Cell { matrix: Matrix::Alpha, row: 0, col: r }, slot, &mut grids, &mut params);
    }
    let mut edge_cells = Vec::new();
    for e in &spec.measurement_edges {
        let j = pos(&spec.endogenous, &e.target).expect("validated target");
        let cell = if let Some(r) = pos(&spec.latent, &e.source) {
            Cell { matrix: Matrix::Lambda, row: r, col: j }
        } else {
            let x = pos(&spec.exogenous, &e.source).expect("validated source");
            Cell { matrix: Matrix::Kappa, row: x, col: j }
        };
        edge_cells.push((cell, &e.slot));
    }
    for e in &spec.structural_edges {
        let s = pos(&spec.latent, &e.target).expect("validated target");
        let cell = if let Some(r) = pos(&spec.latent, &e.source) {
            Cell { matrix: Matrix::Beta, row: r, col: s }
        } else {
            let x = pos(&spec.exogenous, &e.source).expect("validated source");
            Cell { matrix: Matrix::Gamma, row: x, col: s }
        };
        edge_cells.push((cell, &e.slot));
    }
    // Λ, K, Γ, B in that order, each in declaration order.
    edge_cells.sort_by_key(|(c, _)| c.matrix);
    for (cell, slot) in edge_cells {
        assign(cell, slot, &mut grids, &mut params);
    }
    let mut cov_cells = Vec::new();
    for c in &spec.covariance_edges {
        let cell = match (pos(&spec.endogenous, &c.a), pos(&spec.endogenous, &c.b)) {
            (Some(a), Some(b)) => Cell { matrix: Matrix::SigmaEps, row: a.min(b), col: a.max(b) },
            _ => {
                let a = pos(&spec.latent, &c.a).expect("validated latent");
                let b = pos(&spec.latent, &c.b).expect("validated latent");
                Cell { matrix: Matrix::SigmaZeta, row: a.min(b), col: a.max(b) }
            }
        };
        cov_cells.push((cell, &c.slot));
    }
    cov_cells.sort_by_key(|(c, _)| c.matrix);
    for (cell, slot) in cov_cells {
        assign(cell, slot, &mut grids, &mut params);
    }

    for p in &mut params {
        let mean = p
            .cells
            .iter()
            .all(|c| matches!(c.matrix, Matrix::Nu | Matrix::Alpha | Matrix::Kappa | Matrix::Gamma));
        let var = p
            .cells
            .iter()
            .all(|c| matches!(c.matrix, Matrix::SigmaEps | Matrix::SigmaZeta));
        p.role = if mean {
            Role::Mean
        } else if var {
            Role::Variance
        } else {
            Role::Both
        };
        if var && p.cells.iter().all(|c| c.row == c.col) {
            p.lower = Some(0.0);
        }
    }

    ParameterTable {
        endogenous: spec.endogenous.clone(),
        latent: spec.latent.clone(),
        exogenous: spec.exogenous.clone(),
        params,
        grids,
    }
}
