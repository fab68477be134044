//! Pivot isometric log-ratio (ilr) coordinates of compositions.
//!
//! Pivot order is the order of the parts as given (for CSV input, the
//! column order).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Strictly positive parts of a composition.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    parts: Vec<f64>,
}

impl Composition {
    pub fn new(parts: Vec<f64>) -> Result<Self> {
        if parts.len() < 2 {
            return Err(Error::InvalidInput(format!("a composition needs at least 2 parts, got {}", parts.len())));
        }
        if let Some(i) = parts.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Domain(format!("part {i} is {} (must be positive and finite)", parts[i])));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Parts rescaled to sum to 1.
    pub fn closure(&self) -> Vec<f64> {
        let total: f64 = self.parts.iter().sum();
        self.parts.iter().map(|x| x / total).collect()
    }
}

/// `z_j = √((D−j)/(D−j+1)) · ln(x_j / g(x_{j+1}, …, x_D))` for `j = 1..D−1`,
/// with `g` the geometric mean.
pub fn ilr_forward(x: &Composition) -> DVector<f64> {
    let d = x.len();
    let logs: Vec<f64> = x.parts.iter().map(|v| v.ln()).collect();
    let mut z = DVector::zeros(d - 1);
    // Suffix sums of logs give each trailing geometric mean in one pass.
    let mut tail = 0.0;
    for j in (0..d - 1).rev() {
        tail += logs[j + 1];
        let rest = (d - 1 - j) as f64;
        z[j] = (rest / (rest + 1.0)).sqrt() * (logs[j] - tail / rest);
    }
    z
}

/// Centred log-ratio `ln x_i − mean(ln x)`.
pub fn clr(x: &Composition) -> DVector<f64> {
    let logs = DVector::from_iterator(x.len(), x.parts.iter().map(|v| v.ln()));
    let mean = logs.mean();
    logs.add_scalar(-mean)
}

/// Contrast matrix `V` (`D × (D−1)`, orthonormal columns) with
/// `ilr(x) = Vᵀ clr(x)`.
pub fn pivot_basis(d: usize) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(d, d - 1);
    for j in 0..d - 1 {
        let rest = (d - 1 - j) as f64;
        let c = (rest / (rest + 1.0)).sqrt();
        v[(j, j)] = c;
        for i in j + 1..d {
            v[(i, j)] = -c / rest;
        }
    }
    v
}

/// Composition (closed to sum 1) with ilr coordinates `z`.
pub fn ilr_inverse(z: &DVector<f64>) -> Result<Composition> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("ilr coordinates must be finite".into()));
    }
    let d = z.len() + 1;
    let c = pivot_basis(d) * z;
    let max = c.max();
    let parts: Vec<f64> = c.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = parts.iter().sum();
    Composition::new(parts.into_iter().map(|v| v / total).collect())
}

/// Row-wise forward transform of an `n × D` table of compositions.
pub fn ilr_forward_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    let mut out = DMatrix::zeros(x.nrows(), d.saturating_sub(1));
    for (i, row) in x.row_iter().enumerate() {
        let comp = Composition::new(row.iter().copied().collect())
            .map_err(|e| Error::Domain(format!("row {i}: {e}")))?;
        out.set_row(i, &ilr_forward(&comp).transpose());
    }
    Ok(out)
}

/// Row-wise inverse transform of an `n × (D−1)` table of coordinates.
pub fn ilr_inverse_rows(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(z.nrows(), z.ncols() + 1);
    for (i, row) in z.row_iter().enumerate() {
        let comp = ilr_inverse(&row.transpose())?;
        out.set_row(i, &DVector::from_column_slice(comp.parts()).transpose());
    }
    Ok(out)
}
