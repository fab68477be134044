//! Isotropic covariance functions and the matrix-valued models built from
//! them: the linear model of coregionalization (LMC) and the parsimonious
//! multivariate Matérn (PMat).

use faer::Mat;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bessel::bessel_k;
use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};
use crate::spatial::LocationSet;

/// Largest `n·p` for which dense joint covariance matrices are assembled.
pub const DEFAULT_DENSE_CAP: usize = 12_000;

/// A univariate stationary isotropic covariance function.
///
/// In configuration files a model is a table tagged by `type`, e.g.
/// `{ type = "matern", sill = 1.0, shape = 0.5, range = 2.0 }` or
/// `{ type = "sum", parts = [{ type = "nugget", variance = 0.1 }, ...] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovarianceModel {
    Spherical { sill: f64, range: f64 },
    Matern { sill: f64, shape: f64, range: f64 },
    Nugget { variance: f64 },
    Sum { parts: Vec<CovarianceModel> },
}

impl CovarianceModel {
    pub fn spherical(sill: f64, range: f64) -> Self {
        Self::Spherical { sill, range }
    }

    pub fn matern(sill: f64, shape: f64, range: f64) -> Self {
        Self::Matern { sill, shape, range }
    }

    pub fn nugget(variance: f64) -> Self {
        Self::Nugget { variance }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        match *self {
            Self::Spherical { sill, range } => {
                if !(sill >= 0.0 && sill.is_finite()) || !(range > 0.0 && range.is_finite()) {
                    return bad(format!("spherical needs sill >= 0 and range > 0, got ({sill}, {range})"));
                }
            }
            Self::Matern { sill, shape, range } => {
                if !(sill >= 0.0 && sill.is_finite())
                    || !(shape > 0.0 && shape.is_finite())
                    || !(range > 0.0 && range.is_finite())
                {
                    return bad(format!(
                        "matern needs sill >= 0, shape > 0, range > 0, got ({sill}, {shape}, {range})"
                    ));
                }
            }
            Self::Nugget { variance } => {
                if !(variance >= 0.0 && variance.is_finite()) {
                    return bad(format!("nugget variance must be >= 0, got {variance}"));
                }
            }
            Self::Sum { ref parts } => {
                if parts.is_empty() {
                    return bad("sum of no models".into());
                }
                for part in parts {
                    part.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Total sill, `C(0)`.
    pub fn sill(&self) -> f64 {
        match self {
            Self::Spherical { sill, .. } | Self::Matern { sill, .. } => *sill,
            Self::Nugget { variance } => *variance,
            Self::Sum { parts } => parts.iter().map(Self::sill).sum(),
        }
    }

    /// Variance of the nugget components.
    pub fn nugget_variance(&self) -> f64 {
        match self {
            Self::Nugget { variance } => *variance,
            Self::Sum { parts } => parts.iter().map(Self::nugget_variance).sum(),
            _ => 0.0,
        }
    }

    /// `C(h)`; fails for negative or non-finite distances.
    pub fn evaluate(&self, h: f64) -> Result<f64> {
        if !(h >= 0.0 && h.is_finite()) {
            return Err(Error::Domain(format!("distance must be finite and >= 0, got {h}")));
        }
        Ok(self.cov(h))
    }

    /// `C(h)` without argument checks.
    #[inline]
    pub fn cov(&self, h: f64) -> f64 {
        match *self {
            Self::Spherical { sill, range } => sill * spherical_correlation(h / range),
            Self::Matern { sill, shape, range } => sill * matern_correlation(h / range, shape),
            Self::Nugget { variance } => {
                if h == 0.0 {
                    variance
                } else {
                    0.0
                }
            }
            Self::Sum { ref parts } => parts.iter().map(|m| m.cov(h)).sum(),
        }
    }

    /// Semivariogram `γ(h) = C(0) - C(h)`.
    #[inline]
    pub fn semivariance(&self, h: f64) -> f64 {
        self.sill() - self.cov(h)
    }
}

#[inline]
pub fn spherical_correlation(x: f64) -> f64 {
    if x <= 1.0 {
        1.0 - 1.5 * x + 0.5 * x * x * x
    } else {
        0.0
    }
}

/// Matérn correlation at scaled distance `x = h/φ`, with the usual closed
/// forms for half-integer shapes.
#[inline]
pub fn matern_correlation(x: f64, shape: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if shape == 0.5 {
        (-x).exp()
    } else if shape == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if shape == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        matern_correlation_bessel(x, shape)
    }
}

/// `2^{1-ν}/Γ(ν) · x^ν K_ν(x)`, capped at 1 so rounding near `x = 0`
/// cannot exceed the sill.
pub fn matern_correlation_bessel(x: f64, shape: f64) -> f64 {
    // 1 − ρ(x) = O(x^{2 min(ν, 1)}) is far below rounding here.
    if x < 1e-200 {
        return 1.0;
    }
    if x > 700.0 {
        return 0.0;
    }
    let log_norm = (1.0 - shape) * std::f64::consts::LN_2 - libm::lgamma(shape);
    let k = bessel_k(shape, x);
    if k == 0.0 {
        return 0.0;
    }
    (log_norm + shape * x.ln() + k.ln()).exp().min(1.0)
}

/// Matrix-valued covariance `C(h)` of a `p`-variate isotropic field.
pub trait CrossCovariance: Sync {
    fn n_vars(&self) -> usize;

    /// Writes `C(h)` row-major into `out` (length `p²`).
    fn fill(&self, h: f64, out: &mut [f64]);

    fn cross_covariance(&self, h: f64) -> DMatrix<f64> {
        let p = self.n_vars();
        let mut buf = vec![0.0; p * p];
        self.fill(h, &mut buf);
        DMatrix::from_row_slice(p, p, &buf)
    }
}

impl CrossCovariance for CovarianceModel {
    fn n_vars(&self) -> usize {
        1
    }

    fn fill(&self, h: f64, out: &mut [f64]) {
        out[0] = self.cov(h);
    }
}

/// One LMC term `T_k ρ_k(h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmcStructure {
    #[serde(with = "matrix_rows")]
    pub coregionalization: DMatrix<f64>,
    pub correlation: CovarianceModel,
}

/// `C(h) = Σ_k T_k ρ_k(h)` with PSD coregionalization matrices `T_k` and
/// unit-sill correlation functions `ρ_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmcModel {
    structures: Vec<LmcStructure>,
}

impl LmcModel {
    pub fn new(structures: Vec<LmcStructure>) -> Result<Self> {
        let Some(first) = structures.first() else {
            return Err(Error::InvalidModel("LMC needs at least one structure".into()));
        };
        let p = first.coregionalization.nrows();
        let mut cleaned = Vec::with_capacity(structures.len());
        for (k, s) in structures.into_iter().enumerate() {
            let t = &s.coregionalization;
            if t.nrows() != p || t.ncols() != p {
                return Err(Error::InvalidModel(format!("T_{k} is not {p}x{p}")));
            }
            if !linalg::is_symmetric(t, 1e-10 * (1.0 + t.amax())) {
                return Err(Error::InvalidModel(format!("T_{k} is not symmetric")));
            }
            let t = linalg::symmetrize(t);
            let min_eig = linalg::min_eigenvalue(&t);
            if min_eig < -PSD_TOL {
                return Err(Error::InvalidModel(format!(
                    "T_{k} is not PSD (min eigenvalue {min_eig:e})"
                )));
            }
            s.correlation.validate()?;
            let sill = s.correlation.sill();
            if (sill - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidModel(format!("rho_{k} has sill {sill}, expected 1")));
            }
            cleaned.push(LmcStructure {
                coregionalization: t,
                correlation: s.correlation,
            });
        }
        Ok(Self { structures: cleaned })
    }

    pub fn structures(&self) -> &[LmcStructure] {
        &self.structures
    }

    pub fn n_vars(&self) -> usize {
        self.structures[0].coregionalization.nrows()
    }
}

impl CrossCovariance for LmcModel {
    fn n_vars(&self) -> usize {
        LmcModel::n_vars(self)
    }

    fn fill(&self, h: f64, out: &mut [f64]) {
        let p = LmcModel::n_vars(self);
        out.fill(0.0);
        for s in &self.structures {
            let rho = s.correlation.cov(h);
            if rho == 0.0 {
                continue;
            }
            for a in 0..p {
                for b in 0..p {
                    out[a * p + b] += s.coregionalization[(a, b)] * rho;
                }
            }
        }
    }
}

/// Parsimonious multivariate Matérn: common range, cross shapes
/// `ν_ij = (ν_i + ν_j)/2`, and cross correlations `ρ_ij` constrained by a
/// gamma-function ratio times a PSD, unit-diagonal matrix `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct PmatModel {
    range: f64,
    shapes: Vec<f64>,
    variances: Vec<f64>,
    beta: DMatrix<f64>,
    dim: usize,
    rho: DMatrix<f64>,
}

impl PmatModel {
    pub fn new(
        range: f64,
        shapes: Vec<f64>,
        variances: Vec<f64>,
        beta: DMatrix<f64>,
        dim: usize,
    ) -> Result<Self> {
        let p = shapes.len();
        if p == 0 || variances.len() != p || beta.nrows() != p || beta.ncols() != p {
            return Err(Error::InvalidModel("PMat parameter dimensions disagree".into()));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::InvalidModel(format!("PMat range must be > 0, got {range}")));
        }
        if shapes.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel("PMat shapes must be > 0".into()));
        }
        if variances.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel("PMat variances must be >= 0".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidModel("PMat domain dimension must be >= 1".into()));
        }
        if !linalg::is_symmetric(&beta, 1e-12) || (0..p).any(|i| (beta[(i, i)] - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidModel("beta must be symmetric with unit diagonal".into()));
        }
        let min_eig = linalg::min_eigenvalue(&beta);
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidModel(format!("beta is not PSD (min eigenvalue {min_eig:e})")));
        }
        let half_d = dim as f64 / 2.0;
        let lg = libm::lgamma;
        let rho = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                return 1.0;
            }
            let (a, b) = (shapes[i], shapes[j]);
            let ab = 0.5 * (a + b);
            let log_ratio = 0.5 * lg(a + half_d) + 0.5 * lg(b + half_d) + lg(ab)
                - 0.5 * lg(a)
                - 0.5 * lg(b)
                - lg(ab + half_d);
            beta[(i, j)] * log_ratio.exp()
        });
        if let Some(bad) = rho.iter().find(|r| r.abs() > 1.0 + 1e-12) {
            return Err(Error::InvalidModel(format!("derived cross correlation {bad} exceeds 1")));
        }
        Ok(Self {
            range,
            shapes,
            variances,
            beta,
            dim,
            rho,
        })
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn shapes(&self) -> &[f64] {
        &self.shapes
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Derived `ρ_ij` (unit diagonal).
    pub fn cross_correlations(&self) -> &DMatrix<f64> {
        &self.rho
    }

    pub fn cross_shape(&self, i: usize, j: usize) -> f64 {
        0.5 * (self.shapes[i] + self.shapes[j])
    }
}

impl CrossCovariance for PmatModel {
    fn n_vars(&self) -> usize {
        self.shapes.len()
    }

    fn fill(&self, h: f64, out: &mut [f64]) {
        let p = self.shapes.len();
        let x = h / self.range;
        for i in 0..p {
            for j in i..p {
                let c = if i == j {
                    self.variances[i] * matern_correlation(x, self.shapes[i])
                } else {
                    self.rho[(i, j)]
                        * (self.variances[i] * self.variances[j]).sqrt()
                        * matern_correlation(x, self.cross_shape(i, j))
                };
                out[i * p + j] = c;
                out[j * p + i] = c;
            }
        }
    }
}

/// Covariance of the stacked field on `locs`, site-major: entry
/// `(i·p + a, j·p + b)` is `C_ab(‖s_i − s_j‖)`. Every off-diagonal block is
/// written to both triangles from one evaluation, so the result is exactly
/// symmetric. A nugget belongs to one observation: two distinct but
/// coincident sites share every structure except the nugget.
pub fn build_joint_covariance(
    model: &dyn CrossCovariance,
    locs: &LocationSet,
    cap: usize,
) -> Result<Mat<f64>> {
    let p = model.n_vars();
    let n = locs.len();
    let rows = n * p;
    if rows > cap {
        return Err(Error::SizeCap { rows, cap });
    }
    let dist = locs.distances();
    let mut out = Mat::<f64>::zeros(rows, rows);
    let mut block = vec![0.0; p * p];
    for j in 0..n {
        for i in j..n {
            let h = if i == j { 0.0 } else { dist[(i, j)].max(f64::MIN_POSITIVE) };
            model.fill(h, &mut block);
            for a in 0..p {
                for b in 0..p {
                    let v = block[a * p + b];
                    out[(i * p + a, j * p + b)] = v;
                    out[(j * p + b, i * p + a)] = v;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}
