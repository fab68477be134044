//! Locations, multivariate samples, sample moments and whitening.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue floor below which a sample covariance counts as singular.
pub const WHITEN_EPS: f64 = 1e-12;

/// `n` sites in `R^d`. Pairwise distances are computed on first use and
/// cached for the lifetime of the set.
#[derive(Debug)]
pub struct LocationSet {
    coords: DMatrix<f64>,
    dist: OnceLock<DMatrix<f64>>,
}

impl Clone for LocationSet {
    fn clone(&self) -> Self {
        let dist = OnceLock::new();
        if let Some(d) = self.dist.get() {
            let _ = dist.set(d.clone());
        }
        Self {
            coords: self.coords.clone(),
            dist,
        }
    }
}

impl PartialEq for LocationSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl LocationSet {
    /// `coords` is `n × d`, one row per site.
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.nrows() == 0 || coords.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "location set needs n >= 1 and d >= 1, got {}x{}",
                coords.nrows(),
                coords.ncols()
            )));
        }
        if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite coordinate at site {}",
                pos % coords.nrows()
            )));
        }
        Ok(Self {
            coords,
            dist: OnceLock::new(),
        })
    }

    pub fn from_points<const D: usize>(points: &[[f64; D]]) -> Result<Self> {
        let coords = DMatrix::from_fn(points.len(), D, |i, j| points[i][j]);
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.coords.row(i).iter().copied().collect()
    }

    /// Euclidean distance between site `i` of `self` and site `j` of `other`.
    #[inline]
    pub fn distance_to(&self, i: usize, other: &LocationSet, j: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.dim() {
            let d = self.coords[(i, k)] - other.coords[(j, k)];
            acc += d * d;
        }
        acc.sqrt()
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances()[(i, j)]
    }

    /// Cached `n × n` distance matrix.
    pub fn distances(&self) -> &DMatrix<f64> {
        self.dist.get_or_init(|| pairwise_distances(self))
    }

    pub fn max_distance(&self) -> f64 {
        self.distances().max()
    }

    /// Sites of `self` followed by sites of `other`.
    pub fn concat(&self, other: &LocationSet) -> Result<LocationSet> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "cannot concatenate {}-d and {}-d location sets",
                self.dim(),
                other.dim()
            )));
        }
        let n = self.len();
        let coords = DMatrix::from_fn(n + other.len(), self.dim(), |i, j| {
            if i < n {
                self.coords[(i, j)]
            } else {
                other.coords[(i - n, j)]
            }
        });
        LocationSet::new(coords)
    }

    /// Pair of distinct sites with the smallest separation.
    pub fn nearest_pair(&self) -> Option<(usize, usize, f64)> {
        let n = self.len();
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.distance_to(i, self, j);
                if best.is_none_or(|(_, _, b)| d < b) {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }
}

/// Symmetric distance matrix with an exactly zero diagonal.
pub fn pairwise_distances(locs: &LocationSet) -> DMatrix<f64> {
    let n = locs.len();
    let mut dist = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let d = locs.distance_to(i, locs, j);
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    dist
}

/// `p`-variate observations attached to a location set; row `i` is the
/// observation at site `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiField {
    locations: Arc<LocationSet>,
    values: DMatrix<f64>,
}

impl MultiField {
    pub fn new(locations: Arc<LocationSet>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != locations.len() {
            return Err(Error::Shape(format!(
                "{} value rows for {} locations",
                values.nrows(),
                locations.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidInput("field needs at least one variable".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at site {}, variable {}",
                pos % values.nrows(),
                pos / values.nrows()
            )));
        }
        Ok(Self { locations, values })
    }

    pub fn locations(&self) -> &Arc<LocationSet> {
        &self.locations
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.values.column(j).into_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.values.row_mean().transpose()
    }
}

/// Whitened data together with the transforms relating it to the input.
#[derive(Debug, Clone)]
pub struct WhitenedField {
    pub field: MultiField,
    pub mean: DVector<f64>,
    /// `Cov(X)^{-1/2}`
    pub whitener: DMatrix<f64>,
    /// `Cov(X)^{1/2}`
    pub dewhitener: DMatrix<f64>,
}

impl WhitenedField {
    /// Maps whitened rows back to the original scale.
    pub fn dewhiten(&self, whitened: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = whitened * &self.dewhitener;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }
}

/// Sample covariance with divisor `n`, the same convention as the local
/// covariance estimator, so that `M_f` for a ball kernel of radius zero
/// reproduces it exactly.
pub fn sample_covariance(field: &MultiField) -> Result<DMatrix<f64>> {
    let n = field.n();
    if n < 2 {
        return Err(Error::DegenerateSample(format!(
            "sample covariance needs at least 2 observations, got {n}"
        )));
    }
    let centred = centre(field.values(), &field.mean());
    let cov = centred.transpose() * &centred / n as f64;
    Ok(linalg::symmetrize(&cov))
}

pub(crate) fn centre(values: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = values.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Centres and whitens `field` with the symmetric inverse square root of
/// its sample covariance.
pub fn whiten(field: &MultiField) -> Result<WhitenedField> {
    let cov = sample_covariance(field)?;
    let (values, vectors) = linalg::sym_eigen(&cov);
    let largest = values[0].max(0.0);
    let floor = WHITEN_EPS * largest.max(f64::MIN_POSITIVE);
    if let Some(index) = values.iter().position(|&v| v <= floor || !v.is_finite()) {
        return Err(Error::SingularCovariance {
            eigenvalue: values[index],
            index,
        });
    }
    let p = cov.nrows();
    let clamped: Vec<f64> = values.iter().map(|v| v.max(floor)).collect();
    let inv_sqrt = DMatrix::from_fn(p, p, |i, j| vectors[(i, j)] / clamped[j].sqrt());
    let sqrt = DMatrix::from_fn(p, p, |i, j| vectors[(i, j)] * clamped[j].sqrt());
    let whitener = linalg::symmetrize(&(&inv_sqrt * vectors.transpose()));
    let dewhitener = linalg::symmetrize(&(&sqrt * vectors.transpose()));

    let mean = field.mean();
    let whitened = centre(field.values(), &mean) * &whitener;
    Ok(WhitenedField {
        field: MultiField::new(field.locations().clone(), whitened)?,
        mean,
        whitener,
        dewhitener,
    })
}
