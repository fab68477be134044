//! Ordinary kriging, ordinary cokriging under an LMC, and the SBSS-kriging
//! predictor.
//!
//! Both kriging flavours share one saddle-point solver: for `p` variables on
//! `n` sites the system is
//!
//! ```text
//! [ C   F ] [ λ ]   [ c₀ ]
//! [ Fᵀ  0 ] [ μ ] = [ e_v ]
//! ```
//!
//! with `C` the site-major joint covariance, `F` the `np × p` indicator of
//! each row's variable and `e_v` the unit vector of the predicted variable.
//! Ordinary kriging is the case `p = 1`. The matrix is factorized once with
//! a pivoted `LBLᵀ` decomposition and reused for every target.

use std::sync::Arc;

use faer::linalg::solvers::{Lblt, Solve};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::covariance::{build_joint_covariance, CovarianceModel, CrossCovariance, LmcModel, DEFAULT_DENSE_CAP};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sbss::{fit_sbss, predict_mix, SbssFit, SpatialKernel};
use crate::spatial::{LocationSet, MultiField};
use crate::variography::{empirical_variogram, fit_wls, Binning, FittedModel, ModelFamily};

/// Relative size below which a pivot of the factorization counts as zero.
pub const PIVOT_TOL: f64 = 1e-12;
/// Targets solved per batch of right-hand sides.
const TARGET_BATCH: usize = 256;

struct SaddleSystem<M> {
    factor: Lblt<f64>,
    model: M,
    locations: Arc<LocationSet>,
    /// Site-major stacked training values.
    values: Vec<f64>,
    p: usize,
}

impl<M: CrossCovariance> SaddleSystem<M> {
    fn build(model: M, locations: Arc<LocationSet>, values: &DMatrix<f64>) -> Result<Self> {
        let p = model.n_vars();
        let n = locations.len();
        if n == 0 {
            return Err(Error::InvalidInput("kriging needs at least one training site".into()));
        }
        if values.nrows() != n || values.ncols() != p {
            return Err(Error::Shape(format!(
                "values are {}×{}, expected {n}×{p}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training values must be finite".into()));
        }
        let np = n * p;
        let cov = build_joint_covariance(&model, &locations, DEFAULT_DENSE_CAP)?;
        let scale = (0..np).map(|i| cov[(i, i)].abs()).fold(0.0f64, f64::max);
        if !(scale > 0.0) {
            return Err(Error::InvalidModel("covariance model has zero variance".into()));
        }
        let size = np + p;
        let mut system = Mat::<f64>::zeros(size, size);
        for j in 0..np {
            for i in j..np {
                system[(i, j)] = cov[(i, j)];
            }
        }
        for i in 0..n {
            for a in 0..p {
                system[(np + a, i * p + a)] = 1.0;
            }
        }
        linalg::sequential();
        let factor = system.lblt(Side::Lower);
        check_pivots(&factor, scale, &locations)?;
        let values = (0..np).map(|r| values[(r / p, r % p)]).collect();
        Ok(Self {
            factor,
            model,
            locations,
            values,
            p,
        })
    }

    /// Right-hand sides for `targets[start..end]`, column `t·p + v` for
    /// target `t` and predicted variable `v`.
    fn rhs(&self, targets: &LocationSet, start: usize, end: usize) -> Mat<f64> {
        let (n, p) = (self.locations.len(), self.p);
        let np = n * p;
        let mut rhs = Mat::<f64>::zeros(np + p, (end - start) * p);
        let mut block = vec![0.0; p * p];
        for t in start..end {
            let col0 = (t - start) * p;
            for i in 0..n {
                self.model.fill(self.locations.distance_to(i, targets, t), &mut block);
                for a in 0..p {
                    for v in 0..p {
                        rhs[(i * p + a, col0 + v)] = block[a * p + v];
                    }
                }
            }
            for v in 0..p {
                rhs[(np + v, col0 + v)] = 1.0;
            }
        }
        rhs
    }

    fn check_targets(&self, targets: &LocationSet) -> Result<()> {
        if targets.dim() != self.locations.dim() {
            return Err(Error::Shape(format!(
                "targets are {}-dimensional, training sites {}-dimensional",
                targets.dim(),
                self.locations.dim()
            )));
        }
        Ok(())
    }

    /// Solved `[λ; μ]` for every target and variable (`(np+p) × m·p`).
    fn weights(&self, targets: &LocationSet) -> Result<Mat<f64>> {
        self.check_targets(targets)?;
        linalg::sequential();
        Ok(self.factor.solve(&self.rhs(targets, 0, targets.len())))
    }

    fn predict(&self, targets: &LocationSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_targets(targets)?;
        linalg::sequential();
        let (m, p) = (targets.len(), self.p);
        let np = self.values.len();
        let mut c0 = vec![0.0; p * p];
        self.model.fill(0.0, &mut c0);
        let mut predictions = DMatrix::zeros(m, p);
        let mut variances = DMatrix::zeros(m, p);
        let mut start = 0;
        while start < m {
            let end = (start + TARGET_BATCH).min(m);
            let rhs = self.rhs(targets, start, end);
            let w = self.factor.solve(&rhs);
            for t in start..end {
                for v in 0..p {
                    let col = (t - start) * p + v;
                    let mut pred = 0.0f64;
                    let mut explained = 0.0;
                    for r in 0..np {
                        pred += w[(r, col)] * self.values[r];
                        explained += w[(r, col)] * rhs[(r, col)];
                    }
                    if !pred.is_finite() {
                        return Err(Error::Estimation(format!("non-finite prediction at target {t}")));
                    }
                    predictions[(t, v)] = pred;
                    variances[(t, v)] = c0[v * p + v] - explained - w[(np + v, col)];
                }
            }
            start = end;
        }
        Ok((predictions, variances))
    }
}

/// Scans the block-diagonal factor for (near-)zero pivots. A 2×2 block
/// counts as singular when its determinant is negligible against its
/// largest entry squared.
fn check_pivots(factor: &Lblt<f64>, scale: f64, locs: &LocationSet) -> Result<()> {
    let diag = factor.B_diag();
    let sub = factor.B_subdiag();
    let size = diag.dim();
    let singular = |pivot: f64| {
        let (site_a, site_b, distance) = locs.nearest_pair().unwrap_or((0, 0, f64::INFINITY));
        Err(Error::SingularSystem {
            pivot,
            site_a,
            site_b,
            distance,
        })
    };
    let mut i = 0;
    while i < size {
        let d = diag[i];
        if i + 1 < size && sub[i] != 0.0 {
            let (b, c) = (sub[i], diag[i + 1]);
            let det = d * c - b * b;
            let big = d.abs().max(b.abs()).max(c.abs());
            if !det.is_finite() || det.abs() <= PIVOT_TOL * big * big {
                return singular(det);
            }
            i += 2;
        } else {
            if !d.is_finite() || d.abs() <= PIVOT_TOL * scale {
                return singular(d);
            }
            i += 1;
        }
    }
    Ok(())
}

/// Ordinary kriging of one variable.
pub struct KrigingSystem(SaddleSystem<CovarianceModel>);

/// Predictions and kriging variances, one row per target.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingOutput {
    pub predictions: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

pub fn ok_build(values: &DVector<f64>, locs: Arc<LocationSet>, model: CovarianceModel) -> Result<KrigingSystem> {
    model.validate()?;
    if !(model.sill() > 0.0) {
        return Err(Error::InvalidModel(format!("kriging needs a positive sill, got {}", model.sill())));
    }
    let values = DMatrix::from_column_slice(values.len(), 1, values.as_slice());
    SaddleSystem::build(model, locs, &values).map(KrigingSystem)
}

impl KrigingSystem {
    pub fn model(&self) -> &CovarianceModel {
        &self.0.model
    }

    pub fn locations(&self) -> &Arc<LocationSet> {
        &self.0.locations
    }

    /// Kriging weights, `n × m`.
    pub fn weights(&self, targets: &LocationSet) -> Result<DMatrix<f64>> {
        let w = self.0.weights(targets)?;
        let n = self.0.locations.len();
        Ok(DMatrix::from_fn(n, targets.len(), |i, t| w[(i, t)]))
    }
}

/// Predictions (`m`-vector in an `m × 1` matrix) and variances at `targets`.
pub fn ok_predict(sys: &KrigingSystem, targets: &LocationSet) -> Result<KrigingOutput> {
    let (predictions, variances) = sys.0.predict(targets)?;
    Ok(KrigingOutput {
        predictions,
        variances,
    })
}

/// Ordinary cokriging of all variables of an LMC-modelled field.
pub struct CokrigingSystem(SaddleSystem<LmcModel>);

pub fn cok_build(field: &MultiField, model: LmcModel) -> Result<CokrigingSystem> {
    if model.n_vars() != field.p() {
        return Err(Error::Shape(format!(
            "model has {} variables, field has {}",
            model.n_vars(),
            field.p()
        )));
    }
    SaddleSystem::build(model, field.locations().clone(), field.values()).map(CokrigingSystem)
}

impl CokrigingSystem {
    pub fn model(&self) -> &LmcModel {
        &self.0.model
    }

    /// Weight blocks: entry `(i·p + a, t·p + v)` is the weight of variable
    /// `a` at site `i` when predicting variable `v` at target `t`.
    pub fn weights(&self, targets: &LocationSet) -> Result<DMatrix<f64>> {
        let w = self.0.weights(targets)?;
        let np = self.0.values.len();
        Ok(DMatrix::from_fn(np, w.ncols(), |r, c| w[(r, c)]))
    }
}

/// `m × p` predictions and cokriging variances at `targets`.
pub fn cok_predict(sys: &CokrigingSystem, targets: &LocationSet) -> Result<KrigingOutput> {
    let (predictions, variances) = sys.0.predict(targets)?;
    Ok(KrigingOutput {
        predictions,
        variances,
    })
}

/// Result of the three-step SBSS-kriging predictor.
#[derive(Debug, Clone)]
pub struct SbssKriging {
    /// `m × p` predictions on the data scale.
    pub predictions: DMatrix<f64>,
    /// `m × p` kriged latent components.
    pub latent_predictions: DMatrix<f64>,
    pub fit: SbssFit,
    /// Model used for each latent component.
    pub models: Vec<CovarianceModel>,
    /// Components that fell back to a pure nugget model.
    pub fallbacks: Vec<usize>,
}

/// Unmixes `field` with SBSS, kriges each latent component with a fitted
/// `family` + nugget model, and mixes the predictions back.
pub fn sbss_krige(
    field: &MultiField,
    kernels: &[SpatialKernel],
    family: ModelFamily,
    targets: &LocationSet,
) -> Result<SbssKriging> {
    sbss_krige_fitted(fit_sbss(field, kernels)?, family, targets)
}

/// Second and third step of [`sbss_krige`] for an existing SBSS fit.
pub fn sbss_krige_fitted(fit: SbssFit, family: ModelFamily, targets: &LocationSet) -> Result<SbssKriging> {
    let locs = fit.latent.locations().clone();
    let p = fit.latent.p();
    let mut latent_predictions = DMatrix::zeros(targets.len(), p);
    let mut models = Vec::with_capacity(p);
    let mut fallbacks = Vec::new();
    for c in 0..p {
        let z = fit.latent.column(c);
        let fitted = empirical_variogram(&z, None, &locs, Binning::default())
            .and_then(|emp| fit_wls(&emp, family, None))
            .and_then(|f: FittedModel| ok_build(&z, locs.clone(), f.model.clone()).map(|sys| (f, sys)));
        let sys = match fitted {
            Ok((_, sys)) => sys,
            Err(e) => {
                let variance = z.variance().max(f64::MIN_POSITIVE);
                log::warn!("latent component {c}: {e}; using a nugget model with variance {variance:.4}");
                fallbacks.push(c);
                ok_build(&z, locs.clone(), CovarianceModel::nugget(variance))?
            }
        };
        let out = ok_predict(&sys, targets)?;
        latent_predictions.set_column(c, &out.predictions.column(0));
        models.push(sys.model().clone());
    }
    let predictions = predict_mix(&fit, &latent_predictions)?;
    Ok(SbssKriging {
        predictions,
        latent_predictions,
        fit,
        models,
        fallbacks,
    })
}

/// Prediction error summary over `m` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    /// `Σ_i ‖x̂_i − x_i‖² / m`.
    pub per_site: f64,
    /// Mean over all `m·p` squared entries.
    pub grand_mean: f64,
    /// Mean squared error of each variable.
    pub per_component: Vec<f64>,
}

/// Sum over targets of the squared error vector norm, divided by the number
/// of targets.
pub fn mse(predicted: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    mse_report(predicted, truth).map(|r| r.per_site)
}

pub fn mse_report(predicted: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<MseReport> {
    if predicted.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs truth {:?}",
            predicted.shape(),
            truth.shape()
        )));
    }
    let (m, p) = predicted.shape();
    if m == 0 || p == 0 {
        return Err(Error::Shape("empty prediction matrix".into()));
    }
    let per_component: Vec<f64> = (0..p)
        .map(|j| (predicted.column(j) - truth.column(j)).norm_squared() / m as f64)
        .collect();
    let per_site: f64 = per_component.iter().sum();
    Ok(MseReport {
        per_site,
        grand_mean: per_site / p as f64,
        per_component,
    })
}
