//! Reproducible simulation of sampling designs and multivariate Gaussian or
//! Student-t random fields.

use std::sync::Arc;

use faer::linalg::solvers::Llt;
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{build_joint_covariance, CovarianceModel, CrossCovariance, LmcModel, PmatModel, DEFAULT_DENSE_CAP};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{stream_rng, streams};
use crate::spatial::{LocationSet, MultiField};

/// Initial relative diagonal jitter tried when a Cholesky factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Number of ×10 jitter escalations before giving up.
pub const JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateVariant {
    /// x, y ~ U(0, 1)
    Uniform,
    /// x ~ Beta(2, 5), y ~ U(0, 1)
    Skew,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateSampler {
    pub variant: CoordinateVariant,
    pub scale: f64,
    pub count: usize,
}

impl CoordinateSampler {
    pub fn new(variant: CoordinateVariant, scale: f64, count: usize) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || count == 0 {
            return Err(Error::InvalidInput(format!(
                "coordinate sampler needs scale > 0 and count >= 1, got ({scale}, {count})"
            )));
        }
        Ok(Self { variant, scale, count })
    }
}

/// `Beta(a, b)` as `G_a / (G_a + G_b)` with independent unit-scale gammas.
fn beta_draw(rng: &mut ChaCha8Rng, a: &Gamma<f64>, b: &Gamma<f64>) -> f64 {
    let x = a.sample(rng);
    let y = b.sample(rng);
    x / (x + y)
}

/// Samples planar sites; deterministic in `seed`.
pub fn sample_coordinates(sampler: &CoordinateSampler, seed: u64) -> Result<LocationSet> {
    let mut rng = stream_rng(seed, streams::COORDINATES);
    sample_coordinates_with(sampler, &mut rng)
}

pub(crate) fn sample_coordinates_with(sampler: &CoordinateSampler, rng: &mut ChaCha8Rng) -> Result<LocationSet> {
    let shape2 = Gamma::new(2.0, 1.0).expect("valid gamma");
    let shape5 = Gamma::new(5.0, 1.0).expect("valid gamma");
    let mut coords = DMatrix::zeros(sampler.count, 2);
    for i in 0..sampler.count {
        let x = match sampler.variant {
            CoordinateVariant::Uniform => rng.random::<f64>(),
            CoordinateVariant::Skew => beta_draw(rng, &shape2, &shape5),
        };
        let y = rng.random::<f64>();
        coords[(i, 0)] = x * sampler.scale;
        coords[(i, 1)] = y * sampler.scale;
    }
    LocationSet::new(coords)
}

/// Regular `side × side` grid `{(x + offset, y + offset)}`, x-major.
pub fn make_grid(side: usize, offset: f64) -> Result<LocationSet> {
    if side == 0 {
        return Err(Error::InvalidInput("grid side must be >= 1".into()));
    }
    let coords = DMatrix::from_fn(side * side, 2, |k, j| {
        let (x, y) = (k / side, k % side);
        (if j == 0 { x } else { y }) as f64 + offset
    });
    LocationSet::new(coords)
}

/// Lower Cholesky factor of `cov`, adding relative diagonal jitter
/// `1e-10, 1e-9, 1e-8` (times the mean diagonal) if the plain factorization fails.
pub fn cholesky_with_jitter(cov: &Mat<f64>) -> Result<Llt<f64>> {
    linalg::sequential();
    if let Ok(llt) = cov.llt(Side::Lower) {
        return Ok(llt);
    }
    let n = cov.nrows();
    let scale = (0..n).map(|i| cov[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let mut jitter = JITTER_START;
    for _ in 0..JITTER_ESCALATIONS {
        let mut bumped = cov.clone();
        for i in 0..n {
            bumped[(i, i)] += jitter * scale;
        }
        if let Ok(llt) = bumped.llt(Side::Lower) {
            log::debug!("cholesky succeeded with relative jitter {jitter:e}");
            return Ok(llt);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPsd { jitter: jitter / 10.0 })
}

fn standard_normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    // Column-major fill order keeps each column an independent sequential draw.
    let mut z = Mat::<f64>::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            z[(i, j)] = StandardNormal.sample(rng);
        }
    }
    z
}

/// `cols` independent draws `L z` from the factored covariance.
fn correlated_draws(factor: &Llt<f64>, rng: &mut ChaCha8Rng, cols: usize) -> Mat<f64> {
    let l = factor.L();
    let z = standard_normals(rng, l.nrows(), cols);
    l * &z
}

/// Zero-mean Gaussian draw with covariance `model` on `locs`. Stacked
/// values are site-major, so draw `i·p + a` becomes variable `a` at site `i`.
pub fn simulate_gaussian(model: &dyn CrossCovariance, locs: &Arc<LocationSet>, seed: u64) -> Result<MultiField> {
    let p = model.n_vars();
    let cov = build_joint_covariance(model, locs, DEFAULT_DENSE_CAP)?;
    let factor = cholesky_with_jitter(&cov)?;
    let mut rng = stream_rng(seed, streams::FIELD);
    let draw = correlated_draws(&factor, &mut rng, 1);
    let values = DMatrix::from_fn(locs.len(), p, |i, a| draw[(i * p + a, 0)]);
    MultiField::new(locs.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Marginal {
    Gaussian,
    /// Unit-variance Student-t with `dof > 2` degrees of freedom.
    StudentT { dof: u32 },
}

/// Latent-variable model `X(s) = Ω Z(s) + μ` with independent latent fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SbssSpec {
    pub latent_models: Vec<CovarianceModel>,
    pub mixing: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub marginal: Marginal,
}

impl SbssSpec {
    pub fn new(
        latent_models: Vec<CovarianceModel>,
        mixing: DMatrix<f64>,
        mean: DVector<f64>,
        marginal: Marginal,
    ) -> Result<Self> {
        let p = latent_models.len();
        if p == 0 || mixing.nrows() != p || mixing.ncols() != p || mean.len() != p {
            return Err(Error::InvalidModel("SBSS spec dimensions disagree".into()));
        }
        for m in &latent_models {
            m.validate()?;
            if (m.sill() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidModel(format!("latent model {m:?} does not have unit sill")));
            }
        }
        let sv = mixing.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 0.0) || !(smax / smin < 1e12) {
            return Err(Error::InvalidModel("mixing matrix is singular".into()));
        }
        if let Marginal::StudentT { dof } = marginal {
            if dof <= 2 {
                return Err(Error::InvalidModel(format!("t marginal needs dof > 2, got {dof}")));
            }
        }
        Ok(Self {
            latent_models,
            mixing,
            mean,
            marginal,
        })
    }

    pub fn p(&self) -> usize {
        self.latent_models.len()
    }
}

/// Square-root factor of a univariate covariance on a site set.
enum SiteFactor {
    Dense(Llt<f64>),
    /// Pure nugget: `sqrt(variance) · I`.
    White(f64),
}

impl SiteFactor {
    fn new(model: &CovarianceModel, locs: &LocationSet) -> Result<Self> {
        if model.nugget_variance() == model.sill() {
            return Ok(Self::White(model.sill().sqrt()));
        }
        let cov = build_joint_covariance(model, locs, DEFAULT_DENSE_CAP)?;
        Ok(Self::Dense(cholesky_with_jitter(&cov)?))
    }

    fn draws(&self, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
        match self {
            Self::Dense(factor) => correlated_draws(factor, rng, cols),
            Self::White(sd) => {
                let mut z = standard_normals(rng, rows, cols);
                z *= faer::Scale(*sd);
                z
            }
        }
    }
}

/// Latent fields `Z` (n × p) of an SBSS model, before mixing. A Student-t
/// component is `X₁ / sqrt(Σ_{i=2}^{k+1} X_i² / k)` rescaled by
/// `sqrt((k-2)/k)` to unit variance, all `X_i` sharing the component's
/// covariance.
pub fn simulate_latent(spec: &SbssSpec, locs: &LocationSet, seed: u64) -> Result<DMatrix<f64>> {
    let n = locs.len();
    let mut latent = DMatrix::zeros(n, spec.p());
    for (c, model) in spec.latent_models.iter().enumerate() {
        let factor = SiteFactor::new(model, locs)?;
        let mut rng = stream_rng(seed, streams::FIELD + c as u64);
        match spec.marginal {
            Marginal::Gaussian => {
                let draw = factor.draws(&mut rng, n, 1);
                for i in 0..n {
                    latent[(i, c)] = draw[(i, 0)];
                }
            }
            Marginal::StudentT { dof } => {
                let k = dof as usize;
                let draws = factor.draws(&mut rng, n, k + 1);
                let kf = k as f64;
                let unit = ((kf - 2.0) / kf).sqrt();
                for i in 0..n {
                    let chi2: f64 = (1..=k).map(|j| draws[(i, j)] * draws[(i, j)]).sum();
                    latent[(i, c)] = draws[(i, 0)] / (chi2 / kf).sqrt() * unit;
                }
            }
        }
    }
    Ok(latent)
}

/// Draw of `X = Ω Z + μ` on `locs`.
pub fn simulate_sbss_setting(spec: &SbssSpec, locs: &Arc<LocationSet>, seed: u64) -> Result<MultiField> {
    let latent = simulate_latent(spec, locs, seed)?;
    let mut values = latent * spec.mixing.transpose();
    for mut row in values.row_iter_mut() {
        row += spec.mean.transpose();
    }
    MultiField::new(locs.clone(), values)
}

/// Any model the simulator can draw from.
#[derive(Debug, Clone)]
pub enum FieldModel {
    Sbss(SbssSpec),
    Univariate(CovarianceModel),
    Lmc(LmcModel),
    Pmat(PmatModel),
}

impl FieldModel {
    pub fn p(&self) -> usize {
        match self {
            Self::Sbss(s) => s.p(),
            Self::Univariate(_) => 1,
            Self::Lmc(m) => m.n_vars(),
            Self::Pmat(m) => m.n_vars(),
        }
    }

    pub fn simulate(&self, locs: &Arc<LocationSet>, seed: u64) -> Result<MultiField> {
        match self {
            Self::Sbss(s) => simulate_sbss_setting(s, locs, seed),
            Self::Univariate(m) => simulate_gaussian(m, locs, seed),
            Self::Lmc(m) => simulate_gaussian(m, locs, seed),
            Self::Pmat(m) => simulate_gaussian(m, locs, seed),
        }
    }
}

/// One realization observed on training sites and on prediction sites.
#[derive(Debug, Clone)]
pub struct SimulatedField {
    pub train: MultiField,
    pub test: MultiField,
    pub seed: u64,
}

/// Simulates once on the union `train ∪ test` (a single factorization) and
/// splits the result, so both parts come from the same realization.
pub fn simulate_train_test(
    model: &FieldModel,
    train: &Arc<LocationSet>,
    test: &Arc<LocationSet>,
    seed: u64,
) -> Result<SimulatedField> {
    let union = Arc::new(train.concat(test)?);
    let joint = model.simulate(&union, seed)?;
    let (n, m) = (train.len(), test.len());
    let values = joint.values();
    let train_values = values.rows(0, n).into_owned();
    let test_values = values.rows(n, m).into_owned();
    Ok(SimulatedField {
        train: MultiField::new(train.clone(), train_values)?,
        test: MultiField::new(test.clone(), test_values)?,
        seed,
    })
}
